"""
Networks
Generator, label-synthesis branch, domain-flagged encoder and discriminator
"""
from vesseladapt.nets.bundle import (
    ModelBundle,
    build_models,
    load_checkpoint,
    parameter_checksum,
    restore_models,
    save_checkpoint,
)
from vesseladapt.nets.discriminator import Discriminator
from vesseladapt.nets.encoder import Encoder
from vesseladapt.nets.generator import FeatureStack, Generator, LabelSynthesisBranch

__all__ = [
    "Discriminator",
    "Encoder",
    "FeatureStack",
    "Generator",
    "LabelSynthesisBranch",
    "ModelBundle",
    "build_models",
    "load_checkpoint",
    "parameter_checksum",
    "restore_models",
    "save_checkpoint",
]
