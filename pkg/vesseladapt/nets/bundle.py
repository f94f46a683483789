"""
Model Bundle and Checkpoints
G, G_lsb, E and D behind the operations the training loop and inference use
"""
import hashlib
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple, Union

import numpy as np
import torch
from torch import nn

from vesseladapt.exceptions import CorruptCheckpoint
from vesseladapt.nets.discriminator import Discriminator
from vesseladapt.nets.encoder import Encoder
from vesseladapt.nets.generator import FeatureStack, Generator, LabelSynthesisBranch
from vesseladapt.schemas import AblationFlags, NetConfig

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
COMPONENTS = ("G", "G_lsb", "E", "D")
_REQUIRED_KEYS = {"format", "models", "config", "config_hash", "phase", "iteration"}


class ModelBundle(nn.Module):
    """
    The four learnable components.

    `generate` reads E's fusion gates whenever residuals are passed, so skip fusion
    trains with the encoder while G stays frozen in the adaptation phase.
    """

    def __init__(self, net: NetConfig, flags: AblationFlags):
        super().__init__()
        self.net = net
        self.flags = flags
        self.G = Generator(net)
        self.G_lsb = LabelSynthesisBranch(net, self.G.channels)
        self.E = Encoder(net, flags, self.G.channels)
        self.D = Discriminator(net)

    @property
    def n_latent(self) -> int:
        return self.G.n_latent

    # ===== Operations =====

    def map_latent(self, z: torch.Tensor) -> torch.Tensor:
        return self.G.map_latent(z)

    def generate(
        self,
        w: torch.Tensor,
        residuals: Optional[FeatureStack] = None,
        randomize_noise: bool = False,
    ) -> Tuple[torch.Tensor, FeatureStack]:
        fusion = self.E.fusion if residuals is not None else None
        return self.G(w, residuals=residuals, fusion=fusion, randomize_noise=randomize_noise)

    def label_branch(self, features: FeatureStack) -> torch.Tensor:
        return self.G_lsb(features)

    def encode(self, x: torch.Tensor, d: Union[int, torch.Tensor]) -> Tuple[torch.Tensor, Optional[FeatureStack]]:
        w, residuals = self.E(x, d)
        return w, (residuals if self.flags.residuals else None)

    def discriminate(self, x: torch.Tensor) -> torch.Tensor:
        return self.D(x)

    def translate(self, x: torch.Tensor, d_target: Union[int, torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor]:
        """generate(encode(x, d_target)) and its label logits; d_target = own domain reconstructs"""
        w, residuals = self.encode(x, d_target)
        image, features = self.generate(w, residuals)
        return image, self.label_branch(features)

    # ===== Phase control =====

    def freeze_generator(self) -> None:
        self.G.requires_grad_(False)
        self.D.requires_grad_(False)

    def unfreeze_generator(self) -> None:
        self.G.requires_grad_(True)
        self.D.requires_grad_(True)

    @torch.no_grad()
    def init_average_latent(self, n_samples: int = 4096, seed: int = 0) -> None:
        generator = torch.Generator(device=self.E.w_avg.device).manual_seed(seed)
        self.E.set_average_latent(self.G.mean_latent(n_samples, generator=generator))


def build_models(net: NetConfig, flags: AblationFlags, seed: int) -> ModelBundle:
    torch.manual_seed(seed)
    bundle = ModelBundle(net, flags)
    logger.info(
        "Built models: "
        + ", ".join(f"{name}={sum(p.numel() for p in getattr(bundle, name).parameters())}" for name in COMPONENTS)
    )
    return bundle


def parameter_checksum(module: nn.Module, exclude: Iterable[str] = (), include_buffers: bool = False) -> str:
    """sha256 over parameter names and bytes, skipping names under any prefix in `exclude`"""
    exclude = tuple(exclude)
    items = dict(module.named_parameters())
    if include_buffers:
        items.update(dict(module.named_buffers()))
    digest = hashlib.sha256()
    for name in sorted(items):
        if exclude and name.startswith(exclude):
            continue
        digest.update(name.encode())
        digest.update(items[name].detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


# ==================== Checkpoints ====================

def save_checkpoint(path: Union[str, Path], bundle: ModelBundle, state: Dict[str, Any]) -> Path:
    """
    Write one archive with every component's weights plus `state`
    (config, config_hash, phase, iteration, rng, optimizers, pl_state, ...).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "models": {name: getattr(bundle, name).state_dict() for name in COMPONENTS},
        "flags": bundle.flags.model_dump(),
        **state,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise CorruptCheckpoint(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CorruptCheckpoint(f"{path}: unreadable checkpoint ({e})") from e
    if not isinstance(payload, dict) or not _REQUIRED_KEYS <= set(payload):
        raise CorruptCheckpoint(f"{path}: missing checkpoint fields")
    if payload["format"] != CHECKPOINT_FORMAT or set(payload["models"]) != set(COMPONENTS):
        raise CorruptCheckpoint(f"{path}: unsupported checkpoint layout")
    return payload


def restore_models(bundle: ModelBundle, payload: Dict[str, Any]) -> ModelBundle:
    try:
        for name in COMPONENTS:
            getattr(bundle, name).load_state_dict(payload["models"][name])
    except (RuntimeError, KeyError) as e:
        raise CorruptCheckpoint(f"checkpoint weights do not fit the configured networks ({e})") from e
    return bundle


def rng_state(rng: np.random.Generator) -> Dict[str, Any]:
    return {"torch": torch.get_rng_state(), "numpy": rng.bit_generator.state}


def restore_rng(state: Dict[str, Any], rng: np.random.Generator) -> None:
    torch.set_rng_state(state["torch"])
    rng.bit_generator.state = state["numpy"]
