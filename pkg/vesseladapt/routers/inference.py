"""
Inference Router
Single-volume segmentation with a trained checkpoint
"""
import logging
from functools import lru_cache

from fastapi import APIRouter, status

from vesseladapt.nets import ModelBundle, build_models, load_checkpoint, restore_models
from vesseladapt.schemas import (
    BRAIN,
    VESSEL,
    AblationFlags,
    ErrorResponse,
    PredictRequest,
    PredictResponse,
    TrainConfig,
)
from vesseladapt.services.infer_eval import predict
from vesseladapt.services.preprocess import invert_intensity
from vesseladapt.services.volume_io import load_volume, save_mask

logger = logging.getLogger(__name__)

router = APIRouter(tags=["Inference"], responses={404: {"model": ErrorResponse}, 422: {"model": ErrorResponse}})


@lru_cache(maxsize=4)
def load_bundle(checkpoint_path: str) -> ModelBundle:
    """Models of a checkpoint, restored once per path and kept in eval mode"""
    payload = load_checkpoint(checkpoint_path)
    cfg = TrainConfig.model_validate(payload["config"])
    bundle = build_models(cfg.net, AblationFlags(**payload["flags"]), cfg.seed)
    restore_models(bundle, payload)
    bundle.eval()
    bundle.requires_grad_(False)
    logger.info(f"Loaded checkpoint {checkpoint_path}")
    return bundle


@router.post("/predict", response_model=PredictResponse, status_code=status.HTTP_200_OK)
def predict_volume(request: PredictRequest):
    """
    Segment one preprocessed volume and store the mask
    Endpoint: POST /predict
    """
    bundle = load_bundle(str(request.checkpoint_path))
    volume = load_volume(request.volume_path)
    if request.invert:
        volume = invert_intensity(volume)
    mask, _ = predict(bundle, volume, request.domain, bundle.net.channels)
    save_mask(mask, request.output_path)
    counts = mask.histogram()
    return PredictResponse(
        output_path=str(request.output_path),
        grid_size=mask.header.grid_size,
        brain_voxels=counts.get(BRAIN, 0),
        vessel_voxels=counts.get(VESSEL, 0),
    )
