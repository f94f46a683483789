"""
Per-Domain Preprocessing
Spacing selection, cubic resampling, robust normalization, one-hot encoding, 2.5D slicing
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from vesseladapt.exceptions import (
    ChannelCountTooLarge,
    ConstantVolume,
    DegenerateOutput,
    EmptyDataset,
    IllegalLabel,
    InvalidChannelCount,
    MixedDomains,
)
from vesseladapt.schemas import NUM_CLASSES, DomainTag
from vesseladapt.services.volume_io import (
    IMAGE_NAME,
    MASK_NAME,
    SegMask,
    Volume,
    check_labels,
    load_mask,
    load_volume,
    save_mask,
    save_volume,
    subject_dir,
)

logger = logging.getLogger(__name__)

PERCENTILES = (0.1, 99.9)
DEFAULT_CHANNELS = 3


@dataclass
class SliceSample:
    """One 2.5D example: C-channel image (C, X, Y) and an optional one-hot mask (3, X, Y)"""
    image: np.ndarray
    domain_tag: DomainTag
    subject_id: str
    slice_index: int
    mask: Optional[np.ndarray] = None

    @property
    def labeled(self) -> bool:
        return self.mask is not None

    @property
    def channels(self) -> int:
        return int(self.image.shape[0])


@dataclass(frozen=True)
class NormalizationStats:
    mean: float
    std: float
    low_cut: float
    high_cut: float
    clipped_min: float
    clipped_max: float


# ==================== Spacing / resampling ====================

def dataset_spacing(volumes: Sequence[Volume], max_grid: Tuple[int, int, int]) -> Tuple[float, float, float]:
    """
    Per-axis median spacing of one domain, raised where needed so that every resampled
    volume fits inside `max_grid`.
    """
    if not volumes:
        raise EmptyDataset("no volumes to derive a spacing from")
    domains = {v.header.domain_tag for v in volumes}
    if len(domains) > 1:
        raise MixedDomains(f"spacing must be computed per domain, got {sorted(d.value for d in domains)}")

    spacings = np.array([v.header.spacing_mm for v in volumes], dtype=np.float64)
    extents = np.array([v.header.grid_size for v in volumes], dtype=np.float64) * spacings
    median = np.median(spacings, axis=0)

    result = []
    for axis in range(3):
        target = median[axis]
        # smallest spacing at which the largest physical extent rounds into max_grid
        needed = extents[:, axis].max() / max_grid[axis]
        if target < needed:
            target = needed
            while np.round(extents[:, axis].max() / target) > max_grid[axis]:
                target *= 1 + 1e-9
        result.append(float(target))
    logger.debug(f"Dataset spacing {tuple(result)} (median {tuple(median)})")
    return tuple(result)


def _target_grid(volume_grid, old_spacing, new_spacing) -> Tuple[int, int, int]:
    grid = tuple(
        int(np.round(size * old / new))
        for size, old, new in zip(volume_grid, old_spacing, new_spacing)
    )
    if min(grid) < 1:
        raise DegenerateOutput(f"resampling {volume_grid} to spacing {new_spacing} gives grid {grid}")
    return grid


def _zoom(data: np.ndarray, grid, order: int) -> np.ndarray:
    """Voxels are cells: output voxel j samples the input at (j + 0.5) · n_in / n_out − 0.5"""
    factors = [new / old for new, old in zip(grid, data.shape)]
    if all(f == 1.0 for f in factors):
        return data.copy()
    return ndimage.zoom(data, factors, order=order, mode="nearest", grid_mode=True)


def resample(v: Volume, spacing_mm: Tuple[float, float, float]) -> Volume:
    """Cubic spline resampling to `spacing_mm`; grid = round(old size · old spacing / new spacing)"""
    if min(spacing_mm) <= 0:
        raise DegenerateOutput(f"non-positive target spacing {spacing_mm}")
    grid = _target_grid(v.header.grid_size, v.header.spacing_mm, spacing_mm)
    data = _zoom(v.data.astype(np.float64), grid, order=3).astype(np.float32)
    return v.with_data(data, spacing_mm=tuple(float(s) for s in spacing_mm))


def resample_mask(m: SegMask, spacing_mm: Tuple[float, float, float]) -> SegMask:
    """Nearest-neighbour counterpart of resample, label set preserved"""
    if min(spacing_mm) <= 0:
        raise DegenerateOutput(f"non-positive target spacing {spacing_mm}")
    grid = _target_grid(m.header.grid_size, m.header.spacing_mm, spacing_mm)
    labels = _zoom(m.labels, grid, order=0).astype(np.uint8)
    return m.with_labels(labels, spacing_mm=tuple(float(s) for s in spacing_mm))


# ==================== Intensities ====================

def normalize_with_stats(v: Volume) -> Tuple[Volume, NormalizationStats]:
    """
    z-score, clip to the 0.1/99.9 percentiles of the rescaled values, map [min, max] to [-1, 1].

    Percentiles use linear interpolation between order statistics over the whole grid.
    """
    data = v.data.astype(np.float64)
    mean = float(data.mean())
    std = float(data.std())
    if std == 0 or not np.isfinite(std):
        raise ConstantVolume(f"{v.header.subject_id}: volume has a single intensity value")

    z = (data - mean) / std
    low, high = np.percentile(z, PERCENTILES, method="linear")
    clipped = np.clip(z, low, high)
    lo, hi = float(clipped.min()), float(clipped.max())
    if hi <= lo:
        raise ConstantVolume(f"{v.header.subject_id}: clipped intensity range is empty")

    out = 2.0 * (clipped - lo) / (hi - lo) - 1.0
    # pin the endpoints against rounding in the affine map
    out[clipped == lo] = -1.0
    out[clipped == hi] = 1.0
    stats = NormalizationStats(mean, std, float(low), float(high), lo, hi)
    return v.with_data(out.astype(np.float32)), stats


def normalize(v: Volume) -> Volume:
    return normalize_with_stats(v)[0]


def invert_intensity(v: Volume) -> Volume:
    return v.with_data((-v.data).astype(np.float32))


# ==================== Labels ====================

def one_hot(labels) -> np.ndarray:
    """Channel-first one-hot encoding of a label grid (any dimensionality)"""
    if isinstance(labels, SegMask):
        labels = labels.labels
    labels = np.asarray(labels)
    check_labels(labels)
    encoded = np.zeros((NUM_CLASSES,) + labels.shape, dtype=np.float32)
    for k in range(NUM_CLASSES):
        encoded[k] = labels == k
    return encoded


def labels_from_one_hot(onehot: np.ndarray) -> np.ndarray:
    """argmax over the channel axis; ties resolve to the lowest class index"""
    onehot = np.asarray(onehot)
    if onehot.shape[0] != NUM_CLASSES:
        raise IllegalLabel(f"expected {NUM_CLASSES} channels, got {onehot.shape[0]}")
    return np.argmax(onehot, axis=0).astype(np.uint8)


# ==================== 2.5D slicing ====================

def midpoint_slice(depth: int) -> int:
    return depth // 2


def _check_channels(channels: int, depth: int) -> None:
    if channels <= 0 or channels % 2 == 0:
        raise InvalidChannelCount(f"channel count must be a positive odd number, got {channels}")
    if channels > depth:
        raise ChannelCountTooLarge(f"{channels} channels requested from a volume of depth {depth}")


def slice_stack(data: np.ndarray, k: int, channels: int) -> np.ndarray:
    """Axial slices k-r..k+r with indices clamped to the volume (edge replication)"""
    half = channels // 2
    indices = np.clip(np.arange(k - half, k + half + 1), 0, data.shape[2] - 1)
    return np.moveaxis(data[:, :, indices], 2, 0).astype(np.float32)


def extract_slices(
    v: Volume,
    m: Optional[SegMask] = None,
    channels: int = DEFAULT_CHANNELS,
    labeled_slices: Optional[Sequence[int]] = None,
    indices: Optional[Sequence[int]] = None,
) -> List[SliceSample]:
    """
    One SliceSample per axial index (or per index in `indices`).

    The mask attaches at `labeled_slices`, or at every slice when the mask is given
    without a selection.
    """
    _check_channels(channels, v.depth)
    if m is not None and tuple(m.header.grid_size) != tuple(v.header.grid_size):
        raise DegenerateOutput(f"mask grid {m.header.grid_size} differs from volume grid {v.header.grid_size}")
    if m is None:
        annotated = set()
    elif labeled_slices is None:
        annotated = set(range(v.depth))
    else:
        annotated = set(labeled_slices)

    samples = []
    for k in (range(v.depth) if indices is None else indices):
        mask = one_hot(m.labels[:, :, k]) if k in annotated else None
        samples.append(SliceSample(
            image=slice_stack(v.data, k, channels),
            domain_tag=v.header.domain_tag,
            subject_id=v.header.subject_id,
            slice_index=int(k),
            mask=mask,
        ))
    return samples


# ==================== Whole-domain pipeline ====================

def preprocess_domain(
    domain_dir: Path,
    out_dir: Path,
    max_grid: Tuple[int, int, int],
    channels: int = DEFAULT_CHANNELS,
    invert: bool = False,
) -> Dict:
    """
    Run spacing selection, resampling, normalization (and optional inversion) over one
    domain directory, writing the stored layout plus `provenance.json`.
    """
    domain_dir, out_dir = Path(domain_dir), Path(out_dir)
    subjects = sorted(p for p in domain_dir.iterdir() if p.is_dir()) if domain_dir.exists() else []
    volumes = []
    for subject in subjects:
        image = next((p for p in (subject / IMAGE_NAME, subject / "image.nii.gz", subject / "image.nii") if p.exists()), None)
        if image is not None:
            volumes.append((subject, load_volume(image)))
    spacing = dataset_spacing([v for _, v in volumes], max_grid)

    provenance = {"spacing_mm": list(spacing), "max_grid": list(max_grid), "channels": channels,
                  "inverted": invert, "percentiles": list(PERCENTILES), "subjects": {}}
    for subject, volume in volumes:
        _check_channels(channels, volume.depth)
        resampled, stats = normalize_with_stats(resample(volume, spacing))
        if invert:
            resampled = invert_intensity(resampled)
        target = subject_dir(out_dir, volume.header.domain_tag, volume.header.subject_id)
        save_volume(resampled, target / IMAGE_NAME)

        mask_file = next((p for p in (subject / MASK_NAME, subject / "mask.nii.gz", subject / "mask.nii") if p.exists()), None)
        if mask_file is not None:
            save_mask(resample_mask(load_mask(mask_file), spacing), target / MASK_NAME)

        provenance["subjects"][volume.header.subject_id] = {
            "grid_size": list(resampled.header.grid_size),
            "mean": stats.mean,
            "std": stats.std,
            "low_cut": stats.low_cut,
            "high_cut": stats.high_cut,
        }
        logger.info(f"Preprocessed {volume.header.subject_id} -> {resampled.header.grid_size}")

    domain = volumes[0][1].header.domain_tag.value
    provenance_path = out_dir / domain / "provenance.json"
    provenance_path.parent.mkdir(parents=True, exist_ok=True)
    provenance_path.write_text(json.dumps(provenance, indent=2) + "\n", encoding="utf-8")
    return provenance
