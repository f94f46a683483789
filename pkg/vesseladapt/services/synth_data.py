"""
Vascular Phantoms
Two-domain synthetic volumes with exact ground truth: ellipsoidal brain, spline tubes, Gaussian noise
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import numpy as np
from scipy.interpolate import CubicSpline

from vesseladapt.exceptions import SpecInfeasible
from vesseladapt.schemas import (
    BACKGROUND,
    BRAIN,
    VESSEL,
    DomainSpec,
    DomainTag,
    LabeledSlice,
    Polarity,
    Scenario,
    SplitSpec,
    VolumeHeader,
)
from vesseladapt.services.preprocess import midpoint_slice, normalize
from vesseladapt.services.volume_io import (
    IMAGE_NAME,
    MASK_NAME,
    SegMask,
    Volume,
    save_mask,
    save_split_spec,
    save_volume,
    subject_dir,
)

logger = logging.getLogger(__name__)

DEFAULT_GRID = (64, 64, 32)
SPLIT_FILE = "split.json"
# voxels kept between a tube centre line and the brain surface on top of the radius
TUBE_MARGIN = 2.0
SAMPLE_STEP = 0.5


@dataclass
class Phantom:
    volume: Volume
    mask: SegMask
    spec: DomainSpec
    seed: int
    n_tubes: int
    # max over centre-line samples of (radius - distance); >= 0 inside a tube
    tube_field: np.ndarray


# ==================== Geometry ====================

def _brain_geometry(spec: DomainSpec):
    grid = np.asarray(spec.grid, dtype=np.float64)
    center = (grid - 1) / 2.0
    semi_axes = np.asarray(spec.brain_axes_frac) * grid / 2.0
    return center, semi_axes


def _project_inside(points: np.ndarray, center: np.ndarray, semi_axes: np.ndarray) -> np.ndarray:
    """Radially pull points lying outside the ellipsoid onto its surface"""
    offset = points - center
    rho = np.sqrt(((offset / semi_axes) ** 2).sum(axis=-1, keepdims=True))
    return center + offset / np.maximum(rho, 1.0)


def _tube_centerline(rng: np.random.Generator, spec: DomainSpec, center, inner_axes) -> np.ndarray:
    """Dense samples (<= SAMPLE_STEP apart) of a cubic spline through 3-6 control points"""
    n_ctrl = int(rng.integers(3, 7))
    start, end = (_project_inside(center + rng.uniform(-1, 1, 3) * inner_axes, center, inner_axes) for _ in range(2))
    t = np.linspace(0.0, 1.0, n_ctrl)
    ctrl = start[None, :] + t[:, None] * (end - start)[None, :]
    ctrl[1:-1] += rng.normal(0.0, 1.0, (n_ctrl - 2, 3)) * spec.tortuosity * inner_axes.min() / 2.0
    ctrl = _project_inside(ctrl, center, inner_axes)

    spline = CubicSpline(t, ctrl, axis=0, bc_type="natural")
    coarse = spline(np.linspace(0.0, 1.0, 256))
    length = float(np.linalg.norm(np.diff(coarse, axis=0), axis=1).sum())
    n_samples = max(2, int(np.ceil(2.0 * length / SAMPLE_STEP)) + 1)
    return _project_inside(spline(np.linspace(0.0, 1.0, n_samples)), center, inner_axes)


def _sweep(field: np.ndarray, samples: np.ndarray, radii: np.ndarray) -> None:
    """field = max(field, r_i - |x - p_i|) over the local box of every sample"""
    upper = np.asarray(field.shape) - 1
    for point, radius in zip(samples, radii):
        lo = np.clip(np.floor(point - radius - 1).astype(int), 0, upper)
        hi = np.clip(np.ceil(point + radius + 1).astype(int), 0, upper)
        xs, ys, zs = np.ogrid[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
        dist = np.sqrt((xs - point[0]) ** 2 + (ys - point[1]) ** 2 + (zs - point[2]) ** 2)
        box = field[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
        np.maximum(box, radius - dist, out=box)


def make_phantom(
    spec: DomainSpec,
    seed: int,
    domain: DomainTag = DomainTag.SOURCE,
    subject_id: Optional[str] = None,
) -> Phantom:
    """
    Deterministic phantom for (spec, seed).

    Intensities before noise: background 0, tissue `tissue_level`, vessels
    `tissue_level ± contrast/2` depending on polarity. The result is normalized to [-1, 1].
    """
    center, semi_axes = _brain_geometry(spec)
    r_max = spec.radius_range_vox[1]
    if r_max + TUBE_MARGIN >= semi_axes.min():
        raise SpecInfeasible(
            f"tube radius {r_max} does not fit a brain with semi-axes {tuple(np.round(semi_axes, 2))}"
        )
    inner_axes = semi_axes - r_max - TUBE_MARGIN
    rng = np.random.default_rng(seed)

    idx = np.indices(spec.grid, dtype=np.float64)
    brain = (((idx - center[:, None, None, None]) / semi_axes[:, None, None, None]) ** 2).sum(axis=0) <= 1.0

    n_tubes = int(rng.integers(spec.tube_count_range[0], spec.tube_count_range[1] + 1))
    field = np.full(spec.grid, -np.inf)
    for _ in range(n_tubes):
        samples = _tube_centerline(rng, spec, center, inner_axes)
        r0, r1 = rng.uniform(*spec.radius_range_vox, size=2)
        _sweep(field, samples, np.linspace(r0, r1, len(samples)))

    vessel = (field >= 0) & brain
    labels = np.full(spec.grid, BACKGROUND, dtype=np.uint8)
    labels[brain] = BRAIN
    labels[vessel] = VESSEL

    sign = 1.0 if spec.polarity is Polarity.BRIGHT else -1.0
    clean = np.zeros(spec.grid, dtype=np.float64)
    clean[brain] = spec.tissue_level
    clean[vessel] = spec.tissue_level + sign * spec.contrast / 2.0
    noisy = clean + rng.normal(0.0, spec.noise_sigma, spec.grid)

    header = VolumeHeader(
        grid_size=spec.grid,
        spacing_mm=spec.spacing_mm,
        domain_tag=domain,
        subject_id=subject_id or f"phantom_{seed}",
    )
    volume = normalize(Volume(header=header, data=noisy.astype(np.float32)))
    mask = SegMask(header=header.with_updates(dtype="uint8"), labels=labels)
    return Phantom(volume=volume, mask=mask, spec=spec, seed=int(seed), n_tubes=n_tubes, tube_field=field)


# ==================== Scenarios ====================

def scenario_specs(name: Scenario, grid: Tuple[int, int, int] = DEFAULT_GRID) -> Tuple[DomainSpec, DomainSpec]:
    """(source spec, target spec) of an adaptation scenario"""
    name = Scenario(name)
    if name is Scenario.NARROW_GAP:
        # same modality family, different scanners
        source = DomainSpec(polarity=Polarity.BRIGHT, tube_count_range=(4, 6), radius_range_vox=(1.5, 2.5),
                            tortuosity=0.5, noise_sigma=0.04, contrast=0.8, spacing_mm=(1.0, 1.0, 1.0), grid=grid)
        target = DomainSpec(polarity=Polarity.BRIGHT, tube_count_range=(4, 6), radius_range_vox=(1.5, 2.5),
                            tortuosity=0.5, noise_sigma=0.10, contrast=0.5, spacing_mm=(0.8, 0.8, 1.2), grid=grid)
    elif name is Scenario.MEDIUM_GAP:
        # angiography vs. CT-like: same polarity, other envelope, texture and contrast
        source = DomainSpec(polarity=Polarity.BRIGHT, tube_count_range=(3, 5), radius_range_vox=(1.5, 2.5),
                            tortuosity=0.5, noise_sigma=0.04, contrast=0.8, spacing_mm=(1.0, 1.0, 1.0), grid=grid)
        target = DomainSpec(polarity=Polarity.BRIGHT, tube_count_range=(3, 5), radius_range_vox=(1.5, 2.5),
                            tortuosity=1.0, noise_sigma=0.12, contrast=0.45, spacing_mm=(0.7, 0.7, 1.5),
                            grid=grid, brain_axes_frac=(0.75, 0.85, 0.8), tissue_level=0.35)
    else:
        # bright, sparse, thick arteries vs. dark, dense, thin veins
        source = DomainSpec(polarity=Polarity.BRIGHT, tube_count_range=(3, 4), radius_range_vox=(2.0, 2.8),
                            tortuosity=0.4, noise_sigma=0.04, contrast=0.9, spacing_mm=(1.0, 1.0, 1.0), grid=grid)
        target = DomainSpec(polarity=Polarity.DARK, tube_count_range=(10, 14), radius_range_vox=(1.2, 2.0),
                            tortuosity=0.8, noise_sigma=0.08, contrast=0.7, spacing_mm=(1.0, 1.0, 1.5), grid=grid)
    return source, target


def _child_seeds(seed: int, count: int) -> List[int]:
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(seed).spawn(count)]


def make_scenario(
    name: Scenario,
    n_source: int,
    n_target: int,
    seed: int,
    grid: Tuple[int, int, int] = DEFAULT_GRID,
) -> Tuple[List[Phantom], List[Phantom]]:
    """n_source source and n_target target phantoms, each on its own spawned seed stream"""
    if n_source < 1 or n_target < 1:
        raise SpecInfeasible("scenario needs at least one phantom per domain")
    source_spec, target_spec = scenario_specs(name, grid)
    seeds = _child_seeds(seed, n_source + n_target)
    source = [
        make_phantom(source_spec, s, DomainTag.SOURCE, f"src{i:03d}")
        for i, s in enumerate(seeds[:n_source])
    ]
    target = [
        make_phantom(target_spec, s, DomainTag.TARGET, f"tgt{i:03d}")
        for i, s in enumerate(seeds[n_source:])
    ]
    logger.info(f"Generated {name.value if isinstance(name, Scenario) else name}: "
                f"{n_source} source, {n_target} target phantoms (seed {seed})")
    return source, target


def write_scenario(
    root: Path,
    source: List[Phantom],
    target: List[Phantom],
    n_val: int = 4,
    n_test: int = 4,
    n_labeled: int = 3,
    labeled_mode: Literal["slice", "volume"] = "slice",
) -> SplitSpec:
    """
    Store phantoms in the volume layout and write `split.json`.

    Per domain the last n_val + n_test phantoms become validation and test subjects;
    the first `n_labeled` target training subjects form T_L through their midpoint
    slice (or whole volume).
    """
    root = Path(root)
    for phantom in source + target:
        directory = subject_dir(root, phantom.volume.header.domain_tag, phantom.volume.header.subject_id)
        save_volume(phantom.volume, directory / IMAGE_NAME)
        save_mask(phantom.mask, directory / MASK_NAME)

    def _partition(phantoms: List[Phantom]):
        ids = [p.volume.header.subject_id for p in phantoms]
        n_train = max(0, len(ids) - n_val - n_test)
        return {
            "train": ids[:n_train],
            "val": ids[n_train:n_train + n_val],
            "test": ids[n_train + n_val:],
        }

    target_split = _partition(target)
    depth = {p.volume.header.subject_id: p.volume.depth for p in target}
    labeled = [
        LabeledSlice(subject=s, slice=midpoint_slice(depth[s]) if labeled_mode == "slice" else None)
        for s in target_split["train"][:n_labeled]
    ]
    spec = SplitSpec(source=_partition(source), target=target_split, labeled=labeled)
    save_split_spec(spec, root / SPLIT_FILE)
    logger.info(f"Wrote {len(source)} source and {len(target)} target subjects to {root}")
    return spec
