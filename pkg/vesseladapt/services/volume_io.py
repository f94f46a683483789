"""
Volume Storage
Raw payload + JSON sidecar volumes and label masks, NIfTI input, dataset indexing
"""
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Union

import nibabel as nib
import numpy as np
from pydantic import ValidationError

from vesseladapt.exceptions import (
    CorruptHeader,
    IllegalLabel,
    MissingAnnotation,
    MissingFile,
    NonFiniteValues,
    OverlappingSplits,
    ShapeMismatch,
)
from vesseladapt.schemas import (
    DatasetIndex,
    DomainTag,
    IndexEntry,
    Split,
    SplitCounts,
    SplitSpec,
    VolumeHeader,
)

logger = logging.getLogger(__name__)

IMAGE_NAME = "image.vol"
MASK_NAME = "mask.vol"
NIFTI_SUFFIXES = (".nii", ".nii.gz")

_DTYPES = {"float32": np.dtype("<f4"), "uint8": np.dtype("u1")}
PathLike = Union[str, Path]


# ==================== Containers ====================

@dataclass
class Volume:
    """Scalar intensity grid, axes (x, y, z) with z the axial axis"""
    header: VolumeHeader
    data: np.ndarray

    def __post_init__(self):
        if tuple(self.data.shape) != tuple(self.header.grid_size):
            raise ShapeMismatch(
                f"{self.header.subject_id}: payload shape {self.data.shape} "
                f"differs from header grid {self.header.grid_size}"
            )

    @property
    def depth(self) -> int:
        return int(self.data.shape[2])

    def with_data(self, data: np.ndarray, **header_changes) -> "Volume":
        header = self.header.with_updates(grid_size=tuple(int(s) for s in data.shape), **header_changes)
        return Volume(header=header, data=data)


@dataclass
class SegMask:
    """Label grid with values in {0=background, 1=brain, 2=vessel}"""
    header: VolumeHeader
    labels: np.ndarray

    def __post_init__(self):
        if tuple(self.labels.shape) != tuple(self.header.grid_size):
            raise ShapeMismatch(
                f"{self.header.subject_id}: mask shape {self.labels.shape} "
                f"differs from header grid {self.header.grid_size}"
            )
        check_labels(self.labels)

    @property
    def depth(self) -> int:
        return int(self.labels.shape[2])

    def histogram(self) -> Dict[int, int]:
        counts = np.bincount(self.labels.ravel(), minlength=3)
        return {k: int(counts[k]) for k in range(3)}

    def with_labels(self, labels: np.ndarray, **header_changes) -> "SegMask":
        header = self.header.with_updates(grid_size=tuple(int(s) for s in labels.shape), **header_changes)
        return SegMask(header=header, labels=labels)


def check_labels(labels: np.ndarray) -> None:
    values = np.unique(labels)
    illegal = [int(v) for v in values if v not in (0, 1, 2)]
    if illegal:
        raise IllegalLabel(f"labels outside {{0, 1, 2}}: {illegal}")


# ==================== Raw + sidecar format ====================

def header_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


def is_nifti(path: PathLike) -> bool:
    return str(path).endswith(NIFTI_SUFFIXES)


def _read_header(path: Path) -> VolumeHeader:
    sidecar = header_path(path)
    if not sidecar.exists():
        raise MissingFile(f"header not found: {sidecar}")
    try:
        return VolumeHeader.model_validate(json.loads(sidecar.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, ValidationError) as e:
        raise CorruptHeader(f"{sidecar}: {e}") from e


def _write_header(header: VolumeHeader, path: Path) -> None:
    payload = header.model_dump(mode="json")
    header_path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_payload(path: Path, header: VolumeHeader) -> np.ndarray:
    if not path.exists():
        raise MissingFile(f"payload not found: {path}")
    dtype = _DTYPES[header.dtype]
    flat = np.fromfile(path, dtype=dtype)
    expected = int(np.prod(header.grid_size))
    if flat.size != expected:
        raise ShapeMismatch(
            f"{path}: {flat.size} values stored, header grid {header.grid_size} needs {expected}"
        )
    return flat.reshape(header.grid_size)


def _read_nifti(path: Path, dtype: str):
    if not path.exists():
        raise MissingFile(f"volume not found: {path}")
    try:
        image = nib.load(str(path))
        data = np.asarray(image.dataobj)
        spacing = tuple(float(s) for s in image.header.get_zooms()[:3])
    except Exception as e:
        raise CorruptHeader(f"{path}: unreadable NIfTI ({e})") from e
    if data.ndim != 3:
        raise ShapeMismatch(f"{path}: expected a 3D image, got {data.ndim} dimensions")
    try:
        header = VolumeHeader(
            grid_size=tuple(int(s) for s in data.shape),
            spacing_mm=spacing,
            domain_tag=DomainTag(path.parent.parent.name),
            subject_id=path.parent.name,
            dtype=dtype,
        )
    except (ValueError, ValidationError) as e:
        raise CorruptHeader(f"{path}: cannot derive header from layout ({e})") from e
    return header, data


def load_volume(path: PathLike) -> Volume:
    """
    Load an intensity volume.

    Accepts `image.vol` with its `image.json` sidecar, or a NIfTI-1 file placed in the
    `<root>/<domain>/<subject>/` layout.
    """
    path = Path(path)
    if is_nifti(path):
        header, data = _read_nifti(path, "float32")
        data = data.astype(np.float32)
    else:
        header = _read_header(path)
        data = _read_payload(path, header).astype(np.float32, copy=False)
        header = header.with_updates(dtype="float32")
    if not np.all(np.isfinite(data)):
        raise NonFiniteValues(f"{path}: volume contains non-finite values")
    return Volume(header=header, data=data)


def load_mask(path: PathLike) -> SegMask:
    path = Path(path)
    if is_nifti(path):
        header, data = _read_nifti(path, "uint8")
        rounded = np.rint(data)
        if not np.all(np.isfinite(data)) or np.any(rounded != data) or rounded.min() < 0 or rounded.max() > 255:
            raise IllegalLabel(f"{path}: mask holds non-integer labels")
        labels = rounded.astype(np.uint8)
    else:
        header = _read_header(path)
        labels = _read_payload(path, header)
        if header.dtype != "uint8":
            if not np.all(np.isfinite(labels)) or np.any(np.rint(labels) != labels):
                raise IllegalLabel(f"{path}: mask holds non-integer labels")
            if labels.min() < 0 or labels.max() > 255:
                raise IllegalLabel(f"{path}: mask label outside the uint8 range")
            labels = labels.astype(np.uint8)
            header = header.with_updates(dtype="uint8")
    return SegMask(header=header, labels=labels)


def save_volume(volume: Volume, path: PathLike) -> Path:
    """Write `volume` as a little-endian float32 payload next to its JSON header"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    volume.data.astype(_DTYPES["float32"], copy=False).tofile(path)
    _write_header(volume.header.with_updates(dtype="float32"), path)
    return path


def save_mask(mask: SegMask, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    check_labels(mask.labels)
    mask.labels.astype(_DTYPES["uint8"], copy=False).tofile(path)
    _write_header(mask.header.with_updates(dtype="uint8"), path)
    return path


def subject_dir(root: PathLike, domain: DomainTag, subject_id: str) -> Path:
    return Path(root) / domain.value / subject_id


# ==================== Checksums ====================

def volume_checksum(obj: Union[Volume, SegMask]) -> str:
    """sha256 over the header and the little-endian payload bytes"""
    if isinstance(obj, Volume):
        payload = obj.data.astype(_DTYPES["float32"], copy=False)
    else:
        payload = obj.labels.astype(_DTYPES["uint8"], copy=False)
    digest = hashlib.sha256()
    digest.update(json.dumps(obj.header.model_dump(mode="json", exclude={"dtype"}), sort_keys=True).encode())
    digest.update(np.ascontiguousarray(payload).tobytes())
    return digest.hexdigest()


def dataset_checksum(root: PathLike) -> str:
    """sha256 over every stored file below `root`, in sorted path order"""
    root = Path(root)
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(str(path.relative_to(root)).encode())
        digest.update(hashlib.sha256(path.read_bytes()).digest())
    return digest.hexdigest()


# ==================== Dataset index ====================

def load_split_spec(path: PathLike) -> SplitSpec:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"split spec not found: {path}")
    try:
        return SplitSpec.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise CorruptHeader(f"{path}: {e}") from e


def save_split_spec(spec: SplitSpec, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(spec.model_dump(mode="json"), indent=2) + "\n", encoding="utf-8")
    return path


def _find_file(directory: Path, name: str) -> Optional[Path]:
    """Stored payload first, NIfTI fallback (`image.nii.gz` for `image.vol`)."""
    stem = name.split(".")[0]
    for candidate in [directory / name] + [directory / f"{stem}{s}" for s in NIFTI_SUFFIXES]:
        if candidate.exists():
            return candidate
    return None


def _depth_of(path: Path) -> int:
    if is_nifti(path):
        return int(nib.load(str(path)).shape[2])
    return int(_read_header(path).grid_size[2])


def _check_disjoint(spec: SplitSpec) -> None:
    for tag in DomainTag:
        seen: Dict[str, Split] = {}
        for split in Split:
            for subject in spec.domain(tag).subjects(split):
                if subject in seen and seen[subject] is not split:
                    raise OverlappingSplits(
                        f"{tag.value} subject {subject} is in both {seen[subject].value} and {split.value}"
                    )
                seen[subject] = split


def build_index(root: PathLike, split_spec: SplitSpec) -> DatasetIndex:
    """
    Resolve a split document against the stored layout.

    Source entries and every labeled pair need a mask, as do target validation and
    test volumes. Labeled target subjects leave T_U; `slice = None` labels the whole volume.
    """
    root = Path(root)
    _check_disjoint(split_spec)

    labeled: Dict[str, List[Optional[int]]] = {}
    for pair in split_spec.labeled:
        labeled.setdefault(pair.subject, []).append(pair.slice)
    train_targets = set(split_spec.target.train)
    for subject in labeled:
        if subject not in train_targets:
            raise MissingAnnotation(f"labeled subject {subject} is not a target training subject")

    entries: List[IndexEntry] = []
    for tag in DomainTag:
        for split in Split:
            for subject in split_spec.domain(tag).subjects(split):
                directory = subject_dir(root, tag, subject)
                volume_path = _find_file(directory, IMAGE_NAME)
                if volume_path is None:
                    raise MissingFile(f"no image for {tag.value} subject {subject} under {directory}")
                mask_path = _find_file(directory, MASK_NAME)
                depth = _depth_of(volume_path)

                needs_mask = tag is DomainTag.SOURCE or split is not Split.TRAIN or subject in labeled
                if needs_mask and mask_path is None:
                    raise MissingAnnotation(f"{tag.value} subject {subject} ({split.value}) has no mask")

                if tag is DomainTag.TARGET and split is Split.TRAIN:
                    is_labeled = subject in labeled
                    if not is_labeled:
                        mask_path = None
                        slices: tuple = ()
                    elif None in labeled[subject]:
                        slices = tuple(range(depth))
                    else:
                        slices = tuple(sorted(set(labeled[subject])))
                else:
                    is_labeled = needs_mask
                    slices = tuple(range(depth)) if is_labeled else ()

                entries.append(IndexEntry(
                    subject_id=subject,
                    domain_tag=tag,
                    split=split,
                    volume_path=volume_path,
                    mask_path=mask_path,
                    labeled=is_labeled,
                    depth=depth,
                    labeled_slices=slices,
                ))

    try:
        index = DatasetIndex(root=root, entries=entries)
    except ValidationError as e:
        raise MissingAnnotation(str(e)) from e
    counts = index.counts(Split.TRAIN)
    logger.info(f"Indexed {root}: N={counts.N}, M={counts.M}, m={counts.m}")
    return index


def split_counts(index: DatasetIndex, split: Split = Split.TRAIN) -> SplitCounts:
    return index.counts(split)
