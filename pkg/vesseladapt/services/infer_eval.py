"""
Inference and Evaluation
Head-averaged prediction, overlap / topology / surface metrics, reports and figures
"""
import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib.figure import Figure
from scipy import ndimage
from skimage.morphology import skeletonize

from vesseladapt.exceptions import EmptyMask, GridMismatch
from vesseladapt.schemas import (
    BRAIN,
    NUM_CLASSES,
    VESSEL,
    ClassMetrics,
    DatasetIndex,
    DomainTag,
    MetricsReport,
    MetricSummary,
    Split,
    VolumeMetrics,
)
from vesseladapt.services.preprocess import extract_slices, invert_intensity, labels_from_one_hot
from vesseladapt.services.volume_io import SegMask, Volume, load_mask, load_volume

logger = logging.getLogger(__name__)

LabelGrid = Union[SegMask, np.ndarray]
INFERENCE_BATCH = 8
METRICS_CSV = "metrics.csv"
METRICS_JSON = "metrics.json"
PNG_METADATA = {"Software": None}


# ==================== Prediction ====================

def load_pair(entry, cfg) -> Tuple[Volume, Optional[SegMask]]:
    """Volume (inverted when the run inverts its domain) and its mask, if stored"""
    volume = load_volume(entry.volume_path)
    if cfg.inverts(entry.domain_tag):
        volume = invert_intensity(volume)
    mask = load_mask(entry.mask_path) if entry.mask_path is not None else None
    return volume, mask


@dataclass
class Prediction:
    """Per-slice probability maps; prob_trans is None for source inputs"""
    slice_index: int
    prob_recon: np.ndarray
    prob_trans: Optional[np.ndarray]
    hard: np.ndarray


def average_heads(prob_recon: torch.Tensor, prob_trans: Optional[torch.Tensor]) -> torch.Tensor:
    return prob_recon if prob_trans is None else 0.5 * (prob_recon + prob_trans)


def hard_labels(probs: torch.Tensor) -> torch.Tensor:
    """argmax over the class axis; torch.argmax returns the first maximal index on ties"""
    return torch.argmax(probs, dim=1)


@torch.no_grad()
def predict(bundle, volume: Volume, domain: DomainTag, channels: int) -> Tuple[SegMask, List[Prediction]]:
    """
    Slice-wise segmentation of a preprocessed volume.

    Target inputs average the softmax of the reconstruction head (ŷ^t) and the
    translation-to-source head (ŷ^s) before the argmax. Source inputs use the
    reconstruction head only.
    """
    was_training = bundle.training
    bundle.eval()
    own = domain.flag
    samples = extract_slices(volume, channels=channels)
    labels = np.zeros(volume.header.grid_size, dtype=np.uint8)
    predictions: List[Prediction] = []

    for start in range(0, len(samples), INFERENCE_BATCH):
        chunk = samples[start:start + INFERENCE_BATCH]
        x = torch.from_numpy(np.stack([s.image for s in chunk])).float()
        _, logits_recon = bundle.translate(x, own)
        prob_recon = F.softmax(logits_recon, dim=1)
        prob_trans = None
        if domain is DomainTag.TARGET:
            _, logits_trans = bundle.translate(x, 1 - own)
            prob_trans = F.softmax(logits_trans, dim=1)
        hard = hard_labels(average_heads(prob_recon, prob_trans))
        for j, sample in enumerate(chunk):
            labels[:, :, sample.slice_index] = hard[j].numpy().astype(np.uint8)
            predictions.append(Prediction(
                slice_index=sample.slice_index,
                prob_recon=prob_recon[j].numpy(),
                prob_trans=None if prob_trans is None else prob_trans[j].numpy(),
                hard=hard[j].numpy(),
            ))

    bundle.train(was_training)
    mask = SegMask(volume.header.with_updates(dtype="uint8"), labels)
    return mask, predictions


# ==================== Overlap metrics ====================

def _labels(mask: LabelGrid) -> np.ndarray:
    return mask.labels if isinstance(mask, SegMask) else np.asarray(mask)


def _binary(pred: LabelGrid, ref: LabelGrid, k: Optional[int]) -> Tuple[np.ndarray, np.ndarray]:
    a, b = _labels(pred), _labels(ref)
    if a.shape != b.shape:
        raise GridMismatch(f"prediction grid {a.shape} differs from reference grid {b.shape}")
    if k is None:
        return a.astype(bool), b.astype(bool)
    return a == k, b == k


def _counts(pred: np.ndarray, ref: np.ndarray) -> Tuple[int, int, int]:
    tp = int(np.count_nonzero(pred & ref))
    fp = int(np.count_nonzero(pred & ~ref))
    fn = int(np.count_nonzero(~pred & ref))
    return tp, fp, fn


def _ratio(numerator: int, denominator: int) -> float:
    return 1.0 if denominator == 0 else numerator / denominator


def dice(pred: LabelGrid, ref: LabelGrid, k: Optional[int] = VESSEL) -> float:
    """2TP/(2TP+FP+FN) for class k; 1.0 when both are empty"""
    tp, fp, fn = _counts(*_binary(pred, ref, k))
    return _ratio(2 * tp, 2 * tp + fp + fn)


def precision(pred: LabelGrid, ref: LabelGrid, k: Optional[int] = VESSEL) -> float:
    p, r = _binary(pred, ref, k)
    if not p.any():
        return 1.0 if not r.any() else 0.0
    tp, fp, _ = _counts(p, r)
    return tp / (tp + fp)


def recall(pred: LabelGrid, ref: LabelGrid, k: Optional[int] = VESSEL) -> float:
    p, r = _binary(pred, ref, k)
    if not r.any():
        return 1.0 if not p.any() else 0.0
    tp, _, fn = _counts(p, r)
    return tp / (tp + fn)


def class_metrics(pred: LabelGrid, ref: LabelGrid, k: int) -> ClassMetrics:
    return ClassMetrics(dice=dice(pred, ref, k), precision=precision(pred, ref, k), recall=recall(pred, ref, k))


# ==================== Topology ====================

def skeleton(mask: np.ndarray, mode: Literal["3d", "2d"] = "3d") -> np.ndarray:
    """Binary skeleton; "2d" thins each axial slice on its own"""
    mask = mask.astype(bool)
    if mode == "2d" and mask.ndim == 3:
        return np.stack([skeletonize(mask[:, :, z]) for z in range(mask.shape[2])], axis=2).astype(bool)
    return skeletonize(mask).astype(bool)


def cldice(pred: LabelGrid, ref: LabelGrid, k: Optional[int] = VESSEL, mode: Literal["3d", "2d"] = "3d") -> float:
    """Harmonic mean of topology precision |S(pred) ∩ ref|/|S(pred)| and sensitivity |S(ref) ∩ pred|/|S(ref)|"""
    p, r = _binary(pred, ref, k)
    if not p.any() and not r.any():
        return 1.0
    if not p.any() or not r.any():
        return 0.0
    skel_p, skel_r = skeleton(p, mode), skeleton(r, mode)
    tprec = _ratio(int(np.count_nonzero(skel_p & r)), int(np.count_nonzero(skel_p)))
    tsens = _ratio(int(np.count_nonzero(skel_r & p)), int(np.count_nonzero(skel_r)))
    if tprec + tsens == 0:
        return 0.0
    return 2 * tprec * tsens / (tprec + tsens)


# ==================== Surface distance ====================

def surface(mask: np.ndarray) -> np.ndarray:
    """Border voxels: foreground with a 6-connected background neighbour (outside the grid counts)"""
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=structure, border_value=0)


def assd(pred: LabelGrid, ref: LabelGrid, spacing_mm: Sequence[float], k: Optional[int] = VESSEL) -> float:
    """Mean of the two directed average nearest-surface distances (mm), pred to ref and ref to pred"""
    p, r = _binary(pred, ref, k)
    if not p.any() or not r.any():
        raise EmptyMask("surface distance needs two non-empty masks")
    sp, sr = surface(p), surface(r)
    to_ref = ndimage.distance_transform_edt(~sr, sampling=spacing_mm)
    to_pred = ndimage.distance_transform_edt(~sp, sampling=spacing_mm)
    return float(0.5 * (to_ref[sp].mean() + to_pred[sr].mean()))


# ==================== Reports ====================

def head_agreement(predictions: Sequence[Prediction], k: int = VESSEL) -> Optional[float]:
    """Dice of class k between argmax ŷ^t and argmax ŷ^s over all slices; None without a translation head"""
    if not predictions or any(p.prob_trans is None for p in predictions):
        return None
    recon = np.stack([np.argmax(p.prob_recon, axis=0) for p in predictions])
    trans = np.stack([np.argmax(p.prob_trans, axis=0) for p in predictions])
    return dice(recon, trans, k)


def score_volume(
    pred: LabelGrid,
    ref: LabelGrid,
    spacing_mm: Sequence[float],
    subject_id: str = "",
    cldice_mode: Literal["3d", "2d"] = "3d",
    agreement: Optional[float] = None,
) -> VolumeMetrics:
    try:
        distance = assd(pred, ref, spacing_mm, VESSEL)
    except EmptyMask:
        distance = None
    return VolumeMetrics(
        subject_id=subject_id,
        brain=class_metrics(pred, ref, BRAIN),
        vessel=class_metrics(pred, ref, VESSEL),
        cldice=cldice(pred, ref, VESSEL, cldice_mode),
        assd_mm=distance,
        head_agreement=agreement,
    )


def summarize(volumes: Sequence[VolumeMetrics], label: Optional[str] = None) -> MetricsReport:
    """Aggregate mean ± population std per metric; missing ASSD values are counted, not averaged"""
    rows = [v.flat() for v in volumes]
    aggregate: Dict[str, MetricSummary] = {}
    assd_missing = 0
    for key in (rows[0] if rows else {}):
        values = [row[key] for row in rows if row[key] is not None]
        if key == "vessel_assd_mm":
            assd_missing = len(rows) - len(values)
        if values:
            aggregate[key] = MetricSummary(mean=float(np.mean(values)), std=float(np.std(values)), count=len(values))
    return MetricsReport(label=label, volumes=list(volumes), aggregate=aggregate, assd_missing=assd_missing)


def evaluate(
    bundle,
    index: DatasetIndex,
    cfg,
    domain: DomainTag = DomainTag.TARGET,
    split: Split = Split.TEST,
    label: Optional[str] = None,
) -> MetricsReport:
    """Predict and score every annotated volume of `domain` in `split`"""
    entries = [e for e in index.select(split, domain) if e.mask_path is not None]
    volumes = []
    for entry in entries:
        volume, ref = load_pair(entry, cfg)
        pred, predictions = predict(bundle, volume, domain, cfg.net.channels)
        volumes.append(score_volume(pred, ref, volume.header.spacing_mm, entry.subject_id, cfg.cldice_mode,
                                    agreement=head_agreement(predictions)))
    report = summarize(volumes, label=label or f"{domain.value}-{split.value}")
    vessel = report.aggregate.get("vessel_dice")
    if vessel is not None:
        logger.info(f"Evaluated {len(volumes)} {domain.value} volumes: vessel Dice {vessel.mean:.3f} ± {vessel.std:.3f}")
    return report


def _csv_row(name: str, values: Dict[str, Optional[float]]) -> List[str]:
    return [name] + ["" if values[k] is None else f"{values[k]:.6f}" for k in values]


def emit_report(report: MetricsReport, outdir: Path) -> List[Path]:
    """metrics.csv (one row per volume plus a mean row), metrics.json and a per-volume vessel figure"""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    columns = list(report.volumes[0].flat()) if report.volumes else list(report.aggregate)

    csv_path = outdir / METRICS_CSV
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject_id"] + columns)
        for volume in report.volumes:
            writer.writerow(_csv_row(volume.subject_id, volume.flat()))
        means = {k: (report.aggregate[k].mean if k in report.aggregate else None) for k in columns}
        writer.writerow(_csv_row("mean", means))

    json_path = outdir / METRICS_JSON
    json_path.write_text(json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    figure_path = outdir / "plots" / "vessel_scores.png"
    figure_path.parent.mkdir(exist_ok=True)
    fig = Figure(figsize=(6, 3.5))
    ax = fig.subplots()
    subjects = [v.subject_id for v in report.volumes]
    positions = np.arange(len(subjects))
    ax.bar(positions - 0.2, [v.vessel.dice for v in report.volumes], width=0.4, label="Dice")
    ax.bar(positions + 0.2, [v.cldice for v in report.volumes], width=0.4, label="clDice")
    ax.set_xticks(positions)
    ax.set_xticklabels(subjects, rotation=45, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("vessel score")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(figure_path, dpi=100, metadata=PNG_METADATA)
    return [csv_path, json_path, figure_path]


def plot_sweep(
    points: Sequence[Tuple[str, float, float]],
    path: Path,
    xlabel: str,
    ylabel: str = "target vessel Dice",
) -> Path:
    """Line plot of (label, mean, std) sweep points in the given order"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig = Figure(figsize=(5, 3.5))
    ax = fig.subplots()
    x = np.arange(len(points))
    means = np.array([p[1] for p in points])
    stds = np.array([p[2] for p in points])
    ax.errorbar(x, means, yerr=stds, marker="o", capsize=3)
    ax.set_xticks(x)
    ax.set_xticklabels([p[0] for p in points])
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=PNG_METADATA)
    return path


@torch.no_grad()
def render_translations(bundle, samples: Sequence, path: Path) -> Path:
    """One row per 2.5D sample: input, reconstruction, translation, predicted labels (centre channel)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    was_training = bundle.training
    bundle.eval()
    fig = Figure(figsize=(8, 2 * len(samples)))
    axes = fig.subplots(len(samples), 4, squeeze=False)
    for row, sample in enumerate(samples):
        x = torch.from_numpy(sample.image[None]).float()
        own = sample.domain_tag.flag
        recon, logits_recon = bundle.translate(x, own)
        trans, logits_trans = bundle.translate(x, 1 - own)
        probs = F.softmax(logits_recon, dim=1)
        if sample.domain_tag is DomainTag.TARGET:
            probs = average_heads(probs, F.softmax(logits_trans, dim=1))
        labels = labels_from_one_hot(probs[0].numpy())
        centre = x.shape[1] // 2
        panels = [
            (x[0, centre].numpy(), "input", "gray", (-1, 1)),
            (recon[0, centre].numpy(), "reconstruction", "gray", (-1, 1)),
            (trans[0, centre].numpy(), f"to {sample.domain_tag.opposite.value}", "gray", (-1, 1)),
            (labels, "labels", "viridis", (0, NUM_CLASSES - 1)),
        ]
        for ax, (image, title, cmap, (vmin, vmax)) in zip(axes[row], panels):
            ax.imshow(image.T, cmap=cmap, vmin=vmin, vmax=vmax, origin="lower")
            ax.set_axis_off()
            if row == 0:
                ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=PNG_METADATA)
    bundle.train(was_training)
    return path
