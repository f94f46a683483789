"""
Experiment Harness
Declarative sweeps over target annotations (m), source annotations (N) and ablation flags
"""
import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np
from sqlalchemy.orm import Session

from vesseladapt.exceptions import DivergenceDetected
from vesseladapt.nets import build_models, load_checkpoint, restore_models
from vesseladapt.schemas import (
    DomainTag,
    ExperimentSpec,
    LabeledSlice,
    MetricsReport,
    RunStatus,
    Scenario,
    Split,
    SplitSpec,
    SweepKind,
    SweepPointResult,
    SweepValue,
    TrainConfig,
)
from vesseladapt.services import RunRegistry
from vesseladapt.services.infer_eval import emit_report, evaluate, plot_sweep
from vesseladapt.services.preprocess import midpoint_slice
from vesseladapt.services.synth_data import SPLIT_FILE, make_scenario, scenario_specs, write_scenario
from vesseladapt.services.train import (
    BEST_NAME,
    CHECKPOINT_DIR,
    LAST_NAME,
    TrainResult,
    resume_run,
    train_run,
)
from vesseladapt.services.volume_io import build_index, load_split_spec

logger = logging.getLogger(__name__)

DATA_DIR = "data"
RUNS_DIR = "runs"
EVAL_DIR = "eval"
VAL_EVAL_DIR = "val"
SWEEP_CSV = "sweep.csv"
SWEEP_JSON = "sweep.json"
SWEEP_PLOT = "sweep.png"
FULL = "full"


@dataclass
class SweepPoint:
    kind: SweepKind
    value: SweepValue
    label: str
    cfg: TrainConfig
    split: SplitSpec


@dataclass
class ExperimentResult:
    outdir: Path
    results: List[SweepPointResult]
    table: List[dict]

    @property
    def diverged(self) -> bool:
        return any(r.status is RunStatus.DIVERGED for r in self.results)


# ==================== Data ====================

def labeled_mode(scenario: Scenario) -> str:
    return "volume" if Scenario(scenario) is Scenario.MEDIUM_GAP else "slice"


def ensure_data(spec: ExperimentSpec, root: Path) -> SplitSpec:
    """Synthesize the scenario once per experiment; later calls reuse the stored split"""
    root = Path(root)
    if (root / SPLIT_FILE).exists():
        return load_split_spec(root / SPLIT_FILE)
    grid = tuple(spec.grid) if spec.grid else scenario_specs(spec.scenario)[0].grid
    held_out = spec.n_val + spec.n_test
    source, target = make_scenario(spec.scenario, spec.n_source + held_out, spec.n_target + held_out,
                                   spec.data_seed, grid)
    return write_scenario(root, source, target, n_val=spec.n_val, n_test=spec.n_test,
                          n_labeled=spec.n_labeled, labeled_mode=labeled_mode(spec.scenario))


def opposite_polarity(scenario: Scenario) -> bool:
    source, target = scenario_specs(scenario)
    return source.polarity is not target.polarity


# ==================== Sweep points ====================

def _depths(root: Path, split: SplitSpec) -> Dict[str, int]:
    index = build_index(root, split.model_copy(update={"labeled": []}))
    return {e.subject_id: e.depth for e in index.select(Split.TRAIN, DomainTag.TARGET)}


def split_for_m(base: SplitSpec, value: SweepValue, depths: Dict[str, int], n_labeled: int,
                mode: str = "slice") -> SplitSpec:
    """m midpoint slices of m distinct target volumes; "full" annotates n_labeled whole volumes"""
    subjects = base.target.train
    if value == FULL:
        labeled = [LabeledSlice(subject=s) for s in subjects[:n_labeled]]
    elif mode == "volume":
        labeled = [LabeledSlice(subject=s) for s in subjects[:int(value)]]
    else:
        labeled = [LabeledSlice(subject=s, slice=midpoint_slice(depths[s])) for s in subjects[:int(value)]]
    return base.model_copy(update={"labeled": labeled})


def split_for_n(base: SplitSpec, value: int) -> SplitSpec:
    source = base.source.model_copy(update={"train": base.source.train[:value]})
    return base.model_copy(update={"source": source})


def point_label(kind: SweepKind, value: SweepValue) -> str:
    if kind is SweepKind.ABLATION:
        off = sorted(name for name, on in value.items() if not on)
        return "no_" + "_".join(off) if off else "full_method"
    if kind is SweepKind.BASELINE:
        return str(value)
    if kind is SweepKind.NONE:
        return "base"
    return f"{kind.value}_{value}"


def sweep_points(spec: ExperimentSpec, base_split: SplitSpec, data_root: Path) -> Iterator[SweepPoint]:
    """
    Resolved (config, split) per sweep value; bds turns off where a stratum would be empty.

    Baseline points: pretrain_only stops before phase2, target_only drops every source volume.
    """
    base_cfg = spec.base
    if not opposite_polarity(spec.scenario) and base_cfg.ablation.inversion:
        base_cfg = base_cfg.model_copy(
            update={"ablation": base_cfg.ablation.model_copy(update={"inversion": False})}
        )
        logger.info(f"{spec.scenario.value}: vessel polarity matches across domains, intensity inversion off")

    kind = spec.sweep.kind
    values = spec.sweep.values if kind is not SweepKind.NONE else [None]
    depths = _depths(data_root, base_split) if kind is SweepKind.M else {}

    for value in values:
        cfg, split = base_cfg, base_split
        if kind is SweepKind.M:
            split = split_for_m(base_split, value, depths, spec.n_labeled, labeled_mode(spec.scenario))
        elif kind is SweepKind.N:
            split = split_for_n(base_split, int(value))
        elif kind is SweepKind.ABLATION:
            cfg = cfg.model_copy(update={"ablation": cfg.ablation.model_copy(update=dict(value))})
        elif kind is SweepKind.BASELINE:
            if value == "pretrain_only":
                cfg = cfg.model_copy(update={"iters_phase2": 0})
            elif value == "target_only":
                split = split_for_n(base_split, 0)

        if cfg.ablation.bds and (not split.labeled or not split.source.train):
            cfg = cfg.model_copy(update={"ablation": cfg.ablation.model_copy(update={"bds": False})})
        yield SweepPoint(kind=kind, value=value if value is not None else "", label=point_label(kind, value),
                         cfg=cfg, split=split)


# ==================== Runs ====================

def train_point(cfg: TrainConfig, data_root: Path, rundir: Path, split: SplitSpec) -> TrainResult:
    """Fresh run, or continue an existing run directory (a no-op when it already finished)"""
    if (rundir / CHECKPOINT_DIR / LAST_NAME).exists():
        return resume_run(rundir, cfg)
    return train_run(cfg, data_root, rundir, split)


def evaluate_run(
    rundir: Path, cfg: TrainConfig, data_root: Path, split: SplitSpec
) -> Tuple[MetricsReport, MetricsReport]:
    """
    Score the selected checkpoint on the target test split (reports in <rundir>/eval) and on
    the target validation split (reports in <rundir>/eval/val), the latter for head agreement.
    """
    checkpoint = rundir / CHECKPOINT_DIR / BEST_NAME
    if not checkpoint.exists():
        checkpoint = rundir / CHECKPOINT_DIR / LAST_NAME
    bundle = build_models(cfg.net, cfg.ablation, cfg.seed)
    restore_models(bundle, load_checkpoint(checkpoint))
    index = build_index(data_root, split)
    report = evaluate(bundle, index, cfg, DomainTag.TARGET, Split.TEST, label=rundir.name)
    emit_report(report, rundir / EVAL_DIR)
    validation = evaluate(bundle, index, cfg, DomainTag.TARGET, Split.VAL, label=f"{rundir.name}-val")
    if validation.volumes:
        emit_report(validation, rundir / EVAL_DIR / VAL_EVAL_DIR)
    return report, validation


def run_experiment(
    spec: ExperimentSpec,
    outdir: Path,
    db: Optional[Session] = None,
    runner: Callable[[TrainConfig, Path, Path, SplitSpec], TrainResult] = train_point,
) -> ExperimentResult:
    """
    One train + evaluate run per sweep point and seed, recorded in the run ledger.

    Writes <outdir>/data (synthesized once), <outdir>/runs/<point>/seed<k>/ and the
    sweep table (sweep.csv, sweep.json) with its plot.
    """
    outdir = Path(outdir)
    data_root = outdir / DATA_DIR
    base_split = ensure_data(spec, data_root)
    results: List[SweepPointResult] = []

    for point in sweep_points(spec, base_split, data_root):
        for seed in spec.seeds:
            cfg = point.cfg.model_copy(update={"seed": seed})
            rundir = outdir / RUNS_DIR / point.label / f"seed{seed}"
            run_id = None
            if db is not None:
                run_id = RunRegistry.record_run(
                    db, spec.name, spec.scenario.value, seed, str(rundir),
                    sweep_kind=point.kind.value, sweep_value=str(point.value), config_hash=cfg.config_hash(),
                ).id
                RunRegistry.update_status(db, run_id, RunStatus.RUNNING)

            logger.info(f"[{spec.name}] {point.label} seed {seed}")
            try:
                runner(cfg, data_root, rundir, point.split)
            except DivergenceDetected as e:
                logger.error(f"[{spec.name}] {point.label} seed {seed} diverged: {e.detail}")
                if run_id is not None:
                    RunRegistry.update_status(db, run_id, RunStatus.DIVERGED)
                results.append(SweepPointResult(label=point.label, kind=point.kind, value=point.value, seed=seed,
                                                rundir=str(rundir), status=RunStatus.DIVERGED))
                continue

            report, validation = evaluate_run(rundir, cfg, data_root, point.split)
            dice_summary = report.aggregate.get("vessel_dice")
            target_dice = dice_summary.mean if dice_summary else None
            agreement = validation.aggregate.get("vessel_head_agreement")
            if run_id is not None:
                RunRegistry.update_status(db, run_id, RunStatus.COMPLETED, target_vessel_dice=target_dice)
            results.append(SweepPointResult(label=point.label, kind=point.kind, value=point.value, seed=seed,
                                            rundir=str(rundir), status=RunStatus.COMPLETED,
                                            target_vessel_dice=target_dice,
                                            head_agreement=agreement.mean if agreement else None, report=report))

    table = sweep_table(results)
    write_sweep(table, outdir, spec.sweep.kind)
    return ExperimentResult(outdir=outdir, results=results, table=table)


# ==================== Sweep table ====================

def _mean_std(values: List[float]) -> Tuple[Optional[float], Optional[float]]:
    return (float(np.mean(values)), float(np.std(values))) if values else (None, None)


def sweep_table(results: List[SweepPointResult]) -> List[dict]:
    """
    Mean ± population std over completed seeds, per point in sweep order: target vessel Dice
    on the test split and head agreement on the target validation split.
    """
    grouped: Dict[str, List[SweepPointResult]] = {}
    for result in results:
        grouped.setdefault(result.label, []).append(result)
    rows = []
    for label, group in grouped.items():
        scores = [r.target_vessel_dice for r in group if r.target_vessel_dice is not None]
        agreements = [r.head_agreement for r in group if r.head_agreement is not None]
        dice_mean, dice_std = _mean_std(scores)
        agreement_mean, agreement_std = _mean_std(agreements)
        rows.append({
            "label": label,
            "kind": group[0].kind.value,
            "value": group[0].value,
            "seeds": len(group),
            "completed": len(scores),
            "target_vessel_dice_mean": dice_mean,
            "target_vessel_dice_std": dice_std,
            "head_agreement_mean": agreement_mean,
            "head_agreement_std": agreement_std,
        })
    return rows



def write_sweep(table: List[dict], outdir: Path, kind: SweepKind) -> Tuple[Path, Path, Optional[Path]]:
    outdir = Path(outdir)
    csv_path = outdir / SWEEP_CSV
    columns = ["label", "kind", "value", "seeds", "completed", "target_vessel_dice_mean", "target_vessel_dice_std",
               "head_agreement_mean", "head_agreement_std"]
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in table:
            writer.writerow({k: ("" if row[k] is None else row[k]) for k in columns})

    json_path = outdir / SWEEP_JSON
    json_path.write_text(json.dumps(table, indent=2, default=str) + "\n", encoding="utf-8")

    points = [(str(r["value"]) if kind in (SweepKind.M, SweepKind.N) else r["label"],
               r["target_vessel_dice_mean"], r["target_vessel_dice_std"])
              for r in table if r["target_vessel_dice_mean"] is not None]
    plot_path = None
    if points:
        xlabel = {SweepKind.M: "labeled target slices m", SweepKind.N: "labeled source volumes N"}.get(kind, "")
        plot_path = plot_sweep(points, outdir / SWEEP_PLOT, xlabel)
    logger.info(f"Wrote sweep table with {len(table)} points to {csv_path}")
    return csv_path, json_path, plot_path


def resume(rundir: Path) -> TrainResult:
    """Continue an interrupted run from its own directory"""
    return resume_run(Path(rundir))


def load_experiment_spec(path: Path) -> ExperimentSpec:
    return ExperimentSpec.model_validate(json.loads(Path(path).read_text(encoding="utf-8")))
