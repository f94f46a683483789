"""
Tests for the Experiment Harness
Sweep resolution, run bookkeeping and sweep tables, with training replaced by a stub runner
"""
import csv
import json
from pathlib import Path

import pytest
from pydantic import ValidationError

from vesseladapt.exceptions import DivergenceDetected
from vesseladapt.nets import build_models, save_checkpoint
from vesseladapt.schemas import (
    BASELINES,
    DomainSplit,
    ExperimentSpec,
    LabeledSlice,
    RunStatus,
    Scenario,
    SplitSpec,
    SweepKind,
    SweepPointResult,
    SweepSpec,
)
from vesseladapt.services import RunRegistry
from vesseladapt.services.harness import (
    EVAL_DIR,
    RUNS_DIR,
    SWEEP_CSV,
    SWEEP_JSON,
    SWEEP_PLOT,
    VAL_EVAL_DIR,
    ensure_data,
    load_experiment_spec,
    point_label,
    run_experiment,
    split_for_m,
    split_for_n,
    sweep_points,
    sweep_table,
    train_point,
)
from vesseladapt.services.synth_data import SPLIT_FILE
from vesseladapt.services.train import BEST_NAME, CHECKPOINT_DIR, LAST_NAME, TrainResult
from tests.conftest import TINY_GRID, tiny_train_config

EXPERIMENTS = Path(__file__).resolve().parents[1] / "experiments"


class StubRunner:
    """Stands in for training: stores an untrained checkpoint and remembers each call"""

    def __init__(self, diverge_seeds=()):
        self.calls = []
        self.diverge_seeds = set(diverge_seeds)

    def __call__(self, cfg, data_root, rundir, split):
        self.calls.append((cfg, rundir, split))
        if cfg.seed in self.diverge_seeds:
            raise DivergenceDetected("non-finite total at phase2 iteration 0")
        state = {"config": cfg.model_dump(mode="json"), "config_hash": cfg.config_hash(),
                 "phase": "done", "iteration": 0}
        save_checkpoint(rundir / CHECKPOINT_DIR / LAST_NAME, build_models(cfg.net, cfg.ablation, cfg.seed), state)
        return TrainResult(rundir, RunStatus.COMPLETED, None, [])


def _spec(scenario=Scenario.WIDE_GAP, kind=SweepKind.NONE, values=(), seeds=(1,)):
    return ExperimentSpec(
        name="tiny",
        scenario=scenario,
        sweep=SweepSpec(kind=kind, values=list(values)),
        base=tiny_train_config(),
        seeds=list(seeds),
        n_source=3,
        n_target=3,
        n_val=1,
        n_test=1,
        n_labeled=1,
        grid=TINY_GRID,
    )


def _base_split():
    return SplitSpec(
        source=DomainSplit(train=["s0", "s1", "s2"]),
        target=DomainSplit(train=["a", "b", "c"]),
        labeled=[LabeledSlice(subject="a", slice=6)],
    )


class TestPointLabels:
    """Test run-directory labels of sweep points"""

    def test_labels(self):
        """Test labels for annotation counts, ablations and the plain run"""
        assert point_label(SweepKind.M, 3) == "m_3"
        assert point_label(SweepKind.M, "full") == "m_full"
        assert point_label(SweepKind.N, 10) == "N_10"
        assert point_label(SweepKind.NONE, None) == "base"
        assert point_label(SweepKind.ABLATION, {"residuals": False}) == "no_residuals"
        assert point_label(SweepKind.ABLATION, {"dsbn": False, "bds": False}) == "no_bds_dsbn"
        assert point_label(SweepKind.ABLATION, {"residuals": True}) == "full_method"


class TestSplits:
    """Test split derivation per sweep value"""

    def test_m_midpoint_slices(self):
        """Test m midpoint slices of m distinct target volumes"""
        split = split_for_m(_base_split(), 2, {"a": 12, "b": 9, "c": 12}, n_labeled=1)
        assert [(p.subject, p.slice) for p in split.labeled] == [("a", 6), ("b", 4)]

    def test_m_zero(self):
        """Test that m = 0 leaves no annotation"""
        assert split_for_m(_base_split(), 0, {}, n_labeled=1).labeled == []

    def test_m_full(self):
        """Test that "full" annotates n_labeled whole volumes"""
        split = split_for_m(_base_split(), "full", {}, n_labeled=2)
        assert [(p.subject, p.slice) for p in split.labeled] == [("a", None), ("b", None)]

    def test_m_volume_mode(self):
        """Test whole-volume annotation for scenarios labeled by volume"""
        split = split_for_m(_base_split(), 1, {"a": 12}, n_labeled=1, mode="volume")
        assert [(p.subject, p.slice) for p in split.labeled] == [("a", None)]

    def test_n_prefix(self):
        """Test that N keeps the first N source training volumes"""
        split = split_for_n(_base_split(), 1)
        assert split.source.train == ["s0"]
        assert split.target == _base_split().target
        assert split_for_n(_base_split(), 0).source.train == []


class TestSweepPoints:
    """Test resolved (config, split) pairs"""

    def test_same_polarity_disables_inversion(self, tmp_path):
        """Test that inversion is switched off when both domains share vessel polarity"""
        spec = _spec(scenario=Scenario.NARROW_GAP)
        split = ensure_data(spec, tmp_path)
        points = list(sweep_points(spec, split, tmp_path))
        assert [p.label for p in points] == ["base"]
        assert points[0].cfg.ablation.inversion is False

    def test_opposite_polarity_keeps_inversion(self, tmp_path):
        """Test that inversion stays on for bright-to-dark adaptation"""
        spec = _spec()
        points = list(sweep_points(spec, ensure_data(spec, tmp_path), tmp_path))
        assert points[0].cfg.ablation.inversion is True

    def test_m_sweep_balancing(self, tmp_path):
        """Test that balanced sampling turns off without annotated target slices"""
        spec = _spec(kind=SweepKind.M, values=[0, 2])
        points = list(sweep_points(spec, ensure_data(spec, tmp_path), tmp_path))
        assert [p.label for p in points] == ["m_0", "m_2"]
        assert points[0].cfg.ablation.bds is False
        assert points[1].cfg.ablation.bds is True
        assert [(p.subject, p.slice) for p in points[1].split.labeled] == [("tgt000", 6), ("tgt001", 6)]

    def test_n_sweep_balancing(self, tmp_path):
        """Test that balanced sampling turns off without source volumes"""
        spec = _spec(kind=SweepKind.N, values=[0, 3])
        points = list(sweep_points(spec, ensure_data(spec, tmp_path), tmp_path))
        assert points[0].split.source.train == [] and points[0].cfg.ablation.bds is False
        assert len(points[1].split.source.train) == 3 and points[1].cfg.ablation.bds is True

    def test_ablation_flags(self, tmp_path):
        """Test that each ablation point switches exactly its named flags"""
        spec = _spec(kind=SweepKind.ABLATION, values=[{"residuals": False}, {"dsbn": False}])
        points = list(sweep_points(spec, ensure_data(spec, tmp_path), tmp_path))
        assert points[0].cfg.ablation.residuals is False and points[0].cfg.ablation.dsbn is True
        assert points[1].cfg.ablation.dsbn is False and points[1].cfg.ablation.residuals is True

    def test_ablation_document(self, tmp_path):
        """Test that the ablation document yields the full method and one point per switched-off flag"""
        spec = load_experiment_spec(EXPERIMENTS / "ablation.json")
        spec = _spec(kind=spec.sweep.kind, values=spec.sweep.values)
        points = list(sweep_points(spec, ensure_data(spec, tmp_path), tmp_path))

        assert [p.label for p in points] == ["full_method", "no_residuals", "no_dsbn", "no_bds", "no_inversion"]
        assert points[0].cfg.ablation.model_dump() == {"residuals": True, "dsbn": True, "bds": True,
                                                      "inversion": True}
        for point in points[1:]:
            off = {name for name, on in point.cfg.ablation.model_dump().items() if not on}
            assert off == {point.label.removeprefix("no_")}
        assert all(p.split == points[0].split for p in points)

    def test_baseline_points(self, tmp_path):
        """Test the reference points the full method is compared against"""
        spec = _spec(kind=SweepKind.BASELINE, values=list(BASELINES))
        full, pretrain_only, target_only = sweep_points(spec, ensure_data(spec, tmp_path), tmp_path)

        assert [full.label, pretrain_only.label, target_only.label] == list(BASELINES)
        assert full.cfg == pretrain_only.cfg.model_copy(update={"iters_phase2": spec.base.iters_phase2})
        assert pretrain_only.cfg.iters_phase2 == 0
        assert pretrain_only.split == full.split
        assert len(full.split.source.train) == 3 and full.cfg.ablation.bds is True
        assert target_only.split.source.train == [] and target_only.cfg.ablation.bds is False
        assert target_only.split.labeled == full.split.labeled
        assert target_only.cfg.iters_phase2 == spec.base.iters_phase2

    def test_n_document_covers_zero(self, tmp_path):
        """Test that the N document includes a target-only point and a source-backed point"""
        values = load_experiment_spec(EXPERIMENTS / "n_sweep.json").sweep.values
        assert 0 in values and max(values) > 0
        spec = _spec(kind=SweepKind.N, values=[0, 3])
        zero, backed = sweep_points(spec, ensure_data(spec, tmp_path), tmp_path)
        assert zero.label == "N_0" and zero.split.source.train == []
        assert backed.split.source.train and backed.cfg.ablation.bds is True

    def test_data_reused(self, tmp_path):
        """Test that a second call reads the stored split instead of synthesizing again"""
        spec = _spec()
        first = ensure_data(spec, tmp_path)
        stamp = (tmp_path / SPLIT_FILE).stat().st_mtime_ns
        assert ensure_data(spec, tmp_path) == first
        assert (tmp_path / SPLIT_FILE).stat().st_mtime_ns == stamp


class TestRunExperiment:
    """Test whole experiments with the stub runner"""

    def test_runs_and_ledger(self, tmp_path, db):
        """Test one run per point and seed, evaluation reports and completed ledger rows"""
        runner = StubRunner()
        spec = _spec(kind=SweepKind.M, values=[0, 1], seeds=[1, 2])
        result = run_experiment(spec, tmp_path, db=db, runner=runner)

        assert len(runner.calls) == 4
        assert {c[0].seed for c in runner.calls} == {1, 2}
        assert (tmp_path / RUNS_DIR / "m_1" / "seed2" / EVAL_DIR / "metrics.csv").exists()
        assert (tmp_path / RUNS_DIR / "m_1" / "seed2" / EVAL_DIR / VAL_EVAL_DIR / "metrics.csv").exists()
        assert all(0.0 <= r.head_agreement <= 1.0 for r in result.results)
        assert not result.diverged

        runs = RunRegistry.list_runs(db, experiment="tiny")
        assert len(runs) == 4
        assert all(r.status == RunStatus.COMPLETED.value for r in runs)
        assert all(r.target_vessel_dice is not None for r in runs)
        assert {r.sweep_value for r in runs} == {"0", "1"}

        assert [row["label"] for row in result.table] == ["m_0", "m_1"]
        assert all(row["seeds"] == 2 and row["completed"] == 2 for row in result.table)
        assert all(row["head_agreement_mean"] is not None for row in result.table)
        for name in (SWEEP_CSV, SWEEP_JSON, SWEEP_PLOT):
            assert (tmp_path / name).exists()
        with (tmp_path / SWEEP_CSV).open(encoding="utf-8") as fh:
            assert len(list(csv.DictReader(fh))) == 2

    def test_diverged_seed(self, tmp_path, db):
        """Test that a diverged seed is recorded and excluded from the sweep mean"""
        spec = _spec(seeds=[1, 2])
        result = run_experiment(spec, tmp_path, db=db, runner=StubRunner(diverge_seeds={2}))

        assert result.diverged
        assert [r.status for r in result.results] == [RunStatus.COMPLETED, RunStatus.DIVERGED]
        statuses = {r.seed: r.status for r in RunRegistry.list_runs(db)}
        assert statuses == {1: "completed", 2: "diverged"}
        assert result.table[0]["completed"] == 1
        assert not (tmp_path / RUNS_DIR / "base" / "seed2" / EVAL_DIR).exists()

    def test_without_ledger(self, tmp_path):
        """Test that an experiment runs without a database session"""
        result = run_experiment(_spec(), tmp_path, runner=StubRunner())
        assert [r.status for r in result.results] == [RunStatus.COMPLETED]

    @pytest.mark.slow
    def test_baselines_trained(self, tmp_path):
        """Test real training of every baseline point: only adapted runs select a best checkpoint"""
        spec = _spec(kind=SweepKind.BASELINE, values=list(BASELINES))
        result = run_experiment(spec, tmp_path, runner=train_point)

        assert [r.status for r in result.results] == [RunStatus.COMPLETED] * 3
        assert all(0.0 <= r.target_vessel_dice <= 1.0 for r in result.results)
        best = {label: (tmp_path / RUNS_DIR / label / "seed1" / CHECKPOINT_DIR / BEST_NAME).exists()
                for label in BASELINES}
        assert best == {"full_method": True, "pretrain_only": False, "target_only": True}
        assert [row["label"] for row in result.table] == list(BASELINES)


class TestSweepTable:
    """Test aggregation over seeds"""

    @staticmethod
    def _result(label, seed, value, status=RunStatus.COMPLETED):
        return SweepPointResult(label=label, kind=SweepKind.M, value=1, seed=seed, rundir=f"r/{label}/{seed}",
                                status=status, target_vessel_dice=value)

    def test_population_std(self):
        """Test mean ± population std over seeds"""
        table = sweep_table([self._result("m_1", 1, 0.4), self._result("m_1", 2, 0.6)])
        assert table[0]["target_vessel_dice_mean"] == pytest.approx(0.5)
        assert table[0]["target_vessel_dice_std"] == pytest.approx(0.1)

    def test_head_agreement_columns(self):
        """Test that head agreement is aggregated over seeds next to Dice"""
        results = [self._result("m_1", 1, 0.4), self._result("m_1", 2, 0.6)]
        results[0].head_agreement, results[1].head_agreement = 0.8, 1.0
        (row,) = sweep_table(results)
        assert row["head_agreement_mean"] == pytest.approx(0.9)
        assert row["head_agreement_std"] == pytest.approx(0.1)
        assert sweep_table([self._result("m_0", 1, 0.5)])[0]["head_agreement_mean"] is None

    def test_order_and_missing(self):
        """Test sweep order and a point whose every seed diverged"""
        table = sweep_table([
            self._result("m_3", 1, 0.7),
            self._result("m_0", 1, None, RunStatus.DIVERGED),
        ])
        assert [row["label"] for row in table] == ["m_3", "m_0"]
        assert table[1]["completed"] == 0
        assert table[1]["target_vessel_dice_mean"] is None


class TestExperimentSpec:
    """Test experiment documents"""

    def test_load(self, tmp_path):
        """Test reading a sweep document"""
        path = tmp_path / "experiment.json"
        path.write_text(json.dumps({"name": "m-sweep", "scenario": "narrow_gap",
                                    "sweep": {"kind": "m", "values": [0, 3, "full"]}}), encoding="utf-8")
        spec = load_experiment_spec(path)
        assert spec.scenario is Scenario.NARROW_GAP
        assert spec.sweep.values == [0, 3, "full"]
        assert spec.seeds == [7, 17, 27]

    @pytest.mark.parametrize("name", ["m_sweep.json", "n_sweep.json", "ablation.json", "baselines.json"])
    def test_shipped_documents(self, name):
        """Test that every experiment document in the repository validates"""
        spec = load_experiment_spec(EXPERIMENTS / name)
        assert spec.sweep.kind is not SweepKind.NONE
        assert spec.scenario is Scenario.WIDE_GAP

    def test_unknown_baseline(self):
        """Test that baseline sweeps only accept the known reference points"""
        with pytest.raises(ValidationError):
            ExperimentSpec(name="x", sweep=SweepSpec(kind=SweepKind.BASELINE, values=["source_only"]))

    def test_m_out_of_range(self):
        """Test that more annotated slices than target volumes are refused"""
        with pytest.raises(ValidationError):
            ExperimentSpec(name="x", n_target=5, sweep=SweepSpec(kind=SweepKind.M, values=[6]))

    def test_unknown_ablation_flag(self):
        """Test that ablations may only name known flags"""
        with pytest.raises(ValidationError):
            ExperimentSpec(name="x", sweep=SweepSpec(kind=SweepKind.ABLATION, values=[{"attention": False}]))

    def test_empty_sweep(self):
        """Test that a sweep kind needs values"""
        with pytest.raises(ValidationError):
            ExperimentSpec(name="x", sweep=SweepSpec(kind=SweepKind.N))
