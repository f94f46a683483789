"""
Tests for Inference and Evaluation
Metric oracles, surface distances, head averaging and report files
"""
import csv
import itertools
import json
from unittest.mock import patch

import numpy as np
import pytest
import torch
from scipy import ndimage

from vesseladapt.exceptions import EmptyMask, GridMismatch
from vesseladapt.nets import build_models
from vesseladapt.schemas import BRAIN, VESSEL, DomainTag
from vesseladapt.services.infer_eval import (
    Prediction,
    assd,
    average_heads,
    cldice,
    dice,
    emit_report,
    evaluate,
    hard_labels,
    head_agreement,
    plot_sweep,
    precision,
    predict,
    recall,
    render_translations,
    score_volume,
    summarize,
)
from vesseladapt.services.preprocess import extract_slices
from vesseladapt.services.volume_io import build_index
from tests.conftest import make_mask, make_volume, tiny_train_config

PNG_MAGIC = b"\x89PNG"


def _blobs(rng, shape, threshold=0.6):
    """Smooth random blobs, never empty"""
    field = ndimage.gaussian_filter(rng.normal(size=shape), 1.5)
    mask = field > np.quantile(field, threshold)
    return mask


def _brute_surface(mask):
    padded = np.pad(mask, 1, constant_values=False)
    points = []
    for idx in zip(*np.nonzero(mask)):
        p = tuple(i + 1 for i in idx)
        for axis, step in itertools.product(range(3), (-1, 1)):
            q = list(p)
            q[axis] += step
            if not padded[tuple(q)]:
                points.append(idx)
                break
    return np.array(points, dtype=np.float64)


def _brute_assd(pred, ref, spacing):
    a = _brute_surface(pred) * spacing
    b = _brute_surface(ref) * spacing
    pairwise = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return 0.5 * (pairwise.min(1).mean() + pairwise.min(0).mean())


def _capsule(shape, start, end, radius):
    grid = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij"), axis=-1).astype(np.float64)
    start, end = np.asarray(start, float), np.asarray(end, float)
    axis = end - start
    t = np.clip(((grid - start) @ axis) / (axis @ axis), 0, 1)
    nearest = start + t[..., None] * axis
    return np.linalg.norm(grid - nearest, axis=-1) <= radius


def _probs(*values):
    return torch.tensor(values, dtype=torch.float32).view(1, 3, 1, 1)


class TestOverlapMetrics:
    """Test Dice, precision and recall against explicit voxel counting"""

    def test_random_pairs(self):
        """Test 200 random label pairs per class"""
        rng = np.random.default_rng(0)
        for _ in range(200):
            pred = rng.integers(0, 3, size=(16, 16, 16))
            ref = rng.integers(0, 3, size=(16, 16, 16))
            for k in (BRAIN, VESSEL):
                tp = fp = fn = 0
                for p, r in zip(pred.ravel().tolist(), ref.ravel().tolist()):
                    tp += p == k and r == k
                    fp += p == k and r != k
                    fn += p != k and r == k
                assert dice(pred, ref, k) == pytest.approx(2 * tp / (2 * tp + fp + fn))
                assert precision(pred, ref, k) == pytest.approx(tp / (tp + fp))
                assert recall(pred, ref, k) == pytest.approx(tp / (tp + fn))

    def test_identical(self):
        """Test that a mask scores 1 against itself"""
        labels = np.random.default_rng(1).integers(0, 3, size=(8, 8, 8))
        assert dice(labels, labels) == 1.0
        assert precision(labels, labels) == 1.0 and recall(labels, labels) == 1.0

    def test_empty_conventions(self):
        """Test 1.0 when both masks lack the class and 0.0 when only one does"""
        empty = np.zeros((4, 4, 4), dtype=np.uint8)
        full = np.full((4, 4, 4), VESSEL, dtype=np.uint8)
        assert dice(empty, empty) == 1.0
        assert precision(empty, empty) == 1.0 and recall(empty, empty) == 1.0
        assert dice(empty, full) == 0.0
        assert precision(empty, full) == 0.0
        assert recall(full, empty) == 0.0

    def test_grid_mismatch(self):
        """Test that differently shaped grids are refused"""
        with pytest.raises(GridMismatch):
            dice(np.zeros((4, 4, 4)), np.zeros((4, 4, 5)))

    def test_accepts_masks(self):
        """Test that SegMask objects and plain arrays score alike"""
        labels = np.random.default_rng(2).integers(0, 3, size=(6, 6, 6))
        other = np.random.default_rng(3).integers(0, 3, size=(6, 6, 6))
        assert dice(make_mask(labels), make_mask(other)) == dice(labels, other)


class TestSurfaceDistance:
    """Test the average symmetric surface distance"""

    def test_brute_force_oracle(self):
        """Test 50 random blob pairs with anisotropic spacing against all-pairs distances"""
        rng = np.random.default_rng(4)
        for _ in range(50):
            shape = tuple(int(n) for n in rng.integers(6, 13, size=3))
            pred, ref = _blobs(rng, shape), _blobs(rng, shape)
            spacing = rng.uniform(0.5, 2.0, size=3)
            expected = _brute_assd(pred, ref, spacing)
            assert assd(pred, ref, tuple(spacing), k=None) == pytest.approx(expected, rel=1e-9, abs=1e-9)

    def test_parallel_planes(self):
        """Test 3.0 mm for two one-voxel planes three voxels apart"""
        pred = np.zeros((10, 8, 8), dtype=np.uint8)
        ref = np.zeros_like(pred)
        pred[2] = VESSEL
        ref[5] = VESSEL
        assert assd(pred, ref, (1.0, 1.0, 1.0)) == pytest.approx(3.0)

    def test_unequal_surfaces(self):
        """Test that each direction is averaged on its own, so a large surface does not dominate"""
        pred = np.zeros((8, 1, 1), dtype=np.uint8)
        ref = np.zeros_like(pred)
        pred[0] = VESSEL
        ref[3:6] = VESSEL
        # pred to ref: 3; ref to pred: (3 + 4 + 5) / 3
        assert assd(pred, ref, (1.0, 1.0, 1.0)) == pytest.approx(3.5)

    def test_unequal_cubes_match_oracle(self):
        """Test a small cube inside a large one against all-pairs distances"""
        pred = np.zeros((12, 12, 12), dtype=bool)
        ref = np.zeros_like(pred)
        pred[5:7, 5:7, 5:7] = True
        ref[1:11, 1:11, 1:11] = True
        spacing = np.array([1.0, 1.0, 1.0])
        expected = _brute_assd(pred, ref, spacing)
        assert assd(pred, ref, (1.0, 1.0, 1.0), k=None) == pytest.approx(expected, rel=1e-9)

    def test_identical_is_zero(self):
        """Test zero distance for identical masks"""
        mask = _blobs(np.random.default_rng(5), (10, 10, 10))
        assert assd(mask, mask, (1.0, 1.0, 1.0), k=None) == 0.0

    def test_symmetric(self):
        """Test ASSD(a, b) = ASSD(b, a)"""
        rng = np.random.default_rng(6)
        a, b = _blobs(rng, (10, 9, 8)), _blobs(rng, (10, 9, 8))
        assert assd(a, b, (0.7, 1.0, 1.3), k=None) == pytest.approx(assd(b, a, (0.7, 1.0, 1.3), k=None))

    def test_spacing_scales(self):
        """Test that doubling every spacing doubles the distance"""
        rng = np.random.default_rng(7)
        a, b = _blobs(rng, (10, 10, 10)), _blobs(rng, (10, 10, 10))
        single = assd(a, b, (1.0, 1.0, 1.0), k=None)
        assert assd(a, b, (2.0, 2.0, 2.0), k=None) == pytest.approx(2 * single)

    def test_empty_mask(self):
        """Test that an empty mask has no surface distance"""
        mask = np.zeros((4, 4, 4), dtype=np.uint8)
        mask[1, 1, 1] = VESSEL
        with pytest.raises(EmptyMask):
            assd(mask, np.zeros_like(mask), (1.0, 1.0, 1.0))


class TestTopology:
    """Test clDice on tubes"""

    shape = (20, 20, 24)

    def test_identical_tube(self):
        """Test that a tube against itself scores 1"""
        tube = _capsule(self.shape, (10, 10, 4), (10, 10, 19), 2.5)
        assert cldice(tube, tube, k=None) == 1.0
        assert cldice(tube, tube, k=None, mode="2d") == 1.0

    def test_dilated_tube(self):
        """Test that thickening a tube keeps its centreline inside the reference"""
        tube = _capsule(self.shape, (10, 10, 4), (10, 10, 19), 2.5)
        thick = ndimage.binary_dilation(tube)
        assert cldice(thick, tube, k=None) >= 0.95

    def test_disjoint_tubes(self):
        """Test that non-overlapping tubes score 0"""
        a = _capsule(self.shape, (4, 4, 4), (4, 4, 19), 2.0)
        b = _capsule(self.shape, (15, 15, 4), (15, 15, 19), 2.0)
        assert cldice(a, b, k=None) == 0.0

    def test_empty(self):
        """Test the empty-mask conventions"""
        empty = np.zeros(self.shape, dtype=bool)
        tube = _capsule(self.shape, (10, 10, 4), (10, 10, 19), 2.0)
        assert cldice(empty, empty, k=None) == 1.0
        assert cldice(empty, tube, k=None) == 0.0


class TestHeadAveraging:
    """Test combining the reconstruction and translation heads"""

    def test_average_then_argmax(self):
        """Test (0.6, 0.2, 0.2) and (0.0, 0.8, 0.2) averaging to brain"""
        probs = average_heads(_probs(0.6, 0.2, 0.2), _probs(0.0, 0.8, 0.2))
        assert torch.allclose(probs.flatten(), torch.tensor([0.3, 0.5, 0.2]))
        assert hard_labels(probs).item() == BRAIN

    def test_average_beats_voting(self):
        """Test a voxel where the averaged label is neither head's own vote"""
        recon, trans = _probs(0.5, 0.45, 0.05), _probs(0.05, 0.45, 0.5)
        assert hard_labels(recon).item() == 0 and hard_labels(trans).item() == VESSEL
        assert hard_labels(average_heads(recon, trans)).item() == BRAIN

    def test_source_uses_one_head(self):
        """Test that a missing translation head leaves the probabilities unchanged"""
        probs = _probs(0.1, 0.3, 0.6)
        assert torch.equal(average_heads(probs, None), probs)


class TestPredict:
    """Test slice-wise prediction of whole volumes"""

    @pytest.fixture
    def bundle(self, net_config, flags):
        return build_models(net_config, flags, seed=0)

    @pytest.fixture
    def volume(self):
        data = np.random.default_rng(8).uniform(-1, 1, size=(16, 16, 12))
        return make_volume(data, domain=DomainTag.TARGET, subject="t0")

    def test_shapes(self, bundle, volume, net_config):
        """Test a label grid like the volume and one prediction per slice"""
        mask, predictions = predict(bundle, volume, DomainTag.TARGET, net_config.channels)
        assert mask.labels.shape == volume.data.shape
        assert set(np.unique(mask.labels)) <= {0, 1, 2}
        assert [p.slice_index for p in predictions] == list(range(12))
        assert all(p.prob_trans is not None for p in predictions)
        assert np.allclose(predictions[0].prob_recon.sum(0), 1.0, atol=1e-5)

    def test_source_never_translates(self, bundle, volume, net_config):
        """Test that source volumes are segmented from the reconstruction head alone"""
        with patch.object(bundle, "translate", wraps=bundle.translate) as spy:
            _, predictions = predict(bundle, volume, DomainTag.SOURCE, net_config.channels)
        flags_seen = {call.args[1] for call in spy.call_args_list}
        assert spy.call_count == 2 and flags_seen == {DomainTag.SOURCE.flag}
        assert all(p.prob_trans is None for p in predictions)

    def test_restores_training_mode(self, bundle, volume, net_config):
        """Test that prediction leaves the networks in their previous mode"""
        bundle.train()
        predict(bundle, volume, DomainTag.TARGET, net_config.channels)
        assert bundle.training

    def test_evaluate(self, bundle, data_root):
        """Test that evaluation scores every annotated target test volume"""
        root, split = data_root
        report = evaluate(bundle, build_index(root, split), tiny_train_config())
        assert [v.subject_id for v in report.volumes] == split.target.test
        assert report.label == "target-test"
        assert "vessel_dice" in report.aggregate
        agreement = report.aggregate["vessel_head_agreement"]
        assert agreement.count == len(split.target.test)
        assert 0.0 <= agreement.mean <= 1.0


def _onehot_probs(labels):
    return np.eye(3, dtype=np.float32)[labels].transpose(2, 0, 1)


class TestHeadAgreement:
    """Test agreement between the reconstruction and translation heads"""

    def test_identical_heads(self):
        """Test that identical hard labels agree perfectly"""
        labels = np.random.default_rng(10).integers(0, 3, size=(6, 6))
        probs = _onehot_probs(labels)
        predictions = [Prediction(z, probs, probs.copy(), labels) for z in range(3)]
        assert head_agreement(predictions) == 1.0

    def test_partial_agreement(self):
        """Test vessel Dice between the two heads' hard labels"""
        recon = np.zeros((4, 4), dtype=np.int64)
        trans = np.zeros_like(recon)
        recon[0, :2] = VESSEL
        trans[0, 1:3] = VESSEL
        predictions = [Prediction(0, _onehot_probs(recon), _onehot_probs(trans), recon)]
        # one shared vessel pixel out of two on each side
        assert head_agreement(predictions) == pytest.approx(0.5)

    def test_source_has_no_agreement(self):
        """Test that predictions without a translation head give no agreement value"""
        probs = _onehot_probs(np.zeros((4, 4), dtype=np.int64))
        assert head_agreement([Prediction(0, probs, None, np.zeros((4, 4)))]) is None
        assert head_agreement([]) is None


class TestReports:
    """Test aggregation and report files"""

    @staticmethod
    def _volumes():
        rng = np.random.default_rng(9)
        ref = rng.integers(0, 3, size=(8, 8, 8))
        noisy = np.where(rng.random(ref.shape) < 0.2, rng.integers(0, 3, size=ref.shape), ref)
        return [
            score_volume(ref, ref, (1.0, 1.0, 1.0), "a"),
            score_volume(noisy, ref, (1.0, 1.0, 1.0), "b"),
        ]

    def test_single_volume_std(self):
        """Test a population std of 0 for one volume"""
        report = summarize(self._volumes()[:1])
        assert report.aggregate["vessel_dice"].std == 0.0
        assert report.aggregate["vessel_dice"].mean == 1.0

    def test_population_std(self):
        """Test mean ± population std over two volumes"""
        volumes = self._volumes()
        values = [v.vessel.dice for v in volumes]
        summary = summarize(volumes).aggregate["vessel_dice"]
        assert summary.mean == pytest.approx(np.mean(values))
        assert summary.std == pytest.approx(abs(values[0] - values[1]) / 2)

    def test_missing_assd_counted(self):
        """Test that volumes without a vessel surface are counted, not averaged"""
        ref = np.zeros((6, 6, 6), dtype=np.uint8)
        ref[2:4, 2:4, 2:4] = VESSEL
        empty = np.zeros_like(ref)
        volumes = [score_volume(empty, ref, (1.0, 1.0, 1.0), "x"), score_volume(ref, ref, (1.0, 1.0, 1.0), "y")]
        assert volumes[0].assd_mm is None
        report = summarize(volumes)
        assert report.assd_missing == 1
        assert report.aggregate["vessel_assd_mm"].count == 1

    def test_emit_report(self, tmp_path):
        """Test one CSV row per volume plus a mean row, the JSON report and the figure"""
        report = summarize(self._volumes(), label="target-test")
        csv_path, json_path, figure_path = emit_report(report, tmp_path)

        with csv_path.open(encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        assert rows[0][0] == "subject_id" and "vessel_cldice" in rows[0]
        assert [r[0] for r in rows[1:]] == ["a", "b", "mean"]
        assert json.loads(json_path.read_text(encoding="utf-8"))["label"] == "target-test"
        assert figure_path.read_bytes().startswith(PNG_MAGIC)

    def test_plot_sweep(self, tmp_path):
        """Test that a sweep figure is written"""
        path = plot_sweep([("m_0", 0.4, 0.05), ("m_3", 0.6, 0.02)], tmp_path / "sweep.png", xlabel="m")
        assert path.read_bytes().startswith(PNG_MAGIC)

    def test_render_translations(self, tmp_path, net_config, flags):
        """Test the translation panel for one source and one target slice"""
        bundle = build_models(net_config, flags, seed=0)
        data = np.random.default_rng(10).uniform(-1, 1, size=(16, 16, 6))
        samples = [
            extract_slices(make_volume(data, DomainTag.SOURCE, "s0"), channels=3)[3],
            extract_slices(make_volume(data, DomainTag.TARGET, "t0"), channels=3)[3],
        ]
        path = render_translations(bundle, samples, tmp_path / "translations.png")
        assert path.read_bytes().startswith(PNG_MAGIC)
