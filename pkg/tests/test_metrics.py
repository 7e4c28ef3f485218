import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from runet.config import ModelConfig
from runet.data import synth_generate
from runet.metrics import (
    ConfusionCounts,
    compute_metrics,
    confusion_counts,
    evaluate,
    evaluate_patched,
    metrics_from_counts,
    pr_breakeven,
)
from runet.recurrent import build_model
from runet.tensor import ConfigError, ShapeError


def brute_force_counts(prob, gt, threshold=0.5):
    """Independent oracle: explicit double loop over pixels."""
    tp = fp = fn = tn = 0
    for i in range(prob.shape[0]):
        for j in range(prob.shape[1]):
            pred = prob[i, j] > threshold
            is_fg = gt[i, j] > 0.5
            if pred and is_fg:
                tp += 1
            elif pred and not is_fg:
                fp += 1
            elif not pred and is_fg:
                fn += 1
            else:
                tn += 1
    return tp, fp, fn, tn


class TestConfusionOracle:
    def test_agrees_with_brute_force_on_100_random_cases(self):
        rng = np.random.default_rng(123)
        for _ in range(100):
            prob = rng.uniform(size=(32, 32))
            gt = (rng.uniform(size=(32, 32)) > rng.uniform(0.2, 0.8)).astype(np.float32)
            c = confusion_counts(prob, gt)
            assert (c.tp, c.fp, c.fn, c.tn) == brute_force_counts(prob, gt)

    @given(seed=st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=40, deadline=None)
    def test_counts_partition_all_pixels(self, seed):
        rng = np.random.default_rng(seed)
        prob = rng.uniform(size=(16, 16))
        gt = (rng.uniform(size=(16, 16)) > 0.5).astype(np.float32)
        c = confusion_counts(prob, gt)
        assert c.total == prob.size


class TestHandWorkedExample:
    def test_two_of_six_overlap(self):
        # 4-pixel squares sharing exactly 2 pixels
        gt = np.zeros((4, 4), dtype=np.float32)
        gt[0:2, 0:2] = 1.0
        prob = np.zeros((4, 4), dtype=np.float32)
        prob[0:2, 1:3] = 1.0
        rep = compute_metrics(prob, gt, with_breakeven=False)
        assert rep.fg_iou == pytest.approx(2.0 / 6.0)
        assert rep.fg_precision == pytest.approx(0.5)
        assert rep.fg_recall == pytest.approx(0.5)

    def test_perfect_prediction(self):
        rng = np.random.default_rng(1)
        gt = (rng.uniform(size=(8, 8)) > 0.6).astype(np.float32)
        rep = compute_metrics(gt.copy(), gt, with_breakeven=False)
        assert rep.miou == 1.0
        assert rep.mf1 == 1.0
        assert rep.fg_f1 == 1.0

    def test_all_background_prediction_on_mixed_gt(self):
        rng = np.random.default_rng(2)
        gt = (rng.uniform(size=(8, 8)) > 0.5).astype(np.float32)
        rep = compute_metrics(np.zeros((8, 8)), gt, with_breakeven=False)
        assert rep.fg_iou == 0.0
        assert rep.fg_recall == 0.0
        assert rep.fg_precision == 0.0  # 0/0 -> 0 rule
        assert rep.fg_f1 == 0.0


class TestValidation:
    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            compute_metrics(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_non_binary_gt(self):
        with pytest.raises(ConfigError, match="binary"):
            compute_metrics(np.zeros((2, 2)), np.full((2, 2), 0.3))

    def test_out_of_range_prob(self):
        with pytest.raises(ConfigError):
            compute_metrics(np.full((2, 2), 1.5), np.ones((2, 2)))


class TestPermutationInvariance:
    def test_batch_order_does_not_matter(self):
        rng = np.random.default_rng(5)
        prob = rng.uniform(size=(6, 1, 8, 8))
        gt = (rng.uniform(size=(6, 1, 8, 8)) > 0.5).astype(np.float32)
        a = compute_metrics(prob, gt)
        perm = rng.permutation(6)
        b = compute_metrics(prob[perm], gt[perm])
        assert a == b


class TestPrBreakeven:
    def test_lies_between_curve_extremes(self):
        rng = np.random.default_rng(9)
        gt = (rng.uniform(size=(64, 64)) > 0.7).astype(np.float32)
        prob = np.clip(gt * 0.6 + rng.uniform(size=(64, 64)) * 0.4, 0, 1)
        bp = pr_breakeven(prob, gt)
        assert 0.0 <= bp <= 1.0

    def test_perfectly_separable_gives_high_breakeven(self):
        gt = np.zeros((16, 16), dtype=np.float32)
        gt[:8] = 1.0
        prob = np.where(gt > 0.5, 0.9, 0.1)
        assert pr_breakeven(prob, gt) == pytest.approx(1.0, abs=1e-6)

    @given(seed=st.integers(min_value=0, max_value=9999),
           boost=st.floats(min_value=0.01, max_value=0.5))
    @settings(max_examples=30, deadline=None)
    def test_raising_foreground_probs_never_decreases_breakeven(self, seed, boost):
        rng = np.random.default_rng(seed)
        gt = (rng.uniform(size=(24, 24)) > 0.6).astype(np.float32)
        if gt.sum() == 0:
            return
        prob = rng.uniform(size=(24, 24))
        raised = np.where(gt > 0.5, np.clip(prob + boost, 0, 1), prob)
        # the true break-even is monotone; the 256-point sweep with linear
        # interpolation may wobble within one threshold bin
        assert pr_breakeven(raised, gt) >= pr_breakeven(prob, gt) - 1.0 / 255.0

    def test_no_foreground_returns_zero(self):
        assert pr_breakeven(np.ones((4, 4)) * 0.5, np.zeros((4, 4))) == 0.0


@pytest.fixture(scope="module")
def model_and_samples():
    cfg = ModelConfig(variant="dru", level=4, in_channels=1, iterations=3)
    model = build_model(cfg, np.random.default_rng(0))
    samples = synth_generate(21, 6, 32, 32, "curves")
    return model, samples


class TestEvaluate:

    def test_one_report_per_iteration(self, model_and_samples):
        model, samples = model_and_samples
        reports = evaluate(model, samples, iterations=3)
        assert [r.iteration for r in reports] == [1, 2, 3]
        assert all(0.0 <= r.miou <= 1.0 for r in reports)

    def test_iteration_override_extends_recurrence(self, model_and_samples):
        model, samples = model_and_samples
        reports = evaluate(model, samples, iterations=5)
        assert len(reports) == 5

    def test_empty_split_rejected(self, model_and_samples):
        model, _ = model_and_samples
        with pytest.raises(ConfigError, match="empty"):
            evaluate(model, [])

    def test_patched_equals_whole_image_when_single_tile(self, model_and_samples):
        model, samples = model_and_samples
        whole = evaluate(model, samples[:2], iterations=2)
        patched = evaluate_patched(model, samples[:2], patch_size=32, iterations=2)
        for a, b in zip(whole, patched):
            assert a.counts == b.counts
            assert a.miou == b.miou

    def test_evaluation_deterministic(self, model_and_samples):
        model, samples = model_and_samples
        a = evaluate(model, samples, iterations=2)
        b = evaluate(model, samples, iterations=2)
        assert a == b


def test_metrics_from_counts_two_class_means():
    c = ConfusionCounts(tp=10, fp=5, fn=5, tn=80)
    rep = metrics_from_counts(c)
    assert rep.fg_iou == pytest.approx(10 / 20)
    bg_iou = 80 / 90
    assert rep.miou == pytest.approx((10 / 20 + bg_iou) / 2)
    assert rep.fg_recall == pytest.approx(10 / 15)
    assert rep.fg_precision == pytest.approx(10 / 15)
