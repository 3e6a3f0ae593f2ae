import math

import numpy as np
import pytest
import torch

from taskmorph.errors import ConfigurationError, DataError
from taskmorph.objectives import (
    EvaluationPolicy,
    LossWeights,
    SimilarityKind,
    SimilarityMeasure,
    classification_accuracy,
    combined_loss,
    cross_entropy_loss,
    depth_loss,
    depth_metrics,
    segmentation_loss,
    segmentation_metrics,
    similarity,
    surface_normal_metrics,
    task_privacy_loss,
)

# ---------------------------------------------------------------------------
# scalar reference implementations
# ---------------------------------------------------------------------------


def _window(size=11, sigma=1.5):
    c = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(c**2) / (2 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def single_window_ssim(x, y, k1=0.01, k2=0.03, sigma=1.5):
    """Closed-form SSIM when the window covers the whole map."""
    w = _window(x.shape[-1], sigma)
    span = max(1e-8, max(x.max(), y.max()) - min(x.min(), y.min()))
    c1 = (k1 * span) ** 2
    c2 = (k2 * span) ** 2
    mu_x = (w * x).sum()
    mu_y = (w * y).sum()
    var_x = (w * x * x).sum() - mu_x**2
    var_y = (w * y * y).sum() - mu_y**2
    cov = (w * x * y).sum() - mu_x * mu_y
    return ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    )


def scalar_cross_entropy(scores, labels, ignore=-1):
    total, count = 0.0, 0
    flat_s = scores.reshape(scores.shape[0], scores.shape[1], -1)
    flat_t = labels.reshape(labels.shape[0], -1)
    for n in range(flat_s.shape[0]):
        for p in range(flat_s.shape[2]):
            lab = int(flat_t[n, p])
            if lab == ignore:
                continue
            row = flat_s[n, :, p].astype(np.float64)
            m = row.max()
            lse = m + math.log(np.exp(row - m).sum())
            total += lse - row[lab]
            count += 1
    return total / count


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------


def test_ssim_reflexive_and_symmetric():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = rng.standard_normal((1, 11, 11))
        b = rng.standard_normal((1, 11, 11))
        s_ab = float(similarity(a, b))
        s_ba = float(similarity(b, a))
        assert abs(s_ab - s_ba) < 1e-6
        assert abs(float(similarity(a, a)) - 1.0) < 1e-6
        assert -1.0 - 1e-9 <= s_ab <= 1.0 + 1e-9


def test_ssim_constant_zero_vs_one():
    a = np.zeros((1, 11, 11))
    b = np.ones((1, 11, 11))
    c1 = (0.01 * 1.0) ** 2
    expected = c1 / (1.0 + c1)
    assert float(similarity(a, b)) == pytest.approx(expected, abs=1e-9)


def test_ssim_matches_single_window_oracle():
    rng = np.random.default_rng(42)
    for _ in range(100):
        a = rng.standard_normal((1, 11, 11))
        b = rng.standard_normal((1, 11, 11))
        got = float(similarity(a, b))
        ref = single_window_ssim(a[0], b[0])
        assert abs(got - ref) < 1e-6


def test_ssim_multichannel_is_channel_average():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((4, 11, 11))
    b = rng.standard_normal((4, 11, 11))
    whole = float(similarity(a, b))
    # channel-wise computation must share the joint dynamic range, so emulate
    # it by computing per channel with the pair's global constants
    span = max(a.max(), b.max()) - min(a.min(), b.min())
    per = []
    for c in range(4):
        x, y = a[c], b[c]
        w = _window()
        c1, c2 = (0.01 * span) ** 2, (0.03 * span) ** 2
        mu_x, mu_y = (w * x).sum(), (w * y).sum()
        var_x = (w * x * x).sum() - mu_x**2
        var_y = (w * y * y).sum() - mu_y**2
        cov = (w * x * y).sum() - mu_x * mu_y
        per.append(
            ((2 * mu_x * mu_y + c1) * (2 * cov + c2))
            / ((mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2))
        )
    assert whole == pytest.approx(float(np.mean(per)), abs=1e-9)


def test_ssim_larger_map_slides_window():
    rng = np.random.default_rng(9)
    a = rng.standard_normal((1, 16, 16))
    assert abs(float(similarity(a, a)) - 1.0) < 1e-6


def test_ssim_too_small_spatial():
    a = np.zeros((1, 8, 8))
    with pytest.raises(ConfigurationError, match="window"):
        similarity(a, a)


def test_ssim_shape_mismatch():
    with pytest.raises(ConfigurationError):
        similarity(np.zeros((1, 11, 11)), np.zeros((2, 11, 11)))


def test_ssim_gradient_flows():
    a = torch.randn(1, 1, 12, 12, dtype=torch.float64, requires_grad=True)
    b = torch.randn(1, 1, 12, 12, dtype=torch.float64)
    s = similarity(a, b)
    s.backward()
    assert a.grad is not None
    assert torch.isfinite(a.grad).all()
    assert float(a.grad.abs().sum()) > 0


def test_ms_ssim_reflexive_symmetric():
    rng = np.random.default_rng(5)
    m = SimilarityMeasure(kind=SimilarityKind.MS_SSIM)
    a = rng.standard_normal((2, 48, 48))
    b = rng.standard_normal((2, 48, 48))
    assert abs(float(similarity(a, a, m)) - 1.0) < 1e-6
    assert abs(float(similarity(a, b, m)) - float(similarity(b, a, m))) < 1e-6


def test_ms_ssim_needs_room_for_scales():
    m = SimilarityMeasure(kind=SimilarityKind.MS_SSIM)
    with pytest.raises(ConfigurationError, match="scales"):
        similarity(np.zeros((1, 16, 16)), np.zeros((1, 16, 16)), m)


def test_measure_validation():
    with pytest.raises(ConfigurationError):
        SimilarityMeasure(window_size=10)
    with pytest.raises(ConfigurationError):
        SimilarityMeasure(gaussian_sigma=0.0)


# ---------------------------------------------------------------------------
# task-privacy penalty and combined loss
# ---------------------------------------------------------------------------


def test_task_privacy_single_task_zero():
    f = np.random.default_rng(0).standard_normal((1, 11, 11))
    assert float(task_privacy_loss([f])) == 0.0


def test_task_privacy_two_identical():
    f = np.random.default_rng(1).standard_normal((1, 11, 11))
    assert float(task_privacy_loss([f, f.copy()])) == pytest.approx(2.0, abs=1e-6)


def test_task_privacy_three_way_pairwise_sum():
    rng = np.random.default_rng(2)
    fs = [rng.standard_normal((1, 11, 11)) for _ in range(3)]
    expected = 2 * sum(
        float(similarity(fs[i], fs[j])) for i in range(3) for j in range(i + 1, 3)
    )
    assert float(task_privacy_loss(fs)) == pytest.approx(expected, abs=1e-6)


def test_task_privacy_order_invariant():
    rng = np.random.default_rng(4)
    fs = [rng.standard_normal((1, 11, 11)) for _ in range(3)]
    a = float(task_privacy_loss(fs))
    b = float(task_privacy_loss([fs[2], fs[0], fs[1]]))
    assert a == pytest.approx(b, abs=1e-9)


def test_task_privacy_shape_mismatch():
    with pytest.raises(ConfigurationError, match="task 1"):
        task_privacy_loss([np.zeros((1, 11, 11)), np.zeros((1, 12, 12))])


def test_combined_loss_arithmetic():
    w = LossWeights(omega=0.0, per_task=(1.0, 1.0))
    assert float(combined_loss([0.4, 0.6], 5.0, w)) == pytest.approx(1.0)
    w = LossWeights(omega=0.001, per_task=(1.0,))
    assert float(combined_loss([1.0], 2.0, w)) == pytest.approx(1.002)
    w = LossWeights(omega=0.0, per_task=(0.0,))
    assert float(combined_loss([0.0], 0.0, w)) == 0.0


def test_combined_loss_is_affine_in_omega():
    losses, tp = [0.3, 0.7], 1.7
    vals = [
        float(combined_loss(losses, tp, LossWeights(omega=w, per_task=(1.0, 1.0))))
        for w in (0.0, 0.5, 1.0)
    ]
    assert vals[1] == pytest.approx((vals[0] + vals[2]) / 2, abs=1e-12)


def test_weights_validation():
    with pytest.raises(ConfigurationError):
        LossWeights(omega=-0.1, per_task=(1.0,))
    with pytest.raises(ConfigurationError):
        LossWeights(omega=0.0, per_task=(math.inf,))
    with pytest.raises(ConfigurationError):
        combined_loss([1.0, 2.0], 0.0, LossWeights(omega=0.0, per_task=(1.0,)))


def test_evaluation_policy_bounds():
    EvaluationPolicy(target_accuracy=0.9)
    with pytest.raises(ConfigurationError):
        EvaluationPolicy(target_accuracy=1.0)


# ---------------------------------------------------------------------------
# cross-entropy
# ---------------------------------------------------------------------------


def test_cross_entropy_perfect_prediction_vanishes():
    labels = np.array([[0, 1], [2, 0]])
    scores = np.zeros((1, 3, 2, 2))
    for h in range(2):
        for w in range(2):
            scores[0, labels[h, w], h, w] = 50.0
    assert float(segmentation_loss(scores, labels[None])) < 1e-6


def test_cross_entropy_uniform_13_classes():
    scores = np.zeros((2, 13, 4, 4))
    labels = np.random.default_rng(0).integers(0, 13, (2, 4, 4))
    assert float(segmentation_loss(scores, labels)) == pytest.approx(math.log(13), abs=1e-9)


def test_cross_entropy_matches_scalar_loop():
    rng = np.random.default_rng(7)
    scores = rng.standard_normal((2, 5, 4, 4))
    labels = rng.integers(0, 5, (2, 4, 4))
    got = float(segmentation_loss(scores, labels))
    ref = scalar_cross_entropy(scores, labels)
    assert abs(got - ref) < 1e-6


def test_cross_entropy_respects_ignore_label():
    rng = np.random.default_rng(8)
    scores = rng.standard_normal((1, 4, 4, 4))
    labels = rng.integers(0, 4, (1, 4, 4))
    labels[0, :2] = -1
    got = float(segmentation_loss(scores, labels))
    ref = scalar_cross_entropy(scores, labels)
    assert abs(got - ref) < 1e-6


def test_cross_entropy_label_out_of_range_names_pixel():
    scores = np.zeros((1, 3, 2, 2))
    labels = np.zeros((1, 2, 2), dtype=np.int64)
    labels[0, 1, 0] = 7
    with pytest.raises(DataError, match=r"\(0, 1, 0\)"):
        segmentation_loss(scores, labels)


def test_cross_entropy_classification_shapes():
    rng = np.random.default_rng(9)
    scores = rng.standard_normal((6, 4))
    labels = rng.integers(0, 4, 6)
    got = float(cross_entropy_loss(scores, labels))
    ref = scalar_cross_entropy(scores[:, :, None], labels[:, None])
    assert abs(got - ref) < 1e-9


def test_cross_entropy_all_ignored_is_nan():
    scores = np.zeros((1, 3, 2, 2))
    labels = np.full((1, 2, 2), -1, dtype=np.int64)
    assert math.isnan(float(segmentation_loss(scores, labels)))


def test_cross_entropy_gradient_flows():
    scores = torch.randn(2, 3, 4, 4, dtype=torch.float64, requires_grad=True)
    labels = torch.randint(0, 3, (2, 4, 4))
    loss = segmentation_loss(scores, labels)
    loss.backward()
    assert torch.isfinite(scores.grad).all()


# ---------------------------------------------------------------------------
# depth
# ---------------------------------------------------------------------------


def test_depth_identical_maps():
    t = np.random.default_rng(0).uniform(0.5, 2.0, (8, 8))
    assert float(depth_loss(t, t)) == 0.0


def test_depth_all_invalid_is_nan():
    pred = np.ones((4, 4))
    target = np.zeros((4, 4))
    assert math.isnan(float(depth_loss(pred, target)))
    m = depth_metrics(pred, target)
    assert math.isnan(m.abs_err) and math.isnan(m.rel_err)
    assert m.valid_fraction == 0.0


def test_depth_matches_scalar_loop():
    rng = np.random.default_rng(11)
    pred = rng.uniform(0, 3, (8, 8))
    target = rng.uniform(-1, 3, (8, 8))
    total, rel, count = 0.0, 0.0, 0
    for i in range(8):
        for j in range(8):
            if target[i, j] > 0:
                d = abs(pred[i, j] - target[i, j])
                total += d
                rel += d / target[i, j]
                count += 1
    assert count > 0
    assert abs(float(depth_loss(pred, target)) - total / count) < 1e-6
    m = depth_metrics(pred, target)
    assert abs(m.abs_err - total / count) < 1e-6
    assert abs(m.rel_err - rel / count) < 1e-6


def test_depth_gradient_flows_through_valid_pixels_only():
    target = torch.tensor([[1.0, 0.0], [2.0, -1.0]], dtype=torch.float64)
    pred = torch.zeros(2, 2, dtype=torch.float64, requires_grad=True)
    depth_loss(pred, target).backward()
    assert float(pred.grad[0, 1]) == 0.0
    assert float(pred.grad[1, 1]) == 0.0
    assert float(pred.grad[0, 0]) != 0.0


# ---------------------------------------------------------------------------
# surface normals
# ---------------------------------------------------------------------------


def _random_unit_map(rng, h=4, w=4):
    v = rng.standard_normal((3, h, w))
    return v / np.linalg.norm(v, axis=0, keepdims=True)


def test_normals_identical():
    n = _random_unit_map(np.random.default_rng(0))
    m = surface_normal_metrics(n, n)
    assert m.mean_deg == pytest.approx(0.0, abs=1e-4)
    assert m.median_deg == pytest.approx(0.0, abs=1e-4)
    assert (m.frac_11_25, m.frac_22_5, m.frac_30) == (1.0, 1.0, 1.0)


def test_normals_opposite():
    n = _random_unit_map(np.random.default_rng(1))
    m = surface_normal_metrics(-n, n)
    assert m.mean_deg == pytest.approx(180.0, abs=1e-4)
    assert m.median_deg == pytest.approx(180.0, abs=1e-4)
    assert (m.frac_11_25, m.frac_22_5, m.frac_30) == (0.0, 0.0, 0.0)


def test_normals_match_scalar_oracle():
    rng = np.random.default_rng(2)
    a = _random_unit_map(rng)
    b = _random_unit_map(rng)
    m = surface_normal_metrics(a, b)
    angles = []
    for i in range(4):
        for j in range(4):
            d = float(np.dot(a[:, i, j], b[:, i, j]))
            angles.append(math.degrees(math.acos(max(-1.0, min(1.0, d)))))
    angles = np.array(angles)
    assert abs(m.mean_deg - angles.mean()) < 1e-4
    assert abs(m.median_deg - np.median(angles)) < 1e-4
    assert m.frac_11_25 == pytest.approx((angles <= 11.25).mean())
    assert m.frac_22_5 == pytest.approx((angles <= 22.5).mean())
    assert m.frac_30 == pytest.approx((angles <= 30.0).mean())


def test_normals_reject_non_unit():
    n = _random_unit_map(np.random.default_rng(3))
    with pytest.raises(DataError, match="unit length"):
        surface_normal_metrics(n * 1.1, n)


# ---------------------------------------------------------------------------
# segmentation metrics
# ---------------------------------------------------------------------------


def test_segmentation_metrics_perfect():
    t = np.random.default_rng(0).integers(0, 3, (8, 8))
    m = segmentation_metrics(t, t, 3)
    assert m.miou == 1.0
    assert m.pixel_accuracy == 1.0


def test_segmentation_metrics_constant_on_balanced_binary():
    target = np.array([[0, 1], [1, 0]])
    pred = np.zeros((2, 2), dtype=np.int64)
    m = segmentation_metrics(pred, target, 2)
    assert m.pixel_accuracy == pytest.approx(0.5)
    assert m.miou == pytest.approx(0.25)


def test_segmentation_metrics_match_confusion_oracle():
    rng = np.random.default_rng(13)
    pred = rng.integers(0, 3, (8, 8))
    target = rng.integers(0, 3, (8, 8))
    m = segmentation_metrics(pred, target, 3)
    cm = np.zeros((3, 3), dtype=np.int64)
    for i in range(8):
        for j in range(8):
            cm[target[i, j], pred[i, j]] += 1
    ious = []
    for c in range(3):
        if cm[c].sum() == 0:
            continue
        tp = cm[c, c]
        union = cm[c].sum() + cm[:, c].sum() - tp
        ious.append(tp / union)
    assert abs(m.miou - np.mean(ious)) < 1e-6
    assert abs(m.pixel_accuracy - np.trace(cm) / cm.sum()) < 1e-6


def test_segmentation_metrics_ignore_and_absent_classes():
    target = np.array([[0, 0], [-1, -1]])
    pred = np.array([[0, 1], [2, 2]])
    m = segmentation_metrics(pred, target, 3)
    # only class 0 is present in the target: IoU = 1/2, accuracy over the
    # two non-ignored pixels = 1/2
    assert m.miou == pytest.approx(0.5)
    assert m.pixel_accuracy == pytest.approx(0.5)


def test_classification_accuracy():
    scores = np.array([[2.0, 1.0], [0.0, 3.0], [1.0, 0.0]])
    labels = np.array([0, 1, 1])
    assert classification_accuracy(scores, labels) == pytest.approx(2 / 3)
