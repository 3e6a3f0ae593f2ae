"""Losses, similarity measures, and evaluation metrics.

Everything here is a pure function of its tensor arguments. Losses keep the
autograd graph of their torch inputs; metrics return plain floats. All
internal arithmetic runs in float64 so results can be checked against
scalar-loop references at tight tolerances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, DataError

_RANGE_FLOOR = 1e-8

# Standard five-scale weights, of which the first ``scales`` are kept and
# renormalized when fewer scales are used.
_MS_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


class SimilarityKind(Enum):
    SSIM = "ssim"
    MS_SSIM = "ms_ssim"


@dataclass(frozen=True)
class SimilarityMeasure:
    kind: SimilarityKind = SimilarityKind.SSIM
    window_size: int = 11
    gaussian_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    scales: int = 3

    def __post_init__(self):
        if self.window_size % 2 != 1 or self.window_size < 3:
            raise ConfigurationError(f"window_size must be an odd int >= 3, got {self.window_size}")
        if self.gaussian_sigma <= 0:
            raise ConfigurationError(f"gaussian_sigma must be positive, got {self.gaussian_sigma}")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ConfigurationError("stability constants must be positive")
        if self.scales < 1:
            raise ConfigurationError(f"scales must be >= 1, got {self.scales}")


@dataclass(frozen=True)
class LossWeights:
    omega: float
    per_task: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "per_task", tuple(float(w) for w in self.per_task))
        values = (self.omega,) + self.per_task
        if not all(math.isfinite(w) and w >= 0 for w in values):
            raise ConfigurationError(f"loss weights must be finite and nonnegative, got {values}")


@dataclass(frozen=True)
class EvaluationPolicy:
    """Evaluation-time targets: the accuracy floor consumers expect, and
    which metric names get reported per task kind."""

    target_accuracy: float = 0.9
    metric_selectors: dict = field(
        default_factory=lambda: {
            "classification": ("accuracy",),
            "segmentation": ("miou", "pixel_accuracy"),
            "depth": ("abs_err", "rel_err"),
            "normals": ("mean_deg", "median_deg", "frac_11_25", "frac_22_5", "frac_30"),
        }
    )

    def __post_init__(self):
        if not 0.0 < self.target_accuracy < 1.0:
            raise ConfigurationError(
                f"target_accuracy must be in (0, 1), got {self.target_accuracy}"
            )


# ---------------------------------------------------------------------------
# tensor canonicalization
# ---------------------------------------------------------------------------


def _as_nchw(x) -> torch.Tensor:
    t = torch.as_tensor(x)
    if t.ndim == 2:
        t = t[None, None]
    elif t.ndim == 3:
        t = t[None]
    elif t.ndim != 4:
        raise ConfigurationError(f"expected 2-4 dims, got shape {tuple(t.shape)}")
    return t.to(torch.float64)


# ---------------------------------------------------------------------------
# structural similarity
# ---------------------------------------------------------------------------


def _gaussian_window(size: int, sigma: float) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma * sigma))
    g = g / g.sum()
    return torch.outer(g, g)


def _ssim_terms(
    x: torch.Tensor, y: torch.Tensor, window: torch.Tensor, c1: float, c2: float
) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean luminance-structure product and mean contrast-structure term."""
    channels = x.shape[1]
    w = window[None, None].expand(channels, 1, -1, -1)
    mu_x = F.conv2d(x, w, groups=channels)
    mu_y = F.conv2d(y, w, groups=channels)
    mu_xx = F.conv2d(x * x, w, groups=channels)
    mu_yy = F.conv2d(y * y, w, groups=channels)
    mu_xy = F.conv2d(x * y, w, groups=channels)
    var_x = mu_xx - mu_x * mu_x
    var_y = mu_yy - mu_y * mu_y
    cov = mu_xy - mu_x * mu_y
    cs_map = (2.0 * cov + c2) / (var_x + var_y + c2)
    ssim_map = ((2.0 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)) * cs_map
    return ssim_map.mean(), cs_map.mean()


def _pair_constants(x: torch.Tensor, y: torch.Tensor, m: SimilarityMeasure) -> tuple[float, float]:
    # Features are unbounded, so the dynamic range comes from the pair itself.
    # Detached: the range is a measurement scale, not a gradient path.
    with torch.no_grad():
        lo = torch.minimum(x.min(), y.min())
        hi = torch.maximum(x.max(), y.max())
        span = float(torch.clamp(hi - lo, min=_RANGE_FLOOR))
    return (m.k1 * span) ** 2, (m.k2 * span) ** 2


def similarity(a, b, m: SimilarityMeasure = SimilarityMeasure()) -> torch.Tensor:
    """Structural similarity of two equally shaped feature maps, in [-1, 1].

    Computed with a Gaussian window per channel and averaged over channels
    and window positions. The multi-scale variant averages contrast terms
    across dyadic downsamplings with renormalized standard weights.
    """
    x = _as_nchw(a)
    y = _as_nchw(b)
    if x.shape != y.shape:
        raise ConfigurationError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    scales = m.scales if m.kind is SimilarityKind.MS_SSIM else 1
    min_side = m.window_size * 2 ** (scales - 1)
    if x.shape[-2] < min_side or x.shape[-1] < min_side:
        raise ConfigurationError(
            f"spatial dims {tuple(x.shape[-2:])} too small for window {m.window_size}"
            + (f" at {scales} scales" if scales > 1 else "")
            + "; reduce window_size"
        )
    c1, c2 = _pair_constants(x, y, m)
    window = _gaussian_window(m.window_size, m.gaussian_sigma)
    if m.kind is SimilarityKind.SSIM:
        value, _ = _ssim_terms(x, y, window, c1, c2)
        return value
    weights = np.array(_MS_WEIGHTS[: m.scales])
    weights = weights / weights.sum()
    factors = []
    for level in range(m.scales):
        value, cs = _ssim_terms(x, y, window, c1, c2)
        factors.append(value if level == m.scales - 1 else cs)
        if level < m.scales - 1:
            x = F.avg_pool2d(x, 2)
            y = F.avg_pool2d(y, 2)
    out = torch.ones((), dtype=torch.float64)
    for f_val, w_val in zip(factors, weights):
        out = out * torch.clamp(f_val, min=0.0) ** w_val
    return out


def task_privacy_loss(features: list, m: SimilarityMeasure = SimilarityMeasure()) -> torch.Tensor:
    """Sum of pairwise feature similarity over ordered task pairs.

    Minimizing this drives the per-task feature maps apart, so one task's
    features carry as little of another task's structure as possible. A
    single task has no pairs and contributes zero.
    """
    if len(features) == 0:
        raise ConfigurationError("task_privacy_loss needs at least one feature map")
    maps = [_as_nchw(f) for f in features]
    shape = maps[0].shape
    for i, f_map in enumerate(maps[1:], start=1):
        if f_map.shape != shape:
            raise ConfigurationError(
                f"feature shape mismatch across tasks: task 0 has {tuple(shape)}, "
                f"task {i} has {tuple(f_map.shape)}"
            )
    total = torch.zeros((), dtype=torch.float64)
    for i in range(len(maps)):
        for j in range(len(maps)):
            if i != j:
                total = total + similarity(maps[i], maps[j], m)
    return total


def combined_loss(task_losses: list, tp_loss, weights: LossWeights) -> torch.Tensor:
    """Weighted task-loss sum plus the similarity penalty scaled by omega."""
    if len(task_losses) != len(weights.per_task):
        raise ConfigurationError(
            f"{len(task_losses)} task losses but {len(weights.per_task)} weights"
        )
    total = torch.zeros((), dtype=torch.float64)
    for loss, w in zip(task_losses, weights.per_task):
        total = total + w * torch.as_tensor(loss, dtype=torch.float64)
    return total + weights.omega * torch.as_tensor(tp_loss, dtype=torch.float64)


# ---------------------------------------------------------------------------
# task losses
# ---------------------------------------------------------------------------


def _check_labels(labels: torch.Tensor, num_classes: int, ignore_index: int) -> None:
    bad = (labels != ignore_index) & ((labels < 0) | (labels >= num_classes))
    if bool(bad.any()):
        where = tuple(int(v) for v in bad.nonzero()[0])
        raise DataError(
            f"label {int(labels[where])} out of range [0, {num_classes}) at pixel {where}"
        )


def cross_entropy_loss(scores, labels, ignore_index: int = -1) -> torch.Tensor:
    """Mean cross-entropy over non-ignored positions.

    Accepts (K,), (N, K) for classification or (K, H, W), (N, K, H, W) for
    dense prediction, with labels shaped accordingly. Returns NaN when every
    position is ignored, so a silent zero never masks an empty batch.
    """
    s = torch.as_tensor(scores).to(torch.float64)
    t = torch.as_tensor(labels).to(torch.int64)
    if (s.ndim, t.ndim) in ((1, 0), (3, 2)):
        s = s[None]
        t = t[None]
    elif (s.ndim, t.ndim) not in ((2, 1), (4, 3)):
        raise ConfigurationError(
            f"scores shape {tuple(s.shape)} does not match labels shape {tuple(t.shape)}"
        )
    num_classes = s.shape[1]
    _check_labels(t, num_classes, ignore_index)
    log_p = F.log_softmax(s, dim=1)
    keep = t != ignore_index
    if not bool(keep.any()):
        return torch.full((), math.nan, dtype=torch.float64)
    gathered = log_p.gather(1, torch.clamp(t, min=0).unsqueeze(1)).squeeze(1)
    return -(gathered[keep]).mean()


segmentation_loss = cross_entropy_loss


def depth_loss(predicted, target) -> torch.Tensor:
    """Mean absolute depth error over pixels whose target depth is positive.

    Zero and negative target depths mark missing measurements and are
    excluded. With no valid pixel at all the result is NaN, a distinguished
    value callers can test for, rather than an exception or a silent zero.
    """
    p = torch.as_tensor(predicted).to(torch.float64)
    t = torch.as_tensor(target).to(torch.float64)
    if p.shape != t.shape:
        raise ConfigurationError(f"shape mismatch: {tuple(p.shape)} vs {tuple(t.shape)}")
    valid = t > 0
    if not bool(valid.any()):
        return torch.full((), math.nan, dtype=torch.float64)
    return (p - t).abs()[valid].mean()


# ---------------------------------------------------------------------------
# evaluation metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DepthMetrics:
    abs_err: float
    rel_err: float
    valid_fraction: float


def depth_metrics(predicted, target) -> DepthMetrics:
    """Absolute and relative depth error over valid (target > 0) pixels."""
    p = np.asarray(torch.as_tensor(predicted).detach().cpu(), dtype=np.float64)
    t = np.asarray(torch.as_tensor(target).detach().cpu(), dtype=np.float64)
    if p.shape != t.shape:
        raise ConfigurationError(f"shape mismatch: {p.shape} vs {t.shape}")
    valid = t > 0
    frac = float(valid.mean()) if valid.size else 0.0
    if not valid.any():
        return DepthMetrics(math.nan, math.nan, frac)
    diff = np.abs(p[valid] - t[valid])
    return DepthMetrics(float(diff.mean()), float((diff / t[valid]).mean()), frac)


@dataclass(frozen=True)
class SurfaceNormalMetrics:
    mean_deg: float
    median_deg: float
    frac_11_25: float
    frac_22_5: float
    frac_30: float


def surface_normal_metrics(predicted, target, unit_tol: float = 1e-3) -> SurfaceNormalMetrics:
    """Angular error statistics between two per-pixel unit-vector maps.

    Vector maps carry their 3 components in the channel dimension. Both maps
    must already be L2-normalized per pixel; deviations beyond ``unit_tol``
    are treated as malformed data.
    """
    p = np.asarray(torch.as_tensor(predicted).detach().cpu(), dtype=np.float64)
    t = np.asarray(torch.as_tensor(target).detach().cpu(), dtype=np.float64)
    if p.shape != t.shape:
        raise ConfigurationError(f"shape mismatch: {p.shape} vs {t.shape}")
    axis = p.ndim - 3
    if p.shape[axis] != 3:
        raise ConfigurationError(f"expected 3 vector components, got shape {p.shape}")
    for name, arr in (("predicted", p), ("target", t)):
        norms = np.linalg.norm(arr, axis=axis)
        worst = float(np.abs(norms - 1.0).max())
        if worst > unit_tol:
            raise DataError(f"{name} normals deviate from unit length by {worst:.3g}")
    dots = np.clip((p * t).sum(axis=axis), -1.0, 1.0)
    angles = np.degrees(np.arccos(dots))
    return SurfaceNormalMetrics(
        mean_deg=float(angles.mean()),
        median_deg=float(np.median(angles)),
        frac_11_25=float((angles <= 11.25).mean()),
        frac_22_5=float((angles <= 22.5).mean()),
        frac_30=float((angles <= 30.0).mean()),
    )


@dataclass(frozen=True)
class SegmentationMetrics:
    miou: float
    pixel_accuracy: float


def segmentation_metrics(
    predicted, target, num_classes: int, ignore_index: int = -1
) -> SegmentationMetrics:
    """Mean IoU over classes present in the target, plus pixel accuracy.

    Classes absent from the target contribute nothing to the mean, so a
    small evaluation crop is not penalized for classes it cannot contain.
    """
    p = np.asarray(torch.as_tensor(predicted).detach().cpu()).astype(np.int64)
    t = np.asarray(torch.as_tensor(target).detach().cpu()).astype(np.int64)
    if p.shape != t.shape:
        raise ConfigurationError(f"shape mismatch: {p.shape} vs {t.shape}")
    keep = t != ignore_index
    p = p[keep]
    t = t[keep]
    if t.size == 0:
        return SegmentationMetrics(math.nan, math.nan)
    accuracy = float((p == t).mean())
    ious = []
    for c in np.unique(t):
        pred_c = p == c
        targ_c = t == c
        union = np.logical_or(pred_c, targ_c).sum()
        inter = np.logical_and(pred_c, targ_c).sum()
        ious.append(inter / union)
    return SegmentationMetrics(float(np.mean(ious)), accuracy)


def classification_accuracy(scores, labels) -> float:
    """Fraction of samples whose argmax score hits the label."""
    s = np.asarray(torch.as_tensor(scores).detach().cpu(), dtype=np.float64)
    t = np.asarray(torch.as_tensor(labels).detach().cpu()).astype(np.int64)
    if s.ndim != t.ndim + 1:
        raise ConfigurationError(f"scores shape {s.shape} does not match labels shape {t.shape}")
    return float((s.argmax(axis=-1) == t).mean())
