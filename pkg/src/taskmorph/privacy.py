"""Per-sample gradient sanitization and privacy accounting.

Clipping and noise are defined on flat per-sample gradient rows so they can
be unit-checked without any model in the loop; the trainer flattens its
parameter gradients into rows before calling in here.

Accounting follows the moments-accountant route for the subsampled Gaussian
mechanism: Renyi divergence bounds at a grid of orders, composed linearly
over steps, then converted to (epsilon, delta).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import special

from .errors import CalibrationError, ConfigurationError, NumericError

# Order grid: quarter-integer steps through the low range where the optimum
# usually sits, then integers out to 256 for very noisy / long regimes.
DEFAULT_ORDERS: tuple[float, ...] = tuple(np.arange(1.25, 63.75, 0.25)) + tuple(
    range(64, 257)
)

_LOG_EPS_CUTOFF = -40.0  # series terms below this no longer move the sum


def clip_per_sample(grads: np.ndarray, max_norm: float) -> np.ndarray:
    """Scale each row to L2 norm at most ``max_norm``.

    Rows already inside the ball are returned bit-identical. Rows outside are
    scaled by max_norm / norm and then nudged down by at most a few ulps so
    that the float64 norm of the stored float32 row never exceeds the bound.
    """
    if max_norm <= 0:
        raise ConfigurationError(f"clip norm must be positive, got {max_norm}")
    grads = np.asarray(grads)
    if grads.ndim == 1:
        return clip_per_sample(grads[None, :], max_norm)[0]
    finite = np.isfinite(grads).all(axis=1)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise NumericError(f"non-finite gradient entries in sample {bad}")
    out = grads.astype(np.float32, copy=True)
    norms = np.linalg.norm(out.astype(np.float64), axis=1)
    over = norms > max_norm
    if not np.any(over):
        return out
    scale = np.ones_like(norms)
    scale[over] = max_norm / norms[over]
    out[over] = (out[over].astype(np.float64) * scale[over, None]).astype(np.float32)
    # Rounding during the float32 store can leave a norm a few ulps above the
    # bound; shave those rows until the exact check passes.
    for _ in range(64):
        norms = np.linalg.norm(out.astype(np.float64), axis=1)
        bad = over & (norms > max_norm)
        if not np.any(bad):
            return out
        out[bad] = (out[bad].astype(np.float64) * (1.0 - 1e-7)).astype(np.float32)
    raise ArithmeticError("clip fix-up did not converge")


def noisy_aggregate(
    clipped: np.ndarray,
    noise_multiplier: float,
    max_norm: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Mean of per-sample rows with an independent Gaussian draw added to each.

    Every row gets its own noise vector with per-coordinate standard deviation
    noise_multiplier * max_norm before the average is taken.
    """
    clipped = np.atleast_2d(np.asarray(clipped))
    n = clipped.shape[0]
    # An explicit zero keeps the no-noise case exact even when max_norm is
    # infinite (0 * inf would be nan).
    std = 0.0 if noise_multiplier == 0.0 else noise_multiplier * max_norm
    noise = rng.normal(0.0, std, size=clipped.shape)
    return ((clipped.astype(np.float64) + noise).sum(axis=0) / n).astype(np.float32)


# ---------------------------------------------------------------------------
# Renyi accounting for the subsampled Gaussian mechanism
# ---------------------------------------------------------------------------


def _log_add(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    hi, lo = (a, b) if a > b else (b, a)
    return hi + math.log1p(math.exp(lo - hi))


def _log_sub(a: float, b: float) -> float:
    """log(exp(a) - exp(b)) for a >= b."""
    if b == -math.inf:
        return a
    if a == b:
        return -math.inf
    if b > a:
        raise ValueError("log_sub of a negative quantity")
    return a + math.log1p(-math.exp(b - a))


def _log_erfc(x: float) -> float:
    # erfc(x) = 2 * ndtr(-x * sqrt(2)); log_ndtr stays finite far into the tail
    return math.log(2.0) + special.log_ndtr(-x * math.sqrt(2.0))


def _log_moment_int(q: float, sigma: float, alpha: int) -> float:
    """log E[(mixture ratio)^alpha] for integer order via the binomial sum."""
    i = np.arange(alpha + 1, dtype=np.float64)
    terms = (
        special.gammaln(alpha + 1.0)
        - special.gammaln(i + 1.0)
        - special.gammaln(alpha - i + 1.0)
        + i * math.log(q)
        + (alpha - i) * math.log1p(-q)
        + (i * i - i) / (2.0 * sigma * sigma)
    )
    return float(special.logsumexp(terms))


def _log_moment_frac(q: float, sigma: float, alpha: float) -> float:
    """log E[(mixture ratio)^alpha] for fractional order.

    Splits the integral at the point where the mixture ratio crosses one and
    expands each side as a binomial series with complementary error function
    tail weights. Terms alternate in sign once the index passes alpha; the
    positive and negative piles are accumulated separately in log space. The
    tail decays only at rate log(1-q) per term, so the series is evaluated
    in vectorized chunks rather than one scalar term at a time.
    """
    s2 = sigma * sigma
    z0 = s2 * math.log(1.0 / q - 1.0) + 0.5
    sqrt2s = math.sqrt(2.0) * sigma
    log_q = math.log(q)
    log_1q = math.log1p(-q)
    lgamma_top = special.gammaln(alpha + 1.0)

    log_pos = -math.inf
    log_neg = -math.inf
    chunk = 4096
    start = 0
    prev_max = math.inf
    while True:
        i = np.arange(start, start + chunk, dtype=np.float64)
        j = alpha - i
        log_coef = lgamma_top - special.gammaln(i + 1.0) - special.gammaln(j + 1.0)
        sign = special.gammasgn(j + 1.0)
        log_e0 = math.log(2.0) + special.log_ndtr(-(i - z0) / sqrt2s * math.sqrt(2.0))
        log_e1 = math.log(2.0) + special.log_ndtr(-(z0 - j) / sqrt2s * math.sqrt(2.0))
        log_s0 = log_coef + i * log_q + j * log_1q + (i * i - i) / (2.0 * s2) + math.log(0.5) + log_e0
        log_s1 = log_coef + j * log_q + i * log_1q + (j * j - j) / (2.0 * s2) + math.log(0.5) + log_e1
        terms = np.concatenate([log_s0, log_s1])
        signs = np.concatenate([sign, sign])
        pos = terms[signs > 0]
        neg = terms[signs < 0]
        if pos.size:
            log_pos = _log_add(log_pos, float(special.logsumexp(pos)))
        if neg.size:
            log_neg = _log_add(log_neg, float(special.logsumexp(neg)))
        start += chunk
        cmax = float(terms.max())
        # The total moment is at least one, so once the index is past the
        # binomial peak and the chunks are shrinking, terms this far down
        # cannot move the sum.
        if start > alpha and cmax < _LOG_EPS_CUTOFF and cmax <= prev_max:
            break
        prev_max = cmax
        if start > 20_000_000:
            raise ArithmeticError("moment series did not converge")
    return _log_sub(log_pos, log_neg)


def rdp_step(q: float, noise_multiplier: float, alpha: float) -> float:
    """Renyi divergence bound of order ``alpha`` for one subsampled step."""
    if q < 0.0 or q > 1.0:
        raise ConfigurationError(f"sampling rate must be in [0, 1], got {q}")
    if noise_multiplier < 0.0:
        raise ConfigurationError(f"noise multiplier must be nonnegative, got {noise_multiplier}")
    if q == 0.0:
        return 0.0
    if noise_multiplier == 0.0:
        return math.inf
    if q == 1.0:
        return alpha / (2.0 * noise_multiplier * noise_multiplier)
    if alpha == math.inf:
        return math.inf
    if float(alpha).is_integer():
        log_a = _log_moment_int(q, noise_multiplier, int(alpha))
    else:
        log_a = _log_moment_frac(q, noise_multiplier, alpha)
    return log_a / (alpha - 1.0)


@lru_cache(maxsize=256)
def _rdp_vector(q: float, noise_multiplier: float, orders: tuple[float, ...]) -> tuple[float, ...]:
    return tuple(rdp_step(q, noise_multiplier, a) for a in orders)


def compute_rdp(
    q: float,
    noise_multiplier: float,
    steps: int,
    orders: tuple[float, ...] = DEFAULT_ORDERS,
) -> np.ndarray:
    """Composed Renyi divergence bounds over ``steps`` identical releases."""
    if steps < 0:
        raise ConfigurationError(f"steps must be nonnegative, got {steps}")
    return steps * np.array(_rdp_vector(q, noise_multiplier, orders))


def rdp_to_epsilon(
    rdp: np.ndarray, orders: tuple[float, ...], delta: float
) -> tuple[float, float]:
    """Convert Renyi bounds to (epsilon, best_order) at a given delta."""
    if not 0.0 < delta < 1.0:
        raise ConfigurationError(f"delta must be in (0, 1), got {delta}")
    orders_arr = np.asarray(orders, dtype=np.float64)
    rdp = np.asarray(rdp, dtype=np.float64)
    if orders_arr.shape != rdp.shape:
        raise ConfigurationError("orders and rdp vectors must align")
    eps = rdp + math.log(1.0 / delta) / (orders_arr - 1.0)
    idx = int(np.argmin(eps))
    return float(max(eps[idx], 0.0)), float(orders_arr[idx])


def compute_epsilon(
    q: float,
    noise_multiplier: float,
    steps: int,
    delta: float,
    orders: tuple[float, ...] = DEFAULT_ORDERS,
) -> float:
    """Privacy loss after ``steps`` subsampled Gaussian releases."""
    if steps == 0 or q == 0.0:
        return 0.0
    if noise_multiplier == 0.0:
        return math.inf
    rdp = compute_rdp(q, noise_multiplier, steps, orders)
    eps, _ = rdp_to_epsilon(rdp, orders, delta)
    return eps


def calibrate_sigma(
    q: float,
    steps: int,
    target_epsilon: float,
    delta: float,
    tol: float = 1e-3,
    lo: float = 1e-2,
    hi: float = 1e3,
    orders: tuple[float, ...] = DEFAULT_ORDERS,
) -> float:
    """Smallest noise multiplier whose accounted epsilon meets the target.

    Bisects on the monotone map sigma -> epsilon, returning a sigma whose
    epsilon is within ``tol`` of the target from below.
    """
    if target_epsilon <= 0:
        raise ConfigurationError(f"target epsilon must be positive, got {target_epsilon}")
    if steps <= 0 or q <= 0:
        raise ConfigurationError("calibration needs a positive number of steps and q > 0")
    eps_lo = compute_epsilon(q, lo, steps, delta, orders)
    eps_hi = compute_epsilon(q, hi, steps, delta, orders)
    if eps_hi > target_epsilon:
        raise CalibrationError(
            f"target epsilon {target_epsilon} unreachable with sigma in [{lo}, {hi}]: "
            f"achievable range is [{eps_hi:.4g}, {eps_lo:.4g}]"
        )
    if eps_lo < target_epsilon:
        return lo
    for _ in range(80):
        if hi / lo - 1.0 < 1e-9:
            break
        mid = math.sqrt(lo * hi)
        eps_mid = compute_epsilon(q, mid, steps, delta, orders)
        if eps_mid > target_epsilon:
            lo = mid
        else:
            hi = mid
            if target_epsilon - eps_mid <= tol:
                return hi
    return hi


@dataclass
class DPConfig:
    """Static parameters of the producer-side gradient sanitizer."""

    clip_threshold: float
    noise_multiplier: float
    sample_rate: float
    target_epsilon: float
    target_delta: float

    def __post_init__(self):
        if self.clip_threshold <= 0:
            raise ConfigurationError(f"clip_threshold must be positive, got {self.clip_threshold}")
        if self.noise_multiplier < 0:
            raise ConfigurationError(
                f"noise_multiplier must be nonnegative, got {self.noise_multiplier}"
            )
        if not 0.0 < self.sample_rate <= 1.0:
            raise ConfigurationError(f"sample_rate must be in (0, 1], got {self.sample_rate}")
        if self.target_epsilon <= 0:
            raise ConfigurationError(f"target_epsilon must be positive, got {self.target_epsilon}")
        if not 0.0 < self.target_delta < 1.0:
            raise ConfigurationError(f"target_delta must be in (0, 1), got {self.target_delta}")


def calibrate_config_sigma(config: DPConfig, steps: int, tol: float = 1e-3) -> float:
    """Noise multiplier meeting ``config``'s epsilon target over ``steps``."""
    return calibrate_sigma(
        config.sample_rate, steps, config.target_epsilon, config.target_delta, tol=tol
    )


@dataclass
class PrivacyLedger:
    """Running record of sanitized releases for one training run.

    Accumulated Renyi divergences at every tracked order grow linearly with
    the recorded step count; epsilon queries convert the accumulated vector
    at the config's delta (or any delta passed in). ``would_exceed`` lets a
    trainer refuse work before spending budget rather than after.
    """

    config: DPConfig
    steps: int = 0
    orders: tuple[float, ...] = field(default=DEFAULT_ORDERS, repr=False)

    def __post_init__(self):
        self._rdp_per_step = np.array(
            [rdp_step(self.config.sample_rate, self.config.noise_multiplier, a) for a in self.orders]
        )

    def record_step(self, count: int = 1) -> None:
        if count < 0:
            raise ConfigurationError("cannot record a negative step count")
        self.steps += count

    def accumulated_rdp(self) -> np.ndarray:
        return self.steps * self._rdp_per_step

    def epsilon(self, delta: float | None = None) -> float:
        delta = self.config.target_delta if delta is None else delta
        return self._epsilon_at(self.steps, delta)

    def epsilon_after(self, extra_steps: int, delta: float | None = None) -> float:
        delta = self.config.target_delta if delta is None else delta
        return self._epsilon_at(self.steps + extra_steps, delta)

    def would_exceed(self, budget_epsilon: float | None = None, extra_steps: int = 1) -> bool:
        budget = self.config.target_epsilon if budget_epsilon is None else budget_epsilon
        return self.epsilon_after(extra_steps) > budget

    def _epsilon_at(self, steps: int, delta: float) -> float:
        if steps == 0:
            return 0.0
        if self.config.noise_multiplier == 0.0:
            return math.inf
        eps, _ = rdp_to_epsilon(steps * self._rdp_per_step, self.orders, delta)
        return eps

    def state(self) -> dict:
        return {
            "clip_threshold": self.config.clip_threshold,
            "noise_multiplier": self.config.noise_multiplier,
            "sample_rate": self.config.sample_rate,
            "target_epsilon": self.config.target_epsilon,
            "target_delta": self.config.target_delta,
            "steps": self.steps,
        }

    @classmethod
    def from_state(cls, state: dict) -> "PrivacyLedger":
        cfg = DPConfig(
            clip_threshold=float(state["clip_threshold"]),
            noise_multiplier=float(state["noise_multiplier"]),
            sample_rate=float(state["sample_rate"]),
            target_epsilon=float(state["target_epsilon"]),
            target_delta=float(state["target_delta"]),
        )
        return cls(config=cfg, steps=int(state["steps"]))
