"""Continual-learning metrics and the small statistics kit behind them.

The success matrix S has one row per task and one column per evaluation point
(column 0 is measured before any training, column t after stream bucket t).
Average success reads the final column; forgetting and forward transfer
additionally use the diagonal, so they require a sequential stream where
bucket t trained task t. Student-t quantiles are computed in-house via the
continued-fraction incomplete beta so the package has no statistics
dependency; the tests cross-check them against scipy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffusion import Denoiser, DiffusionSchedule, l1_denoise_error
from .errors import ConfigurationError


def _check_matrix(S: np.ndarray) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2:
        raise ConfigurationError(f"success matrix must be 2-D, got shape {S.shape}")
    if np.any(S < 0.0) or np.any(S > 1.0):
        raise ConfigurationError("success rates must lie in [0, 1]")
    return S


def avg_success(S: np.ndarray) -> float:
    """Mean over tasks of the final-column success rates."""
    S = _check_matrix(S)
    return float(S[:, -1].mean())


def forgetting(S: np.ndarray):
    """Per-task drop between just-after-training and end-of-stream success.

    F_i = s_i(i) - s_i(N). Negative values indicate backward transfer.
    Returns (per-task array, mean).
    """
    S = _check_matrix(S)
    n = S.shape[0]
    if S.shape[1] != n + 1:
        raise ConfigurationError(
            "forgetting needs a square sequential run: one evaluation column per "
            f"task plus the initial column, got {S.shape}"
        )
    per_task = np.array([S[i, i + 1] - S[i, -1] for i in range(n)])
    return per_task, float(per_task.mean())


def forward_transfer(S: np.ndarray, s_ref: np.ndarray):
    """Normalized benefit of prior training on each new task.

    FT_i = (D_i - D_i_ref) / (1 - D_i_ref) with D_i = (s_i(i) + s_i(i-1)) / 2
    and D_i_ref = s_ref_i / 2. Tasks whose reference makes the denominator
    vanish are reported as NaN and excluded from the mean.
    Returns (per-task array, mean).
    """
    S = _check_matrix(S)
    n = S.shape[0]
    if S.shape[1] != n + 1:
        raise ConfigurationError(f"forward transfer needs shape (N, N+1), got {S.shape}")
    s_ref = np.asarray(s_ref, dtype=np.float64)
    if s_ref.shape != (n,):
        raise ConfigurationError(f"reference vector must have {n} entries")
    per_task = np.empty(n)
    for i in range(n):
        d = 0.5 * (S[i, i + 1] + S[i, i])
        d_ref = 0.5 * s_ref[i]
        per_task[i] = np.nan if d_ref >= 1.0 else (d - d_ref) / (1.0 - d_ref)
    valid = per_task[~np.isnan(per_task)]
    mean = float(valid.mean()) if valid.size else float("nan")
    return per_task, mean


# ---------------------------------------------------------------------------
# Student-t machinery (continued-fraction incomplete beta, Lentz's method)


def _betacf(a: float, b: float, x: float) -> float:
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise ConfigurationError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ConfigurationError(f"x={x} outside [0, 1]")
    if x in (0.0, 1.0):
        return x
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log(1.0 - x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_cdf(t: float, dof: float) -> float:
    if dof <= 0:
        raise ConfigurationError("degrees of freedom must be positive")
    if t == 0.0:
        return 0.5
    x = dof / (dof + t * t)
    p = 0.5 * betainc(dof / 2.0, 0.5, x)
    return 1.0 - p if t > 0 else p


def t_ppf(p: float, dof: float) -> float:
    """Inverse CDF by bisection; accurate to ~1e-12 which is plenty for CIs."""
    if not 0.0 < p < 1.0:
        raise ConfigurationError(f"quantile level {p} outside (0, 1)")
    if p == 0.5:
        return 0.0
    sign = 1.0 if p > 0.5 else -1.0
    target = p if p > 0.5 else 1.0 - p
    lo, hi = 0.0, 1.0
    while t_cdf(hi, dof) < target:
        hi *= 2.0
        if hi > 1e12:
            raise ConfigurationError("t quantile bracket failed")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if t_cdf(mid, dof) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12 * max(1.0, hi):
            break
    return sign * 0.5 * (lo + hi)


def ci90(values) -> tuple[float, float]:
    """Two-sided 90% Student-t confidence interval, returned as (mean, half-width)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ConfigurationError("a confidence interval needs at least 2 values")
    mean = float(v.mean())
    sd = float(v.std(ddof=1))
    half = t_ppf(0.95, v.size - 1) * sd / math.sqrt(v.size)
    return mean, half


@dataclass(frozen=True)
class WelchResult:
    t: float
    dof: float
    p: float
    degenerate: bool = False  # both samples had zero variance


def welch_test(a, b) -> WelchResult:
    """Welch's two-sided t-test with Welch-Satterthwaite degrees of freedom."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ConfigurationError("both samples need at least 2 values")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0.0 and vb == 0.0:
        equal = float(a.mean()) == float(b.mean())
        return WelchResult(0.0 if equal else math.inf * np.sign(a.mean() - b.mean()),
                           float(a.size + b.size - 2), 1.0 if equal else 0.0, True)
    sa, sb = va / a.size, vb / b.size
    t = float((a.mean() - b.mean()) / math.sqrt(sa + sb))
    dof = (sa + sb) ** 2 / (sa ** 2 / (a.size - 1) + sb ** 2 / (b.size - 1))
    p = 2.0 * (1.0 - t_cdf(abs(t), dof))
    return WelchResult(t, float(dof), p)


# ---------------------------------------------------------------------------
# generation quality


def generation_quality(den: Denoiser, x0s: np.ndarray, js, sched: DiffusionSchedule,
                       rng: np.random.Generator, predict=None) -> float | None:
    """L1 noise-prediction error on held-out samples; None when the set is empty.

    The held-out data is kept for measurement only and never replayed, so it
    sits outside the bounded-memory budget of the learner itself.
    """
    x = np.atleast_2d(np.asarray(x0s, dtype=np.float64))
    if x.shape[0] == 0:
        return None
    return l1_denoise_error(den, x, js, sched, rng, predict=predict)
