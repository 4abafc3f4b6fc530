"""Stand-alone verifications of the sampling-complexity and compounding-error claims.

Two closed forms anchor this module: collecting at least one sample of every
timestep of an n-step trajectory by i.i.d. draws takes n * H_n draws in
expectation (coupon collector), and an autoregressive rollout whose steps each
fail independently with probability p goes off course with probability
1 - (1 - p)^n. The general at-least-m-per-timestep case is estimated by Monte
Carlo only; its known Theta(n log n + m n log log n) growth is an asymptotic
statement, not a testable equality.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .pathworld import Trajectory


@dataclass(frozen=True)
class CoverageReport:
    """Monte Carlo estimate of draws needed for m-fold coverage of n timesteps."""

    n: int
    m: int
    trials: int
    mean_draws: float
    exact_mean: float | None  # n * H_n, available for m = 1

    def __post_init__(self):
        if self.mean_draws < self.n * self.m:
            raise ConfigurationError("coverage cannot finish in fewer than n*m draws")


def harmonic(n: int) -> float:
    return float(np.sum(1.0 / np.arange(1, n + 1)))


def expected_coverage_draws(n: int, m: int, trials: int,
                            rng: np.random.Generator) -> CoverageReport:
    """Simulate i.i.d. uniform draws over n timesteps until each has >= m hits.

    All trials advance in lockstep, one draw per still-unfinished trial per
    round, so the simulation is a handful of vector ops per round.
    """
    if n < 1 or m < 1:
        raise ConfigurationError("n and m must be >= 1")
    if trials < 1000:
        raise ConfigurationError("use at least 1000 trials for a stable mean")
    counts = np.zeros((trials, n), dtype=np.int64)
    draws = np.zeros(trials, dtype=np.int64)
    unfinished = np.arange(trials)
    while unfinished.size:
        hits = rng.integers(0, n, size=unfinished.size)
        counts[unfinished, hits] += 1
        draws[unfinished] += 1
        still = counts[unfinished].min(axis=1) < m
        unfinished = unfinished[still]
    exact = n * harmonic(n) if m == 1 else None
    return CoverageReport(n, m, trials, float(draws.mean()), exact)


def offcourse_probability(p_step: float, n: int) -> float:
    """Probability that an n-step rollout with per-step failure ``p_step`` ever derails."""
    if not 0.0 <= p_step <= 1.0:
        raise ConfigurationError(f"per-step probability {p_step} outside [0, 1]")
    if n < 0:
        raise ConfigurationError("step count must be nonnegative")
    return 1.0 - (1.0 - p_step) ** n


def timestep_histogram(generated, length: int) -> np.ndarray:
    """Counts of generated samples per trajectory timestep 1..length.

    Accepts either an integer array of timestep labels or a list of
    trajectories (whose every row counts at its own timestep). The empty set
    yields the zero vector.
    """
    if length < 1:
        raise ConfigurationError("length must be >= 1")
    if isinstance(generated, np.ndarray) or (generated and not isinstance(generated[0], Trajectory)):
        labels = np.asarray(generated, dtype=np.int64)
    else:
        parts = [t.timesteps for t in generated]
        labels = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
    if labels.size == 0:
        return np.zeros(length, dtype=np.int64)
    if labels.min() < 1 or labels.max() > length:
        raise ConfigurationError("timestep labels outside 1..length")
    return np.bincount(labels - 1, minlength=length)
