"""Denoising diffusion model for low-dimensional vectors.

The forward process corrupts a sample with Gaussian noise according to a
cosine variance schedule; an MLP is trained to predict the injected noise
from the corrupted sample, the diffusion step and (optionally) a trajectory
timestep; ancestral sampling runs the learned reverse chain.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .errors import ConfigurationError, GenerationError, InputError
from .nn import AdamState, Mlp, _forward_cache, adam_step, mlp_apply, mlp_grad, mlp_init, time_embed


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step noise tables.

    ``betas[t-1]`` is the forward noise variance at step t (1-based),
    ``alphas = 1 - betas`` and ``alpha_bars[t]`` is the cumulative product of
    alphas with ``alpha_bars[0] = 1``.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.betas)

    def descriptor(self) -> dict:
        return {"steps": self.steps}


def cosine_schedule(steps: int, s: float = 0.008, max_beta: float = 0.999) -> DiffusionSchedule:
    """Cosine noise schedule.

    alpha_bar follows f(t)/f(0) with f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2),
    betas are the implied per-step ratios clipped to ``max_beta``, and the
    stored alpha_bar is recomputed as the cumulative product of the clipped
    alphas so that iterating the per-step corruption exactly matches the
    closed form used by :func:`q_sample`.
    """
    if steps < 1:
        raise ConfigurationError(f"diffusion step count must be >= 1, got {steps}")
    t = np.arange(steps + 1, dtype=np.float64)
    f = np.cos(((t / steps + s) / (1.0 + s)) * (np.pi / 2.0)) ** 2
    raw_bar = f / f[0]
    betas = np.minimum(1.0 - raw_bar[1:] / raw_bar[:-1], max_beta)
    alphas = 1.0 - betas
    alpha_bars = np.concatenate(([1.0], np.cumprod(alphas)))
    return DiffusionSchedule(betas, alphas, alpha_bars)


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """Closed-form forward corruption ``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``.

    ``t`` may be a scalar or a per-row array; ``t = 0`` returns ``x0`` exactly.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr > sched.steps):
        raise InputError(f"diffusion step {t} outside [0, {sched.steps}]")
    ab = sched.alpha_bars[t_arr]
    if x0.ndim == 2 and np.ndim(ab) == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# denoiser


@dataclass
class Denoiser:
    """Noise-prediction MLP over ``[x | embed(step) | embed(trajectory timestep)]``."""

    net: Mlp
    data_dim: int
    step_dim: int = 16
    traj_dim: int = 16

    def copy(self) -> "Denoiser":
        return Denoiser(self.net.copy(), self.data_dim, self.step_dim, self.traj_dim)


def denoiser_init(data_dim: int, hidden, rng: np.random.Generator,
                  step_dim: int = 16, traj_dim: int = 16) -> Denoiser:
    net = mlp_init((data_dim + step_dim + traj_dim, *hidden, data_dim), rng)
    return Denoiser(net, data_dim, step_dim, traj_dim)


def _denoiser_input(den: Denoiser, x: np.ndarray, t, j) -> np.ndarray:
    n = x.shape[0]
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    j_arr = np.broadcast_to(np.asarray(j, dtype=np.float64), (n,))
    return np.hstack([x, time_embed(t_arr, den.step_dim), time_embed(j_arr, den.traj_dim)])


def predict_eps(den: Denoiser, x: np.ndarray, t, j) -> np.ndarray:
    """Predicted noise for corrupted samples ``x`` at diffusion step(s) ``t``."""
    return mlp_apply(den.net, _denoiser_input(den, x, t, j))


def denoise_loss(den: Denoiser, x0: np.ndarray, j, sched: DiffusionSchedule,
                 rng: np.random.Generator, t=None, eps=None):
    """One-batch noise-prediction loss ``mean_b ||eps - eps_hat||^2`` and flat grads.

    The diffusion step is drawn uniformly from 1..T and the noise from N(0, I)
    unless pinned via ``t``/``eps`` (the gradient-check tests pin both).
    """
    X0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n = X0.shape[0]
    if t is None:
        t = rng.integers(1, sched.steps + 1, size=n)
    if eps is None:
        eps = rng.standard_normal(X0.shape)
    xt = q_sample(X0, t, eps, sched)
    inp = _denoiser_input(den, xt, t, j)
    out, acts = _forward_cache(den.net, inp)
    diff = out - eps
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    grad = mlp_grad(den.net, acts, (2.0 / n) * diff)
    return loss, grad


def train_denoiser(den: Denoiser, adam: AdamState, x0s: np.ndarray, js: np.ndarray,
                   steps: int, batch_size: int, sched: DiffusionSchedule,
                   rng: np.random.Generator) -> list[float]:
    """Fixed-step-budget training on (sample, trajectory-timestep) pairs.

    Minibatches are drawn with replacement; returns the per-step losses.
    """
    n = x0s.shape[0]
    if n == 0:
        raise ConfigurationError("cannot train a denoiser on an empty dataset")
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, n, size=batch_size)
        loss, grad = denoise_loss(den, x0s[idx], js[idx], sched, rng)
        adam_step(adam, den.net, grad)
        losses.append(loss)
    return losses


def generate(den: Denoiser, j, sched: DiffusionSchedule, rng: np.random.Generator,
             count: int | None = None) -> np.ndarray:
    """Ancestral sampling conditioned on trajectory timestep(s) ``j``.

    Runs the reverse chain from x_T ~ N(0, I):
        x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sqrt(beta_t) z
    with z = 0 on the final step. ``j`` is either a scalar (then ``count``
    rows are drawn) or a per-row array of conditioning timesteps.
    """
    j_arr = np.atleast_1d(np.asarray(j, dtype=np.float64))
    if count is not None:
        if j_arr.size != 1:
            raise ConfigurationError("count may only be given with a scalar timestep")
        j_arr = np.full(count, float(j_arr[0]))
    n = j_arr.shape[0]
    x = rng.standard_normal((n, den.data_dim))
    for t in range(sched.steps, 0, -1):
        eps_hat = predict_eps(den, x, t, j_arr)
        beta = sched.betas[t - 1]
        coef = beta / np.sqrt(1.0 - sched.alpha_bars[t])
        x = (x - coef * eps_hat) / np.sqrt(sched.alphas[t - 1])
        if t > 1:
            x = x + np.sqrt(beta) * rng.standard_normal(x.shape)
        if not np.isfinite(x).all():
            raise GenerationError(f"non-finite sample while denoising at step {t}")
    return x


def l1_denoise_error(den: Denoiser, x0s: np.ndarray, js, sched: DiffusionSchedule,
                     rng: np.random.Generator, predict=None) -> float:
    """L1 variant of the training loss: ``mean_b ||eps - eps_hat||_1``.

    Used as the generation-quality proxy on held-out data. ``predict``
    overrides the denoiser with a callable ``(x_t, t, j) -> eps_hat``.
    """
    X0 = np.atleast_2d(np.asarray(x0s, dtype=np.float64))
    n = X0.shape[0]
    t = rng.integers(1, sched.steps + 1, size=n)
    eps = rng.standard_normal(X0.shape)
    xt = q_sample(X0, t, eps, sched)
    eps_hat = predict(xt, t, js) if predict is not None else predict_eps(den, xt, t, js)
    return float(np.mean(np.sum(np.abs(eps - eps_hat), axis=1)))


def save_denoiser(path, den: Denoiser, sched: DiffusionSchedule, meta: dict | None = None) -> None:
    full = {"denoiser": {"data_dim": den.data_dim, "step_dim": den.step_dim,
                         "traj_dim": den.traj_dim},
            "schedule": sched.descriptor()}
    full.update(meta or {})
    checkpoint.save_mlp(path, den.net, full)


def load_denoiser(path) -> tuple[Denoiser, dict]:
    net, meta = checkpoint.load_mlp(path)
    d = meta["denoiser"]
    return Denoiser(net, int(d["data_dim"]), int(d["step_dim"]), int(d["traj_dim"])), meta
