"""Minimal float64 MLP toolkit: forward pass, hand-rolled backprop, Adam, MSE training.

Everything runs in numpy float64 on purpose. The models here are tiny (a few
128-wide layers on 2-D problems), training must be bit-reproducible for a
fixed seed and data order, and 64-bit precision keeps the finite-difference
gradient checks in the test suite sharp.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InputError, TrainingError

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# sinusoidal embeddings


def time_embed(t: int | float | np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal positional embedding with interleaved (sin, cos) pairs.

    Pair k of the output is ``(sin(t * w_k), cos(t * w_k))`` with
    ``w_k = 10000**(-2k/dim)``, so every entry lies in [-1, 1] and t=0 maps
    to (0, 1, 0, 1, ...). Used both for diffusion-step and trajectory-timestep
    conditioning.
    """
    if dim < 2 or dim % 2 != 0:
        raise ConfigurationError(f"embedding dim must be even and >= 2, got {dim}")
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    k = np.arange(dim // 2, dtype=np.float64)
    freqs = 10000.0 ** (-2.0 * k / dim)
    ang = t_arr[:, None] * freqs[None, :]
    out = np.empty((t_arr.shape[0], dim), dtype=np.float64)
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out[0] if np.ndim(t) == 0 else out


# ---------------------------------------------------------------------------
# MLP parameters


def param_count(sizes: tuple[int, ...]) -> int:
    return sum(fi * fo + fo for fi, fo in zip(sizes[:-1], sizes[1:]))


def _views(sizes: tuple[int, ...], vec: np.ndarray):
    """Reshape one flat vector into per-layer (weight, bias) views."""
    weights, biases = [], []
    off = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(vec[off : off + fan_in * fan_out].reshape(fan_out, fan_in))
        off += fan_in * fan_out
        biases.append(vec[off : off + fan_out])
        off += fan_out
    return weights, biases


class Mlp:
    """Fully connected ReLU network stored as one flat float64 vector.

    ``weights[i]`` and ``biases[i]`` are views into ``flat``, so optimizer
    updates on the flat vector are immediately visible layer-wise and vice
    versa. Hidden layers use ReLU, the output layer is linear.
    """

    __slots__ = ("sizes", "flat", "weights", "biases")

    def __init__(self, sizes, flat: np.ndarray):
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ConfigurationError(f"bad MLP layer sizes {sizes}")
        n = param_count(sizes)
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        if flat.shape != (n,):
            raise ConfigurationError(
                f"flat parameter vector has shape {flat.shape}, expected ({n},) for sizes {sizes}"
            )
        self.sizes = sizes
        self.flat = flat
        self.weights, self.biases = _views(sizes, flat)

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def copy(self) -> "Mlp":
        return Mlp(self.sizes, self.flat.copy())

    def param_path(self, flat_index: int) -> str:
        """Human-readable location of a flat index, e.g. 'layer1.weight[3,7]'."""
        off = 0
        for i, (fi, fo) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            if flat_index < off + fi * fo:
                r, c = divmod(flat_index - off, fi)
                return f"layer{i}.weight[{r},{c}]"
            off += fi * fo
            if flat_index < off + fo:
                return f"layer{i}.bias[{flat_index - off}]"
            off += fo
        return f"flat[{flat_index}]"


def mlp_init(sizes, rng: np.random.Generator) -> Mlp:
    """Uniform fan-in init: every weight and bias in +-sqrt(1/fan_in)."""
    sizes = tuple(int(s) for s in sizes)
    flat = np.empty(param_count(sizes), dtype=np.float64)
    weights, biases = _views(sizes, flat)
    for fan_in, w, b in zip(sizes[:-1], weights, biases):
        bound = np.sqrt(1.0 / fan_in)
        w[...] = rng.uniform(-bound, bound, w.shape)
        b[...] = rng.uniform(-bound, bound, b.shape)
    return Mlp(sizes, flat)


def mlp_apply(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    """Deterministic forward pass; accepts a single vector or a (batch, in) matrix."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != mlp.in_dim:
        raise ConfigurationError(
            f"input of shape {x.shape} does not match MLP input dim {mlp.in_dim}"
        )
    if not np.isfinite(X).all():
        raise InputError("non-finite values in MLP input")
    h = X
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = h @ w.T + b
        if i < last:
            np.maximum(h, 0.0, out=h)
    return h[0] if single else h


def _forward_cache(mlp: Mlp, X: np.ndarray):
    """Forward pass keeping post-activation values for backprop."""
    acts = [X]
    h = X
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = h @ w.T + b
        if i < last:
            np.maximum(h, 0.0, out=h)
            acts.append(h)
    return h, acts


def mlp_grad(mlp: Mlp, acts: list[np.ndarray], delta: np.ndarray) -> np.ndarray:
    """Backprop ``delta = dLoss/dOutput`` (batch, out) into a flat parameter gradient."""
    grad = np.empty_like(mlp.flat)
    gws, gbs = _views(mlp.sizes, grad)
    for i in range(len(mlp.weights) - 1, -1, -1):
        np.matmul(delta.T, acts[i], out=gws[i])
        np.sum(delta, axis=0, out=gbs[i])
        if i > 0:
            delta = (delta @ mlp.weights[i]) * (acts[i] > 0)
    return grad


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Adam moment buffers mirroring one flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    _scratch: np.ndarray | None = None  # update workspace, allocated lazily


def adam_init(mlp: Mlp, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0) -> AdamState:
    return AdamState(np.zeros_like(mlp.flat), np.zeros_like(mlp.flat), 0,
                     lr, beta1, beta2, eps, weight_decay)


def adam_step(state: AdamState, mlp: Mlp, grad: np.ndarray,
              freeze_mask: np.ndarray | None = None) -> None:
    """One bias-corrected Adam update, in place on ``mlp.flat``.

    Equivalent to the textbook update
        m_hat = m / (1 - b1^t);  v_hat = v / (1 - b2^t)
        theta -= lr * m_hat / (sqrt(v_hat) + eps)
    with the bias corrections folded into scalars so the hot loop is a few
    in-place vector ops. ``freeze_mask`` marks parameters whose update is
    forced to exactly zero (the moments still track, the value never moves).
    """
    if grad.shape != mlp.flat.shape:
        raise ConfigurationError(
            f"gradient shape {grad.shape} does not match parameter shape {mlp.flat.shape}"
        )
    if not np.isfinite(grad).all():
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise TrainingError(f"non-finite gradient at {mlp.param_path(bad)}")
    if state.weight_decay != 0.0:
        grad = grad + state.weight_decay * mlp.flat
    if state._scratch is None or state._scratch.shape != grad.shape:
        state._scratch = np.empty_like(grad)
    work = state._scratch
    state.step += 1
    # m <- b1 m + (1 - b1) g ; v <- b2 v + (1 - b2) g^2
    state.m *= state.beta1
    np.multiply(grad, 1.0 - state.beta1, out=work)
    state.m += work
    state.v *= state.beta2
    np.multiply(grad, grad, out=work)
    work *= 1.0 - state.beta2
    state.v += work
    # update = lr * c1 * m / (c2 * sqrt(v) + eps), c1/c2 the bias corrections
    c1 = 1.0 / (1.0 - state.beta1 ** state.step)
    c2 = 1.0 / np.sqrt(1.0 - state.beta2 ** state.step)
    np.sqrt(state.v, out=work)
    work *= c2
    work += state.eps
    np.divide(state.m, work, out=work)
    work *= state.lr * c1
    if freeze_mask is not None:
        work[freeze_mask] = 0.0
    mlp.flat -= work


# ---------------------------------------------------------------------------
# MSE / behavioral-cloning training


def mse_loss_grad(mlp: Mlp, X: np.ndarray, Y: np.ndarray):
    """Loss ``mean_b ||f(x_b) - y_b||^2`` and its flat parameter gradient."""
    out, acts = _forward_cache(mlp, X)
    diff = out - Y
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    delta = (2.0 / X.shape[0]) * diff
    return loss, mlp_grad(mlp, acts, delta)


def bc_train_epoch(policy: Mlp, adam: AdamState, X: np.ndarray, Y: np.ndarray,
                   batch_size: int, rng: np.random.Generator,
                   penalty=None, freeze_mask: np.ndarray | None = None) -> float:
    """One full shuffled minibatch pass of MSE regression. Returns the mean loss.

    ``penalty``, if given, is called as ``penalty(policy)`` once per minibatch
    and must return ``(extra_loss, extra_flat_grad)``; used for EWC-style
    regularizers. An empty dataset is a warned no-op returning 0.0.
    """
    n = X.shape[0]
    if n == 0:
        log.warning("bc_train_epoch: empty dataset, nothing to train on")
        return 0.0
    if Y.shape[0] != n:
        raise ConfigurationError(f"X has {n} rows but Y has {Y.shape[0]}")
    if X.shape[1] != policy.in_dim or Y.shape[1] != policy.out_dim:
        raise ConfigurationError(
            f"data dims ({X.shape[1]} -> {Y.shape[1]}) do not match policy "
            f"({policy.in_dim} -> {policy.out_dim})"
        )
    order = rng.permutation(n)
    total = 0.0
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        loss, grad = mse_loss_grad(policy, X[idx], Y[idx])
        if penalty is not None:
            extra_loss, extra_grad = penalty(policy)
            loss += extra_loss
            grad += extra_grad
        adam_step(adam, policy, grad, freeze_mask)
        total += loss * idx.size
    return total / n


def mse_fisher_diag(mlp: Mlp, X: np.ndarray, Y: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Diagonal Fisher proxy: mean over samples of squared per-sample MSE gradients.

    For an MLP, the per-sample weight gradient is the outer product of the
    backpropagated delta and the layer input, so its elementwise square
    factorizes and the mean over the batch reduces to one matmul of squared
    factors per layer.
    """
    n = X.shape[0]
    if n == 0:
        return np.zeros_like(mlp.flat)
    acc = np.zeros_like(mlp.flat)
    aws, abs_ = _views(mlp.sizes, acc)
    for start in range(0, n, chunk):
        Xc, Yc = X[start : start + chunk], Y[start : start + chunk]
        out, acts = _forward_cache(mlp, Xc)
        delta = 2.0 * (out - Yc)  # per-sample dLoss_i/dOutput, no batch averaging
        for i in range(len(mlp.weights) - 1, -1, -1):
            aws[i] += (delta * delta).T @ (acts[i] * acts[i])
            abs_[i] += (delta * delta).sum(axis=0)
            if i > 0:
                delta = (delta @ mlp.weights[i]) * (acts[i] > 0)
    acc /= n
    return acc
