"""Continual imitation-learning methods and the per-stream run orchestrator.

Replay methods (t-DGR, DGR, CRIL) augment each stream bucket with data sampled
from the previous bucket's generator and policy snapshots so that the fraction
of generated training samples equals the replay ratio r: a bucket with |D|
real trajectories receives n = r|D|/(1-r) generated ones. t-DGR samples each
trajectory timestep j separately from a timestep-conditioned generator (exact
per-timestep coverage), DGR draws the same number of states i.i.d. from an
unconditioned generator, and CRIL rolls trajectories out autoregressively from
a start-state generator through a learned dynamics model. The regularization
and isolation baselines (oEWC, PackNet) consolidate after every bucket, which
coincides with task boundaries on sequential streams and degrades to
fixed-interval consolidation on blurry ones.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .diffusion import (Denoiser, DiffusionSchedule, cosine_schedule, denoiser_init,
                        generate, train_denoiser)
from .errors import CapacityError, ConfigurationError, TdgrError
from .metrics import generation_quality
from .nn import (AdamState, Mlp, adam_init, bc_train_epoch, mlp_apply, mlp_init,
                 mse_fisher_diag, _views)
from .pathworld import Stream, TaskSpec, Trajectory, evaluate_policy
from .rng import substream

REPLAY_METHODS = ("tdgr", "dgr", "cril")
METHODS = ("finetune", "multitask", "oewc", "packnet") + REPLAY_METHODS


@dataclass
class MethodConfig:
    """Declarative description of one continual-learning run."""

    method: str
    replay_ratio: float = 0.9
    policy_epochs: int = 50
    multitask_epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-4
    policy_hidden: tuple[int, ...] = (128, 128, 128)
    diffusion_steps: int = 2000
    diffusion_warmup: int = 5000
    diffusion_timesteps: int = 200
    denoiser_hidden: tuple[int, ...] = (128, 128, 128)
    step_embed_dim: int = 16
    traj_embed_dim: int = 16
    dyn_hidden: tuple[int, ...] = (64, 64)
    ewc_fisher_multiplier: float = 100.0
    packnet_prune_fraction: float = 0.75
    packnet_retrain_epochs: int | None = None  # defaults to half the training epochs
    eval_episodes: int = 100

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; know {METHODS}")
        if not 0.0 <= self.replay_ratio < 1.0:
            raise ConfigurationError(
                f"replay ratio must lie in [0, 1); r={self.replay_ratio} would need "
                "infinitely many generated samples"
            )
        for name in ("policy_epochs", "multitask_epochs", "batch_size", "diffusion_steps",
                     "diffusion_timesteps", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.diffusion_warmup < 0 or self.packnet_retrain_epochs is not None and self.packnet_retrain_epochs < 0:
            raise ConfigurationError("budgets must be nonnegative")
        if not 0.0 < self.packnet_prune_fraction < 1.0:
            raise ConfigurationError("prune fraction must be in (0, 1)")

    @property
    def retrain_epochs(self) -> int:
        if self.packnet_retrain_epochs is not None:
            return self.packnet_retrain_epochs
        return self.policy_epochs // 2

    def to_dict(self) -> dict:
        return {
            k: (list(v) if isinstance(v, tuple) else v)
            for k, v in self.__dict__.items()
        }


class BoundaryProbe:
    """Counted access to the stream's task-boundary metadata.

    Methods that rely on knowing which task a bucket belongs to (PackNet's
    per-task masks) must read it through this probe; replay methods never
    touch it, which a run records via ``queries``.
    """

    def __init__(self, bucket_tasks: list[int | None]):
        self._tasks = list(bucket_tasks)
        self.queries = 0

    def bucket_task(self, bucket: int) -> int | None:
        self.queries += 1
        return self._tasks[bucket]


# ---------------------------------------------------------------------------
# sample bookkeeping


def to_gen_space(states: np.ndarray, onehots: np.ndarray) -> np.ndarray:
    """Map (state, task one-hot) rows from [0,1]-ish coordinates into [-1, 1]."""
    return 2.0 * np.hstack([states, onehots]) - 1.0


def from_gen_space(x: np.ndarray, task_count: int):
    """Inverse of :func:`to_gen_space`; the task block is projected to a one-hot by argmax."""
    y = 0.5 * (np.asarray(x, dtype=np.float64) + 1.0)
    states = y[:, :2]
    idx = np.argmax(y[:, 2:], axis=1)
    onehots = np.eye(task_count)[idx]
    return states, onehots, idx


@dataclass
class GeneratedStates:
    """Flat i.i.d. replay samples (DGR's output): no trajectory structure."""

    states: np.ndarray
    onehots: np.ndarray
    actions: np.ndarray

    def __len__(self) -> int:
        return self.states.shape[0]


def policy_arrays(trajs: list[Trajectory], task_count: int,
                  extra: GeneratedStates | None = None):
    """Stack (state + task one-hot -> action) training pairs from trajectories."""
    eye = np.eye(task_count)
    xs, ys = [], []
    for t in trajs:
        onehot = t.task_onehot if t.task_onehot is not None \
            else np.repeat(eye[t.task_id][None, :], len(t), axis=0)
        xs.append(np.hstack([t.states, onehot]))
        ys.append(t.actions)
    if extra is not None and len(extra):
        xs.append(np.hstack([extra.states, extra.onehots]))
        ys.append(extra.actions)
    if not xs:
        return np.zeros((0, 2 + task_count)), np.zeros((0, 2))
    return np.vstack(xs), np.vstack(ys)


def diffusion_arrays(trajs: list[Trajectory], task_count: int,
                     extra: GeneratedStates | None = None, constant_timestep: bool = False):
    """Stack normalized (sample, trajectory timestep) pairs for generator training.

    ``constant_timestep`` zeroes the conditioning (DGR trains its generator
    without trajectory-timestep information).
    """
    eye = np.eye(task_count)
    xs, js = [], []
    for t in trajs:
        onehot = t.task_onehot if t.task_onehot is not None \
            else np.repeat(eye[t.task_id][None, :], len(t), axis=0)
        xs.append(to_gen_space(t.states, onehot))
        js.append(t.timesteps)
    if extra is not None and len(extra):
        xs.append(to_gen_space(extra.states, extra.onehots))
        js.append(np.zeros(len(extra), dtype=np.int64))
    x0 = np.vstack(xs) if xs else np.zeros((0, 2 + task_count))
    j = np.concatenate(js) if js else np.zeros(0, dtype=np.int64)
    if constant_timestep:
        j = np.zeros_like(j)
    return x0, j


# ---------------------------------------------------------------------------
# replay generation


def replay_count(demo_count: int, replay_ratio: float) -> int:
    """Number of trajectories to generate: r|D|/(1-r), rounded to nearest, min 0."""
    if replay_ratio >= 1.0 or replay_ratio < 0.0:
        raise ConfigurationError(
            f"replay ratio {replay_ratio} invalid: the generated-sample count "
            "r|D|/(1-r) requires 0 <= r < 1"
        )
    return max(0, int(round(replay_ratio * demo_count / (1.0 - replay_ratio))))


def tdgr_generate(gen_prev: Denoiser, policy_prev: Mlp, demo_count: int,
                  replay_ratio: float, length: int, task_count: int,
                  sched: DiffusionSchedule, rng: np.random.Generator,
                  row_budget: int = 20000) -> list[Trajectory]:
    """Timestep-conditioned replay: n trajectories, one generator draw per timestep.

    Every timestep j in 1..length receives exactly n samples, each produced by
    the previous generator conditioned on j, the task block projected to a
    one-hot by argmax, and the action labeled by the previous policy.
    """
    n = replay_count(demo_count, replay_ratio)
    if n == 0:
        return []
    states = np.empty((length, n, 2))
    onehots = np.empty((length, n, task_count))
    block = max(1, row_budget // n)
    for j_lo in range(1, length + 1, block):
        j_hi = min(j_lo + block, length + 1)
        js = np.repeat(np.arange(j_lo, j_hi), n)
        x = generate(gen_prev, js, sched, rng)
        s, oh, _ = from_gen_space(x, task_count)
        states[j_lo - 1 : j_hi - 1] = s.reshape(j_hi - j_lo, n, 2)
        onehots[j_lo - 1 : j_hi - 1] = oh.reshape(j_hi - j_lo, n, task_count)
    flat_x = np.hstack([states.reshape(-1, 2), onehots.reshape(-1, task_count)])
    actions = mlp_apply(policy_prev, flat_x).reshape(length, n, 2)
    return [
        Trajectory(int(np.argmax(onehots[:, k].sum(axis=0))), states[:, k].copy(),
                   actions[:, k].copy(), onehots[:, k].copy())
        for k in range(n)
    ]


def dgr_generate(gen_prev: Denoiser, policy_prev: Mlp, count: int, task_count: int,
                 sched: DiffusionSchedule, rng: np.random.Generator,
                 row_budget: int = 20000) -> GeneratedStates:
    """i.i.d. state replay: ``count`` unconditioned draws labeled by the old policy."""
    if count < 0:
        raise ConfigurationError("sample count must be nonnegative")
    if count == 0:
        d = 2 + task_count
        return GeneratedStates(np.zeros((0, 2)), np.zeros((0, task_count)), np.zeros((0, 2)))
    parts_s, parts_o = [], []
    for lo in range(0, count, row_budget):
        chunk = min(row_budget, count - lo)
        x = generate(gen_prev, 0, sched, rng, count=chunk)
        s, oh, _ = from_gen_space(x, task_count)
        parts_s.append(s)
        parts_o.append(oh)
    states = np.vstack(parts_s)
    onehots = np.vstack(parts_o)
    actions = mlp_apply(policy_prev, np.hstack([states, onehots]))
    return GeneratedStates(states, onehots, actions)


def cril_generate(start_gen: Denoiser, dyn, policy_prev: Mlp, n: int, length: int,
                  task_count: int, sched: DiffusionSchedule, rng: np.random.Generator,
                  corrupt_prob: float = 0.0, corrupt_kick: float = 0.5):
    """Autoregressive replay: start states from a generator, then dyn/policy rollout.

    ``dyn`` is an :class:`~tdgr.nn.Mlp` over (state, action) -> next state or
    any callable with the same batch signature. ``corrupt_prob`` injects an
    independent per-step chance of kicking the next state by ``corrupt_kick``,
    which is the hook used to measure compounding error. Trajectories whose
    rollout turns non-finite are frozen at the last finite state and counted.
    Returns ``(trajectories, truncated_count)``.
    """
    if n == 0:
        return [], 0
    dyn_fn = (lambda S, A: mlp_apply(dyn, np.hstack([S, A]))) if isinstance(dyn, Mlp) else dyn
    x = generate(start_gen, 1, sched, rng, count=n)
    s, onehots, _ = from_gen_space(x, task_count)
    states = np.empty((length, n, 2))
    actions = np.empty((length, n, 2))
    dead = np.zeros(n, dtype=bool)
    for t in range(length):
        states[t] = s
        a = mlp_apply(policy_prev, np.hstack([s, onehots]))
        a[dead] = 0.0
        actions[t] = a
        if t == length - 1:
            break
        nxt = np.asarray(dyn_fn(s, a), dtype=np.float64)
        if corrupt_prob > 0.0:
            kicked = rng.random(n) < corrupt_prob
            direction = rng.standard_normal((n, 2))
            direction /= np.linalg.norm(direction, axis=1, keepdims=True)
            nxt = nxt + np.where(kicked[:, None], corrupt_kick * direction, 0.0)
        bad = ~np.isfinite(nxt).all(axis=1)
        if bad.any():
            nxt[bad] = s[bad]  # freeze at the last finite state
            dead |= bad
        nxt[dead] = s[dead]
        s = nxt
    trajs = [
        Trajectory(int(np.argmax(onehots[k])), states[:, k].copy(), actions[:, k].copy(),
                   np.repeat(onehots[k][None, :], length, axis=0))
        for k in range(n)
    ]
    return trajs, int(dead.sum())


def transitions_arrays(trajs: list[Trajectory]):
    """(state, action) -> next-state pairs for dynamics-model training."""
    xs, ys = [], []
    for t in trajs:
        if len(t) < 2:
            continue
        xs.append(np.hstack([t.states[:-1], t.actions[:-1]]))
        ys.append(t.states[1:])
    if not xs:
        return np.zeros((0, 4)), np.zeros((0, 2))
    return np.vstack(xs), np.vstack(ys)


def first_state_arrays(trajs: list[Trajectory], task_count: int):
    """Normalized timestep-1 samples for CRIL's start-state generator."""
    eye = np.eye(task_count)
    rows = []
    for t in trajs:
        onehot = t.task_onehot[0] if t.task_onehot is not None else eye[t.task_id]
        rows.append(to_gen_space(t.states[0][None, :], onehot[None, :])[0])
    return np.asarray(rows) if rows else np.zeros((0, 2 + task_count))


# ---------------------------------------------------------------------------
# oEWC


@dataclass
class FisherInfo:
    """Running-average diagonal Fisher estimate plus the parameter anchor."""

    fisher: np.ndarray
    anchor: np.ndarray
    updates: int = 0


def ewc_penalty(policy: Mlp, info: FisherInfo, multiplier: float):
    """Quadratic pull toward the anchor: (lam/2) sum_k F_k (theta_k - theta*_k)^2."""
    dtheta = policy.flat - info.anchor
    loss = 0.5 * multiplier * float(np.sum(info.fisher * dtheta * dtheta))
    grad = multiplier * info.fisher * dtheta
    return loss, grad


def ewc_train(policy: Mlp, adam: AdamState, info: FisherInfo, multiplier: float,
              X: np.ndarray, Y: np.ndarray, epochs: int, batch_size: int,
              rng: np.random.Generator) -> list[float]:
    """BC training with the single online-EWC penalty term.

    With a zero multiplier (or before the first consolidation) no penalty
    arithmetic runs at all, so the parameter sequence is bit-identical to
    plain finetuning under the same seed.
    """
    penalty = None
    if multiplier != 0.0 and info.updates > 0:
        penalty = lambda p: ewc_penalty(p, info, multiplier)  # noqa: E731
    return [bc_train_epoch(policy, adam, X, Y, batch_size, rng, penalty=penalty)
            for _ in range(epochs)]


def ewc_consolidate(info: FisherInfo, policy: Mlp, X: np.ndarray, Y: np.ndarray) -> None:
    """Refresh the anchor and fold this bucket's Fisher into the running average."""
    f_new = mse_fisher_diag(policy, X, Y)
    info.fisher = (info.updates * info.fisher + f_new) / (info.updates + 1)
    info.anchor = policy.flat.copy()
    info.updates += 1


# ---------------------------------------------------------------------------
# PackNet


@dataclass
class ParamMasks:
    """Per-bucket ownership of policy weights.

    ``owner[k]`` is -2 for biases, -1 for free weights, and the index of the
    owning bucket for frozen weights. Owned weights never change after their
    bucket completes; biases freeze after the first bucket.
    """

    owner: np.ndarray
    bias_frozen: bool = False
    buckets_done: int = 0

    @classmethod
    def fresh(cls, policy: Mlp) -> "ParamMasks":
        owner = np.full(policy.flat.shape, -1, dtype=np.int64)
        marker = np.zeros_like(policy.flat)
        _, bias_views = _views(policy.sizes, marker)
        for b in bias_views:
            b[...] = 1.0
        owner[marker == 1.0] = -2
        return cls(owner)

    @property
    def weight_positions(self) -> np.ndarray:
        return self.owner != -2

    def free_fraction(self) -> float:
        w = self.weight_positions
        return float((self.owner[w] == -1).sum() / w.sum())

    def masked_net(self, policy: Mlp, allowed_buckets) -> Mlp:
        """Copy of the policy with every weight outside ``allowed_buckets`` zeroed."""
        flat = policy.flat.copy()
        allowed = np.asarray(sorted(allowed_buckets), dtype=np.int64)
        keep = np.isin(self.owner, allowed) | (self.owner == -2)
        flat[~keep] = 0.0
        return Mlp(policy.sizes, flat)


def packnet_step(policy: Mlp, adam: AdamState, masks: ParamMasks, bucket_idx: int,
                 X: np.ndarray, Y: np.ndarray, epochs: int, retrain_epochs: int,
                 prune_fraction: float, batch_size: int,
                 rng: np.random.Generator) -> list[float]:
    """One PackNet cycle: train free weights, prune, assign, retrain, freeze.

    Free weights are ranked globally by magnitude after training; the bottom
    ``prune_fraction`` are zeroed and stay free, the rest become this bucket's
    mask and are retrained alone before freezing. Raises
    :class:`~tdgr.errors.CapacityError` once no free weights remain.
    """
    free = masks.owner == -1
    if not free.any():
        raise CapacityError(
            f"no free weights left for bucket {bucket_idx}; PackNet's capacity "
            f"is exhausted after {masks.buckets_done} buckets"
        )
    frozen_phase1 = (masks.owner >= 0) | ((masks.owner == -2) & masks.bias_frozen)
    losses = [bc_train_epoch(policy, adam, X, Y, batch_size, rng, freeze_mask=frozen_phase1)
              for _ in range(epochs)]
    free_idx = np.flatnonzero(masks.owner == -1)
    order = np.argsort(np.abs(policy.flat[free_idx]), kind="stable")
    n_prune = int(round(prune_fraction * free_idx.size))
    pruned = free_idx[order[:n_prune]]
    kept = free_idx[order[n_prune:]]
    policy.flat[pruned] = 0.0
    masks.owner[kept] = bucket_idx
    frozen_phase2 = ~((masks.owner == bucket_idx) | ((masks.owner == -2) & ~masks.bias_frozen))
    losses.extend(bc_train_epoch(policy, adam, X, Y, batch_size, rng, freeze_mask=frozen_phase2)
                  for _ in range(retrain_epochs))
    masks.buckets_done += 1
    if bucket_idx == 0:
        masks.bias_frozen = True
    return losses


# ---------------------------------------------------------------------------
# run orchestration


@dataclass
class RunResult:
    """Full measured output of one (method, seed, stream) run."""

    method: str
    seed: int
    mode: str
    task_count: int
    success_matrix: np.ndarray  # (tasks, buckets + 1)
    bucket_policy_loss: list[list[float]] = field(default_factory=list)
    bucket_diffusion_loss: list[list[float]] = field(default_factory=list)
    quality: dict[int, list[tuple[int, float]]] = field(default_factory=dict)
    boundary_queries: int = 0
    replay_counts: list[int] = field(default_factory=list)
    generated_samples: list[list[list[float]]] = field(default_factory=list)
    truncated_rollouts: int = 0
    wall_clock_sec: float = 0.0
    completed: bool = True
    errors: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict, repr=False)  # in-memory only, not serialized

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "mode": self.mode,
            "task_count": self.task_count,
            "success_matrix": self.success_matrix.tolist(),
            "bucket_policy_loss": self.bucket_policy_loss,
            "bucket_diffusion_loss": self.bucket_diffusion_loss,
            "quality": {str(k): v for k, v in self.quality.items()},
            "boundary_queries": self.boundary_queries,
            "replay_counts": self.replay_counts,
            "generated_samples": self.generated_samples,
            "truncated_rollouts": self.truncated_rollouts,
            "wall_clock_sec": self.wall_clock_sec,
            "completed": self.completed,
            "errors": self.errors,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        return cls(
            method=d["method"], seed=d["seed"], mode=d["mode"], task_count=d["task_count"],
            success_matrix=np.asarray(d["success_matrix"], dtype=np.float64),
            bucket_policy_loss=d["bucket_policy_loss"],
            bucket_diffusion_loss=d["bucket_diffusion_loss"],
            quality={int(k): [tuple(x) for x in v] for k, v in d["quality"].items()},
            boundary_queries=d["boundary_queries"],
            replay_counts=d["replay_counts"],
            generated_samples=d.get("generated_samples", []),
            truncated_rollouts=d.get("truncated_rollouts", 0),
            wall_clock_sec=d["wall_clock_sec"], completed=d["completed"],
            errors=d["errors"], config=d["config"],
        )


def _window_means(values: list[float], window: int = 100) -> list[float]:
    return [float(np.mean(values[i : i + window])) for i in range(0, len(values), window)]


def run_method(mconf: MethodConfig, stream: Stream, tasks: list[TaskSpec], run_seed: int,
               master_seed: int = 0, heldout: list[list[Trajectory]] | None = None,
               collect_generated: int = 0) -> RunResult:
    """Execute one continual-learning run over a stream and fill the success matrix.

    Column 0 of the success matrix is evaluated before any training; column
    t+1 after bucket t. All randomness is drawn from labeled substreams of
    ``(master_seed, run_seed)`` so distinct runs are fully isolated.
    """
    t_start = time.perf_counter()
    n_tasks = stream.task_count
    buckets = stream.buckets
    n_buckets = len(buckets)
    eye = np.eye(n_tasks)
    probe = BoundaryProbe(stream.bucket_tasks)
    data_dim = 2 + n_tasks
    horizon = tasks[0].horizon

    policy = mlp_init((data_dim, *mconf.policy_hidden, 2),
                      substream(master_seed, "policy-init", run_seed))
    adam_pol = adam_init(policy, lr=mconf.learning_rate)
    shuffle_rng = substream(master_seed, "shuffle", run_seed)
    sched = cosine_schedule(mconf.diffusion_timesteps)

    gen = adam_gen = None
    start_gen = adam_start = dyn = adam_dyn = None
    fisher = None
    masks = None
    if mconf.method in ("tdgr", "dgr"):
        gen = denoiser_init(data_dim, mconf.denoiser_hidden,
                            substream(master_seed, "gen-init", run_seed),
                            mconf.step_embed_dim, mconf.traj_embed_dim)
        adam_gen = adam_init(gen.net, lr=mconf.learning_rate)
    elif mconf.method == "cril":
        start_gen = denoiser_init(data_dim, mconf.denoiser_hidden,
                                  substream(master_seed, "gen-init", run_seed),
                                  mconf.step_embed_dim, mconf.traj_embed_dim)
        adam_start = adam_init(start_gen.net, lr=mconf.learning_rate)
        dyn = mlp_init((4, *mconf.dyn_hidden, 2), substream(master_seed, "dyn-init", run_seed))
        adam_dyn = adam_init(dyn, lr=mconf.learning_rate)
    elif mconf.method == "oewc":
        fisher = FisherInfo(np.zeros_like(policy.flat), policy.flat.copy())
    elif mconf.method == "packnet":
        masks = ParamMasks.fresh(policy)

    result = RunResult(mconf.method, run_seed, stream.mode, n_tasks,
                       np.zeros((n_tasks, n_buckets + 1)), config=mconf.to_dict())

    held_arrays = {}
    if heldout is not None and mconf.method in REPLAY_METHODS:
        for i, trajs in enumerate(heldout):
            if trajs:
                if mconf.method == "cril":
                    x0 = first_state_arrays(trajs, n_tasks)
                    js = np.ones(x0.shape[0], dtype=np.int64)
                else:
                    x0, js = diffusion_arrays(trajs, n_tasks,
                                              constant_timestep=(mconf.method == "dgr"))
                held_arrays[i] = (x0, js)
        result.quality = {i: [] for i in held_arrays}

    def eval_policy_for_task(task_idx: int, col: int) -> float:
        rng = substream(master_seed, "eval", run_seed, col, task_idx)
        net = policy
        if mconf.method == "packnet" and masks.buckets_done > 0:
            allowed = [b for b in range(masks.buckets_done)
                       if (bt := probe.bucket_task(b)) is None or bt <= task_idx]
            net = masks.masked_net(policy, allowed)
        return evaluate_policy(net, tasks[task_idx], episodes=mconf.eval_episodes,
                               rng=rng, onehot=eye[task_idx])

    def eval_column(col: int) -> None:
        for i in range(n_tasks):
            result.success_matrix[i, col] = eval_policy_for_task(i, col)

    def measure_quality(bucket_idx: int, seen: set[int]) -> None:
        active_gen = start_gen if mconf.method == "cril" else gen
        if active_gen is None:
            return
        for i in sorted(seen):
            if i not in held_arrays:
                continue
            x0, js = held_arrays[i]
            rng = substream(master_seed, "quality", run_seed, bucket_idx, i)
            q = generation_quality(active_gen, x0, js, sched, rng)
            if q is not None:
                result.quality[i].append((bucket_idx, q))

    eval_column(0)
    seen_tasks: set[int] = set()

    try:
        if mconf.method == "multitask":
            # offline skyline: the joint dataset of every bucket, with the total
            # epoch budget spread over the bucket loop so each success-matrix
            # column is a genuine evaluation of a partially trained model
            all_trajs = [t for b in buckets for t in b.trajectories]
            X, Y = policy_arrays(all_trajs, n_tasks)
            base, rem = divmod(mconf.multitask_epochs, n_buckets)
            for b in range(n_buckets):
                epochs = base + (1 if b < rem else 0)
                losses = [bc_train_epoch(policy, adam_pol, X, Y, mconf.batch_size, shuffle_rng)
                          for _ in range(epochs)]
                result.bucket_policy_loss.append(losses)
                eval_column(b + 1)
            buckets = []  # the shared per-bucket loop below is skipped

        prev_policy: Mlp | None = None
        prev_gen: Denoiser | None = None
        prev_start: Denoiser | None = None
        prev_dyn: Mlp | None = None

        for b, bucket in enumerate(buckets):
            real = bucket.trajectories
            seen_tasks.update(t.task_id for t in real)
            gen_trajs: list[Trajectory] = []
            gen_flat: GeneratedStates | None = None
            n_gen = 0
            if mconf.method in REPLAY_METHODS and b > 0 and mconf.replay_ratio > 0.0:
                g_rng = substream(master_seed, "generate", run_seed, b)
                n_gen = replay_count(len(real), mconf.replay_ratio)
                if mconf.method == "tdgr":
                    gen_trajs = tdgr_generate(prev_gen, prev_policy, len(real),
                                              mconf.replay_ratio, horizon, n_tasks,
                                              sched, g_rng)
                elif mconf.method == "dgr":
                    gen_flat = dgr_generate(prev_gen, prev_policy, n_gen * horizon,
                                            n_tasks, sched, g_rng)
                else:
                    gen_trajs, truncated = cril_generate(prev_start, prev_dyn, prev_policy,
                                                         n_gen, horizon, n_tasks, sched, g_rng)
                    result.truncated_rollouts += truncated
            result.replay_counts.append(n_gen)
            if collect_generated and (gen_trajs or gen_flat is not None):
                if gen_trajs:
                    sample = [t.states.tolist() for t in gen_trajs[:collect_generated]]
                else:
                    sample = [gen_flat.states[: collect_generated * horizon].tolist()]
                result.generated_samples = sample

            data_trajs = list(real) + gen_trajs
            X, Y = policy_arrays(data_trajs, n_tasks, extra=gen_flat)

            if mconf.method == "oewc":
                losses = ewc_train(policy, adam_pol, fisher, mconf.ewc_fisher_multiplier,
                                   X, Y, mconf.policy_epochs, mconf.batch_size, shuffle_rng)
            elif mconf.method == "packnet":
                losses = packnet_step(policy, adam_pol, masks, b, X, Y, mconf.policy_epochs,
                                      mconf.retrain_epochs, mconf.packnet_prune_fraction,
                                      mconf.batch_size, shuffle_rng)
            else:
                losses = [bc_train_epoch(policy, adam_pol, X, Y, mconf.batch_size, shuffle_rng)
                          for _ in range(mconf.policy_epochs)]
            result.bucket_policy_loss.append(losses)

            if mconf.method in ("tdgr", "dgr"):
                x0s, js = diffusion_arrays(data_trajs, n_tasks, extra=gen_flat,
                                           constant_timestep=(mconf.method == "dgr"))
                steps = mconf.diffusion_steps + (mconf.diffusion_warmup if b == 0 else 0)
                dl = train_denoiser(gen, adam_gen, x0s, js, steps, mconf.batch_size, sched,
                                    substream(master_seed, "diffusion", run_seed, b))
                result.bucket_diffusion_loss.append(_window_means(dl))
            elif mconf.method == "cril":
                x0s = first_state_arrays(data_trajs, n_tasks)
                js = np.ones(x0s.shape[0], dtype=np.int64)
                steps = mconf.diffusion_steps + (mconf.diffusion_warmup if b == 0 else 0)
                dl = train_denoiser(start_gen, adam_start, x0s, js, steps, mconf.batch_size,
                                    sched, substream(master_seed, "diffusion", run_seed, b))
                result.bucket_diffusion_loss.append(_window_means(dl))
                Xd, Yd = transitions_arrays(data_trajs)
                for _ in range(mconf.policy_epochs):
                    bc_train_epoch(dyn, adam_dyn, Xd, Yd, mconf.batch_size, shuffle_rng)

            if mconf.method == "oewc":
                ewc_consolidate(fisher, policy, X, Y)

            if mconf.method in REPLAY_METHODS:
                prev_policy = policy.copy()
                if mconf.method == "cril":
                    prev_start = start_gen.copy()
                    prev_dyn = dyn.copy()
                else:
                    prev_gen = gen.copy()
                measure_quality(b, seen_tasks)

            eval_column(b + 1)
    except TdgrError as e:
        result.completed = False
        result.errors.append(f"{type(e).__name__}: {e}")

    result.boundary_queries = probe.queries
    result.models = {"policy": policy}
    if gen is not None:
        result.models["generator"] = gen
    if start_gen is not None:
        result.models["start_generator"] = start_gen
        result.models["dynamics"] = dyn
    result.wall_clock_sec = time.perf_counter() - t_start
    return result
