"""Desk-scale 2-D waypoint benchmark.

Tasks are procedurally generated waypoint paths in the unit square. The agent
observes its position, commands a displacement (clamped to twice the nominal
speed), and the environment adds isotropic Gaussian noise. An episode succeeds
when every waypoint is captured in order within the capture radius before the
horizon runs out. Episodes have fixed length: after success the agent holds
position so every trajectory spans timesteps 1..L.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BenchmarkError, CheckpointError, ConfigurationError, GenerationError
from .nn import Mlp, mlp_apply

A_MAX_FACTOR = 2.0  # action clamp relative to the nominal speed


@dataclass(frozen=True, eq=False)
class TaskSpec:
    """One waypoint-following task."""

    task_id: int
    waypoints: np.ndarray  # (K, 2), includes start and goal
    speed: float
    noise: float
    capture_radius: float
    horizon: int

    def __post_init__(self):
        wp = np.ascontiguousarray(self.waypoints, dtype=np.float64)
        object.__setattr__(self, "waypoints", wp)
        if wp.ndim != 2 or wp.shape[0] < 2 or wp.shape[1] != 2:
            raise ConfigurationError(f"waypoints must be (K>=2, 2), got {wp.shape}")
        seg = np.linalg.norm(np.diff(wp, axis=0), axis=1)
        if np.any(seg <= 0.0):
            raise ConfigurationError("consecutive waypoints must be distinct")
        if self.speed <= 0 or self.capture_radius <= 0:
            raise ConfigurationError("speed and capture radius must be positive")
        if self.noise < 0:
            raise ConfigurationError("noise must be nonnegative")
        if self.horizon < wp.shape[0]:
            raise ConfigurationError("horizon must be at least the waypoint count")
        if float(seg.sum()) > 0.9 * self.speed * self.horizon:
            raise ConfigurationError(
                f"task infeasible: path length {seg.sum():.3f} exceeds "
                f"0.9 * speed * horizon = {0.9 * self.speed * self.horizon:.3f}"
            )

    @property
    def a_max(self) -> float:
        return A_MAX_FACTOR * self.speed

    @property
    def path_length(self) -> float:
        return float(np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1).sum())


@dataclass
class Trajectory:
    """Fixed-length rollout: row i holds the state/action at timestep i+1.

    Generated (replayed) trajectories may carry per-step task one-hots in
    ``task_onehot`` because each step is sampled independently; real rollouts
    leave it None and derive the one-hot from ``task_id``.
    """

    task_id: int
    states: np.ndarray   # (L, 2)
    actions: np.ndarray  # (L, 2)
    task_onehot: np.ndarray | None = None  # (L, N) for generated data

    def __post_init__(self):
        if self.states.shape != self.actions.shape or self.states.ndim != 2:
            raise ConfigurationError(
                f"states {self.states.shape} and actions {self.actions.shape} must match"
            )

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def timesteps(self) -> np.ndarray:
        return np.arange(1, len(self) + 1)


def _segment_distance(a0, a1, b0, b1) -> float:
    """Minimum distance between two planar segments."""
    d1 = np.cross(a1 - a0, b0 - a0)
    d2 = np.cross(a1 - a0, b1 - a0)
    d3 = np.cross(b1 - b0, a0 - b0)
    d4 = np.cross(b1 - b0, a1 - b0)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)):
        return 0.0  # proper crossing
    def point_seg(p, s0, s1):
        sv = s1 - s0
        t = np.clip(np.dot(p - s0, sv) / np.dot(sv, sv), 0.0, 1.0)
        return float(np.linalg.norm(p - (s0 + t * sv)))
    return min(point_seg(a0, b0, b1), point_seg(a1, b0, b1),
               point_seg(b0, a0, a1), point_seg(b1, a0, a1))


def _point_segment_distance(p, s0, s1) -> float:
    sv = s1 - s0
    t = np.clip(np.dot(p - s0, sv) / np.dot(sv, sv), 0.0, 1.0)
    return float(np.linalg.norm(p - (s0 + t * sv)))


def _path_unambiguous(wp: np.ndarray, clearance: float, min_turn_cos: float,
                      goal_clearance: float, min_segment: float) -> bool:
    """Reject paths whose action field is not a function of position.

    A memoryless policy only sees its position, so the expert's action must be
    recoverable from position alone: non-adjacent segments keep their distance
    (no revisiting earlier regions in a later phase), turns do not fold the
    path back onto itself, and earlier segments stay well away from the goal,
    where demonstrations pile up hold-position data.
    """
    k = wp.shape[0]
    seg = np.diff(wp, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    if np.any(seg_len < min_segment):
        return False
    dirs = seg / seg_len[:, None]
    for i in range(k - 2):
        if float(np.dot(dirs[i], dirs[i + 1])) < min_turn_cos:
            return False
    for i in range(k - 1):
        for j in range(i + 2, k - 1):
            if _segment_distance(wp[i], wp[i + 1], wp[j], wp[j + 1]) < clearance:
                return False
    goal = wp[-1]
    for i in range(k - 2):  # every segment except the one ending at the goal
        if _point_segment_distance(goal, wp[i], wp[i + 1]) < goal_clearance:
            return False
    return True


def make_task(seed: int, waypoint_count: int = 4, bounds=((0.0, 1.0), (0.0, 1.0)),
              speed: float = 0.03, noise: float = 0.005, capture_radius: float = 0.05,
              horizon: int = 100, task_id: int = 0, clearance: float = 0.15,
              min_turn_cos: float = 0.25, goal_clearance: float = 0.25,
              min_segment: float = 0.1, min_path_fraction: float = 0.35) -> TaskSpec:
    """Sample a feasible task, deterministically in ``seed``.

    The path is grown segment by segment inside ``bounds``: a random start and
    heading, then per-waypoint turns bounded by ``min_turn_cos`` and segment
    lengths sized so the total lands between ``min_path_fraction`` and 0.9 of
    the expert's travel budget ``speed * horizon``. A draw is rejected (and
    retried, up to 100 times) if it leaves the bounds or fails the
    position-unambiguity checks of :func:`_path_unambiguous`, which keep
    behavioral cloning from positions alone well posed.
    """
    if waypoint_count < 2:
        raise ConfigurationError("need at least 2 waypoints")
    rng = np.random.default_rng(seed)
    lo = np.array([bounds[0][0], bounds[1][0]])
    hi = np.array([bounds[0][1], bounds[1][1]])
    budget = speed * horizon
    segments = waypoint_count - 1
    # per-segment length window; total targeted comfortably inside the budget
    max_total = min(0.9 * budget, 0.55 * segments)
    target_total = 0.5 * (min_path_fraction * budget + max_total)
    seg_mean = target_total / segments
    seg_lo = max(min_segment, 0.7 * seg_mean)
    seg_hi = max(seg_lo + 1e-6, 1.3 * seg_mean)
    max_turn = np.arccos(np.clip(min_turn_cos, -1.0, 1.0))
    margin = 0.02

    def grow() -> np.ndarray | None:
        points = [rng.uniform(lo + 0.08, hi - 0.08)]
        h = rng.uniform(0.0, 2.0 * np.pi)
        for i in range(segments):
            length = rng.uniform(seg_lo, seg_hi)
            for attempt in range(12):
                if i == 0:
                    cand = h if attempt == 0 else rng.uniform(0.0, 2.0 * np.pi)
                else:
                    cand = h + rng.uniform(-max_turn, max_turn)
                nxt = points[-1] + length * np.array([np.cos(cand), np.sin(cand)])
                if np.all(nxt >= lo + margin) and np.all(nxt <= hi - margin):
                    break
            else:
                return None  # boxed in, no heading keeps the path inside the bounds
            points.append(nxt)
            h = cand
        return np.asarray(points)

    for _ in range(100):
        wp = grow()
        if wp is None:
            continue
        total = float(np.linalg.norm(np.diff(wp, axis=0), axis=1).sum())
        if not min_path_fraction * budget <= total <= 0.9 * budget:
            continue
        if not _path_unambiguous(wp, clearance, min_turn_cos, goal_clearance, min_segment):
            continue
        return TaskSpec(task_id, wp, speed, noise, capture_radius, horizon)
    raise GenerationError(
        f"could not sample a feasible task after 100 attempts (seed {seed}); "
        f"loosen the clearance or increase speed * horizon"
    )


def clamp_action(a: np.ndarray, a_max: float) -> np.ndarray:
    """Rescale displacement(s) so the Euclidean norm is at most ``a_max``."""
    a = np.asarray(a, dtype=np.float64)
    single = a.ndim == 1
    A = a[None, :] if single else a
    norms = np.linalg.norm(A, axis=1)
    scale = np.ones_like(norms)
    over = norms > a_max
    scale[over] = a_max / norms[over]
    out = A * scale[:, None]
    return out[0] if single else out


def transition(s: np.ndarray, a: np.ndarray, noise: float, a_max: float,
               rng: np.random.Generator) -> np.ndarray:
    """Environment step ``s' = s + clamp(a) + eta`` with ``eta ~ N(0, noise^2 I)``.

    No noise is drawn when ``noise == 0`` so the deterministic variant does
    not consume the stream.
    """
    s = np.asarray(s, dtype=np.float64)
    a = clamp_action(a, a_max)
    out = s + a
    if noise > 0:
        out = out + rng.normal(0.0, noise, size=np.shape(out))
    return out


def _capture(task: TaskSpec, s: np.ndarray, next_idx: np.ndarray) -> None:
    """Advance each episode's next-waypoint index while the current target is in reach."""
    wp, rho, k = task.waypoints, task.capture_radius, task.waypoints.shape[0]
    while True:
        active = next_idx < k
        if not active.any():
            return
        rows = np.flatnonzero(active)
        d = np.linalg.norm(s[rows] - wp[next_idx[rows]], axis=1)
        hit = d <= rho
        if not hit.any():
            return
        next_idx[rows[hit]] += 1


def _start_states(task: TaskSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    s = np.repeat(task.waypoints[0][None, :], n, axis=0)
    if task.noise > 0:
        s = s + rng.normal(0.0, task.noise, size=s.shape)
    return s


def expert_rollouts(task: TaskSpec, n: int, rng: np.random.Generator):
    """Vectorized expert demonstrations.

    The expert moves at the nominal speed straight toward the next uncaptured
    waypoint. After capturing the last one it holds position for the rest of
    the horizon by station-keeping: steering back onto the goal against the
    dynamics noise (with zero noise this is an exact zero-action hold). The
    hold labels therefore agree with the approach labels near the goal.
    Returns ``(trajectories, success_flags)``.
    """
    k, horizon = task.waypoints.shape[0], task.horizon
    goal = task.waypoints[-1]
    s = _start_states(task, n, rng)
    next_idx = np.zeros(n, dtype=np.int64)
    _capture(task, s, next_idx)
    done = next_idx == k
    states = np.empty((horizon, n, 2))
    actions = np.zeros((horizon, n, 2))
    for t in range(horizon):
        states[t] = s
        active = ~done
        if active.any():
            rows = np.flatnonzero(active)
            diff = task.waypoints[next_idx[rows]] - s[rows]
            dist = np.linalg.norm(diff, axis=1)  # > capture radius for active episodes
            actions[t, rows] = task.speed * diff / dist[:, None]
        if done.any():
            rows = np.flatnonzero(done)
            diff = goal - s[rows]
            dist = np.linalg.norm(diff, axis=1)
            scale = np.minimum(task.speed, dist) / np.where(dist > 0, dist, 1.0)
            actions[t, rows] = diff * scale[:, None]
        step = actions[t]
        if task.noise > 0:
            step = step + rng.normal(0.0, task.noise, size=step.shape)
        s = s + step
        _capture(task, s, next_idx)
        done = next_idx == k
    trajs = [Trajectory(task.task_id, states[:, i].copy(), actions[:, i].copy())
             for i in range(n)]
    return trajs, done.copy()


def expert_rollout(task: TaskSpec, rng: np.random.Generator) -> Trajectory:
    trajs, _ = expert_rollouts(task, 1, rng)
    return trajs[0]


def check_expert(task: TaskSpec, rng: np.random.Generator, episodes: int = 100,
                 min_success: float = 0.95) -> float:
    """Validate that the built-in expert solves its own task reliably."""
    _, ok = expert_rollouts(task, episodes, rng)
    rate = float(ok.mean())
    if rate < min_success:
        raise BenchmarkError(
            f"expert succeeds on only {rate:.0%} of {episodes} episodes for task "
            f"{task.task_id}; the task parameters are miscalibrated"
        )
    return rate


class ExpertPolicy:
    """Stateful expert controller usable wherever a policy callable is expected.

    Tracks waypoint progress per batch row from the observed positions, so it
    can be evaluated through :func:`evaluate_policy` like a learned policy.
    """

    def __init__(self, task: TaskSpec):
        self.task = task
        self._next: np.ndarray | None = None

    def reset(self) -> None:
        self._next = None

    def __call__(self, X: np.ndarray) -> np.ndarray:
        s = np.asarray(X, dtype=np.float64)[:, :2]
        if self._next is None or self._next.shape[0] != s.shape[0]:
            self._next = np.zeros(s.shape[0], dtype=np.int64)
        _capture(self.task, s, self._next)
        done = self._next >= self.task.waypoints.shape[0]
        target = self.task.waypoints[np.where(done, -1, self._next % self.task.waypoints.shape[0])]
        diff = target - s
        dist = np.linalg.norm(diff, axis=1)
        speed = np.where(done, np.minimum(self.task.speed, dist), self.task.speed)
        safe = np.where(dist > 0, dist, 1.0)
        return diff * (speed / safe)[:, None]


def evaluate_policy(policy, task: TaskSpec, *, episodes: int = 100,
                    rng: np.random.Generator, onehot: np.ndarray | None = None) -> float:
    """Success rate of a policy over vectorized episodes.

    ``policy`` is an :class:`~tdgr.nn.Mlp` or any callable mapping a
    (batch, obs) matrix to (batch, 2) displacements. When ``onehot`` is given
    it is appended to every observation (task conditioning). Actions are
    clamped to the task's action bound; an episode succeeds when all waypoints
    are captured in order within the horizon.
    """
    if isinstance(policy, Mlp):
        net = policy
        policy_fn = lambda X: mlp_apply(net, X)  # noqa: E731
    else:
        policy_fn = policy
        if hasattr(policy, "reset"):
            policy.reset()
    k = task.waypoints.shape[0]
    s = _start_states(task, episodes, rng)
    next_idx = np.zeros(episodes, dtype=np.int64)
    _capture(task, s, next_idx)
    done = next_idx == k
    cond = None if onehot is None else np.repeat(np.asarray(onehot, dtype=np.float64)[None, :],
                                                 episodes, axis=0)
    for _ in range(task.horizon):
        if done.all():
            break
        X = s if cond is None else np.hstack([s, cond])
        a = clamp_action(np.asarray(policy_fn(X), dtype=np.float64), task.a_max)
        step = a
        if task.noise > 0:
            step = step + rng.normal(0.0, task.noise, size=step.shape)
        s = s + step
        _capture(task, s, next_idx)
        done = next_idx == k
    return float(done.mean())


# ---------------------------------------------------------------------------
# temporal coherence


def coherence_radius(eps: float, sigma: float) -> float:
    """Distance at which the isotropic 2-D Gaussian N(0, sigma^2 I) density drops to ``eps``."""
    if sigma == 0.0:
        return 0.0
    peak = 1.0 / (2.0 * math.pi * sigma * sigma)
    if eps >= peak:
        return 0.0
    return sigma * math.sqrt(2.0 * math.log(peak / eps))


def default_coherence_eps(sigma: float) -> float:
    """Density threshold chosen so the coherence reach radius equals 3 sigma."""
    if sigma == 0.0:
        return 0.5  # any value in (0, 1); unused because sigma=0 reduces to exact reachability
    return math.exp(-4.5) / (2.0 * math.pi * sigma * sigma)


def temporally_coherent(traj: Trajectory | np.ndarray, eps: float, sigma: float,
                        a_max: float) -> bool:
    """True iff every consecutive state pair is reachable by some bounded action.

    A pair (s, s') is reachable when some action with norm <= a_max leaves a
    transition density above ``eps``; for the isotropic Gaussian dynamics this
    reduces to ``||s' - s|| <= a_max + r`` with r = :func:`coherence_radius`.
    With sigma = 0 the check is exact reachability ``||s' - s|| <= a_max``.
    Note that ``eps`` is a density value, not a probability, so it may exceed 1
    for small sigma; anything at or above the peak density collapses r to 0.
    """
    if eps <= 0.0:
        raise ConfigurationError("coherence threshold must be positive")
    states = traj.states if isinstance(traj, Trajectory) else np.asarray(traj, dtype=np.float64)
    gaps = np.linalg.norm(np.diff(states, axis=0), axis=1)
    return bool(np.all(gaps <= a_max + coherence_radius(eps, sigma)))


# ---------------------------------------------------------------------------
# path geometry helpers (used by plots and the DGR coverage analysis)


def path_distance(task: TaskSpec, points: np.ndarray) -> np.ndarray:
    """Distance from each point to the task's waypoint polyline."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    best = np.full(pts.shape[0], np.inf)
    wp = task.waypoints
    for a, b in zip(wp[:-1], wp[1:]):
        ab = b - a
        denom = float(ab @ ab)
        tproj = np.clip((pts - a) @ ab / denom, 0.0, 1.0)
        closest = a + tproj[:, None] * ab
        best = np.minimum(best, np.linalg.norm(pts - closest, axis=1))
    return best


def path_progress(task: TaskSpec, points: np.ndarray) -> np.ndarray:
    """Arclength fraction (0..1) of the nearest polyline point for each input point."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    wp = task.waypoints
    seg_len = np.linalg.norm(np.diff(wp, axis=0), axis=1)
    cumlen = np.concatenate(([0.0], np.cumsum(seg_len)))
    total = cumlen[-1]
    best_d = np.full(pts.shape[0], np.inf)
    best_s = np.zeros(pts.shape[0])
    for i, (a, b) in enumerate(zip(wp[:-1], wp[1:])):
        ab = b - a
        denom = float(ab @ ab)
        tproj = np.clip((pts - a) @ ab / denom, 0.0, 1.0)
        closest = a + tproj[:, None] * ab
        d = np.linalg.norm(pts - closest, axis=1)
        better = d < best_d
        best_d[better] = d[better]
        best_s[better] = cumlen[i] + tproj[better] * seg_len[i]
    return best_s / total


def progress_bins(task: TaskSpec, points: np.ndarray, length: int) -> np.ndarray:
    """Map points to trajectory-timestep bins 1..length by nearest path progress."""
    frac = path_progress(task, points)
    return np.clip(np.ceil(frac * length), 1, length).astype(np.int64)


# ---------------------------------------------------------------------------
# streams


@dataclass
class StreamBucket:
    """One contiguous chunk of the training stream."""

    index: int
    trajectories: list[Trajectory] = field(default_factory=list)


@dataclass
class Stream:
    """Ordered buckets plus the metadata needed by boundary-aware baselines."""

    mode: str
    buckets: list[StreamBucket]
    task_count: int
    bucket_tasks: list[int | None]  # task index per bucket in sequential mode, None when blurred


def _split_counts(n: int, parts: int) -> list[int]:
    base, rem = divmod(n, parts)
    # remainder distributed round-robin over the earliest target buckets
    return [base + (1 if i < rem else 0) for i in range(parts)]


def build_stream(tasks: list[TaskSpec], demos: list[list[Trajectory]], mode: str) -> Stream:
    """Arrange per-task demonstrations into a training stream.

    sequential: bucket i holds exactly task i's demos (N buckets).
    blurry: task demos are split into equal thirds across the neighboring
    buckets (the first and last task into halves across two buckets), giving
    N+1 buckets indexed 0..N. The union of all buckets is always exactly the
    input multiset.
    """
    n_tasks = len(tasks)
    if n_tasks < 2:
        raise ConfigurationError("a stream needs at least 2 tasks")
    if len(demos) != n_tasks:
        raise ConfigurationError(f"{n_tasks} tasks but {len(demos)} demo sets")
    if mode == "sequential":
        buckets = [StreamBucket(i, list(demos[i])) for i in range(n_tasks)]
        return Stream(mode, buckets, n_tasks, list(range(n_tasks)))
    if mode == "blurry":
        buckets = [StreamBucket(b) for b in range(n_tasks + 1)]
        for i in range(n_tasks):
            if i == 0:
                targets = [0, 1]
            elif i == n_tasks - 1:
                targets = [n_tasks - 1, n_tasks]
            else:
                targets = [i, i + 1, i + 2]
            counts = _split_counts(len(demos[i]), len(targets))
            off = 0
            for b, c in zip(targets, counts):
                buckets[b].trajectories.extend(demos[i][off : off + c])
                off += c
        return Stream(mode, buckets, n_tasks, [None] * (n_tasks + 1))
    raise ConfigurationError(f"unknown stream mode {mode!r}")


# ---------------------------------------------------------------------------
# dataset files


TRAJ_MAGIC = b"TRAJ64LE"


def save_trajectories(path, trajs: list[Trajectory], task_count: int) -> None:
    """Columnar dataset file: JSON header then flat little-endian float64 blocks."""
    if not trajs:
        raise ConfigurationError("refusing to write an empty trajectory file")
    length = len(trajs[0])
    if any(len(t) != length for t in trajs):
        raise ConfigurationError("all trajectories in a dataset must share one length")
    has_onehot = any(t.task_onehot is not None for t in trajs)
    header = {
        "count": len(trajs),
        "length": length,
        "state_dim": 2,
        "action_dim": 2,
        "task_count": task_count,
        "task_ids": [int(t.task_id) for t in trajs],
        "per_step_onehot": has_onehot,
    }
    with open(path, "wb") as f:
        f.write(TRAJ_MAGIC + b"\n")
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        f.write(np.ascontiguousarray(np.stack([t.states for t in trajs]), dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(np.stack([t.actions for t in trajs]), dtype="<f8").tobytes())
        if has_onehot:
            eye = np.eye(task_count)
            blocks = [t.task_onehot if t.task_onehot is not None
                      else np.repeat(eye[t.task_id][None, :], length, axis=0) for t in trajs]
            f.write(np.ascontiguousarray(np.stack(blocks), dtype="<f8").tobytes())


def load_trajectories(path) -> tuple[list[Trajectory], int]:
    data = Path(path).read_bytes()
    nl1 = data.find(b"\n")
    if nl1 < 0 or data[:nl1] != TRAJ_MAGIC:
        raise CheckpointError(f"{path}: not a {TRAJ_MAGIC.decode()} dataset")
    nl2 = data.find(b"\n", nl1 + 1)
    header = json.loads(data[nl1 + 1 : nl2].decode("utf-8"))
    n, length = header["count"], header["length"]
    task_count = header["task_count"]
    off = nl2 + 1

    def block(shape):
        nonlocal off
        nbytes = int(np.prod(shape)) * 8
        if off + nbytes > len(data):
            raise CheckpointError(f"{path}: dataset truncated")
        arr = np.frombuffer(data[off : off + nbytes], dtype="<f8").reshape(shape).copy()
        off += nbytes
        return arr

    states = block((n, length, 2))
    actions = block((n, length, 2))
    onehots = block((n, length, task_count)) if header.get("per_step_onehot") else None
    trajs = [
        Trajectory(header["task_ids"][i], states[i], actions[i],
                   None if onehots is None else onehots[i])
        for i in range(n)
    ]
    return trajs, task_count


def export_trajectories_csv(path, trajs: list[Trajectory]) -> None:
    """Plain CSV view of a dataset for eyeballing: one row per (trajectory, step)."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("trajectory,step,task,state_x,state_y,action_x,action_y\n")
        for i, t in enumerate(trajs):
            for step in range(len(t)):
                f.write(f"{i},{step + 1},{t.task_id},"
                        f"{t.states[step, 0]!r},{t.states[step, 1]!r},"
                        f"{t.actions[step, 0]!r},{t.actions[step, 1]!r}\n")
