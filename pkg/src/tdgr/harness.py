"""Experiment orchestration: benchmark setup, run scheduling, aggregation.

Directory layout under the config's output dir:

    data/demos-seed<k>.traj      expert demonstrations per seed
    refs-seed<k>.json            single-task reference success rates (sequential mode)
    <method>-seed<k>/result.json one run's full record
    <method>-seed<k>/*.ckpt      final model checkpoints
    metrics.csv                  one row per (method, seed, metric)
    summary.txt                  per-method mean +- 90% CI table

Completed runs are discovered by their config hash and skipped, so rerunning
the same config is a no-op that reproduces the identical aggregation.
"""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ExperimentConfig, to_dict
from .diffusion import save_denoiser, cosine_schedule
from .errors import TdgrError
from .methods import MethodConfig, REPLAY_METHODS, RunResult, run_method
from .metrics import avg_success, ci90, forgetting, forward_transfer
from .nn import adam_init, bc_train_epoch, mlp_init
from .pathworld import (Stream, TaskSpec, Trajectory, build_stream, check_expert,
                        evaluate_policy, expert_rollouts, make_task, save_trajectories)
from .rng import substream

METRIC_ORDER = ("avg_success", "forward_transfer", "forgetting")


def build_tasks(cfg: ExperimentConfig) -> list[TaskSpec]:
    """Tasks are a function of the master seed only, shared by every run."""
    b = cfg.benchmark
    rng = substream(cfg.master_seed, "tasks")
    tasks = []
    for i in range(b.tasks):
        task_seed = int(rng.integers(0, 2**63 - 1))
        tasks.append(make_task(task_seed, b.waypoints, speed=b.speed, noise=b.noise,
                               capture_radius=b.capture_radius, horizon=b.trajectory_length,
                               task_id=i))
    for i, task in enumerate(tasks):
        check_expert(task, substream(cfg.master_seed, "expert-check", i))
    return tasks


def build_seed_data(cfg: ExperimentConfig, tasks: list[TaskSpec], seed: int):
    """Demonstrations, stream and held-out measurement sets for one run seed."""
    b = cfg.benchmark
    demos = []
    heldout = []
    for i, task in enumerate(tasks):
        trajs, _ = expert_rollouts(task, b.demos_per_task,
                                   substream(cfg.master_seed, "demos", seed, i))
        demos.append(trajs)
        if b.heldout_per_task > 0:
            held, _ = expert_rollouts(task, b.heldout_per_task,
                                      substream(cfg.master_seed, "heldout", seed, i))
            heldout.append(held)
        else:
            heldout.append([])
    stream = build_stream(tasks, demos, cfg.stream_mode)
    return demos, stream, heldout


def method_config(cfg: ExperimentConfig, method: str,
                  replay_ratio: float | None = None) -> MethodConfig:
    t = cfg.training
    return MethodConfig(
        method=method,
        replay_ratio=t.replay_ratio if replay_ratio is None else replay_ratio,
        policy_epochs=t.policy_epochs,
        multitask_epochs=t.multitask_epochs,
        batch_size=t.batch_size,
        learning_rate=t.learning_rate,
        policy_hidden=tuple(t.policy_hidden),
        diffusion_steps=t.diffusion_steps,
        diffusion_warmup=t.diffusion_warmup,
        diffusion_timesteps=t.diffusion_timesteps,
        denoiser_hidden=tuple(t.denoiser_hidden),
        step_embed_dim=t.step_embed_dim,
        traj_embed_dim=t.traj_embed_dim,
        dyn_hidden=tuple(t.dyn_hidden),
        ewc_fisher_multiplier=t.ewc_fisher_multiplier,
        packnet_prune_fraction=t.packnet_prune_fraction,
        packnet_retrain_epochs=t.packnet_retrain_epochs,
        eval_episodes=t.eval_episodes,
    )


def run_hash(cfg: ExperimentConfig, method: str, seed: int,
             replay_ratio: float | None = None) -> str:
    payload = {"config": cfg.canonical(), "method": method, "seed": seed,
               "replay_ratio": replay_ratio}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _run_dir(out: Path, method: str, seed: int, replay_ratio: float | None = None) -> Path:
    if replay_ratio is None:
        return out / f"{method}-seed{seed}"
    return out / "sweep" / f"{method}-r{replay_ratio}-seed{seed}"


def _load_completed(run_dir: Path, expect_hash: str) -> RunResult | None:
    path = run_dir / "result.json"
    if not path.exists():
        return None
    try:
        record = json.loads(path.read_text())
    except json.JSONDecodeError:
        return None
    if record.get("config_hash") != expect_hash or not record.get("completed"):
        return None
    return RunResult.from_dict(record)


def execute_run(cfg: ExperimentConfig, tasks: list[TaskSpec], method: str, seed: int,
                replay_ratio: float | None = None, log=print) -> RunResult:
    """Run one (method, seed) pair, or load it if already complete on disk."""
    out = Path(cfg.output_dir)
    run_dir = _run_dir(out, method, seed, replay_ratio)
    h = run_hash(cfg, method, seed, replay_ratio)
    cached = _load_completed(run_dir, h)
    if cached is not None:
        log(f"[skip] {run_dir.name}: already complete")
        return cached
    run_dir.mkdir(parents=True, exist_ok=True)
    _, stream, heldout = build_seed_data(cfg, tasks, seed)
    mconf = method_config(cfg, method, replay_ratio)
    result = run_method(mconf, stream, tasks, seed, cfg.master_seed, heldout=heldout,
                        collect_generated=5 if method in REPLAY_METHODS else 0)
    record = result.to_dict()
    record["config_hash"] = h
    (run_dir / "result.json").write_text(json.dumps(record, sort_keys=True, indent=1))
    sched = cosine_schedule(mconf.diffusion_timesteps)
    if "policy" in result.models:
        checkpoint.save_mlp(run_dir / "policy.ckpt", result.models["policy"],
                            {"role": "policy", "method": method, "seed": seed})
    if "generator" in result.models:
        save_denoiser(run_dir / "generator.ckpt", result.models["generator"], sched,
                      {"role": "generator", "method": method, "seed": seed})
    if "start_generator" in result.models:
        save_denoiser(run_dir / "start_generator.ckpt", result.models["start_generator"],
                      sched, {"role": "start_generator", "method": method, "seed": seed})
        checkpoint.save_mlp(run_dir / "dynamics.ckpt", result.models["dynamics"],
                            {"role": "dynamics", "method": method, "seed": seed})
    status = "done" if result.completed else f"FAILED ({'; '.join(result.errors)})"
    log(f"[run ] {run_dir.name}: {status} in {result.wall_clock_sec:.1f}s")
    return result


def reference_success(cfg: ExperimentConfig, tasks: list[TaskSpec], seed: int,
                      demos: list[list[Trajectory]] | None = None) -> list[float]:
    """Single-task reference runs: fresh policy per task, trained on its demos alone."""
    from .methods import policy_arrays  # local import to avoid cycle at module load

    if demos is None:
        demos, _, _ = build_seed_data(cfg, tasks, seed)
    t = cfg.training
    n_tasks = len(tasks)
    eye = np.eye(n_tasks)
    refs = []
    for i, task in enumerate(tasks):
        policy = mlp_init((2 + n_tasks, *t.policy_hidden, 2),
                          substream(cfg.master_seed, "ref-init", seed, i))
        adam = adam_init(policy, lr=t.learning_rate)
        X, Y = policy_arrays(demos[i], n_tasks)
        shuffle = substream(cfg.master_seed, "ref-shuffle", seed, i)
        for _ in range(t.policy_epochs):
            bc_train_epoch(policy, adam, X, Y, t.batch_size, shuffle)
        refs.append(evaluate_policy(policy, task, episodes=t.eval_episodes,
                                    rng=substream(cfg.master_seed, "ref-eval", seed, i),
                                    onehot=eye[i]))
    return refs


def ensure_references(cfg: ExperimentConfig, tasks: list[TaskSpec], seed: int,
                      log=print) -> list[float]:
    out = Path(cfg.output_dir)
    path = out / f"refs-seed{seed}.json"
    h = run_hash(cfg, "reference", seed)
    if path.exists():
        try:
            record = json.loads(path.read_text())
            if record.get("config_hash") == h:
                return record["success"]
        except json.JSONDecodeError:
            pass
    log(f"[ref ] single-task references for seed {seed}")
    refs = reference_success(cfg, tasks, seed)
    path.write_text(json.dumps({"config_hash": h, "success": refs}, sort_keys=True))
    return refs


# ---------------------------------------------------------------------------
# aggregation


def metrics_rows(cfg: ExperimentConfig, results: dict[tuple[str, int], RunResult],
                 refs: dict[int, list[float]]) -> list[tuple[str, int, str, float]]:
    rows = []
    sequential = cfg.stream_mode == "sequential"
    for method in cfg.methods:
        for seed in cfg.seeds:
            res = results.get((method, seed))
            if res is None or not res.completed:
                continue
            rows.append((method, seed, "avg_success", avg_success(res.success_matrix)))
            if sequential and method != "multitask":
                _, f_mean = forgetting(res.success_matrix)
                rows.append((method, seed, "forgetting", f_mean))
                if seed in refs:
                    _, ft_mean = forward_transfer(res.success_matrix, np.asarray(refs[seed]))
                    rows.append((method, seed, "forward_transfer", ft_mean))
    return rows


def write_metrics_csv(path, rows) -> None:
    order = {m: i for i, m in enumerate(METRIC_ORDER)}
    rows = sorted(rows, key=lambda r: (r[0], r[1], order.get(r[2], 99)))
    with open(path, "w", encoding="utf-8") as f:
        f.write("method,seed,metric,value\n")
        for method, seed, metric, value in rows:
            f.write(f"{method},{seed},{metric},{value!r}\n")


def summary_table(cfg: ExperimentConfig, rows) -> str:
    """Mean +- 90% CI half-width per method and metric, one line per method."""
    by = {}
    for method, seed, metric, value in rows:
        by.setdefault((method, metric), []).append(value)
    lines = [f"{'method':<10} {'success':>16} {'fwd transfer':>16} {'forgetting':>16}"]
    for method in cfg.methods:
        cells = [f"{method:<10}"]
        for metric in METRIC_ORDER:
            vals = by.get((method, metric))
            if not vals:
                cells.append(f"{'n/a':>16}")
            elif len(vals) == 1:
                cells.append(f"{vals[0]:>10.3f} {'':>5}")
            else:
                mean, half = ci90(vals)
                cells.append(f"{mean:>9.3f} +-{half:.3f}")
        lines.append(" ".join(cells))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# top-level commands


def _worker(args):
    cfg_dict, method, seed, replay_ratio = args
    from .config import parse_config

    cfg = parse_config(cfg_dict)
    tasks = build_tasks(cfg)
    result = execute_run(cfg, tasks, method, seed, replay_ratio)
    return (method, seed, replay_ratio, result.completed)


def _schedule(cfg: ExperimentConfig, jobs, log=print):
    """Run (method, seed, ratio) jobs, optionally across processes."""
    if cfg.workers <= 1:
        tasks = build_tasks(cfg)
        return [
            (m, s, r, execute_run(cfg, tasks, m, s, r, log=log).completed)
            for m, s, r in jobs
        ]
    cfg_dict = to_dict(cfg)
    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(_worker, [(cfg_dict, m, s, r) for m, s, r in jobs]))


def cmd_run(cfg: ExperimentConfig, log=print) -> int:
    """Execute all (method, seed) runs, write metrics.csv and summary.txt."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = build_tasks(cfg)

    data_dir = out / "data"
    data_dir.mkdir(exist_ok=True)
    for seed in cfg.seeds:
        demo_path = data_dir / f"demos-seed{seed}.traj"
        if not demo_path.exists():
            demos, _, _ = build_seed_data(cfg, tasks, seed)
            save_trajectories(demo_path, [t for per_task in demos for t in per_task],
                              len(tasks))

    jobs = [(m, s, None) for m in cfg.methods for s in cfg.seeds]
    statuses = _schedule(cfg, jobs, log=log)

    refs = {}
    if cfg.stream_mode == "sequential":
        for seed in cfg.seeds:
            refs[seed] = ensure_references(cfg, tasks, seed, log=log)

    results = {}
    for method, seed, _, _ in statuses:
        run_dir = _run_dir(out, method, seed)
        loaded = _load_completed(run_dir, run_hash(cfg, method, seed))
        if loaded is not None:
            results[(method, seed)] = loaded
    rows = metrics_rows(cfg, results, refs)
    write_metrics_csv(out / "metrics.csv", rows)
    (out / "summary.txt").write_text(summary_table(cfg, rows))
    log(f"[out ] {out / 'metrics.csv'}")
    failed = [s for s in statuses if not s[3]]
    for method, seed, _, _ in failed:
        log(f"[warn] {method}-seed{seed} did not complete; partial record kept")
    return 1 if failed else 0


DEFAULT_SWEEP_RATIOS = (0.5, 0.6, 0.7, 0.8, 0.9)


def cmd_sweep(cfg: ExperimentConfig, ratios=DEFAULT_SWEEP_RATIOS, log=print) -> int:
    """Replay-ratio ablation over the replay-capable methods in the config."""
    bad = [m for m in cfg.methods if m not in ("tdgr", "dgr")]
    if bad:
        raise TdgrError(f"the replay-ratio sweep only makes sense for tdgr/dgr, got {bad}")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ratios = sorted(float(r) for r in ratios)
    jobs = [(m, s, r) for m in cfg.methods for r in ratios for s in cfg.seeds]
    _schedule(cfg, jobs, log=log)

    rows = []
    for method in cfg.methods:
        for r in ratios:
            vals = []
            for seed in cfg.seeds:
                run_dir = _run_dir(out, method, seed, r)
                res = _load_completed(run_dir, run_hash(cfg, method, seed, r))
                if res is not None:
                    vals.append(avg_success(res.success_matrix))
            if len(vals) >= 2:
                mean, half = ci90(vals)
            elif vals:
                mean, half = vals[0], 0.0
            else:
                continue
            rows.append((method, r, mean, half, len(vals)))
    path = out / "ratio_summary.csv"
    with open(path, "w", encoding="utf-8") as f:
        f.write("method,replay_ratio,mean_success,ci90_halfwidth,seeds\n")
        for method, r, mean, half, n in rows:
            f.write(f"{method},{r!r},{mean!r},{half!r},{n}\n")
    log(f"[out ] {path}")
    return 0


def load_sweep_summary(out_dir) -> list[dict]:
    path = Path(out_dir) / "ratio_summary.csv"
    rows = []
    lines = path.read_text().strip().splitlines()
    for line in lines[1:]:
        method, r, mean, half, n = line.split(",")
        rows.append({"method": method, "ratio": float(r), "mean": float(mean),
                     "half": float(half), "seeds": int(n)})
    return rows
