"""Command-line experiment driver.

Subcommands:
    run      execute every (method, seed) run of a config and aggregate metrics
    sweep    replay-ratio ablation for tdgr/dgr
    plot     render SVG figures from a finished output directory
    analyze  standalone coverage and compounding-error verifications
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import coverage, harness
from .config import load_config
from .errors import TdgrError
from .rng import substream
from .svgplot import Figure


def _apply_overrides(cfg, args):
    if getattr(args, "output_dir", None):
        cfg.output_dir = args.output_dir
    if getattr(args, "workers", None):
        cfg.workers = args.workers
    if getattr(args, "seeds", None):
        cfg.seeds = [int(s) for s in args.seeds.split(",")]
    return cfg


def cmd_run(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    return harness.cmd_run(cfg)


def cmd_sweep(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    ratios = harness.DEFAULT_SWEEP_RATIOS
    if args.ratios:
        ratios = tuple(float(r) for r in args.ratios.split(","))
    return harness.cmd_sweep(cfg, ratios)


def cmd_plot(args) -> int:
    results = Path(args.results)
    out = Path(args.out) if args.out else results / "figures"
    out.mkdir(parents=True, exist_ok=True)
    made = plot_results(results, out)
    if not made:
        print(f"[warn] nothing to plot under {results}", file=sys.stderr)
    for p in made:
        print(f"[out ] {p}")
    return 0


def plot_results(results: Path, out: Path) -> list[Path]:
    """Render every figure the result directory supports; skip missing series."""
    made: list[Path] = []

    records = []
    for res_path in sorted(results.glob("*-seed*/result.json")):
        try:
            records.append(json.loads(res_path.read_text()))
        except json.JSONDecodeError:
            print(f"[warn] unreadable record {res_path}, skipping", file=sys.stderr)
    if records:
        # mean success over tasks per evaluation point, averaged across seeds
        by_method: dict[str, list] = {}
        for r in records:
            if r.get("completed"):
                by_method.setdefault(r["method"], []).append(np.asarray(r["success_matrix"]))
        fig = Figure(title="Average success over the stream", xlabel="evaluation point",
                     ylabel="mean success")
        fig.set_limits(yr=(0.0, 1.0))
        for method in sorted(by_method):
            mats = np.stack(by_method[method])
            curve = mats.mean(axis=1).mean(axis=0)  # over tasks, then seeds
            fig.add_line(method, list(range(curve.size)), curve.tolist())
        path = out / "success_curves.svg"
        fig.save(path)
        made.append(path)

        for method in sorted(by_method):
            series: dict[int, dict[int, list[float]]] = {}
            for r in records:
                if r["method"] != method or not r.get("completed"):
                    continue
                for task, pts in r.get("quality", {}).items():
                    for bucket, val in pts:
                        series.setdefault(int(task), {}).setdefault(int(bucket), []).append(val)
            if not series:
                continue
            fig = Figure(title=f"Generation quality ({method})", xlabel="bucket",
                         ylabel="held-out L1 denoising error")
            for task in sorted(series):
                buckets = sorted(series[task])
                ys = [float(np.mean(series[task][b])) for b in buckets]
                fig.add_line(f"task {task + 1}", buckets, ys)
            path = out / f"quality_{method}.svg"
            fig.save(path)
            made.append(path)

        for r in records:
            if not r.get("generated_samples"):
                continue
            fig = Figure(title=f"Generated states ({r['method']}, seed {r['seed']})",
                         xlabel="x", ylabel="y", width=440, height=440)
            for i, traj in enumerate(r["generated_samples"][:5]):
                arr = np.asarray(traj)
                fig.add_scatter(f"rollout {i + 1}", arr[:, 0].tolist(), arr[:, 1].tolist())
            path = out / f"paths_{r['method']}_seed{r['seed']}.svg"
            fig.save(path)
            made.append(path)
            break  # one path figure is enough per directory

    ratio_csv = results / "ratio_summary.csv"
    if ratio_csv.exists():
        rows = harness.load_sweep_summary(results)
        fig = Figure(title="Average success vs replay ratio", xlabel="replay ratio",
                     ylabel="mean success")
        for method in sorted({r["method"] for r in rows}):
            pts = [r for r in rows if r["method"] == method]
            pts.sort(key=lambda r: r["ratio"])
            fig.add_line(method, [r["ratio"] for r in pts], [r["mean"] for r in pts],
                         yerr=[r["half"] for r in pts])
        path = out / "ratio_success.svg"
        fig.save(path)
        made.append(path)
    return made


def cmd_analyze(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = substream(args.seed, "analyze")

    cov_path = out / "coverage.csv"
    with open(cov_path, "w", encoding="utf-8") as f:
        f.write("n,m,trials,mean_draws,exact_mean\n")
        reports = []
        for n in (4, 16, 50):
            for m in (1, 3):
                rep = coverage.expected_coverage_draws(n, m, args.trials, rng)
                reports.append(rep)
                exact = "" if rep.exact_mean is None else repr(rep.exact_mean)
                f.write(f"{rep.n},{rep.m},{rep.trials},{rep.mean_draws!r},{exact}\n")
    print(f"[out ] {cov_path}")

    off_path = out / "offcourse.csv"
    with open(off_path, "w", encoding="utf-8") as f:
        f.write("p_step,steps,probability\n")
        for p in (0.001, 0.01, 0.05):
            for n in (50, 100, 200):
                f.write(f"{p!r},{n},{coverage.offcourse_probability(p, n)!r}\n")
    print(f"[out ] {off_path}")
    print(f"off-course probability at 1% per step over 200 steps: "
          f"{coverage.offcourse_probability(0.01, 200):.2f}")

    fig = Figure(title="Draws to cover every timestep once", xlabel="trajectory length n",
                 ylabel="draws")
    sims = [r for r in reports if r.m == 1]
    fig.add_line("simulated", [r.n for r in sims], [r.mean_draws for r in sims])
    fig.add_line("n * H_n", [r.n for r in sims], [r.exact_mean for r in sims])
    fig_path = out / "coverage.svg"
    fig.save(fig_path)
    print(f"[out ] {fig_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tdgr", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a config's runs and aggregate metrics")
    run.add_argument("--config", required=True)
    run.add_argument("--output-dir", help="override the config's output directory")
    run.add_argument("--workers", type=int, help="parallel run workers")
    run.add_argument("--seeds", help="comma-separated seed override")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="replay-ratio ablation (tdgr/dgr)")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--ratios", help="comma-separated ratios, default 0.5..0.9")
    sweep.add_argument("--output-dir")
    sweep.add_argument("--workers", type=int)
    sweep.add_argument("--seeds")
    sweep.set_defaults(func=cmd_sweep)

    plot = sub.add_parser("plot", help="render SVG figures from results")
    plot.add_argument("--results", required=True)
    plot.add_argument("--out", help="figure directory (default <results>/figures)")
    plot.set_defaults(func=cmd_plot)

    analyze = sub.add_parser("analyze", help="coverage and compounding-error reports")
    analyze.add_argument("--out", default="analysis")
    analyze.add_argument("--trials", type=int, default=20000)
    analyze.add_argument("--seed", type=int, default=0)
    analyze.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TdgrError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
