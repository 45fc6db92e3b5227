"""Command-line entry point ``dlrenkf``.

Exit codes: 0 on success, 2 for configuration errors, 3 for numerical
failures during a run.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .errors import ConfigError, MismatchedExperiments, NumericalError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _base_config(args) -> harness.ExperimentConfig:
    if args.config and args.preset:
        raise ConfigError("use either --config or --preset, not both")
    if args.config:
        cfg = harness.load_config(args.config)
    else:
        cfg = harness.preset(args.preset or "fisher-reduced")
    changes = {}
    if getattr(args, "steps", None) is not None:
        changes["time.steps"] = args.steps
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "repetitions", None) is not None:
        changes["repetitions"] = args.repetitions
    return cfg.replace(**changes) if changes else cfg


def _filter_overrides(args) -> dict:
    changes = {}
    if args.filter is not None:
        changes["filter.variant"] = args.filter
    if args.particles is not None:
        changes["filter.particles"] = args.particles
    if args.dlr:
        changes["filter.dlr"] = True
    if args.rank is not None:
        changes["filter.rank"] = args.rank
        changes["filter.adaptive"] = None
    if args.adaptive is not None:
        changes["filter.adaptive"] = args.adaptive
        changes["filter.dlr"] = True
    if args.min_rank is not None:
        changes["filter.min_rank"] = args.min_rank
    if args.warm_start is not None:
        changes["filter.warm_start"] = args.warm_start
    if args.hyper:
        changes["filter.hyper"] = True
        changes["filter.dlr"] = True
    return changes


def _progress(quiet):
    if quiet:
        return None

    def report(k, n, mean):
        if k % max(n // 10, 100) == 0 or k == n:
            print(f"  step {k}/{n}  theta mean {np.array2string(mean, precision=4)}", file=sys.stderr)
    return report


def _cmd_run(args) -> int:
    cfg = _base_config(args)
    changes = _filter_overrides(args)
    if changes:
        cfg = cfg.replace(**changes)
    exp = harness.build_experiment(cfg)
    out = Path(args.out)
    records = []
    for r in range(cfg.repetitions):
        rec = harness.run_filter(cfg, r, exp, _progress(args.quiet))
        target = out if cfg.repetitions == 1 else out / f"rep{r:02d}"
        rec.to_dir(target)
        records.append(rec)
        print(f"{rec.variant} {rec.label} rep {r}: relative error {rec.final_error:.4g} "
              f"({rec.wall_clock:.2f} s) -> {target}")
    if len(records) > 1:
        harness.compare_runs(records).to_csv(out / "comparison.csv")
    return EXIT_OK


def _cmd_simulate_truth(args) -> int:
    cfg = _base_config(args)
    exp = harness.build_experiment(cfg)
    t = cfg.time
    x0 = harness.simulate_truth(exp.model, exp.theta_true, exp.x0, t.dt, t.warmup_steps, keep_every=0).final
    traj = harness.simulate_truth(exp.model, exp.theta_true, x0, t.dt, t.n_steps, t0=t.warmup_steps * t.dt,
                                  H=exp.obs.H, keep_every=args.keep_every)
    data = harness.synthesize_observations(traj, exp.obs.Gamma, t.dt, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(out / "truth.npz", times=traj.times, states=traj.states, observed=traj.observed,
                        dZ=data.dZ, Gamma=data.Gamma, dt=t.dt, theta_true=exp.theta_true)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    print(f"truth: {t.n_steps} steps, d={exp.model.dim}, k={exp.obs.k} -> {out / 'truth.npz'}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    records = []
    for d in args.runs:
        path = Path(d)
        subdirs = sorted(p.parent for p in path.glob("**/metrics.json"))
        if not subdirs:
            raise ConfigError(f"{path}: no run directories found")
        records.extend(harness.RunRecord.from_dir(p) for p in subdirs)
    table = harness.compare_runs(records)
    print(table)
    if args.out:
        table.to_csv(args.out)
    return EXIT_OK


def _cmd_sweep_rank(args) -> int:
    cfg = _base_config(args)
    changes = {}
    if args.filter is not None:
        changes["filter.variant"] = args.filter
    if args.particles is not None:
        changes["filter.particles"] = args.particles
    if changes:
        cfg = cfg.replace(**changes)
    out = Path(args.out)
    records = harness.sweep_rank(cfg, args.ranks, include_fom=not args.no_fom, progress=_progress(args.quiet))
    for rec in records:
        rec.to_dir(out / f"{rec.variant}-{rec.label}-rep{rec.repetition:02d}")
    table = harness.compare_runs(records)
    table.to_csv(out / "comparison.csv")
    print(table)
    return EXIT_OK


def _cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rec = harness.RunRecord.from_dir(args.run)
    out = Path(args.out or args.run)
    out.mkdir(parents=True, exist_ok=True)
    dt = rec.config["time"]["dt"]
    t = rec.steps * dt
    n_theta = rec.param_mean.shape[1]
    if n_theta:
        fig, axes = plt.subplots(n_theta, 1, figsize=(6, 1.8 * n_theta + 0.6), sharex=True, squeeze=False)
        for i, ax in enumerate(axes[:, 0]):
            m, s = rec.param_mean[:, i], rec.param_std[:, i]
            ax.plot(t, m, lw=1.2)
            ax.fill_between(t, m - 2 * s, m + 2 * s, alpha=0.25)
            ax.axhline(rec.theta_true[i], color="k", ls="--", lw=0.8)
            ax.set_ylabel(f"theta_{i}")
        axes[-1, 0].set_xlabel("t")
        fig.suptitle(f"{rec.variant} {rec.label}: error {rec.final_error:.3g}")
        fig.tight_layout()
        fig.savefig(out / "params.png", dpi=120)
        plt.close(fig)
    if rec.ranks is not None:
        fig, ax = plt.subplots(figsize=(6, 2.5))
        for b, name in enumerate(rec.block_names):
            ax.step(t, rec.ranks[:, b], where="post", label=name)
        ax.set_xlabel("t")
        ax.set_ylabel("rank")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "ranks.png", dpi=120)
        plt.close(fig)
    print(f"plots written to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dlrenkf", description="Ensemble Kalman twin experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--preset", choices=sorted(harness.PRESETS), help="built-in experiment")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--steps", type=int, help="override the number of assimilation steps")
        sp.add_argument("--out", default="runs/latest", help="output directory")
        sp.add_argument("--quiet", action="store_true")

    sp = sub.add_parser("simulate-truth", help="simulate the truth and synthetic observations")
    common(sp)
    sp.add_argument("--keep-every", type=int, default=10, help="stride of stored truth states")
    sp.set_defaults(func=_cmd_simulate_truth)

    sp = sub.add_parser("run", help="run a filter on a twin experiment")
    common(sp)
    sp.add_argument("--filter", choices=["venkf", "denkf", "senkf"])
    sp.add_argument("--dlr", action="store_true", help="use the dynamical low-rank filter")
    ranks = sp.add_mutually_exclusive_group()
    ranks.add_argument("--rank", type=int, metavar="N")
    ranks.add_argument("--adaptive", type=float, metavar="THETA", help="rank-adaptive truncation threshold")
    sp.add_argument("--min-rank", type=int, metavar="N")
    sp.add_argument("--warm-start", type=int, metavar="STEPS")
    sp.add_argument("--hyper", action="store_true", help="DEIM/CUR hyper-reduction of the drift")
    sp.add_argument("--particles", type=int, metavar="P")
    sp.add_argument("--repetitions", type=int)
    sp.set_defaults(func=_cmd_run)

    sp = sub.add_parser("compare", help="tabulate errors and timings of finished runs")
    sp.add_argument("runs", nargs="+", help="run directories (searched recursively)")
    sp.add_argument("--out", help="write the table as CSV")
    sp.set_defaults(func=_cmd_compare)

    sp = sub.add_parser("sweep-rank", help="full-order run plus low-rank runs at several ranks")
    common(sp)
    sp.add_argument("--ranks", type=int, nargs="+", default=[2, 4, 7])
    sp.add_argument("--filter", choices=["venkf", "denkf", "senkf"])
    sp.add_argument("--particles", type=int, metavar="P")
    sp.add_argument("--repetitions", type=int)
    sp.add_argument("--no-fom", action="store_true", help="skip the full-order reference")
    sp.set_defaults(func=_cmd_sweep_rank)

    sp = sub.add_parser("plot", help="plot parameter trajectories and rank history of a run")
    sp.add_argument("run", help="run directory")
    sp.add_argument("--out", help="image directory (defaults to the run directory)")
    sp.set_defaults(func=_cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, MismatchedExperiments) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
