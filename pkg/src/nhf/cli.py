"""Command-line interface.

Verbs: ``generate`` (ground truth + observations), ``run`` (one configured
experiment, possibly repeated), ``sweep`` (repeat runs along one axis),
``convergence`` (empirical rate experiment against the grid oracle) and
``report`` (re-aggregate emitted per-run JSON files).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import harness
from .harness import ExperimentConfig, canonical_json, resolve_threads
from .models import generate_ground_truth, save_states_binary, save_states_csv


def _timestamp() -> str:
    return time.strftime("%Y%m%dT%H%M%S")


def _out_path(out_dir: str, verb: str, seed: int, ext: str, suffix: str = "") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out / f"{verb}_{_timestamp()}{suffix}_{seed}.{ext}"


def _load_config(args) -> ExperimentConfig:
    if args.config:
        config = ExperimentConfig.from_json_file(args.config)
    else:
        config = ExperimentConfig()
    if args.seed is not None:
        from dataclasses import replace
        config = replace(config, run=replace(config.run, seed=args.seed))
    return config.validate()


def _add_common(sub: argparse.ArgumentParser):
    sub.add_argument("--config", type=str, default=None, help="JSON experiment config")
    sub.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub.add_argument("--out", type=str, default=".", help="output directory")
    sub.add_argument("--format", choices=("json", "csv"), default="json")
    sub.add_argument("--threads", type=int, default=0,
                     help="worker count for repetitions (0 = auto / NHF_THREADS)")


def cmd_generate(args) -> int:
    config = _load_config(args)
    n_steps = int(round(config.run.duration / config.model.h))
    trajectory, observations = generate_ground_truth(
        config.model.truth_config(), n_steps, config.run.seed)
    ext = "csv" if args.format == "csv" else "bin"
    writer = save_states_csv if args.format == "csv" else save_states_binary
    traj_path = _out_path(args.out, "generate", config.run.seed, ext, "_truth")
    obs_path = _out_path(args.out, "generate", config.run.seed, ext, "_obs")
    writer(trajectory.times, trajectory.slow_states, traj_path)
    obs_steps = [(n + 1) * config.model.m for n in range(observations.shape[0])]
    writer(obs_steps, observations, obs_path)
    print(f"wrote {traj_path} ({n_steps + 1} states) and {obs_path} "
          f"({observations.shape[0]} observations)")
    return 0


def cmd_run(args) -> int:
    config = _load_config(args)
    threads = resolve_threads(args.threads)
    reports = harness.run_repetitions(config, threads=threads)
    paths = []
    for r, report in enumerate(reports):
        suffix = f"_rep{r}" if len(reports) > 1 else ""
        path = _out_path(args.out, "run", config.run.seed, args.format, suffix)
        harness.emit_report(report, args.format, path)
        paths.append(path)
        mse = "n/a" if report.mse_mean is None else f"{report.mse_mean:.4f}"
        print(f"run {r}: mse_mean={mse} wall={report.wall_time_seconds:.2f}s -> {path}")
    if len(reports) > 1 and args.format == "json":
        agg = harness.aggregate_reports(paths)
        agg_path = _out_path(args.out, "run", config.run.seed, "json", "_aggregate")
        agg_path.write_text(canonical_json(agg))
        print(f"aggregate: mse_mean={agg['mse_mean']:.4f} -> {agg_path}")
    return 0


def cmd_sweep(args) -> int:
    config = _load_config(args)
    values = [float(v) if "." in v else int(v) for v in args.values.split(",")]
    threads = resolve_threads(args.threads)
    aggregates = harness.sweep(config, args.axis, values, repetitions=args.reps,
                               threads=threads)
    path = _out_path(args.out, "sweep", config.run.seed, "json")
    path.write_text(canonical_json(aggregates))
    for agg in aggregates:
        print(f"{args.axis}={agg['value']}: mse={agg['mse_mean']:.4f} "
              f"(std {agg['mse_std']:.4f}) wall={agg['wall_time_mean']:.2f}s")
    print(f"wrote {path}")
    if args.format == "csv":
        csv_path = _out_path(args.out, "sweep", config.run.seed, "csv")
        with open(csv_path, "w") as fh:
            fh.write("axis,value,n_runs,mse_mean,mse_std,wall_time_mean,wall_time_std\n")
            for agg in aggregates:
                fh.write(f"{agg['axis']},{agg['value']},{agg['n_runs']},"
                         f"{agg['mse_mean']},{agg['mse_std']},"
                         f"{agg['wall_time_mean']},{agg['wall_time_std']}\n")
        print(f"wrote {csv_path}")
    return 0


def cmd_convergence(args) -> int:
    threads = resolve_threads(args.threads)
    result = harness.convergence_experiment(
        n_values=tuple(int(v) for v in args.n_values.split(",")),
        n_seeds=args.seeds, base_seed=args.seed or 0, threads=threads)
    path = _out_path(args.out, "convergence", args.seed or 0, "json")
    path.write_text(canonical_json(result))
    pairs = ", ".join(f"N={n}: {e:.5f}" for n, e in
                      zip(result["n_values"], result["mean_errors"]))
    print(f"mean |error| vs oracle: {pairs}")
    print(f"log-log slope: {result['slope']:.3f} (theory -0.5) -> {path}")
    return 0


def cmd_report(args) -> int:
    agg = harness.aggregate_reports(args.inputs)
    path = _out_path(args.out, "report", 0, args.format)
    if args.format == "json":
        path.write_text(canonical_json(agg))
    else:
        with open(path, "w") as fh:
            fh.write("n_runs,mse_mean,mse_std,wall_time_mean,wall_time_std\n")
            fh.write(f"{agg['n_runs']},{agg['mse_mean']},{agg['mse_std']},"
                     f"{agg['wall_time_mean']},{agg['wall_time_std']}\n")
    print(f"aggregated {agg['n_runs']} reports -> {path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="nhf",
        description="Nested hybrid filters for joint parameter and state estimation.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p_gen = sub.add_parser("generate", help="simulate ground truth and observations")
    _add_common(p_gen)
    p_gen.set_defaults(func=cmd_generate)

    p_run = sub.add_parser("run", help="run the configured experiment")
    _add_common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="repeat runs along one axis")
    _add_common(p_sweep)
    p_sweep.add_argument("--axis", choices=("N", "d_x", "m"), required=True)
    p_sweep.add_argument("--values", type=str, required=True,
                         help="comma-separated axis values")
    p_sweep.add_argument("--reps", type=int, default=None,
                         help="repetitions per value (default: config)")
    p_sweep.set_defaults(func=cmd_sweep)

    p_conv = sub.add_parser("convergence",
                            help="empirical rate experiment vs the grid oracle")
    _add_common(p_conv)
    p_conv.add_argument("--n-values", type=str, default="25,100,400,1600")
    p_conv.add_argument("--seeds", type=int, default=50)
    p_conv.set_defaults(func=cmd_convergence)

    p_rep = sub.add_parser("report", help="aggregate emitted per-run JSON reports")
    _add_common(p_rep)
    p_rep.add_argument("inputs", nargs="+", help="per-run JSON report files")
    p_rep.set_defaults(func=cmd_report)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
