"""Experiment orchestration: configuration, runs, sweeps and reports.

A run generates a two-scale Lorenz 96 ground truth, assimilates its
observations with a configured nested hybrid filter using the polynomial
forecast model, and records the per-observation state MSE together with
posterior parameter summaries and wall time.  Sweeps repeat runs over one
axis (particle count, state dimension, or observation gap) with seeds
derived by a splitmix expansion.  Reports serialize to JSON (full nested
structure) and CSV (plot-ready series).
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed

from .estimators import NestedHybridFilter
from .inner import DiscreteLinearInnerModel, EKFInner, GaussianBelief
from .models import (
    PolynomialAnsatzField,
    StateSpaceModel,
    TruthConfig,
    TwoScaleLorenzParams,
    generate_ground_truth,
)
from .oracle import LinearGaussianModel, grid_posterior
from .validation import check_box, require

_MASK64 = (1 << 64) - 1

DEFAULT_PRIOR_BOX = ((2.0, 12.0), (-0.2, 0.2), (-1.0, 1.5))


@dataclass(frozen=True)
class ModelConfig:
    """Truth-model block: two-scale Lorenz 96 constants and noise scales."""

    d_x: int = 40
    L: int = 10
    h: float = 5e-3
    m: int = 10
    K: int = 2
    F: float = 8.0
    C: float = 10.0
    H: float = 0.75
    B: float = 15.0
    sigma: float = None          # None -> h/4
    sigma_fast: float = None     # None -> sigma
    sigma_o: float = 4.0
    fast_ring: str = "global"
    spin_up: float = 10.0
    init_spread: float = 0.1

    def resolved_sigma(self) -> float:
        return self.h / 4.0 if self.sigma is None else self.sigma

    def resolved_sigma_fast(self) -> float:
        return self.resolved_sigma() if self.sigma_fast is None else self.sigma_fast

    def truth_config(self) -> TruthConfig:
        return TruthConfig(
            params=TwoScaleLorenzParams(F=self.F, C=self.C, H=self.H, B=self.B,
                                        d_x=self.d_x, L=self.L),
            h=self.h, m=self.m, K=self.K,
            sigma=self.resolved_sigma(), sigma_fast=self.resolved_sigma_fast(),
            sigma_o=self.sigma_o, spin_up=self.spin_up,
            init_spread=self.init_spread, fast_ring=self.fast_ring,
        )


@dataclass(frozen=True)
class FilterConfig:
    """Filter block: outer/inner choices and their knobs."""

    outer: str = "smc"            # {"smc", "sqmc"}
    inner: str = "ekf"            # {"ekf", "enkf", "bpf"}
    n_particles: int = 100
    ensemble_size: int = None     # None -> d_x
    jitter_mode: str = "mixture"
    jitter_spread: float = 0.05
    jitter_epsilon: float = None
    prior_box: tuple = DEFAULT_PRIOR_BOX
    cov_normalization: str = "M"
    block_d_q: int = None
    block_threshold: int = 50
    initial_state_cov: float = None   # None -> sigma_o^2
    key_mode: str = "slot"


@dataclass(frozen=True)
class RunConfig:
    """Run block: duration in continuous-time units, seeding, repetitions."""

    duration: float = 40.0
    seed: int = 0
    repetitions: int = 10

    def __post_init__(self):
        require(self.duration >= 0, "duration must be nonnegative")
        require(self.repetitions >= 1, "repetitions must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self) -> "ExperimentConfig":
        require(self.model.d_x >= 4, "d_x must be at least 4")
        require(self.model.m >= 1 and self.model.h > 0, "need m >= 1 and h > 0")
        require(self.filter.outer in ("smc", "sqmc"), "outer must be smc or sqmc")
        require(self.filter.inner in ("ekf", "enkf", "bpf"), "inner must be ekf, enkf or bpf")
        require(self.filter.n_particles >= 1, "n_particles must be positive")
        check_box(self.filter.prior_box, "prior_box")
        require(self.run.duration == 0 or self.run.duration >= self.model.h * self.model.m,
                "duration shorter than one observation gap")
        return self

    def to_dict(self) -> dict:
        out = asdict(self)
        out["filter"]["prior_box"] = [list(pair) for pair in self.filter.prior_box]
        return out

    @staticmethod
    def from_dict(data: dict) -> "ExperimentConfig":
        data = dict(data)
        model = ModelConfig(**data.get("model", {}))
        filt_data = dict(data.get("filter", {}))
        if "prior_box" in filt_data:
            filt_data["prior_box"] = tuple(tuple(p) for p in filt_data["prior_box"])
        filt = FilterConfig(**filt_data)
        run = RunConfig(**data.get("run", {}))
        return ExperimentConfig(model=model, filter=filt, run=run).validate()

    @staticmethod
    def from_json_file(path) -> "ExperimentConfig":
        with open(path) as fh:
            return ExperimentConfig.from_dict(json.load(fh))


@dataclass
class RunReport:
    """Metrics emitted by one experiment run."""

    mse_time_series: list          # [(step n, mse or None), ...]
    mse_mean: float
    theta_trace: list              # per-step dicts (mean, cov diag, quantiles)
    wall_time_seconds: float
    config_echo: dict
    warnings: list

    def to_dict(self) -> dict:
        return {
            "config": self.config_echo,
            "results": {
                "mse_time_series": [[int(n), mse] for n, mse in self.mse_time_series],
                "mse_mean": self.mse_mean,
                "theta_trace": self.theta_trace,
                "warnings": list(self.warnings),
            },
            "timing": {"wall_time_seconds": self.wall_time_seconds},
        }

    @staticmethod
    def from_dict(data: dict) -> "RunReport":
        results = data["results"]
        return RunReport(
            mse_time_series=[(int(n), mse) for n, mse in results["mse_time_series"]],
            mse_mean=results["mse_mean"],
            theta_trace=results["theta_trace"],
            wall_time_seconds=data["timing"]["wall_time_seconds"],
            config_echo=data["config"],
            warnings=list(results["warnings"]),
        )


def splitmix64(value: int) -> int:
    value = (value + 0x9E3779B97F4A7C15) & _MASK64
    z = value
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def repetition_seed(base_seed: int, repetition: int) -> int:
    return splitmix64((int(base_seed) + int(repetition)) & _MASK64)


def mse_per_dim(truth, estimate) -> float:
    """(1/d) * squared Euclidean distance between truth and estimate."""
    truth = np.asarray(truth, dtype=float).ravel()
    estimate = np.asarray(estimate, dtype=float).ravel()
    require(truth.size == estimate.size,
            f"dimension mismatch: {truth.size} vs {estimate.size}")
    return float(np.mean((truth - estimate) ** 2))


def build_estimator(config: ExperimentConfig, initial_state_mean, seed: int) -> NestedHybridFilter:
    """Estimator over the polynomial forecast model per the config blocks."""
    model_cfg, filt = config.model, config.filter
    forecast = StateSpaceModel.for_drift(
        PolynomialAnsatzField(model_cfg.d_x),
        sigma=model_cfg.resolved_sigma(), sigma_o=model_cfg.sigma_o,
        h=model_cfg.h, m=model_cfg.m, K=model_cfg.K,
    )
    p0 = model_cfg.sigma_o ** 2 if filt.initial_state_cov is None else filt.initial_state_cov
    ensemble = filt.ensemble_size if filt.ensemble_size is not None else model_cfg.d_x
    return NestedHybridFilter(
        model=forecast, prior_box=filt.prior_box, outer=filt.outer, inner=filt.inner,
        n_particles=filt.n_particles, ensemble_size=ensemble,
        jitter_mode=filt.jitter_mode, jitter_spread=filt.jitter_spread,
        jitter_epsilon=filt.jitter_epsilon, cov_normalization=filt.cov_normalization,
        block_d_q=filt.block_d_q, block_threshold=filt.block_threshold,
        initial_state_mean=initial_state_mean, initial_state_cov=p0,
        key_mode=filt.key_mode, random_state=seed,
    )


def run_experiment(config: ExperimentConfig, seed: int = None) -> RunReport:
    """Run one experiment: truth generation, assimilation, metrics.

    Deterministic given (config, seed); ``seed`` defaults to the config's.
    The filter's initial state belief is centered on the recorded initial
    truth state with covariance ``initial_state_cov * I``.
    """
    config.validate()
    seed = config.run.seed if seed is None else int(seed)
    model_cfg = config.model
    started = time.perf_counter()

    n_steps = int(round(config.run.duration / model_cfg.h))
    truth, observations = generate_ground_truth(model_cfg.truth_config(), n_steps, seed)
    n_obs = observations.shape[0]

    mse_series: list = []
    theta_trace: list = []
    warnings: list = []
    if n_obs > 0:
        estimator = build_estimator(config, truth.slow_states[0], seed)
        for n in range(1, n_obs + 1):
            estimator.partial_fit(observations[n - 1])
            summary = estimator.summaries_[-1]
            truth_state = truth.slow_states[n * model_cfg.m]
            predictor = summary.state_predictor
            if np.isfinite(predictor).all():
                value = mse_per_dim(truth_state, predictor)
                summary.mse_per_dim = value
                mse_series.append((n, value))
            else:
                mse_series.append((n, None))
                warnings.append(f"step {n}: non-finite state predictor")
            for flag in summary.flags:
                warnings.append(f"step {n}: {flag}")
            quantiles = np.quantile(estimator.cloud_.thetas, [0.05, 0.95], axis=0)
            theta_trace.append({
                "step": n,
                "theta_mean": [float(v) for v in summary.theta_mean],
                "theta_cov_diag": [float(v) for v in np.diag(summary.theta_cov)],
                "theta_q05": [float(v) for v in quantiles[0]],
                "theta_q95": [float(v) for v in quantiles[1]],
            })

    finite_values = [v for _, v in mse_series if v is not None]
    mse_mean = float(np.mean(finite_values)) if finite_values else None
    wall = time.perf_counter() - started
    config_echo = replace(config, run=replace(config.run, seed=seed)).to_dict()
    return RunReport(mse_time_series=mse_series, mse_mean=mse_mean,
                     theta_trace=theta_trace, wall_time_seconds=wall,
                     config_echo=config_echo, warnings=warnings)


def run_repetitions(config: ExperimentConfig, threads: int = 1) -> list:
    """Run ``config.run.repetitions`` independent runs with derived seeds."""
    reps = config.run.repetitions
    seeds = [repetition_seed(config.run.seed, r) for r in range(reps)]
    if threads == 1 or reps == 1:
        return [run_experiment(config, s) for s in seeds]
    return Parallel(n_jobs=threads)(delayed(run_experiment)(config, s) for s in seeds)


def _config_for_axis(config: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "N":
        return replace(config, filter=replace(config.filter, n_particles=int(value)))
    if axis == "d_x":
        new_model = replace(config.model, d_x=int(value))
        new_filter = config.filter
        if config.filter.inner == "enkf":
            new_filter = replace(config.filter, ensemble_size=int(value))
        return replace(config, model=new_model, filter=new_filter)
    if axis == "m":
        return replace(config, model=replace(config.model, m=int(value)))
    raise ValueError(f"unknown sweep axis {axis!r} (expected N, d_x or m)")


def sweep(config: ExperimentConfig, axis: str, values, repetitions: int = None,
          threads: int = 1):
    """Repeat runs along one axis; aggregate mean/std of MSE and wall time.

    Returns one aggregate dict per axis value, each carrying its member
    run reports under ``"runs"``.  For the d_x axis the EnKF ensemble size
    follows the dimension.
    """
    values = list(values)
    require(len(values) > 0, "sweep needs at least one value")
    reps = config.run.repetitions if repetitions is None else int(repetitions)
    aggregates = []
    jobs = []
    for value in values:
        cell = _config_for_axis(config, axis, value)
        for r in range(reps):
            jobs.append((value, cell, repetition_seed(config.run.seed, r)))
    if threads == 1:
        reports = [run_experiment(cfg, s) for _, cfg, s in jobs]
    else:
        reports = Parallel(n_jobs=threads)(delayed(run_experiment)(cfg, s) for _, cfg, s in jobs)
    for value in values:
        members = [rep for (v, _, _), rep in zip(jobs, reports) if v == value]
        mses = [r.mse_mean for r in members if r.mse_mean is not None]
        walls = [r.wall_time_seconds for r in members]
        aggregates.append({
            "axis": axis,
            "value": value,
            "n_runs": len(members),
            "mse_mean": float(np.mean(mses)) if mses else None,
            "mse_std": float(np.std(mses)) if mses else None,
            "wall_time_mean": float(np.mean(walls)),
            "wall_time_std": float(np.std(walls)),
            "runs": [r.to_dict() for r in members],
        })
    return aggregates


def canonical_json(payload) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def deterministic_digest(report_dict: dict) -> str:
    """Canonical JSON of a report with the (wall-clock) timing subtree removed.

    Wall time is the one physically non-reproducible field; every other
    byte of a report is a pure function of (config, seed).
    """
    import hashlib

    stripped = {k: v for k, v in report_dict.items() if k != "timing"}
    return hashlib.sha256(canonical_json(stripped).encode()).hexdigest()


def emit_report(report: RunReport, fmt: str, path) -> None:
    """Write a report as JSON (full) or CSV (MSE series + theta trace files).

    CSV mode derives two siblings from ``path``: ``<stem>_mse.csv`` with
    columns (step, mse) and ``<stem>_theta.csv`` with columns (step, mean
    components, covariance diagonal).
    """
    path = str(path)
    try:
        if fmt == "json":
            with open(path, "w") as fh:
                fh.write(canonical_json(report.to_dict()))
        elif fmt == "csv":
            stem, _, _ = path.rpartition(".")
            stem = stem or path
            with open(stem + "_mse.csv", "w") as fh:
                fh.write("step,mse\n")
                for n, mse in report.mse_time_series:
                    fh.write(f"{n},{'' if mse is None else repr(mse)}\n")
            with open(stem + "_theta.csv", "w") as fh:
                d_theta = len(report.theta_trace[0]["theta_mean"]) if report.theta_trace else 0
                mean_cols = ",".join(f"theta_mean_{j}" for j in range(d_theta))
                var_cols = ",".join(f"theta_var_{j}" for j in range(d_theta))
                fh.write(f"step,{mean_cols},{var_cols}\n".replace(",,", ","))
                for entry in report.theta_trace:
                    cells = [str(entry["step"])]
                    cells += [repr(v) for v in entry["theta_mean"]]
                    cells += [repr(v) for v in entry["theta_cov_diag"]]
                    fh.write(",".join(cells) + "\n")
        else:
            raise ValueError(f"unknown report format {fmt!r}")
    except OSError as exc:
        raise OSError(f"failed to write report to {path}: {exc}") from exc


def load_report(path) -> RunReport:
    with open(path) as fh:
        return RunReport.from_dict(json.load(fh))


def aggregate_reports(paths) -> dict:
    """Re-aggregate emitted per-run JSON reports (mean/std of MSE and time)."""
    reports = [load_report(p) for p in paths]
    require(len(reports) > 0, "no reports to aggregate")
    mses = [r.mse_mean for r in reports if r.mse_mean is not None]
    walls = [r.wall_time_seconds for r in reports]
    return {
        "n_runs": len(reports),
        "mse_mean": float(np.mean(mses)) if mses else None,
        "mse_std": float(np.std(mses)) if mses else None,
        "wall_time_mean": float(np.mean(walls)),
        "wall_time_std": float(np.std(walls)),
        "sources": [str(p) for p in paths],
    }


def convergence_experiment(n_values=(25, 100, 400, 1600), n_seeds=50, n_obs=40,
                           truth_theta=0.7, trans_var=0.5, obs_var=0.2,
                           box=(0.2, 0.99), grid_size=512, data_seed=2024,
                           base_seed=0, threads: int = 1) -> dict:
    """Empirical convergence-rate experiment on a scalar linear-Gaussian model.

    One fixed synthetic dataset is assimilated by the nested filter with an
    exact Kalman inner filter for several particle counts; the error of the
    posterior parameter mean against a dense grid posterior is averaged over
    seeds and regressed against N on log-log axes.
    """
    lo, hi = box
    data_model = LinearGaussianModel([[truth_theta]], [[trans_var]], [[1.0]],
                                     [[obs_var]], [0.0], [[1.0]])
    data_rng = np.random.default_rng(data_seed)
    _, observations = data_model.simulate(n_obs, data_rng)

    grid = np.linspace(lo, hi, grid_size)
    grid_w = grid_posterior(
        grid,
        lambda th: LinearGaussianModel([[th]], [[trans_var]], [[1.0]], [[obs_var]],
                                       [0.0], [[1.0]]),
        observations,
    )
    oracle_mean = float(grid_w @ grid)
    oracle_std = float(np.sqrt(grid_w @ (grid - oracle_mean) ** 2))

    inner_model = DiscreteLinearInnerModel(
        lambda th: np.array([[float(np.asarray(th).ravel()[0])]]),
        [[trans_var]], [[1.0]], [[obs_var]])

    def one_run(n_particles: int, seed: int) -> float:
        est = NestedHybridFilter(
            model=inner_model, prior_box=[box], outer="smc", inner="ekf",
            n_particles=n_particles, initial_state_mean=[0.0],
            initial_state_cov=1.0, random_state=seed)
        est.fit(observations)
        return abs(float(est.theta_mean_[0]) - oracle_mean)

    jobs = [(n, splitmix64((base_seed + 7919 * n + s) & _MASK64))
            for n in n_values for s in range(n_seeds)]
    if threads == 1:
        errors = [one_run(n, s) for n, s in jobs]
    else:
        errors = Parallel(n_jobs=threads)(delayed(one_run)(n, s) for n, s in jobs)
    errors = np.asarray(errors).reshape(len(n_values), n_seeds)
    mean_errors = errors.mean(axis=1)
    slope, intercept = np.polyfit(np.log(np.asarray(n_values, dtype=float)),
                                  np.log(mean_errors), 1)
    return {
        "n_values": [int(n) for n in n_values],
        "mean_errors": [float(e) for e in mean_errors],
        "slope": float(slope),
        "intercept": float(intercept),
        "oracle_mean": oracle_mean,
        "oracle_std": oracle_std,
        "n_seeds": int(n_seeds),
        "n_obs": int(n_obs),
    }


def resolve_threads(requested) -> int:
    """Thread-count policy: explicit > 0 wins, else NHF_THREADS, else cpu count."""
    if requested is not None and int(requested) > 0:
        return int(requested)
    env = os.environ.get("NHF_THREADS", "")
    if env.strip():
        value = int(env)
        if value > 0:
            return value
    return max(1, os.cpu_count() or 1)
