"""
Monte-Carlo benchmark harness.

Draws random channels for a scenario, runs the coarse and refined stages per
trial, and aggregates LoS-delay RMSE, model detection rate, error CDF and
sample counts. Trials are independent and seeded from (master seed, trial
index), so results do not depend on how they are scheduled across workers.
"""

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from spvbi_types import BandPlan, ChannelTruth, CoarseEstimate, CoarseMode, Observation, OrderCriterion
from sim_utils import SimUtils
from signal_model import snr_to_noise_var, synthesize
from coarse_stage import ErrorSpec, IntervalPolicy, coarse_estimate, default_grid, estimate_order, oracle_coarse
from runner import RunConfig, run_mm_spvbi

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["axis_value", "rmse_map_ns", "rmse_mmse_ns", "detect_rate", "mean_samples_per_iter",
                   "n_trials", "seed"]
CDF_COLUMNS = ["axis_value", "error_ns", "cum_prob"]

# stream keys below (master seed, trial index)
TRUTH_STREAM, NOISE_STREAM, ORACLE_STREAM, RUN_STREAM = 0, 1, 2, 3


@dataclass
class TruthSpec:
    """
    Random channel layout. Delays: tau_1 ~ U(first_delay), tau_2 = tau_1 + U(pair_spacing),
    tau_k = tau_k-1 + U(other_spacing) for k >= 3. All ranges in seconds.
    """
    n_paths: int = 3
    gain_magnitude: float = 0.5
    first_delay: Tuple[float, float] = (50e-9, 150e-9)
    pair_spacing: Tuple[float, float] = (30e-9, 40e-9)
    other_spacing: Tuple[float, float] = (100e-9, 200e-9)
    delta_std: float = 0.1e-9

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.gain_magnitude <= 0 or self.delta_std < 0:
            raise ValueError("gain_magnitude must be > 0 and delta_std >= 0")
        for name in ("first_delay", "pair_spacing", "other_spacing"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} must be an increasing non-negative range, got {(lo, hi)}")
        if self.n_paths > 1 and self.pair_spacing[0] <= 0:
            raise ValueError("pair_spacing must be > 0")
        if self.n_paths > 2 and self.other_spacing[0] <= 0:
            raise ValueError("other_spacing must be > 0")


@dataclass
class Scenario:
    plan: BandPlan = field(default_factory=BandPlan.default)
    truth: TruthSpec = field(default_factory=TruthSpec)
    snr_db: float = 10.0
    snr_mode: str = "total"
    n_trials: int = 500
    coarse_mode: CoarseMode = CoarseMode.ESTIMATED
    error_spec: ErrorSpec = field(default_factory=ErrorSpec)
    criterion: OrderCriterion = OrderCriterion.MDL
    k_max: int = 4
    grid_step: float = 1e-9
    grid_max: float = 500e-9
    interval_policy: IntervalPolicy = field(default_factory=IntervalPolicy)
    phase_init: str = "zero"
    run: RunConfig = field(default_factory=RunConfig)
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.n_trials < 1:
            raise ValueError("n_trials must be >= 1")
        if self.snr_mode not in ("total", "los"):
            raise ValueError(f"unknown snr_mode '{self.snr_mode}'")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")
        if self.phase_init not in ("zero", "regression"):
            raise ValueError(f"unknown phase_init '{self.phase_init}'")


@dataclass
class TrialResult:
    trial: int
    seed: int
    tau1_true: float
    tau1_map: float
    tau1_mmse: float
    selected_model: int
    true_model: int
    k_hat: int
    iterations: int
    total_samples: int
    converged: bool

    @property
    def detected(self) -> bool:
        return self.true_model >= 0 and self.selected_model == self.true_model


@dataclass
class MetricsRecord:
    axis: str
    axis_value: float
    rmse_map_ns: float
    rmse_mmse_ns: float
    detect_rate: float
    mean_samples_per_iter: float
    n_trials: int
    seed: int
    cdf: List[Tuple[float, float]]
    trials: List[TrialResult]

    def summary_row(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in SUMMARY_COLUMNS}


def draw_truth(plan: BandPlan, spec: TruthSpec, snr_db: float, snr_mode: str,
               rng: np.random.Generator) -> ChannelTruth:
    """Random channel: delays per the spacing rules, unit-magnitude-scaled random-phase gains."""
    tau = [rng.uniform(*spec.first_delay)]
    for k in range(1, spec.n_paths):
        spacing = spec.pair_spacing if k == 1 else spec.other_spacing
        tau.append(tau[-1] + rng.uniform(*spacing))
    alpha = spec.gain_magnitude * np.exp(1j * rng.uniform(0.0, 2 * np.pi, spec.n_paths))
    phi = rng.uniform(0.0, 2 * np.pi, plan.n_bands)
    delta = spec.delta_std * rng.standard_normal(plan.n_bands)
    return ChannelTruth(alpha=alpha, tau=np.array(tau), phi=phi, delta=delta,
                        noise_var=snr_to_noise_var(alpha, snr_db, snr_mode))


def true_model_label(truth: ChannelTruth, coarse: CoarseEstimate, split_origins: Sequence[Optional[int]]) -> int:
    """
    Index of the candidate model whose delay structure matches the truth.

    The coarse path hiding two true delays is the oracle merge target when
    there is one, otherwise found by assigning each true delay to its nearest
    coarse delay. Every coarse path holding exactly one delay means the
    unsplit model is right. Any other layout, or a doubled path nobody split,
    gives -1.
    """
    if coarse.merged_index is not None:
        target = coarse.merged_index
    else:
        nearest = np.argmin(np.abs(truth.tau[:, None] - coarse.tau_hat[None, :]), axis=1)
        counts = np.bincount(nearest, minlength=coarse.k_hat)
        if np.all(counts == 1):
            target = None
        elif np.sum(counts == 2) == 1 and np.all((counts == 1) | (counts == 2)):
            target = int(np.flatnonzero(counts == 2)[0])
        else:
            return -1
    for v, origin in enumerate(split_origins):
        if origin == target:
            return v
    return -1


def trial_seed(master_seed: int, trial: int) -> int:
    return int(np.random.SeedSequence([master_seed, trial, RUN_STREAM]).generate_state(1)[0])


def build_coarse(scenario: Scenario, truth: ChannelTruth, obs: Observation, trial: int) -> CoarseEstimate:
    if scenario.coarse_mode == CoarseMode.ORACLE:
        rng = SimUtils.stream(scenario.seed, trial, ORACLE_STREAM)
        return oracle_coarse(truth, scenario.plan, scenario.error_spec, rng, scenario.interval_policy)
    grid = default_grid(scenario.grid_step, scenario.grid_max)
    k_hat = estimate_order(obs, scenario.plan, scenario.k_max, scenario.criterion, grid=grid)
    return coarse_estimate(obs, scenario.plan, k_hat, scenario.interval_policy, grid=grid,
                           phase_init=scenario.phase_init)


def prepare_trial(scenario: Scenario, trial: int) -> Tuple[ChannelTruth, Observation, CoarseEstimate]:
    """Truth, observation and coarse estimate of one trial."""
    truth = draw_truth(scenario.plan, scenario.truth, scenario.snr_db, scenario.snr_mode,
                       SimUtils.stream(scenario.seed, trial, TRUTH_STREAM))
    obs = synthesize(scenario.plan, truth, SimUtils.stream(scenario.seed, trial, NOISE_STREAM))
    return truth, obs, build_coarse(scenario, truth, obs, trial)


def run_trial(scenario: Scenario, trial: int, trace_path: Optional[str] = None) -> TrialResult:
    """One seeded trial: draw, synthesize, coarse stage, refined stage. Picklable for worker pools."""
    truth, obs, coarse = prepare_trial(scenario, trial)
    seed = trial_seed(scenario.seed, trial)
    report = run_mm_spvbi(obs, scenario.plan, coarse, replace(scenario.run, seed=seed), trace_path=trace_path)
    return TrialResult(
        trial=trial,
        seed=seed,
        tau1_true=float(truth.tau[0]),
        tau1_map=float(np.min(report.tau_map)),
        tau1_mmse=float(np.min(report.tau_mmse)),
        selected_model=report.best_model,
        true_model=true_model_label(truth, coarse, report.split_origins),
        k_hat=coarse.k_hat,
        iterations=report.iters_run,
        total_samples=report.total_samples,
        converged=report.converged,
    )


def aggregate(trials: List[TrialResult], axis: str, axis_value: float, seed: int) -> MetricsRecord:
    """Reduce per-trial rows, in trial order, to one MetricsRecord."""
    err_map = np.array([t.tau1_map - t.tau1_true for t in trials])
    err_mmse = np.array([t.tau1_mmse - t.tau1_true for t in trials])
    iterations = sum(t.iterations for t in trials)
    return MetricsRecord(
        axis=axis,
        axis_value=float(axis_value),
        rmse_map_ns=float(np.sqrt(np.mean(err_map ** 2)) / SimUtils.NS),
        rmse_mmse_ns=float(np.sqrt(np.mean(err_mmse ** 2)) / SimUtils.NS),
        detect_rate=float(np.mean([t.detected for t in trials])),
        mean_samples_per_iter=float(sum(t.total_samples for t in trials) / iterations) if iterations else 0.0,
        n_trials=len(trials),
        seed=seed,
        cdf=SimUtils.empirical_cdf(np.abs(err_map) / SimUtils.NS),
        trials=trials,
    )


def run_montecarlo(scenario: Scenario, axis: str = "snr_db", axis_value: Optional[float] = None,
                   progress: Optional[Callable[[TrialResult], None]] = None) -> MetricsRecord:
    """
    Run every trial of a scenario and aggregate.

    Args:
        scenario (Scenario): what to simulate
        axis (str): label stored in the record
        axis_value (float): value stored in the record, the scenario SNR by default
        progress (callable): called with each finished trial, in trial order

    Returns:
        MetricsRecord
    """
    indices = range(scenario.n_trials)
    results: List[TrialResult] = []
    logger.info("running %d trials (workers=%d, seed=%d)", scenario.n_trials, scenario.workers, scenario.seed)

    if scenario.workers > 1:
        with ProcessPoolExecutor(max_workers=scenario.workers) as pool:
            for result in pool.map(run_trial, [scenario] * scenario.n_trials, indices):
                results.append(result)
                if progress:
                    progress(result)
    else:
        for trial in indices:
            result = run_trial(scenario, trial)
            results.append(result)
            if progress:
                progress(result)

    value = scenario.snr_db if axis_value is None else axis_value
    return aggregate(results, axis, value, scenario.seed)


def sweep(scenario: Scenario, axis: str, values: Sequence[float],
          progress: Optional[Callable[[TrialResult], None]] = None) -> List[MetricsRecord]:
    """
    One MetricsRecord per axis value, all sharing the scenario's master seed.

    axis "snr_db" changes the SNR; axis "n_sub" changes the subcarrier count
    per band at fixed bandwidth.
    """
    if not values:
        raise ValueError("sweep needs at least one value")
    if axis not in ("snr_db", "n_sub"):
        raise ValueError(f"unknown sweep axis '{axis}'")
    records = []
    for value in values:
        if axis == "snr_db":
            point = replace(scenario, snr_db=float(value))
        else:
            point = replace(scenario, plan=scenario.plan.with_subcarriers(int(value)))
        logger.info("sweep %s = %s", axis, value)
        records.append(run_montecarlo(point, axis=axis, axis_value=value, progress=progress))
    return records


def _write_rows(path: str, fmt: str, columns: List[str], rows: List[Dict]) -> None:
    if fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns)
            writer.writeheader()
            writer.writerows(rows)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)


def emit(records: List[MetricsRecord], fmt: str, out_dir: str) -> List[str]:
    """
    Write summary, CDF and per-trial files.

    Files: summary.<fmt>, cdf.<fmt> (axis_value, error_ns, cum_prob) and
    trials.<fmt> (axis_value plus every TrialResult field).

    Returns:
        List[str]: written paths
    """
    if not records:
        raise ValueError("nothing to emit")
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown format '{fmt}' (expected csv or json)")
    os.makedirs(out_dir, exist_ok=True)

    trial_columns = ["axis_value"] + list(TrialResult.__dataclass_fields__)
    summary = [r.summary_row() for r in records]
    cdf = [{"axis_value": r.axis_value, "error_ns": e, "cum_prob": p} for r in records for e, p in r.cdf]
    trials = [dict(axis_value=r.axis_value, **asdict(t)) for r in records for t in r.trials]

    paths = []
    for stem, columns, rows in (("summary", SUMMARY_COLUMNS, summary), ("cdf", CDF_COLUMNS, cdf),
                                ("trials", trial_columns, trials)):
        path = os.path.join(out_dir, f"{stem}.{fmt}")
        _write_rows(path, fmt, columns, rows)
        paths.append(path)
    return paths


def observation_to_dict(plan: BandPlan, truth: ChannelTruth, obs: Observation, seed: int) -> Dict:
    """Plain-data fixture of one synthesized observation."""
    return {
        "seed": seed,
        "bands": [{"fc_hz": b.f_c, "fs_hz": b.f_s, "n_sub": b.n_sub} for b in plan.bands],
        "truth": {
            "alpha": [[float(a.real), float(a.imag)] for a in truth.alpha],
            "tau": truth.tau.tolist(),
            "phi": truth.phi.tolist(),
            "delta": truth.delta.tolist(),
            "noise_var": truth.noise_var,
        },
        "y": [[float(v.real), float(v.imag)] for v in obs.y],
    }
