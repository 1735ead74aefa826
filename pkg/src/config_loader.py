"""
Scenario configuration files.

Flat `key = value` text with dotted sections and `#` comments:

    band.1.fc_hz = 2.4e9
    band.1.fs_hz = 78.125e3
    band.1.n_sub = 256
    truth.pair_spacing_ns = 30, 40
    run.kappa2 = inf

Delays are given in ns, frequencies in Hz. Unknown keys are rejected.
"""

import logging
import re
from dataclasses import replace
from typing import Dict, Optional, Tuple

from spvbi_types import Band, BandPlan, CoarseMode, OrderCriterion
from coarse_stage import ErrorSpec, IntervalPolicy
from model_space import PriorConfig
from posterior import PosteriorConfig
from ssca_engine import StepSchedule
from runner import RunConfig
from harness import Scenario, TruthSpec

logger = logging.getLogger(__name__)

NS = 1e-9
BAND_KEY = re.compile(r"^band\.(\d+)\.(fc_hz|fs_hz|n_sub)$")

KNOWN_KEYS = {
    "truth.n_paths", "truth.gain_magnitude", "truth.first_delay_ns", "truth.pair_spacing_ns",
    "truth.other_spacing_ns", "truth.delta_std_ns",
    "snr_db", "snr_mode", "trials", "seed", "workers",
    "coarse.mode", "coarse.criterion", "coarse.k_max", "coarse.grid_step_ns", "coarse.grid_max_ns",
    "coarse.interval_half_width_ns", "coarse.phase_init",
    "oracle.tau_std_ns", "oracle.alpha_std", "oracle.phi_std", "oracle.delta_std_ns", "oracle.merge",
    "run.B", "run.n_particles", "run.kappa1", "run.kappa2", "run.max_iters", "run.tol_zeta", "run.tol_eta",
    "run.window", "run.split_count", "run.tau_d_ns", "run.score_baseline",
    "schedule.rho_a", "schedule.rho_b", "schedule.rho_kappa",
    "schedule.gamma_a", "schedule.gamma_b", "schedule.gamma_kappa",
    "prior.delta_std_ns", "prior.delay_unit_ns",
    "posterior.phi_init_var", "posterior.delta_init_var_ns2",
}


class ConfigError(ValueError):
    """Malformed, unknown or invalid configuration entry."""


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """Split config text into a raw key -> value mapping."""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key not in KNOWN_KEYS and not BAND_KEY.match(key):
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'")
        values[key] = value
    return values


class _Reader:
    """Typed access to raw values; every conversion failure becomes a ConfigError naming the key."""

    def __init__(self, values: Dict[str, str]):
        self.values = values

    def has(self, key: str) -> bool:
        return key in self.values and self.values[key] != ""

    def _convert(self, key, fn):
        try:
            return fn(self.values[key])
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid value for '{key}': '{self.values[key]}' ({e})") from e

    def float(self, key: str, default=None):
        return self._convert(key, float) if self.has(key) else default

    def int(self, key: str, default=None):
        return self._convert(key, int) if self.has(key) else default

    def str(self, key: str, default=None):
        return self.values[key] if self.has(key) else default

    def bool(self, key: str, default=None):
        def parse(v: str) -> bool:
            lowered = v.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError("expected true/false")
        return self._convert(key, parse) if self.has(key) else default

    def pair(self, key: str, cast, default=None):
        def parse(v: str):
            parts = [p.strip() for p in v.split(",")]
            if len(parts) == 1:
                parts = parts * 2
            if len(parts) != 2:
                raise ValueError("expected one value or 'lo, hi'")
            return cast(parts[0]), cast(parts[1])
        return self._convert(key, parse) if self.has(key) else default


def _band_plan(values: Dict[str, str]) -> Optional[BandPlan]:
    fields: Dict[int, Dict[str, str]] = {}
    for key, value in values.items():
        match = BAND_KEY.match(key)
        if match:
            fields.setdefault(int(match.group(1)), {})[match.group(2)] = value
    if not fields:
        return None
    indices = sorted(fields)
    if indices != list(range(1, len(indices) + 1)):
        raise ConfigError(f"bands must be numbered 1..M without gaps, got {indices}")
    bands = []
    for i in indices:
        missing = {"fc_hz", "fs_hz", "n_sub"} - set(fields[i])
        if missing:
            raise ConfigError(f"band {i} is missing {sorted(missing)}")
        try:
            bands.append(Band(float(fields[i]["fc_hz"]), float(fields[i]["fs_hz"]), int(fields[i]["n_sub"])))
        except ValueError as e:
            raise ConfigError(f"band {i}: {e}") from e
    return BandPlan(bands)


def _ns_range(pair: Optional[Tuple[float, float]], default):
    return default if pair is None else (pair[0] * NS, pair[1] * NS)


def build_scenario(values: Dict[str, str]) -> Scenario:
    """Turn a parsed mapping into a validated Scenario."""
    r = _Reader(values)
    try:
        plan = _band_plan(values) or BandPlan.default()

        base_truth = TruthSpec()
        truth = TruthSpec(
            n_paths=r.int("truth.n_paths", base_truth.n_paths),
            gain_magnitude=r.float("truth.gain_magnitude", base_truth.gain_magnitude),
            first_delay=_ns_range(r.pair("truth.first_delay_ns", float), base_truth.first_delay),
            pair_spacing=_ns_range(r.pair("truth.pair_spacing_ns", float), base_truth.pair_spacing),
            other_spacing=_ns_range(r.pair("truth.other_spacing_ns", float), base_truth.other_spacing),
            delta_std=r.float("truth.delta_std_ns", base_truth.delta_std / NS) * NS,
        )

        merge = r.pair("oracle.merge", int)
        error_spec = ErrorSpec(
            tau_std=r.float("oracle.tau_std_ns", 0.0) * NS,
            alpha_std=r.float("oracle.alpha_std", 0.0),
            phi_std=r.float("oracle.phi_std", 0.0),
            delta_std=r.float("oracle.delta_std_ns", 0.0) * NS,
            merge=None if merge is None else (merge[0] - 1, merge[1] - 1),
        )

        half_width = r.float("coarse.interval_half_width_ns")
        policy = IntervalPolicy() if half_width is None else IntervalPolicy.fixed(half_width * NS)

        base_schedule = StepSchedule()
        schedule = StepSchedule(
            rho_a=r.float("schedule.rho_a", base_schedule.rho_a),
            rho_b=r.float("schedule.rho_b", base_schedule.rho_b),
            rho_kappa=r.float("schedule.rho_kappa", base_schedule.rho_kappa),
            gamma_a=r.float("schedule.gamma_a", base_schedule.gamma_a),
            gamma_b=r.float("schedule.gamma_b", base_schedule.gamma_b),
            gamma_kappa=r.float("schedule.gamma_kappa", base_schedule.gamma_kappa),
        )

        prior = PriorConfig(
            delta_std=r.float("prior.delta_std_ns", PriorConfig.delta_std / NS) * NS,
            delay_unit=r.float("prior.delay_unit_ns", PriorConfig.delay_unit / NS) * NS,
        )

        base_run = RunConfig()
        n_particles = r.int("run.n_particles", base_run.n_particles)
        delta_init = r.float("posterior.delta_init_var_ns2")
        posterior = PosteriorConfig(
            n_particles=n_particles,
            phi_init_var=r.float("posterior.phi_init_var", PosteriorConfig.phi_init_var),
            delta_init_var=None if delta_init is None else delta_init * NS ** 2,
        )
        tau_d = r.float("run.tau_d_ns")
        run = RunConfig(
            B=r.int("run.B", base_run.B),
            n_particles=n_particles,
            kappa1=r.float("run.kappa1", base_run.kappa1),
            kappa2=r.float("run.kappa2", base_run.kappa2),
            max_iters=r.int("run.max_iters", base_run.max_iters),
            tol_zeta=r.float("run.tol_zeta", base_run.tol_zeta),
            tol_eta=r.float("run.tol_eta", base_run.tol_eta),
            window=r.int("run.window", base_run.window),
            split_count=r.int("run.split_count", base_run.split_count),
            tau_d=None if tau_d is None else tau_d * NS,
            score_baseline=r.bool("run.score_baseline", base_run.score_baseline),
            schedule=schedule,
            prior=prior,
            posterior=posterior,
        )

        criterion = r.str("coarse.criterion", "MDL").upper()
        if criterion not in OrderCriterion.__members__:
            raise ConfigError(f"coarse.criterion must be AIC, MDL or BIC, got '{criterion}'")

        return Scenario(
            plan=plan,
            truth=truth,
            snr_db=r.float("snr_db", 10.0),
            snr_mode=r.str("snr_mode", "total"),
            n_trials=r.int("trials", 500),
            coarse_mode=CoarseMode(r.str("coarse.mode", "estimated")),
            error_spec=error_spec,
            criterion=OrderCriterion[criterion],
            k_max=r.int("coarse.k_max", 4),
            grid_step=r.float("coarse.grid_step_ns", 1.0) * NS,
            grid_max=r.float("coarse.grid_max_ns", 500.0) * NS,
            interval_policy=policy,
            phase_init=r.str("coarse.phase_init", "zero"),
            run=run,
            seed=r.int("seed", 0),
            workers=r.int("workers", 1),
        )
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from e


def load_scenario(path: Optional[str] = None, seed: Optional[int] = None, trials: Optional[int] = None,
                  workers: Optional[int] = None) -> Scenario:
    """
    Read a scenario file (defaults when `path` is None) and apply CLI overrides.

    Raises:
        ConfigError: unreadable file, bad syntax, unknown key or invalid value
    """
    values: Dict[str, str] = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as e:
            raise ConfigError(f"cannot read config '{path}': {e}") from e
        values = parse_config_text(text, source=path)
        logger.info("loaded %d settings from %s", len(values), path)

    scenario = build_scenario(values)
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if trials is not None:
        overrides["n_trials"] = trials
    if workers is not None:
        overrides["workers"] = workers
    if overrides:
        try:
            scenario = replace(scenario, **overrides)
        except ValueError as e:
            raise ConfigError(str(e)) from e
    return scenario
