"""
Coarse estimation stage.

Works on the per-band absorbed model
    y_m,n = sum_k a_k,m exp(-j2pi n f_s,m (tau_k + delta_m)) + w
whose delay likelihood only oscillates at the subband bandwidth scale. A
non-coherent matched-filter delay profile is peak-picked, the model order is
chosen with an information criterion, and the refined-model gains are fitted
by least squares at the picked delays. An oracle mode builds the coarse
estimate from perturbed ground truth instead.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.signal import find_peaks

from spvbi_types import BandPlan, ChannelTruth, CoarseEstimate, Observation, OrderCriterion
from signal_model import absorb_reference, gaussian_log_likelihood, least_squares_gains, steering_matrix
from sim_utils import SimUtils

logger = logging.getLogger(__name__)

DEFAULT_GRID_STEP = 1e-9
DEFAULT_GRID_MAX = 500e-9


def default_grid(step: float = DEFAULT_GRID_STEP, max_delay: float = DEFAULT_GRID_MAX) -> np.ndarray:
    """Delay grid [0, max_delay] with the given step (seconds)."""
    if step <= 0 or max_delay <= 0:
        raise ValueError(f"grid step and range must be > 0, got step={step}, max={max_delay}")
    n_points = int(np.floor(max_delay / step + 1e-9)) + 1
    return np.arange(n_points) * step


@dataclass
class IntervalPolicy:
    """
    How wide the coarse search interval around each delay is.

    kind "bandwidth": half-width = 1 / (2 * widest subband bandwidth)
    kind "fixed":     half-width = `half_width` seconds
    """
    kind: str = "bandwidth"
    half_width: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("bandwidth", "fixed"):
            raise ValueError(f"unknown interval policy '{self.kind}'")
        if self.kind == "fixed" and not (self.half_width and self.half_width > 0):
            raise ValueError("fixed interval policy needs half_width > 0")

    @classmethod
    def fixed(cls, half_width: float) -> "IntervalPolicy":
        return cls(kind="fixed", half_width=half_width)

    def half_width_for(self, plan: BandPlan) -> float:
        if self.kind == "fixed":
            return float(self.half_width)
        return 1.0 / (2.0 * plan.max_bandwidth)


@dataclass
class ErrorSpec:
    """Perturbations applied by the oracle coarse stage. `merge` is a 0-based path pair."""
    tau_std: float = 0.0
    alpha_std: float = 0.0
    phi_std: float = 0.0
    delta_std: float = 0.0
    merge: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        for name in ("tau_std", "alpha_std", "phi_std", "delta_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.merge is not None:
            i, j = self.merge
            if i == j or min(i, j) < 0:
                raise ValueError(f"merge needs two distinct non-negative path indices, got {self.merge}")


def delay_profile(obs: Observation, plan: BandPlan, grid) -> np.ndarray:
    """
    Non-coherent matched-filter delay profile.

    P(tau) = sum_m |sum_n y_m,n exp(+j2pi n f_s,m tau)|^2 / N_m^2

    Args:
        obs (Observation): data
        plan (BandPlan): band layout
        grid: strictly increasing delays in seconds

    Returns:
        np.ndarray: non-negative power per grid point
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("delay grid is empty")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("delay grid must be strictly increasing")

    profile = np.zeros(grid.size)
    for m, band in enumerate(plan.bands):
        n = np.arange(band.n_sub)
        kernel = np.exp(2j * np.pi * np.outer(grid, n * band.f_s))
        response = kernel @ obs.y[plan.band_slice(m)]
        profile += np.abs(response) ** 2 / band.n_sub ** 2
    return profile


def profile_peaks(profile, grid, min_separation: float) -> np.ndarray:
    """
    Indices of separated profile peaks, highest first.

    Peaks closer than `min_separation` seconds are thinned, keeping the higher.
    Grid edges count as candidate peaks.
    """
    grid = np.asarray(grid, dtype=float)
    padded = np.concatenate([[-1.0], np.asarray(profile, dtype=float), [-1.0]])
    step = float(np.median(np.diff(grid))) if grid.size > 1 else 1.0
    distance = max(1, int(round(min_separation / step)))
    peaks, _ = find_peaks(padded, distance=distance)
    peaks = peaks - 1
    if peaks.size == 0:
        peaks = np.array([int(np.argmax(profile))])
    order = np.argsort(-np.asarray(profile)[peaks], kind="stable")
    return peaks[order]


def order_penalty(criterion: OrderCriterion, n_all: int) -> float:
    """Per-path penalty: 2 for AIC, ln(N_all) for MDL/BIC."""
    if criterion == OrderCriterion.AIC:
        return 2.0
    return float(np.log(n_all))


def coarse_model_rss(obs: Observation, plan: BandPlan, tau) -> float:
    """Residual energy of the per-band LS fit at the given delays."""
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    rss = 0.0
    for m, band in enumerate(plan.bands):
        y_m = obs.y[plan.band_slice(m)]
        basis = np.exp(-2j * np.pi * np.outer(np.arange(band.n_sub) * band.f_s, tau))
        gains, *_ = linalg.lstsq(basis, y_m)
        residual = y_m - basis @ gains
        rss += float(np.vdot(residual, residual).real)
    return rss


def estimate_order(obs: Observation, plan: BandPlan, k_max: int,
                   criterion: OrderCriterion = OrderCriterion.MDL,
                   grid=None, penalty: Optional[float] = None) -> int:
    """
    Pick K in 1..k_max minimizing -2 ln p(y | theta_K) + eta * K.

    theta_K is the top-K profile peaks plus the per-band LS gains. Orders for
    which fewer than K separated peaks exist are skipped.

    Args:
        obs (Observation): data
        plan (BandPlan): band layout
        k_max (int): largest order tried
        criterion (OrderCriterion): AIC, MDL or BIC
        grid: delay grid, defaults to 1 ns over [0, 500 ns]
        penalty (float): overrides the criterion's eta

    Returns:
        int: selected order
    """
    if k_max < 1:
        raise ValueError(f"k_max must be >= 1, got {k_max}")
    grid = default_grid() if grid is None else np.asarray(grid, dtype=float)
    eta = order_penalty(criterion, plan.n_all) if penalty is None else float(penalty)

    peaks = profile_peaks(delay_profile(obs, plan, grid), grid, 1.0 / plan.max_bandwidth)
    best_k, best_score = 1, np.inf
    for k in range(1, min(k_max, peaks.size) + 1):
        rss = coarse_model_rss(obs, plan, grid[peaks[:k]])
        score = -2.0 * float(gaussian_log_likelihood(rss, plan.n_all, obs.noise_var)) + eta * k
        logger.debug("order K=%d: rss=%.6g score=%.6g", k, rss, score)
        if score < best_score:
            best_k, best_score = k, score
    return best_k


def regress_band_phases(obs: Observation, plan: BandPlan, tau_hat) -> np.ndarray:
    """
    Inter-band phase phi'_m from the per-band LS gains at the coarse delays.

    With a_k,m the band-m gain of path k, a_k,m conj(a_k,1) exp(+j2pi f'_c,m tau_k)
    is |alpha'_k|^2 exp(j phi'_m); the gain-weighted sum gives the phase.
    """
    tau_hat = np.atleast_1d(np.asarray(tau_hat, dtype=float))
    gains = []
    for m, band in enumerate(plan.bands):
        basis = np.exp(-2j * np.pi * np.outer(np.arange(band.n_sub) * band.f_s, tau_hat))
        a_m, *_ = linalg.lstsq(basis, obs.y[plan.band_slice(m)])
        gains.append(a_m)
    f_ref = plan.bands[0].f_c
    phases = []
    for m in range(1, plan.n_bands):
        f_rel = plan.bands[m].f_c - f_ref
        acc = np.sum(gains[m] * np.conj(gains[0]) * np.exp(2j * np.pi * f_rel * tau_hat))
        phases.append(np.angle(acc))
    return SimUtils.wrap_phase(np.array(phases, dtype=float))


def fit_gains(obs: Observation, plan: BandPlan, tau, phi_rel, delta) -> np.ndarray:
    """Refined-model LS gains at fixed delays, phases and offsets."""
    return least_squares_gains(steering_matrix(plan, tau, phi_rel, delta), obs.y)


def coarse_estimate(obs: Observation, plan: BandPlan, k_hat: int,
                    interval_policy: Optional[IntervalPolicy] = None,
                    grid=None, phase_init: str = "zero") -> CoarseEstimate:
    """
    Coarse delays, intervals and LS gains for a given order.

    Args:
        obs (Observation): data
        plan (BandPlan): band layout
        k_hat (int): requested number of paths
        interval_policy (IntervalPolicy): interval sizing, bandwidth rule by default
        grid: delay grid, defaults to 1 ns over [0, 500 ns]
        phase_init (str): "zero" or "regression" for phi'

    Returns:
        CoarseEstimate: flagged `merged` with doubled intervals when fewer than
        k_hat separated peaks exist
    """
    if k_hat < 1:
        raise ValueError(f"k_hat must be >= 1, got {k_hat}")
    if phase_init not in ("zero", "regression"):
        raise ValueError(f"unknown phase init '{phase_init}'")
    policy = interval_policy or IntervalPolicy()
    grid = default_grid() if grid is None else np.asarray(grid, dtype=float)

    peaks = profile_peaks(delay_profile(obs, plan, grid), grid, 1.0 / plan.max_bandwidth)
    chosen = peaks[:k_hat]
    merged = chosen.size < k_hat
    if merged:
        logger.warning("only %d separated peaks for k_hat=%d, intervals widened", chosen.size, k_hat)

    tau_hat = np.sort(grid[chosen])
    half_width = np.full(tau_hat.size, policy.half_width_for(plan) * (2.0 if merged else 1.0))

    if phase_init == "regression":
        phi_rel_hat = regress_band_phases(obs, plan, tau_hat)
    else:
        phi_rel_hat = np.zeros(plan.n_bands - 1)
    delta_hat = np.zeros(plan.n_bands)
    alpha_hat = fit_gains(obs, plan, tau_hat, phi_rel_hat, delta_hat)

    return CoarseEstimate(
        k_hat=int(tau_hat.size),
        tau_hat=tau_hat,
        interval_half_width=half_width,
        alpha_hat=alpha_hat,
        phi_rel_hat=phi_rel_hat,
        delta_hat=delta_hat,
        merged=merged,
    )


def oracle_coarse(truth: ChannelTruth, plan: BandPlan, error_spec: ErrorSpec, rng_seed,
                  interval_policy: Optional[IntervalPolicy] = None) -> CoarseEstimate:
    """
    Coarse estimate built from the absorbed truth plus seeded perturbations.

    An optional merge replaces two true paths by one at their gain-weighted
    mean delay carrying the summed gain; `merged_index` then records where
    that path lands after sorting.

    Args:
        truth (ChannelTruth): ground truth
        plan (BandPlan): band layout
        error_spec (ErrorSpec): perturbation standard deviations and merge pair
        rng_seed: seed for the perturbation draw
        interval_policy (IntervalPolicy): interval sizing, bandwidth rule by default

    Returns:
        CoarseEstimate
    """
    policy = interval_policy or IntervalPolicy()
    ref = absorb_reference(truth, plan)
    tau = ref.tau.copy()
    alpha = ref.alpha_ref.copy()
    marker = np.zeros(tau.size, dtype=bool)

    if error_spec.merge is not None:
        i, j = sorted(error_spec.merge)
        if j >= tau.size:
            raise ValueError(f"merge pair {error_spec.merge} out of range for {tau.size} paths")
        w_i, w_j = np.abs(truth.alpha[i]), np.abs(truth.alpha[j])
        tau[i] = (w_i * tau[i] + w_j * tau[j]) / (w_i + w_j)
        alpha[i] = alpha[i] + alpha[j]
        marker[i] = True
        tau, alpha, marker = np.delete(tau, j), np.delete(alpha, j), np.delete(marker, j)

    rng = np.random.default_rng(rng_seed)
    k = tau.size
    tau = tau + error_spec.tau_std * rng.standard_normal(k)
    alpha = alpha + error_spec.alpha_std * (rng.standard_normal(k) + 1j * rng.standard_normal(k)) / np.sqrt(2.0)
    phi_rel = SimUtils.wrap_phase(ref.phi_rel + error_spec.phi_std * rng.standard_normal(plan.n_bands - 1))
    delta = ref.delta + error_spec.delta_std * rng.standard_normal(plan.n_bands)

    order = np.argsort(tau, kind="stable")
    merged_index = int(np.flatnonzero(marker[order])[0]) if marker.any() else None

    return CoarseEstimate(
        k_hat=k,
        tau_hat=tau[order],
        interval_half_width=np.full(k, policy.half_width_for(plan)),
        alpha_hat=alpha[order],
        phi_rel_hat=phi_rel,
        delta_hat=delta,
        merged=merged_index is not None,
        merged_index=merged_index,
    )
