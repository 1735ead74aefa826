"""
Multiband frequency-domain signal models.

Original model (per band m, subcarrier n):
    y = sum_k alpha_k exp(-j2pi(f_c,m + n f_s,m) tau_k) exp(-j2pi n f_s,m delta_m) exp(j phi_m) + w

Refined model, band 1 as reference (phase and carrier of band 1 absorbed into alpha'):
    y = sum_k alpha'_k exp(-j2pi(f'_c,m + n f_s,m) tau_k) exp(j phi'_m) exp(-j2pi n f_s,m delta_m) + w

Rows are band-major, subcarrier-minor (see spvbi_types).
"""

import logging
from typing import Union

import numpy as np
from scipy import linalg

from spvbi_types import BandPlan, ChannelTruth, RefinedParams, Observation
from sim_utils import SimUtils

logger = logging.getLogger(__name__)

SeedLike = Union[int, np.random.SeedSequence, np.random.Generator, None]


def absorb_reference(truth: ChannelTruth, plan: BandPlan) -> RefinedParams:
    """
    Move the reference-band phase and carrier into the gains.

    Args:
        truth (ChannelTruth): original-model parameters
        plan (BandPlan): band layout, band 1 is the reference

    Returns:
        RefinedParams: alpha', tau, phi' (bands 2..M, wrapped) and delta
    """
    if len(truth.phi) != plan.n_bands or len(truth.delta) != plan.n_bands:
        raise ValueError(
            f"truth carries {len(truth.phi)} phases / {len(truth.delta)} offsets "
            f"but the band plan has {plan.n_bands} bands"
        )
    f_ref = plan.bands[0].f_c
    alpha_ref = truth.alpha * np.exp(1j * truth.phi[0]) * np.exp(-2j * np.pi * f_ref * truth.tau)
    phi_rel = SimUtils.wrap_phase(truth.phi[1:] - truth.phi[0])
    return RefinedParams(alpha_ref=alpha_ref, tau=truth.tau.copy(), phi_rel=phi_rel, delta=truth.delta.copy())


def band_phases(plan: BandPlan, phi_rel) -> np.ndarray:
    """Per-row phase phi'_m with phi'_1 = 0."""
    phi_rel = np.asarray(phi_rel, dtype=float)
    if len(phi_rel) != plan.n_bands - 1:
        raise ValueError(f"phi_rel needs {plan.n_bands - 1} entries, got {len(phi_rel)}")
    return np.concatenate([[0.0], phi_rel])[plan.band_index]


def offset_factor(plan: BandPlan, delta) -> np.ndarray:
    """Per-row timing-offset factor exp(-j2pi n f_s,m delta_m)."""
    delta = np.asarray(delta, dtype=float)
    if len(delta) != plan.n_bands:
        raise ValueError(f"delta needs {plan.n_bands} entries, got {len(delta)}")
    return np.exp(-2j * np.pi * plan.sub_freq * delta[plan.band_index])


def steering_matrix(plan: BandPlan, tau, phi_rel, delta) -> np.ndarray:
    """
    Refined-model steering matrix D, shape (n_all, K).

    Args:
        plan (BandPlan): band layout
        tau: delays in seconds, K >= 1
        phi_rel: phases of bands 2..M in radians
        delta: timing offsets of bands 1..M in seconds

    Returns:
        np.ndarray: complex matrix with unit-modulus entries
    """
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    if tau.ndim != 1 or tau.size < 1:
        raise ValueError("steering_matrix needs a 1-D delay vector with K >= 1")
    row_factor = np.exp(1j * band_phases(plan, phi_rel)) * offset_factor(plan, delta)
    return np.exp(-2j * np.pi * np.outer(plan.rel_freq, tau)) * row_factor[:, None]


def original_signal(plan: BandPlan, truth: ChannelTruth) -> np.ndarray:
    """Noiseless original-model signal."""
    phases = truth.phi[plan.band_index]
    row_factor = np.exp(1j * phases) * offset_factor(plan, truth.delta)
    carrier = np.exp(-2j * np.pi * np.outer(plan.abs_freq, truth.tau))
    return (carrier @ truth.alpha) * row_factor


def refined_signal(plan: BandPlan, params: RefinedParams) -> np.ndarray:
    """Noiseless refined-model signal D(tau, phi', delta) alpha'."""
    params.check_against(plan)
    return steering_matrix(plan, params.tau, params.phi_rel, params.delta) @ params.alpha_ref


def synthesize(plan: BandPlan, truth: ChannelTruth, rng_seed: SeedLike, noiseless: bool = False) -> Observation:
    """
    Draw one observation from the original model.

    Args:
        plan (BandPlan): band layout
        truth (ChannelTruth): ground truth, validated against the plan
        rng_seed: seed or generator for the noise draw
        noiseless (bool): return the clean signal (noise_var is still carried)

    Returns:
        Observation
    """
    truth.validate(plan)
    signal = original_signal(plan, truth)
    if noiseless:
        return Observation(y=signal, band_plan=plan, noise_var=truth.noise_var)

    rng = np.random.default_rng(rng_seed)
    scale = np.sqrt(truth.noise_var / 2.0)
    noise = scale * (rng.standard_normal(plan.n_all) + 1j * rng.standard_normal(plan.n_all))
    return Observation(y=signal + noise, band_plan=plan, noise_var=truth.noise_var)


def least_squares_gains(design: np.ndarray, y: np.ndarray, ridge: bool = True,
                        cond_limit: float = 1e12, ridge_scale: float = 1e-6) -> np.ndarray:
    """
    Complex LS gains (D^H D)^-1 D^H y.

    When D^H D is near-singular (condition number above `cond_limit`) the
    ridge-regularized system (D^H D + lam I) alpha = D^H y is solved with
    lam = ridge_scale * trace(D^H D) / K, or LinAlgError is raised if the
    ridge is disabled.
    """
    gram = design.conj().T @ design
    cond = np.linalg.cond(gram)
    if np.isfinite(cond) and cond < cond_limit:
        gains, *_ = linalg.lstsq(design, y)
        return gains
    if not ridge:
        raise np.linalg.LinAlgError(f"singular normal equations (cond={cond:.3g})")
    k = gram.shape[0]
    lam = ridge_scale * float(np.trace(gram).real) / k
    logger.debug("ridge fallback: cond=%.3g lambda=%.3g", cond, lam)
    return linalg.solve(gram + lam * np.eye(k), design.conj().T @ y, assume_a="her")


def gaussian_log_likelihood(rss, n_all: int, noise_var: float):
    """-N ln(pi sigma^2) - rss / sigma^2; rss may be an array."""
    if not noise_var > 0:
        raise ValueError(f"noise_var must be > 0, got {noise_var}")
    return -n_all * np.log(np.pi * noise_var) - np.asarray(rss) / noise_var


def log_likelihood(obs: Observation, params: RefinedParams, plan: BandPlan) -> float:
    """
    Refined-model log-likelihood of the observation.

    Args:
        obs (Observation): data y and noise variance
        params (RefinedParams): parameter point
        plan (BandPlan): band layout matching obs

    Returns:
        float: -N_all ln(pi sigma^2) - |y - D alpha'|^2 / sigma^2
    """
    if not obs.noise_var > 0:
        raise ValueError(f"noise_var must be > 0, got {obs.noise_var}")
    residual = obs.y - refined_signal(plan, params)
    rss = float(np.vdot(residual, residual).real)
    return float(gaussian_log_likelihood(rss, plan.n_all, obs.noise_var))


def snr_to_noise_var(alpha, snr_db: float, mode: str = "total") -> float:
    """
    Noise variance for a target SNR.

    mode "total" uses sum_k |alpha_k|^2 as signal power, "los" uses |alpha_1|^2.
    """
    alpha = np.asarray(alpha, dtype=complex)
    if mode == "total":
        power = float(np.sum(np.abs(alpha) ** 2))
    elif mode == "los":
        power = float(np.abs(alpha[0]) ** 2)
    else:
        raise ValueError(f"unknown SNR mode '{mode}' (expected 'total' or 'los')")
    if power <= 0:
        raise ValueError("signal power must be > 0 to set an SNR")
    return power / SimUtils.db_to_linear(snr_db)
