"""
Candidate model set and priors.

Model 1 keeps the coarse delays. Each further model splits one of the
highest-gain coarse paths into a pair at tau_hat -/+ tau_d, covering the case
where one coarse path hides two aliased delays.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy.stats import norm

from spvbi_types import BandPlan, CandidateModel, CoarseEstimate, RefinedParams, TWO_PI

logger = logging.getLogger(__name__)

ZETA_FLOOR = 1e-6
SUPPORT_TOL = 1e-15


@dataclass
class PriorConfig:
    """
    Parameter priors inside a model.

    delta_std: prior std of every timing offset (seconds)
    delay_unit: unit in which the uniform delay density is evaluated (seconds)
    """
    delta_std: float = 0.1e-9
    delay_unit: float = 1e-9

    def __post_init__(self):
        if self.delta_std <= 0:
            raise ValueError(f"prior delta_std must be > 0, got {self.delta_std}")
        if self.delay_unit <= 0:
            raise ValueError(f"prior delay_unit must be > 0, got {self.delay_unit}")


def split_ranking(coarse: CoarseEstimate) -> np.ndarray:
    """Coarse path indices by descending |alpha_hat|, lower index first on ties."""
    return np.argsort(-np.abs(coarse.alpha_hat), kind="stable")


def build_candidates(coarse: CoarseEstimate, split_count: int, tau_d: float) -> List[CandidateModel]:
    """
    Build the candidate delay-structure models.

    Args:
        coarse (CoarseEstimate): coarse delays and intervals
        split_count (int): how many of the highest-gain paths get a split model
        tau_d (float): split distance in seconds

    Returns:
        List[CandidateModel]: split_count + 1 models, the unsplit one first
    """
    if tau_d <= 0:
        raise ValueError(f"split distance tau_d must be > 0, got {tau_d}")
    if split_count < 0 or split_count > coarse.k_hat:
        raise ValueError(f"split_count must be in [0, {coarse.k_hat}], got {split_count}")

    models = [CandidateModel(id=0, tau_seeds=coarse.tau_hat.copy(),
                             interval_half_width=coarse.interval_half_width.copy())]

    for v, origin in enumerate(split_ranking(coarse)[:split_count], start=1):
        parent_tau = coarse.tau_hat[origin]
        parent_hw = coarse.interval_half_width[origin]
        keep = np.arange(coarse.k_hat) != origin
        seeds = np.concatenate([coarse.tau_hat[keep], [max(parent_tau - tau_d, 0.0), parent_tau + tau_d]])
        widths = np.concatenate([coarse.interval_half_width[keep], [parent_hw, parent_hw]])
        order = np.argsort(seeds, kind="stable")
        models.append(CandidateModel(id=v, tau_seeds=seeds[order], interval_half_width=widths[order],
                                     split_origin=int(origin)))

    logger.debug("built %d candidate models (tau_d=%.3g s)", len(models), tau_d)
    return models


def default_split_distance(plan: BandPlan, coarse: CoarseEstimate, split_count: Optional[int] = None) -> float:
    """
    tau_d = 1 / widest subband bandwidth, halved once when a split seed of one
    of the split paths would leave the union of the coarse intervals.
    """
    tau_d = 1.0 / plan.max_bandwidth
    n_split = coarse.k_hat if split_count is None else split_count
    lo = coarse.tau_hat - coarse.interval_half_width
    hi = coarse.tau_hat + coarse.interval_half_width

    def covered(t: float) -> bool:
        return bool(np.any((lo - SUPPORT_TOL <= t) & (t <= hi + SUPPORT_TOL)))

    for origin in split_ranking(coarse)[:n_split]:
        t = coarse.tau_hat[origin]
        if not (covered(max(t - tau_d, 0.0)) and covered(t + tau_d)):
            return tau_d / 2.0
    return tau_d


def model_prior(n_models: int, weights=None) -> np.ndarray:
    """
    Prior model weights zeta0.

    Args:
        n_models (int): number of candidate models
        weights: optional non-negative raw weights

    Returns:
        np.ndarray: uniform 1/N by default, otherwise the weights normalized
    """
    if n_models < 1:
        raise ValueError(f"need at least one model, got {n_models}")
    if weights is None:
        return np.full(n_models, 1.0 / n_models)
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (n_models,):
        raise ValueError(f"expected {n_models} prior weights, got {weights.shape}")
    if np.any(weights < 0):
        raise ValueError("prior weights must be non-negative")
    total = weights.sum()
    if total <= 0:
        raise ValueError("prior weights are all zero")
    return weights / total


def log_prior(model: CandidateModel, theta: RefinedParams, prior_cfg: Optional[PriorConfig] = None) -> float:
    """
    Log prior of a parameter point inside one model.

    tau_k ~ uniform on [seed - hw, seed + hw], density in `delay_unit`;
    phi'_m ~ uniform on [0, 2pi); delta_m ~ N(0, delta_std^2). The gains carry
    no prior. A delay outside its interval gives -inf.
    """
    cfg = prior_cfg or PriorConfig()
    tau = np.asarray(theta.tau, dtype=float)
    if tau.size != model.k_v:
        raise ValueError(f"model has {model.k_v} delays, theta has {tau.size}")
    if np.any(tau < model.lo - SUPPORT_TOL) or np.any(tau > model.hi + SUPPORT_TOL):
        return -np.inf

    tau_term = -float(np.sum(np.log(2.0 * model.interval_half_width / cfg.delay_unit)))
    phi_term = -len(theta.phi_rel) * np.log(TWO_PI)
    delta_term = float(np.sum(norm.logpdf(theta.delta, loc=0.0, scale=cfg.delta_std)))
    return tau_term + phi_term + delta_term
