"""
Hybrid variational posterior of one candidate model.

Delays are discrete particle distributions over their search intervals,
timing offsets and inter-band phases are Gaussians, and the complex gains are
a point mass updated by least squares.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
from scipy.stats import norm

from spvbi_types import BandPlan, CandidateModel, CoarseEstimate, Observation, RefinedParams, TWO_PI
from signal_model import least_squares_gains, log_likelihood, steering_matrix
from model_space import PriorConfig, log_prior

logger = logging.getLogger(__name__)


@dataclass
class PosteriorConfig:
    """
    Initialization and floors of the hybrid posterior.

    phi_init_var / delta_init_var: None means "inverse curvature of the
    likelihood at the coarse point", capped by the prior variance
    """
    n_particles: int = 10
    weight_floor_scale: float = 1e-4
    delta_var_floor: float = (1e-3 * 1e-9) ** 2
    phi_var_floor: float = 1e-6
    phi_init_var: Optional[float] = None
    delta_init_var: Optional[float] = None

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError(f"n_particles must be >= 1, got {self.n_particles}")
        if not 0 < self.weight_floor_scale < 1:
            raise ValueError("weight_floor_scale must lie in (0, 1)")
        if self.delta_var_floor <= 0 or self.phi_var_floor <= 0:
            raise ValueError("variance floors must be > 0")
        if self.phi_init_var is not None and self.phi_init_var <= 0:
            raise ValueError("phi_init_var must be > 0")
        if self.delta_init_var is not None and self.delta_init_var <= 0:
            raise ValueError("delta_init_var must be > 0")

    @property
    def weight_floor(self) -> float:
        return self.weight_floor_scale / self.n_particles


@dataclass
class ParticleDist:
    """Discrete distribution of one delay over [lo, hi]."""
    positions: np.ndarray
    weights: np.ndarray
    lo: float
    hi: float
    weight_floor: float

    @property
    def n_particles(self) -> int:
        return len(self.positions)

    def check(self, atol: float = 1e-9) -> None:
        if abs(self.weights.sum() - 1.0) > atol:
            raise ValueError(f"particle weights sum to {self.weights.sum()}")
        if np.any(self.weights < self.weight_floor - atol):
            raise ValueError("particle weight below floor")
        tol = atol * (self.hi - self.lo)
        if np.any(self.positions < self.lo - tol) or np.any(self.positions > self.hi + tol):
            raise ValueError("particle position outside its interval")


@dataclass
class GaussianDist:
    """Gaussian factor; `mean_lo`/`mean_hi` bound the mean."""
    mean: float
    var: float
    var_floor: float
    mean_lo: float = -np.inf
    mean_hi: float = np.inf

    def check(self) -> None:
        if not self.var >= self.var_floor:
            raise ValueError(f"variance {self.var} below floor {self.var_floor}")
        if not self.mean_lo <= self.mean <= self.mean_hi:
            raise ValueError(f"mean {self.mean} outside [{self.mean_lo}, {self.mean_hi}]")

    def log_pdf(self, x) -> np.ndarray:
        return norm.logpdf(x, loc=self.mean, scale=np.sqrt(self.var))


@dataclass
class HybridPosterior:
    """Variational state eta of one model."""
    tau_dists: List[ParticleDist]
    alpha_point: np.ndarray
    delta_dists: List[GaussianDist]
    phi_dists: List[GaussianDist]
    model_id: int = 0

    @property
    def k_paths(self) -> int:
        return len(self.tau_dists)

    @property
    def n_bands(self) -> int:
        return len(self.delta_dists)

    def copy(self) -> "HybridPosterior":
        return HybridPosterior(
            tau_dists=[ParticleDist(d.positions.copy(), d.weights.copy(), d.lo, d.hi, d.weight_floor)
                       for d in self.tau_dists],
            alpha_point=self.alpha_point.copy(),
            delta_dists=[GaussianDist(d.mean, d.var, d.var_floor, d.mean_lo, d.mean_hi) for d in self.delta_dists],
            phi_dists=[GaussianDist(d.mean, d.var, d.var_floor, d.mean_lo, d.mean_hi) for d in self.phi_dists],
            model_id=self.model_id,
        )

    def check(self) -> None:
        """Raise ValueError when any factor breaks its invariants."""
        if len(self.alpha_point) != self.k_paths:
            raise ValueError("gain vector length does not match the number of delays")
        if len(self.phi_dists) != self.n_bands - 1:
            raise ValueError("need one phase factor per non-reference band")
        for dist in self.tau_dists:
            dist.check()
        for dist in self.delta_dists + self.phi_dists:
            dist.check()

    @property
    def positions(self) -> np.ndarray:
        return np.array([d.positions for d in self.tau_dists])

    @property
    def weights(self) -> np.ndarray:
        return np.array([d.weights for d in self.tau_dists])

    @property
    def delta_means(self) -> np.ndarray:
        return np.array([d.mean for d in self.delta_dists])

    @property
    def phi_means(self) -> np.ndarray:
        return np.array([d.mean for d in self.phi_dists])

    @property
    def tau_map(self) -> np.ndarray:
        return np.array([d.positions[int(np.argmax(d.weights))] for d in self.tau_dists])


@dataclass
class ThetaSample:
    """One parameter draw; `particle_index[k]` points into tau_dists[k]."""
    tau: np.ndarray
    particle_index: np.ndarray
    phi_rel: np.ndarray
    delta: np.ndarray
    alpha: np.ndarray

    def as_params(self) -> RefinedParams:
        return RefinedParams(alpha_ref=self.alpha, tau=self.tau, phi_rel=self.phi_rel, delta=self.delta)


@dataclass
class PointEstimates:
    tau_map: np.ndarray
    tau_mmse: np.ndarray
    phi_hat: np.ndarray
    delta_hat: np.ndarray
    alpha_hat: np.ndarray
    extra: Dict[str, Any] = field(default_factory=dict)


def band_curvature(obs: Observation, tau, phi_rel, delta, alpha):
    """
    Gauss-Newton curvature of -ln p(y|theta) in each delta_m and phi'_m.

    delta_m: (2/sigma^2) sum_band |s|^2 (2pi n f_s)^2, shape (M,)
    phi'_m:  (2/sigma^2) sum_band |s|^2, shape (M-1,)
    """
    plan = obs.band_plan
    signal = steering_matrix(plan, tau, phi_rel, delta) @ np.asarray(alpha, dtype=complex)
    power = np.abs(signal) ** 2
    scale = 2.0 / obs.noise_var
    band_power = np.bincount(plan.band_index, weights=power, minlength=plan.n_bands)
    band_slope = np.bincount(plan.band_index, weights=power * (TWO_PI * plan.sub_freq) ** 2,
                             minlength=plan.n_bands)
    return scale * band_slope, scale * band_power[1:]


def init_posterior(model: CandidateModel, coarse: CoarseEstimate, plan: BandPlan, obs: Observation,
                   cfg: Optional[PosteriorConfig] = None,
                   prior_cfg: Optional[PriorConfig] = None) -> HybridPosterior:
    """
    Initial hybrid posterior of a candidate model.

    Args:
        model (CandidateModel): delay seeds and intervals
        coarse (CoarseEstimate): supplies the phase / offset starting points
        plan (BandPlan): band layout
        obs (Observation): data used for the initial LS gains
        cfg (PosteriorConfig): particle count, floors and initial variances
        prior_cfg (PriorConfig): prior of delta (caps its initial variance)

    Returns:
        HybridPosterior: uniform inclusive particle grids with equal weights,
        Gaussians at the coarse values with variances from the local curvature
        at the coarse point, gains from LS at the seed delays
    """
    cfg = cfg or PosteriorConfig()
    prior_cfg = prior_cfg or PriorConfig()
    if len(coarse.delta_hat) != plan.n_bands or len(coarse.phi_rel_hat) != plan.n_bands - 1:
        raise ValueError("coarse estimate does not match the band plan")

    n_p = cfg.n_particles
    tau_dists = [
        ParticleDist(positions=np.linspace(lo, hi, n_p), weights=np.full(n_p, 1.0 / n_p),
                     lo=float(lo), hi=float(hi), weight_floor=cfg.weight_floor)
        for lo, hi in zip(model.lo, model.hi)
    ]

    phi_means = np.clip(np.asarray(coarse.phi_rel_hat, dtype=float), 0.0, TWO_PI)
    delta_means = np.asarray(coarse.delta_hat, dtype=float)
    alpha = least_squares_gains(steering_matrix(plan, model.tau_seeds, phi_means, delta_means), obs.y)

    delta_curv, phi_curv = band_curvature(obs, model.tau_seeds, phi_means, delta_means, alpha)
    if cfg.delta_init_var is None:
        delta_var = 1.0 / (delta_curv + 1.0 / prior_cfg.delta_std ** 2)
    else:
        delta_var = np.full(plan.n_bands, cfg.delta_init_var)
    if cfg.phi_init_var is None:
        # uniform phase prior has variance (2 pi)^2 / 12
        phi_var = 1.0 / np.maximum(phi_curv, 12.0 / TWO_PI ** 2)
    else:
        phi_var = np.full(plan.n_bands - 1, cfg.phi_init_var)

    delta_dists = [GaussianDist(mean=float(mu), var=max(float(v), cfg.delta_var_floor), var_floor=cfg.delta_var_floor)
                   for mu, v in zip(delta_means, delta_var)]
    phi_dists = [GaussianDist(mean=float(mu), var=max(float(v), cfg.phi_var_floor),
                              var_floor=cfg.phi_var_floor, mean_lo=0.0, mean_hi=TWO_PI)
                 for mu, v in zip(phi_means, phi_var)]

    return HybridPosterior(tau_dists=tau_dists, alpha_point=alpha, delta_dists=delta_dists,
                           phi_dists=phi_dists, model_id=model.id)


def sample_theta(q: HybridPosterior, rng: np.random.Generator) -> ThetaSample:
    """Draw delays by particle weight, then offsets, then phases."""
    index = np.array([rng.choice(d.n_particles, p=d.weights) for d in q.tau_dists], dtype=int)
    tau = np.array([d.positions[i] for d, i in zip(q.tau_dists, index)])
    delta = np.array([rng.normal(d.mean, np.sqrt(d.var)) for d in q.delta_dists])
    phi = np.array([rng.normal(d.mean, np.sqrt(d.var)) for d in q.phi_dists])
    return ThetaSample(tau=tau, particle_index=index, phi_rel=phi, delta=delta, alpha=q.alpha_point.copy())


def log_q(q: HybridPosterior, s: ThetaSample) -> float:
    """
    ln q(theta) = sum_k ln w_k,n(k) + sum_m ln N(delta_m) + sum_m ln N(phi'_m).

    The gain point mass contributes nothing.
    """
    value = float(sum(np.log(d.weights[i]) for d, i in zip(q.tau_dists, s.particle_index)))
    value += float(sum(d.log_pdf(x) for d, x in zip(q.delta_dists, s.delta)))
    value += float(sum(d.log_pdf(x) for d, x in zip(q.phi_dists, s.phi_rel)))
    return value


def g_value(q: HybridPosterior, s: ThetaSample, obs: Observation, model: CandidateModel,
            prior_cfg: Optional[PriorConfig] = None) -> float:
    """Sample objective ln q - ln p(y|theta) - ln p(theta); +inf outside the prior support."""
    params = s.as_params()
    prior = log_prior(model, params, prior_cfg)
    if prior == -np.inf:
        return np.inf
    return log_q(q, s) - log_likelihood(obs, params, obs.band_plan) - prior


def extract_estimates(q: HybridPosterior) -> PointEstimates:
    """MAP / MMSE delays, Gaussian means and point gains. Weight ties go to the lowest index."""
    return PointEstimates(
        tau_map=q.tau_map,
        tau_mmse=np.array([float(np.dot(d.weights, d.positions)) for d in q.tau_dists]),
        phi_hat=q.phi_means,
        delta_hat=q.delta_means,
        alpha_hat=q.alpha_point.copy(),
    )


def _gaussian_to_dict(d: GaussianDist) -> Dict[str, float]:
    return {"mean": d.mean, "var": d.var, "var_floor": d.var_floor, "mean_lo": d.mean_lo, "mean_hi": d.mean_hi}


def _gaussian_from_dict(d: Dict[str, float]) -> GaussianDist:
    return GaussianDist(mean=float(d["mean"]), var=float(d["var"]), var_floor=float(d["var_floor"]),
                        mean_lo=float(d["mean_lo"]), mean_hi=float(d["mean_hi"]))


def posterior_to_dict(q: HybridPosterior) -> Dict[str, Any]:
    """Plain-data snapshot; complex gains as [re, im] pairs."""
    return {
        "model_id": q.model_id,
        "tau": [{"positions": d.positions.tolist(), "weights": d.weights.tolist(),
                 "lo": d.lo, "hi": d.hi, "weight_floor": d.weight_floor} for d in q.tau_dists],
        "alpha": [[float(a.real), float(a.imag)] for a in q.alpha_point],
        "delta": [_gaussian_to_dict(d) for d in q.delta_dists],
        "phi": [_gaussian_to_dict(d) for d in q.phi_dists],
    }


def posterior_from_dict(data: Dict[str, Any]) -> HybridPosterior:
    return HybridPosterior(
        tau_dists=[ParticleDist(np.asarray(d["positions"], dtype=float), np.asarray(d["weights"], dtype=float),
                                float(d["lo"]), float(d["hi"]), float(d["weight_floor"])) for d in data["tau"]],
        alpha_point=np.array([complex(re, im) for re, im in data["alpha"]], dtype=complex),
        delta_dists=[_gaussian_from_dict(d) for d in data["delta"]],
        phi_dists=[_gaussian_from_dict(d) for d in data["phi"]],
        model_id=int(data.get("model_id", 0)),
    )


def dump_snapshot(q: HybridPosterior) -> str:
    """JSON text of the posterior for debugging and fixtures."""
    return json.dumps(posterior_to_dict(q), indent=2)
