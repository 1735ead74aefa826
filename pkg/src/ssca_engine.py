"""
Stochastic successive convex approximation engine.

Each block of eta is updated as
    f_t    = (1 - rho_t) f_{t-1} + rho_t * zeta_v * grad          (gradient smoothing)
    c_t    = (1 - rho_t) c_{t-1} + rho_t * zeta_v * curvature     (curvature smoothing)
    eta_bar = Proj(eta_t - Gamma * f_t),  Gamma = damping / c_t    (quadratic surrogate)
    eta_t+1 = (1 - gamma_t) eta_t + gamma_t * eta_bar              (iterate smoothing)

Gradients:
- particle positions: -w_k,n * d/dp ln p(y | theta_~k, p_k,n)
- particle weights:   ln w_k,n + 1 - ln p(y | theta_~k, p_k,n) - ln p(theta_~k, p_k,n)
- Gaussian moments:   score-function estimators of E_q[g], with the g of the
                      same delay draw at the Gaussian means as control variate

Gains are refreshed by least squares at the MAP delays and Gaussian means,
and the model weights zeta get the same smoothed surrogate treatment on the
floored simplex.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np

from spvbi_types import ModelEnsemble, Observation, CandidateModel, BandPlan, TWO_PI
from signal_model import band_phases, gaussian_log_likelihood, least_squares_gains, offset_factor, steering_matrix
from model_space import PriorConfig, ZETA_FLOOR, log_prior
from posterior import HybridPosterior, ThetaSample, band_curvature, log_q

logger = logging.getLogger(__name__)


# ----------------------------------------------------------------------------
# Step sizes
# ----------------------------------------------------------------------------

@dataclass
class StepSchedule:
    """rho(t) = rho_a / (rho_b + t)^rho_kappa, gamma(t) likewise; t = 0 uses rho0 / gamma0."""
    rho_a: float = 5.0
    rho_b: float = 24.0
    rho_kappa: float = 0.51
    gamma_a: float = 5.0
    gamma_b: float = 19.0
    gamma_kappa: float = 0.55
    rho0: float = 1.0
    gamma0: float = 1.0

    def __post_init__(self):
        if not 0.5 < self.rho_kappa < self.gamma_kappa <= 1.0:
            raise ValueError(
                f"step exponents must satisfy 0.5 < rho_kappa < gamma_kappa <= 1, "
                f"got {self.rho_kappa}, {self.gamma_kappa}"
            )
        if min(self.rho_a, self.gamma_a) <= 0 or min(self.rho_b, self.gamma_b) < 0:
            raise ValueError("step-size scales must be > 0 and offsets >= 0")
        if not (0 < self.rho0 <= 1 and 0 < self.gamma0 <= 1):
            raise ValueError("initial step sizes must lie in (0, 1]")

    def step_sizes(self, t: int) -> Tuple[float, float]:
        if t < 0:
            raise ValueError(f"iteration index must be >= 0, got {t}")
        if t == 0:
            return self.rho0, self.gamma0
        rho = min(1.0, self.rho_a / (self.rho_b + t) ** self.rho_kappa)
        gamma = min(1.0, self.gamma_a / (self.gamma_b + t) ** self.gamma_kappa)
        return rho, gamma


def step_sizes(t: int, schedule: Optional[StepSchedule] = None) -> Tuple[float, float]:
    return (schedule or StepSchedule()).step_sizes(t)


# ----------------------------------------------------------------------------
# Gradient containers
# ----------------------------------------------------------------------------

@dataclass
class EtaGradients:
    """Per-block gradients, laid out like the posterior's eta."""
    positions: np.ndarray     # (K, N_p)
    weights: np.ndarray       # (K, N_p)
    delta_mu: np.ndarray      # (M,)
    delta_var: np.ndarray     # (M,)
    phi_mu: np.ndarray        # (M-1,)
    phi_var: np.ndarray       # (M-1,)

    BLOCKS = ("positions", "weights", "delta_mu", "delta_var", "phi_mu", "phi_var")

    @classmethod
    def zeros_for(cls, q: HybridPosterior) -> "EtaGradients":
        k, n_p = q.positions.shape
        return cls(np.zeros((k, n_p)), np.zeros((k, n_p)), np.zeros(q.n_bands), np.zeros(q.n_bands),
                   np.zeros(q.n_bands - 1), np.zeros(q.n_bands - 1))

    def scaled(self, factor: float) -> "EtaGradients":
        return type(self)(*(factor * getattr(self, name) for name in self.BLOCKS))

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(getattr(self, n)))) for n in self.BLOCKS if getattr(self, n).size),
                   default=0.0)


@dataclass
class EtaCurvature(EtaGradients):
    """Diagonal curvature per block, same layout as the gradients."""


@dataclass
class SmoothedGradients:
    """
    Per-model smoothing state of the eta blocks.

    Gradients start at zero; curvature is None until the first evaluation.
    The zeta gradient lives on the ModelEnsemble.
    """
    f_eta: List[EtaGradients]
    curvature: List[Optional[EtaCurvature]]

    @classmethod
    def zeros(cls, posteriors: List[HybridPosterior]) -> "SmoothedGradients":
        return cls(f_eta=[EtaGradients.zeros_for(q) for q in posteriors], curvature=[None] * len(posteriors))


def smooth_gradient(f_prev, grad, rho_t: float):
    """f_t = (1 - rho) f_prev + rho * grad."""
    f_prev = np.asarray(f_prev, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if f_prev.shape != grad.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match smoothing state {f_prev.shape}")
    if not 0.0 <= rho_t <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho_t}")
    return (1.0 - rho_t) * f_prev + rho_t * grad


def smooth_eta_gradients(f_prev: EtaGradients, grad: EtaGradients, rho_t: float) -> EtaGradients:
    """Blockwise smoothing; also used for EtaCurvature."""
    return type(grad)(*(smooth_gradient(getattr(f_prev, n), getattr(grad, n), rho_t) for n in grad.BLOCKS))


# ----------------------------------------------------------------------------
# Gradient estimators
# ----------------------------------------------------------------------------

@dataclass
class ParticleTerms:
    """
    Per-sample quantities shared by the estimators.

    ll[b, k, n]   ln p(y | theta^(b) with tau_k replaced by p_k,n)
    dll[b, k, n]  derivative of that log-likelihood in p_k,n
    log_prior[b]  ln p(theta^(b)); identical for every particle substitution
    g[b]          sample objective of theta^(b)
    g_anchor[b]   sample objective of theta^(b) with every Gaussian at its mean
    """
    ll: np.ndarray
    dll: np.ndarray
    log_prior: np.ndarray
    g: np.ndarray
    g_anchor: np.ndarray


def particle_terms(q: HybridPosterior, samples: List[ThetaSample], obs: Observation, model: CandidateModel,
                   prior_cfg: Optional[PriorConfig] = None) -> ParticleTerms:
    if not samples:
        raise ValueError("need at least one sample")
    plan = obs.band_plan
    positions = q.positions
    n_samples, (k_paths, n_p) = len(samples), positions.shape
    omega = -2j * np.pi * plan.rel_freq
    phi_means, delta_means = q.phi_means, q.delta_means
    mean_row = np.exp(1j * band_phases(plan, phi_means)) * offset_factor(plan, delta_means)

    ll = np.empty((n_samples, k_paths, n_p))
    dll = np.empty((n_samples, k_paths, n_p))
    lp = np.empty(n_samples)
    g = np.empty(n_samples)
    g_anchor = np.empty(n_samples)

    for b, s in enumerate(samples):
        delays = np.exp(np.outer(omega, s.tau)) * s.alpha[None, :]
        row = np.exp(1j * band_phases(plan, s.phi_rel)) * offset_factor(plan, s.delta)
        contrib = delays * row[:, None]
        full = contrib.sum(axis=1)
        residual = obs.y - full
        ll_sample = float(gaussian_log_likelihood(np.vdot(residual, residual).real, plan.n_all, obs.noise_var))
        lp[b] = log_prior(model, s.as_params(), prior_cfg)
        g[b] = log_q(q, s) - ll_sample - lp[b]

        at_means = ThetaSample(tau=s.tau, particle_index=s.particle_index, phi_rel=phi_means,
                               delta=delta_means, alpha=s.alpha)
        residual = obs.y - delays.sum(axis=1) * mean_row
        ll_means = float(gaussian_log_likelihood(np.vdot(residual, residual).real, plan.n_all, obs.noise_var))
        g_anchor[b] = log_q(q, at_means) - ll_means - log_prior(model, at_means.as_params(), prior_cfg)

        for k in range(k_paths):
            target = obs.y - (full - contrib[:, k])
            path = np.exp(np.outer(omega, positions[k])) * (row * s.alpha[k])[:, None]
            res = target[:, None] - path
            rss = np.sum(res.real ** 2 + res.imag ** 2, axis=0)
            ll[b, k] = gaussian_log_likelihood(rss, plan.n_all, obs.noise_var)
            dll[b, k] = (2.0 / obs.noise_var) * np.sum(np.conj(res) * path * omega[:, None], axis=0).real

    return ParticleTerms(ll=ll, dll=dll, log_prior=lp, g=g, g_anchor=g_anchor)


def grad_particle_positions(q: HybridPosterior, samples: List[ThetaSample], obs: Observation,
                            model: CandidateModel, prior_cfg: Optional[PriorConfig] = None,
                            terms: Optional[ParticleTerms] = None) -> np.ndarray:
    """
    Batch-averaged position gradient -w_k,n * d/dp ln p(y | theta_~k, p_k,n), shape (K, N_p).

    The uniform delay prior adds nothing.
    """
    terms = terms or particle_terms(q, samples, obs, model, prior_cfg)
    return -q.weights * terms.dll.mean(axis=0)


def grad_particle_weights(q: HybridPosterior, samples: List[ThetaSample], obs: Observation,
                          model: CandidateModel, prior_cfg: Optional[PriorConfig] = None,
                          terms: Optional[ParticleTerms] = None) -> np.ndarray:
    """Batch-averaged ln w + 1 - ln p(y | theta_~k, p) - ln p(theta_~k, p), shape (K, N_p)."""
    terms = terms or particle_terms(q, samples, obs, model, prior_cfg)
    return np.log(q.weights) + 1.0 - terms.ll.mean(axis=0) - terms.log_prior.mean()


def leave_one_out_baseline(g) -> np.ndarray:
    """Mean of the other samples' g for each sample; zeros for a single sample."""
    g = np.asarray(g, dtype=float)
    if g.size < 2:
        return g.copy()
    return (g.sum() - g) / (g.size - 1)


def score_function_gradient(x, mean: float, var: float, g) -> Tuple[float, float]:
    """
    Score-function estimates of d/dmu and d/dvar of E_N(mean, var)[g].

    d_mu  = mean_b[(x_b - mu) / var * g_b]
    d_var = mean_b[(-1 / (2 var) + (x_b - mu)^2 / (2 var^2)) * g_b]
    """
    x = np.asarray(x, dtype=float)
    g = np.asarray(g, dtype=float)
    centred = x - mean
    d_mu = float(np.mean(centred / var * g))
    d_var = float(np.mean((-0.5 / var + centred ** 2 / (2.0 * var ** 2)) * g))
    return d_mu, d_var


def grad_gaussian_moments(q: HybridPosterior, samples: List[ThetaSample], obs: Observation,
                          model: CandidateModel, prior_cfg: Optional[PriorConfig] = None,
                          g_values=None, baseline: bool = False, g_anchor=None) -> dict:
    """
    Score-function gradients of every Gaussian factor.

    With `baseline`, each g_b first loses its anchor (the g of the same delay
    draw with the Gaussians at their means) and then the leave-one-out mean.
    Neither depends on the sample's own Gaussian draws, so the estimate stays
    unbiased while the spread coming from the delay draws drops out.

    Args:
        q (HybridPosterior): current posterior
        samples: draws from q
        obs (Observation): data
        model (CandidateModel): owning model (prior support)
        prior_cfg (PriorConfig): parameter priors
        g_values: precomputed sample objectives, computed here when omitted
        baseline (bool): apply the anchor and leave-one-out baselines
        g_anchor: precomputed anchors, computed here when needed and omitted

    Returns:
        dict: delta_mu, delta_var (M,) and phi_mu, phi_var (M-1,)
    """
    if g_values is None or (baseline and g_anchor is None):
        terms = particle_terms(q, samples, obs, model, prior_cfg)
        g_values = terms.g if g_values is None else g_values
        g_anchor = terms.g_anchor if g_anchor is None else g_anchor
    g = np.asarray(g_values, dtype=float)
    if baseline:
        g = g - np.asarray(g_anchor, dtype=float)
        g = g - leave_one_out_baseline(g)

    def moments(dists, draws):
        d_mu, d_var = np.zeros(len(dists)), np.zeros(len(dists))
        for i, dist in enumerate(dists):
            d_mu[i], d_var[i] = score_function_gradient(draws[:, i], dist.mean, dist.var, g)
        return d_mu, d_var

    delta_draws = np.array([s.delta for s in samples]).reshape(len(samples), q.n_bands)
    phi_draws = np.array([s.phi_rel for s in samples]).reshape(len(samples), q.n_bands - 1)
    delta_mu, delta_var = moments(q.delta_dists, delta_draws)
    phi_mu, phi_var = moments(q.phi_dists, phi_draws)
    return {"delta_mu": delta_mu, "delta_var": delta_var, "phi_mu": phi_mu, "phi_var": phi_var}


def compute_eta_gradients(q: HybridPosterior, samples: List[ThetaSample], obs: Observation,
                          model: CandidateModel, prior_cfg: Optional[PriorConfig] = None,
                          baseline: bool = True) -> Tuple[EtaGradients, np.ndarray]:
    """All eta-block gradients from one batch, plus the batch's g values."""
    terms = particle_terms(q, samples, obs, model, prior_cfg)
    moments = grad_gaussian_moments(q, samples, obs, model, prior_cfg, g_values=terms.g, baseline=baseline,
                                    g_anchor=terms.g_anchor)
    grads = EtaGradients(
        positions=grad_particle_positions(q, samples, obs, model, terms=terms),
        weights=grad_particle_weights(q, samples, obs, model, terms=terms),
        **moments,
    )
    return grads, terms.g


# ----------------------------------------------------------------------------
# Surrogate solves
# ----------------------------------------------------------------------------

@dataclass
class BoxConstraint:
    lo: Union[float, np.ndarray] = -np.inf
    hi: Union[float, np.ndarray] = np.inf


@dataclass
class SimplexConstraint:
    """{x : sum x = 1, x >= floor}."""
    floor: float = 0.0


def project_simplex(v, floor: float = 0.0, scale=None) -> np.ndarray:
    """
    Projection onto {x : sum x = 1, x_i >= floor}.

    Without `scale` this is the Euclidean projection: shift by the floor and
    project onto the simplex of radius 1 - n*floor with the sort-and-threshold
    rule. With `scale` the metric is sum (x_i - v_i)^2 / scale_i; the solution
    is x_i = max(v_i - scale_i * theta, floor), theta found among the sorted
    breakpoints (v_i - floor) / scale_i.
    """
    v = np.asarray(v, dtype=float)
    n = v.size
    if n == 0:
        raise ValueError("cannot project an empty vector")
    if floor < 0 or floor * n > 1.0 + 1e-12:
        raise ValueError(f"infeasible simplex: floor={floor} with {n} entries")
    radius = 1.0 - n * floor
    if radius <= 0:
        return np.full(n, floor)

    if scale is None:
        z = v - floor
        u = np.sort(z)[::-1]
        css = np.cumsum(u) - radius
        ind = np.arange(1, n + 1)
        cond = u - css / ind > 0
        r = ind[cond][-1]
        theta = css[cond][-1] / r
        return np.maximum(z - theta, 0.0) + floor

    scale = np.broadcast_to(np.asarray(scale, dtype=float), v.shape)
    if np.any(~(scale > 0)):
        raise ValueError("projection metric must be > 0")
    breaks = (v - floor) / scale
    order = np.argsort(-breaks, kind="stable")
    active = np.arange(1, n + 1)
    theta = (np.cumsum(v[order]) + (n - active) * floor - 1.0) / np.cumsum(scale[order])
    next_break = np.append(breaks[order][1:], -np.inf)
    j = int(np.argmax(theta >= next_break))
    return np.maximum(v - scale * theta[j], floor)


def solve_surrogate(current, f, gamma, constraint: Union[BoxConstraint, SimplexConstraint]) -> np.ndarray:
    """
    Minimize f^T (x - x_t) + sum (x - x_t)^2 / (2 Gamma) under the constraint.

    The minimizer is the projection of x_t - Gamma * f, in the metric weighted
    by Gamma when Gamma is per-coordinate.
    """
    current = np.asarray(current, dtype=float)
    f = np.asarray(f, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if current.shape != f.shape:
        raise ValueError(f"gradient shape {f.shape} does not match iterate {current.shape}")
    if np.any(~(gamma > 0)):
        raise ValueError("surrogate step Gamma must be > 0")
    target = current - gamma * f

    if isinstance(constraint, BoxConstraint):
        return np.clip(target, constraint.lo, constraint.hi)
    if gamma.ndim == 0 or np.ptp(gamma) == 0:
        return project_simplex(target, constraint.floor)
    return project_simplex(target, constraint.floor, scale=gamma)


def limit_step(current, proposal, max_step: float) -> np.ndarray:
    """Shrink proposal - current along itself until no entry moves more than max_step."""
    current = np.asarray(current, dtype=float)
    step = np.asarray(proposal, dtype=float) - current
    largest = float(np.max(np.abs(step))) if step.size else 0.0
    if largest <= max_step:
        return current + step
    return current + step * (max_step / largest)


# ----------------------------------------------------------------------------
# eta update
# ----------------------------------------------------------------------------

@dataclass
class StepRule:
    """
    Gamma = min(damping / curvature, max_fraction * range / |f|) per coordinate.

    The curvature term makes Gamma * f a damped Newton step that shrinks with
    the gradient; the cap only clips steps beyond `max_fraction` of a block's
    range. Particle weights are solved in the curvature metric and their total
    change is then limited to `max_fraction`.
    """
    max_fraction: float = 0.1
    delta_mean_range: float = 0.6e-9
    gamma_zeta: float = 0.1
    damping: float = 0.5    # blocks share one gradient snapshot; full Newton steps overshoot

    def __post_init__(self):
        if not 0 < self.max_fraction <= 1:
            raise ValueError("max_fraction must lie in (0, 1]")
        if self.delta_mean_range <= 0 or self.gamma_zeta <= 0:
            raise ValueError("delta_mean_range and gamma_zeta must be > 0")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")


def eta_curvature(q: HybridPosterior, obs: Observation, prior_cfg: Optional[PriorConfig] = None) -> EtaCurvature:
    """
    Diagonal curvature of the unscaled objective at the current point estimates.

    positions: w_k,n (2/sigma^2) |alpha_k|^2 sum (2pi f_rel)^2   (Gauss-Newton)
    weights:   1 / w_k,n from the entropy term
    delta_m:   (2/sigma^2) sum_band |s|^2 (2pi n f_s)^2 + 1/sigma0^2
    phi'_m:    (2/sigma^2) sum_band |s|^2
    variances: 1 / (2 var^2) from the entropy term
    """
    prior_cfg = prior_cfg or PriorConfig()
    plan = obs.band_plan
    path_curv = (2.0 / obs.noise_var) * np.abs(q.alpha_point) ** 2 * np.sum((TWO_PI * plan.rel_freq) ** 2)
    delta_curv, phi_curv = band_curvature(obs, q.tau_map, q.phi_means, q.delta_means, q.alpha_point)
    weights = q.weights
    return EtaCurvature(
        positions=weights * path_curv[:, None],
        weights=1.0 / weights,
        delta_mu=delta_curv + 1.0 / prior_cfg.delta_std ** 2,
        delta_var=np.array([0.5 / d.var ** 2 for d in q.delta_dists]),
        phi_mu=phi_curv,
        phi_var=np.array([0.5 / d.var ** 2 for d in q.phi_dists]),
    )


def block_gamma(f, value_range, max_fraction: float, curvature=None, damping: float = 1.0) -> np.ndarray:
    """
    Per-coordinate Gamma = min(damping / curvature, max_fraction * range / |f|).

    `curvature` is already zeta-scaled and smoothed like f. Coordinates with
    neither a gradient nor a curvature get Gamma = 1.
    """
    f = np.abs(np.asarray(f, dtype=float))
    value_range = np.broadcast_to(np.asarray(value_range, dtype=float), f.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        gamma = np.where(f > 0, max_fraction * value_range / f, np.inf)
        if curvature is not None:
            curv = np.broadcast_to(np.asarray(curvature, dtype=float), f.shape)
            gamma = np.minimum(gamma, np.where(curv > 0, damping / curv, np.inf))
    return np.where(np.isfinite(gamma) & (gamma > 0), gamma, 1.0)


@dataclass
class EtaUpdate:
    """Result of one eta step: new posterior, smoothing state and normalized step sizes."""
    posterior: HybridPosterior
    f_eta: EtaGradients
    curvature: EtaCurvature
    gap: float          # ||eta_bar - eta||_inf, normalized per block
    delta: float        # ||eta_new - eta||_inf, normalized per block
    block_delta: dict = field(default_factory=dict)


def _normalized_change(q_from: HybridPosterior, q_to: HybridPosterior, rule: StepRule) -> dict:
    """
    Per-block sup-norm change. Positions scale by their interval, means by
    their range, variances by the same range through the standard deviation.
    """
    width = np.array([d.hi - d.lo for d in q_from.tau_dists])
    width = np.where(width > 0, width, 1.0)

    def std_change(a_dists, b_dists, value_range):
        return max(abs(np.sqrt(b.var) - np.sqrt(a.var)) for a, b in zip(a_dists, b_dists)) / value_range

    out = {
        "positions": float(np.max(np.abs(q_to.positions - q_from.positions) / width[:, None])),
        "weights": float(np.max(np.abs(q_to.weights - q_from.weights))),
        "delta_mu": float(np.max(np.abs(q_to.delta_means - q_from.delta_means))) / rule.delta_mean_range,
        "delta_var": std_change(q_from.delta_dists, q_to.delta_dists, rule.delta_mean_range),
    }
    if q_from.phi_dists:
        out["phi_mu"] = float(np.max(np.abs(q_to.phi_means - q_from.phi_means))) / TWO_PI
        out["phi_var"] = std_change(q_from.phi_dists, q_to.phi_dists, TWO_PI)
    return out


def update_eta(q: HybridPosterior, grads: EtaGradients, curvature: EtaCurvature, schedule: StepSchedule,
               t: int, zeta_v: float, f_prev: Optional[EtaGradients] = None,
               curv_prev: Optional[EtaCurvature] = None, step_rule: Optional[StepRule] = None,
               gamma: Optional[float] = None) -> EtaUpdate:
    """
    One SSCA step on every eta block of a model.

    Args:
        q (HybridPosterior): current posterior (not modified)
        grads (EtaGradients): this iteration's gradient estimates
        curvature (EtaCurvature): this iteration's diagonal curvature
        schedule (StepSchedule): rho / gamma schedule
        t (int): iteration index
        zeta_v (float): model weight scaling gradient and curvature
        f_prev (EtaGradients): gradient smoothing state, zeros when omitted
        curv_prev (EtaCurvature): curvature smoothing state, none when omitted
        step_rule (StepRule): Gamma rule
        gamma (float): overrides the schedule's gamma_t

    Returns:
        EtaUpdate: `gap` is the normalized projected-gradient residual
        ||eta_bar - eta||, which vanishes exactly at a stationary point
    """
    rule = step_rule or StepRule()
    rho_t, gamma_t = schedule.step_sizes(t)
    if gamma is not None:
        gamma_t = float(gamma)
    if not 0.0 <= gamma_t <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma_t}")

    f_prev = f_prev or EtaGradients.zeros_for(q)
    f = smooth_eta_gradients(f_prev, grads.scaled(zeta_v), rho_t)
    curv = curvature.scaled(zeta_v)
    if curv_prev is not None:
        curv = smooth_eta_gradients(curv_prev, curv, rho_t)
    frac, damping = rule.max_fraction, rule.damping
    q_bar = q.copy()

    for k, dist in enumerate(q_bar.tau_dists):
        gam = block_gamma(f.positions[k], dist.hi - dist.lo, frac, curv.positions[k], damping)
        dist.positions = solve_surrogate(dist.positions, f.positions[k], gam, BoxConstraint(dist.lo, dist.hi))

        # a common shift of f is absorbed by the simplex multiplier
        f_w = f.weights[k] - f.weights[k].mean()
        gam_w = block_gamma(f_w, 1.0, frac, curv.weights[k], damping)
        w_bar = solve_surrogate(dist.weights, f_w, gam_w, SimplexConstraint(dist.weight_floor))
        dist.weights = limit_step(dist.weights, w_bar, frac)

    for name, dists, ranges in (("delta", q_bar.delta_dists, [rule.delta_mean_range] * q.n_bands),
                                ("phi", q_bar.phi_dists, [TWO_PI] * (q.n_bands - 1))):
        f_mu, f_var = getattr(f, f"{name}_mu"), getattr(f, f"{name}_var")
        c_mu, c_var = getattr(curv, f"{name}_mu"), getattr(curv, f"{name}_var")
        for i, dist in enumerate(dists):
            gam = block_gamma(f_mu[i], ranges[i], frac, c_mu[i], damping)
            dist.mean = float(solve_surrogate(dist.mean, f_mu[i], gam, BoxConstraint(dist.mean_lo, dist.mean_hi)))
            gam = block_gamma(f_var[i], dist.var, frac, c_var[i], damping)
            dist.var = float(solve_surrogate(dist.var, f_var[i], gam, BoxConstraint(dist.var_floor, np.inf)))

    q_new = q.copy()
    for new, cur, bar in zip(q_new.tau_dists, q.tau_dists, q_bar.tau_dists):
        new.positions = np.clip((1 - gamma_t) * cur.positions + gamma_t * bar.positions, cur.lo, cur.hi)
        new.weights = (1 - gamma_t) * cur.weights + gamma_t * bar.weights
    for new, cur, bar in zip(q_new.delta_dists + q_new.phi_dists, q.delta_dists + q.phi_dists,
                             q_bar.delta_dists + q_bar.phi_dists):
        new.mean = float(np.clip((1 - gamma_t) * cur.mean + gamma_t * bar.mean, cur.mean_lo, cur.mean_hi))
        new.var = max((1 - gamma_t) * cur.var + gamma_t * bar.var, cur.var_floor)

    gap_blocks = _normalized_change(q, q_bar, rule)
    step_blocks = _normalized_change(q, q_new, rule)
    return EtaUpdate(posterior=q_new, f_eta=f, curvature=curv, gap=max(gap_blocks.values()),
                     delta=max(step_blocks.values()), block_delta=step_blocks)


# ----------------------------------------------------------------------------
# Gains
# ----------------------------------------------------------------------------

def ls_alpha(obs: Observation, plan: BandPlan, tau_map, phi_means, delta_means, ridge: bool = True) -> np.ndarray:
    """
    LS gains (D^H D)^-1 D^H y at the MAP delays and Gaussian means.

    Falls back to a ridge solve with lam = 1e-6 trace(D^H D) / K when the
    normal equations are near-singular, or raises LinAlgError if `ridge` is off.
    """
    return least_squares_gains(steering_matrix(plan, tau_map, phi_means, delta_means), obs.y, ridge=ridge)


def smooth_alpha(alpha_prev, alpha_ml, gamma_t: float) -> np.ndarray:
    alpha_prev = np.asarray(alpha_prev, dtype=complex)
    alpha_ml = np.asarray(alpha_ml, dtype=complex)
    if alpha_prev.shape != alpha_ml.shape:
        raise ValueError("gain vectors differ in length")
    return (1.0 - gamma_t) * alpha_prev + gamma_t * alpha_ml


# ----------------------------------------------------------------------------
# zeta update
# ----------------------------------------------------------------------------

def grad_zeta(g_means, zeta, zeta0, floor: float = ZETA_FLOOR) -> np.ndarray:
    """Per-model gradient mean(g_v) + ln zeta_v + 1 - ln zeta0_v."""
    g_means = np.asarray(g_means, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    zeta0 = np.asarray(zeta0, dtype=float)
    if not g_means.shape == zeta.shape == zeta0.shape:
        raise ValueError("g_means, zeta and zeta0 must have the same length")
    if np.any(zeta < floor * (1 - 1e-9)) or np.any(zeta0 <= 0):
        raise ValueError(f"zeta entries must be >= {floor} and zeta0 entries > 0")
    return g_means + np.log(zeta) + 1.0 - np.log(zeta0)


def update_zeta(ensemble: ModelEnsemble, grad, schedule: StepSchedule, t: int,
                gamma_zeta: float = 0.1, floor: float = ZETA_FLOOR, max_step: float = 0.1) -> ModelEnsemble:
    """
    Smooth the zeta gradient, solve the simplex surrogate, then combine.

    Gamma_zeta shrinks below `gamma_zeta` whenever the spread of the smoothed
    gradient around its mean would move a weight by more than `max_step`;
    only that spread matters on the simplex. Returns a new ensemble; the input
    is left untouched.
    """
    if max_step <= 0:
        raise ValueError(f"max_step must be > 0, got {max_step}")
    rho_t, gamma_t = schedule.step_sizes(t)
    f_zeta = smooth_gradient(ensemble.f_zeta, grad, rho_t)
    spread = float(np.max(np.abs(f_zeta - f_zeta.mean()))) if f_zeta.size else 0.0
    step = gamma_zeta if gamma_zeta * spread <= max_step else max_step / spread
    zeta_bar = solve_surrogate(ensemble.zeta, f_zeta, step, SimplexConstraint(floor))
    zeta = (1.0 - gamma_t) * ensemble.zeta + gamma_t * zeta_bar
    return ModelEnsemble(models=ensemble.models, zeta=zeta, zeta0=ensemble.zeta0.copy(), f_zeta=f_zeta)
