"""
Multi-model particle VBI driver.

One call runs the whole refined stage for a single observation: candidate
models are built from the coarse estimate, every model gets a hybrid
posterior, and each iteration allocates samples, updates every model's eta
and gains, then updates the model weights zeta once all models are done.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from spvbi_types import BandPlan, CoarseEstimate, ModelEnsemble, Observation
from sim_utils import SimUtils
from model_space import PriorConfig, build_candidates, default_split_distance, model_prior
from posterior import PosteriorConfig, extract_estimates, init_posterior, sample_theta
from ssca_engine import (
    SmoothedGradients, StepRule, StepSchedule, compute_eta_gradients, eta_curvature,
    grad_zeta, ls_alpha, smooth_alpha, update_eta, update_zeta,
)
from autofocus_sampler import allocate, prune

logger = logging.getLogger(__name__)


@dataclass
class RunConfig:
    """
    Refined-stage settings.

    kappa1 = 0 disables pruning, kappa2 = inf disables dominance.
    tau_d = None picks the split distance from the band plan.
    """
    B: int = 10
    n_particles: int = 10
    kappa1: float = 0.5
    kappa2: float = 0.5
    max_iters: int = 200
    tol_zeta: float = 1e-3
    tol_eta: float = 1e-3
    window: int = 5
    split_count: int = 2
    tau_d: Optional[float] = None
    score_baseline: bool = True
    seed: int = 0
    schedule: StepSchedule = field(default_factory=StepSchedule)
    prior: PriorConfig = field(default_factory=PriorConfig)
    posterior: Optional[PosteriorConfig] = None
    step_rule: Optional[StepRule] = None
    zeta0_weights: Optional[List[float]] = None
    check_invariants: bool = True

    def __post_init__(self):
        if self.B < 1 or self.n_particles < 1 or self.max_iters < 1 or self.window < 1:
            raise ValueError("B, n_particles, max_iters and window must all be >= 1")
        if self.kappa1 < 0 or self.kappa2 < 0:
            raise ValueError("pruning coefficients must be >= 0")
        if self.tol_zeta <= 0 or self.tol_eta <= 0:
            raise ValueError("convergence tolerances must be > 0")
        if self.split_count < 0:
            raise ValueError("split_count must be >= 0")
        if self.tau_d is not None and self.tau_d <= 0:
            raise ValueError("tau_d must be > 0")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if self.posterior is None:
            self.posterior = PosteriorConfig(n_particles=self.n_particles)
        elif self.posterior.n_particles != self.n_particles:
            raise ValueError("posterior.n_particles disagrees with n_particles")
        if self.step_rule is None:
            self.step_rule = StepRule(delta_mean_range=6.0 * self.prior.delta_std)


@dataclass
class EstimateReport:
    best_model: int
    zeta_final: np.ndarray
    tau_map: np.ndarray
    tau_mmse: np.ndarray
    phi_hat: np.ndarray
    delta_hat: np.ndarray
    alpha_hat: np.ndarray
    iters_run: int
    converged: bool
    stationarity_residual: float
    total_samples: int
    split_origins: List[Optional[int]]
    trace: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def mean_samples_per_iter(self) -> float:
        return self.total_samples / self.iters_run if self.iters_run else 0.0


def convergence_check(trace: List[Dict[str, Any]], tol_zeta: float, tol_eta: float, window: int) -> bool:
    """
    True once the last `window` records all moved zeta by less than tol_zeta
    and eta by less than tol_eta.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if len(trace) < window:
        return False
    return all(r["delta_zeta"] < tol_zeta and r["delta_eta"] < tol_eta for r in trace[-window:])


def _eta_summary(q) -> Dict[str, list]:
    est = extract_estimates(q)
    return {"tau_map": est.tau_map.tolist(), "tau_mmse": est.tau_mmse.tolist(),
            "delta_mu": est.delta_hat.tolist(), "phi_mu": est.phi_hat.tolist()}


def run_mm_spvbi(obs: Observation, plan: BandPlan, coarse: CoarseEstimate, cfg: Optional[RunConfig] = None,
                 trace_path: Optional[str] = None) -> EstimateReport:
    """
    Run the multi-model refined stage to convergence or max_iters.

    Args:
        obs (Observation): data
        plan (BandPlan): band layout
        coarse (CoarseEstimate): seeds the candidate models
        cfg (RunConfig): settings, section defaults when omitted
        trace_path (str): optional JSON-lines file receiving one record per iteration

    Returns:
        EstimateReport: estimates of the highest-weight model plus the trace
    """
    cfg = cfg or RunConfig()
    if coarse.k_hat < 1:
        raise ValueError("coarse estimate has no paths")

    split_count = min(cfg.split_count, coarse.k_hat)
    tau_d = cfg.tau_d if cfg.tau_d is not None else default_split_distance(plan, coarse, split_count)
    models = build_candidates(coarse, split_count, tau_d)
    zeta0 = model_prior(len(models), cfg.zeta0_weights)
    ensemble = ModelEnsemble(models=models, zeta=zeta0.copy(), zeta0=zeta0)
    posteriors = [init_posterior(m, coarse, plan, obs, cfg.posterior, cfg.prior) for m in models]
    state = SmoothedGradients.zeros(posteriors)

    trace: List[Dict[str, Any]] = []
    total_samples = 0
    converged = False
    residual = np.inf

    for t in range(cfg.max_iters):
        rho_t, gamma_t = cfg.schedule.step_sizes(t)
        alloc = prune(allocate(ensemble.zeta, cfg.B), ensemble.zeta, cfg.kappa1, cfg.kappa2, cfg.B)
        total_samples += alloc.drawn

        g_means = np.zeros(ensemble.n_models)
        updates = []
        for v, (model, q) in enumerate(zip(models, posteriors)):
            rng = SimUtils.stream(cfg.seed, v, t)
            samples = [sample_theta(q, rng) for _ in range(alloc.per_model[v])]
            grads, g = compute_eta_gradients(q, samples, obs, model, cfg.prior, baseline=cfg.score_baseline)
            g_means[v] = float(np.mean(g))

            upd = update_eta(q, grads, eta_curvature(q, obs, cfg.prior), cfg.schedule, t, ensemble.zeta[v],
                             state.f_eta[v], state.curvature[v], cfg.step_rule)
            q_new = upd.posterior
            alpha_ml = ls_alpha(obs, plan, q_new.tau_map, q_new.phi_means, q_new.delta_means)
            q_new.alpha_point = smooth_alpha(q_new.alpha_point, alpha_ml, gamma_t)
            if cfg.check_invariants:
                q_new.check()

            posteriors[v] = q_new
            state.f_eta[v] = upd.f_eta
            state.curvature[v] = upd.curvature
            updates.append(upd)

        # barrier: zeta needs every model's g mean
        new_ensemble = update_zeta(ensemble, grad_zeta(g_means, ensemble.zeta, ensemble.zeta0),
                                   cfg.schedule, t, cfg.step_rule.gamma_zeta,
                                   max_step=cfg.step_rule.max_fraction)
        delta_zeta = float(np.max(np.abs(new_ensemble.zeta - ensemble.zeta)))
        ensemble = new_ensemble
        best = ensemble.best()
        residual = updates[best].gap

        record = {
            "t": t,
            "rho": rho_t,
            "gamma": gamma_t,
            "zeta": ensemble.zeta.tolist(),
            "allocation": alloc.as_record(),
            "g_means": g_means.tolist(),
            "delta_zeta": delta_zeta,
            "delta_eta": updates[best].delta,
            "gap": residual,
            "best_model": best,
            "eta": [_eta_summary(q) for q in posteriors],
        }
        trace.append(record)
        logger.debug("iter %d zeta=%s B_v=%s dz=%.3g deta=%.3g", t, np.round(ensemble.zeta, 4),
                     alloc.per_model, delta_zeta, updates[best].delta)

        if convergence_check(trace, cfg.tol_zeta, cfg.tol_eta, cfg.window):
            converged = True
            break

    if trace_path:
        with open(trace_path, "w", encoding="utf-8") as fh:
            for record in trace:
                fh.write(json.dumps(record) + "\n")

    best = ensemble.best()
    est = extract_estimates(posteriors[best])
    logger.info("finished after %d iterations (converged=%s), best model %d, zeta=%s",
                len(trace), converged, best, np.round(ensemble.zeta, 4))

    return EstimateReport(
        best_model=best,
        zeta_final=ensemble.zeta.copy(),
        tau_map=est.tau_map,
        tau_mmse=est.tau_mmse,
        phi_hat=est.phi_hat,
        delta_hat=est.delta_hat,
        alpha_hat=est.alpha_hat,
        iters_run=len(trace),
        converged=converged,
        stationarity_residual=float(residual),
        total_samples=total_samples,
        split_origins=[m.split_origin for m in models],
        trace=trace,
    )
