"""
Test file for the SSCA engine: step sizes, gradient estimators, surrogate
solves, eta / zeta updates and the LS gain refresh.
"""

import sys
import os
sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

import itertools

import numpy as np
import pytest

from spvbi_types import Band, BandPlan, CandidateModel, ChannelTruth, ModelEnsemble
from signal_model import absorb_reference, log_likelihood, steering_matrix, synthesize
from coarse_stage import ErrorSpec, oracle_coarse
from model_space import build_candidates, model_prior
from posterior import ThetaSample, init_posterior, sample_theta
from ssca_engine import (
    BoxConstraint, EtaGradients, SimplexConstraint, SmoothedGradients, StepSchedule, block_gamma,
    compute_eta_gradients, eta_curvature, limit_step,
    grad_gaussian_moments, grad_particle_positions, grad_particle_weights, grad_zeta, leave_one_out_baseline,
    ls_alpha, particle_terms, project_simplex, score_function_gradient, smooth_alpha, smooth_gradient,
    solve_surrogate, step_sizes, update_eta, update_zeta,
)

NS = 1e-9


def small_plan():
    return BandPlan([Band(2.4e9, 1.25e6, 16), Band(2.6e9, 1.25e6, 16)])


def random_setup(rng, plan=None, k=2, noise_var=0.05):
    plan = plan or small_plan()
    tau = np.sort(rng.uniform(40, 300, k)) * NS
    tau[1:] = np.maximum(tau[1:], tau[:-1] + 60 * NS)
    truth = ChannelTruth(alpha=0.5 * np.exp(1j * rng.uniform(0, 2 * np.pi, k)), tau=tau,
                         phi=rng.uniform(0, 2 * np.pi, plan.n_bands), delta=0.1 * NS * rng.standard_normal(plan.n_bands),
                         noise_var=noise_var)
    obs = synthesize(plan, truth, rng)
    coarse = oracle_coarse(truth, plan, ErrorSpec(tau_std=3 * NS), rng)
    model = build_candidates(coarse, 0, 10 * NS)[0]
    q = init_posterior(model, coarse, plan, obs)
    return plan, truth, obs, coarse, model, q


# ----------------------------------------------------------------------------
# Step sizes and smoothing
# ----------------------------------------------------------------------------

def test_step_sizes():
    assert step_sizes(0) == (1.0, 1.0)
    rho, gamma = step_sizes(1)
    assert rho == pytest.approx(0.9683, abs=1e-3)
    assert gamma == pytest.approx(0.9625, abs=1e-3)
    prev_rho, prev_ratio = rho, gamma / rho
    for t in range(2, 200):
        rho, gamma = step_sizes(t)
        assert rho < prev_rho and gamma / rho < prev_ratio
        prev_rho, prev_ratio = rho, gamma / rho
    with pytest.raises(ValueError):
        StepSchedule(rho_kappa=0.6, gamma_kappa=0.55)
    with pytest.raises(ValueError):
        step_sizes(-1)


def test_smooth_gradient():
    np.testing.assert_allclose(smooth_gradient([1.0, 2.0], [5.0, 6.0], 1.0), [5.0, 6.0])
    assert smooth_gradient(2.0, 4.0, 0.5) == pytest.approx(3.0)
    f = np.zeros(1)
    for _ in range(60):
        f = smooth_gradient(f, [7.0], 0.3)
    assert f[0] == pytest.approx(7.0, abs=1e-6)
    with pytest.raises(ValueError):
        smooth_gradient([1.0], [1.0, 2.0], 0.5)


# ----------------------------------------------------------------------------
# Gradient estimators
# ----------------------------------------------------------------------------

def test_position_gradient_matches_finite_differences():
    print("🚀 Testing particle position gradients...")
    rng = np.random.default_rng(11)
    h = 1e-13
    worst = 0.0
    for _ in range(50):
        plan, truth, obs, coarse, model, q = random_setup(rng)
        s = sample_theta(q, rng)
        grad = grad_particle_positions(q, [s], obs, model)
        k = int(rng.integers(q.k_paths))
        n = int(rng.integers(q.tau_dists[k].n_particles))
        p = q.tau_dists[k].positions[n]

        def ll_at(value):
            tau = s.tau.copy()
            tau[k] = value
            moved = ThetaSample(tau=tau, particle_index=s.particle_index, phi_rel=s.phi_rel, delta=s.delta,
                                alpha=s.alpha)
            return log_likelihood(obs, moved.as_params(), plan)

        fd = -q.tau_dists[k].weights[n] * (ll_at(p + h) - ll_at(p - h)) / (2 * h)
        rel = abs(grad[k, n] - fd) / max(abs(fd), 1e-300)
        worst = max(worst, rel)
    assert worst < 1e-5
    print(f"✅ Worst relative error {worst:.2e}")


def test_position_gradient_zero_at_truth():
    plan = small_plan()
    truth = ChannelTruth(alpha=[0.5], tau=[100 * NS], phi=[0.0, 0.8], delta=[0.0, 0.0], noise_var=0.01)
    obs = synthesize(plan, truth, 0, noiseless=True)
    coarse = oracle_coarse(truth, plan, ErrorSpec(), 0)
    model = CandidateModel(id=0, tau_seeds=[100 * NS], interval_half_width=[10 * NS])
    q = init_posterior(model, coarse, plan, obs)
    q.tau_dists[0].positions[4] = 100 * NS
    ref = absorb_reference(truth, plan)
    s = ThetaSample(tau=np.array([100 * NS]), particle_index=np.array([4]), phi_rel=ref.phi_rel, delta=ref.delta,
                    alpha=ref.alpha_ref)
    grad = grad_particle_positions(q, [s], obs, model)
    assert abs(grad[0, 4]) < 1e-6 * np.max(np.abs(grad))

    # linear in the weight at fixed likelihood
    doubled = q.copy()
    doubled.tau_dists[0].weights = doubled.tau_dists[0].weights * 2
    np.testing.assert_allclose(grad_particle_positions(doubled, [s], obs, model), 2 * grad)


def test_weight_gradient_for_identical_particles():
    rng = np.random.default_rng(4)
    plan, truth, obs, coarse, model, q = random_setup(rng)
    d = q.tau_dists[0]
    d.positions[3] = d.positions[2]
    d.weights = np.full(d.n_particles, 0.05)
    d.weights[2], d.weights[3] = 0.4, 0.2
    d.weights /= d.weights.sum()
    samples = [sample_theta(q, rng) for _ in range(5)]
    grad = grad_particle_weights(q, samples, obs, model)
    assert grad[0, 2] - grad[0, 3] == pytest.approx(np.log(d.weights[2]) - np.log(d.weights[3]), rel=1e-9)


def test_weight_gradient_formula():
    rng = np.random.default_rng(8)
    plan, truth, obs, coarse, model, q = random_setup(rng)
    samples = [sample_theta(q, rng) for _ in range(3)]
    terms = particle_terms(q, samples, obs, model)
    grad = grad_particle_weights(q, samples, obs, model, terms=terms)
    expected = np.log(q.weights) + 1.0 - terms.ll.mean(axis=0) - terms.log_prior.mean()
    np.testing.assert_allclose(grad, expected)

    # the substituted likelihood at the sampled particle is the sample's own likelihood
    s = samples[0]
    k, n = 0, s.particle_index[0]
    assert terms.ll[0, k, n] == pytest.approx(log_likelihood(obs, s.as_params(), plan), rel=1e-12)


def test_score_function_at_mean():
    d_mu, d_var = score_function_gradient([1.5], 1.5, 0.25, [3.0])
    assert d_mu == 0.0
    assert d_var == pytest.approx(-0.5 / 0.25 * 3.0)


def test_score_function_constant_objective():
    rng = np.random.default_rng(21)
    B, sigma, c = 100_000, 0.5, 4.0
    x = rng.normal(1.0, sigma, B)
    d_mu, _ = score_function_gradient(x, 1.0, sigma ** 2, np.full(B, c))
    assert abs(d_mu) < 4 * c / (sigma * np.sqrt(B))


def test_score_function_quadratic_toy():
    """E[(x - c)^2] under N(mu, var) is (mu - c)^2 + var."""
    print("🚀 Testing score-function estimators...")
    rng = np.random.default_rng(5)
    B, mu, var, c = 100_000, 0.3, 0.2, 1.0
    x = rng.normal(mu, np.sqrt(var), B)
    g = (x - c) ** 2
    d_mu, d_var = score_function_gradient(x, mu, var, g)

    se_mu = np.std((x - mu) / var * g) / np.sqrt(B)
    se_var = np.std((-0.5 / var + (x - mu) ** 2 / (2 * var ** 2)) * g) / np.sqrt(B)
    assert abs(d_mu - 2 * (mu - c)) < 3 * se_mu
    assert abs(d_var - 1.0) < 3 * se_var
    print("✅ Score-function gradients agree with the closed form")


def test_leave_one_out_baseline():
    np.testing.assert_allclose(leave_one_out_baseline([1.0, 2.0, 3.0]), [2.5, 2.0, 1.5])
    np.testing.assert_allclose(leave_one_out_baseline([5.0]), [5.0])


def test_gaussian_moments_shapes_and_baseline():
    rng = np.random.default_rng(2)
    plan, truth, obs, coarse, model, q = random_setup(rng)
    samples = [sample_theta(q, rng) for _ in range(6)]
    raw = grad_gaussian_moments(q, samples, obs, model)
    assert raw["delta_mu"].shape == (2,) and raw["phi_mu"].shape == (1,)
    # a baseline that is constant across samples is the same as shifting g
    g = particle_terms(q, samples, obs, model).g
    shifted = grad_gaussian_moments(q, samples, obs, model, g_values=g + 10.0)
    x = np.array([s.delta[0] for s in samples])
    d = q.delta_dists[0]
    expected_shift = np.mean((x - d.mean) / d.var) * 10.0
    assert shifted["delta_mu"][0] - raw["delta_mu"][0] == pytest.approx(expected_shift, rel=1e-6)

    grads, g_all = compute_eta_gradients(q, samples, obs, model)
    assert grads.positions.shape == q.positions.shape
    np.testing.assert_allclose(g_all, g)


def test_anchor_cancels_delay_only_terms():
    """Terms of g that depend only on the delay draw must not reach the Gaussian gradients."""
    rng = np.random.default_rng(5)
    plan, truth, obs, coarse, model, q = random_setup(rng)
    samples = [sample_theta(q, rng) for _ in range(8)]
    terms = particle_terms(q, samples, obs, model)

    at_means = [ThetaSample(tau=s.tau, particle_index=s.particle_index, phi_rel=q.phi_means,
                            delta=q.delta_means, alpha=s.alpha) for s in samples]
    means_terms = particle_terms(q, at_means, obs, model)
    np.testing.assert_allclose(means_terms.g, means_terms.g_anchor, rtol=1e-9)

    offsets = 1e4 * rng.standard_normal(len(samples))
    base = grad_gaussian_moments(q, samples, obs, model, g_values=terms.g, g_anchor=terms.g_anchor, baseline=True)
    shifted = grad_gaussian_moments(q, samples, obs, model, g_values=terms.g + offsets,
                                    g_anchor=terms.g_anchor + offsets, baseline=True)
    for key, value in base.items():
        np.testing.assert_allclose(shifted[key], value, rtol=1e-6, atol=1e-6 * np.max(np.abs(value)))

    # without the anchor the same offsets leak into the estimate
    plain = grad_gaussian_moments(q, samples, obs, model, g_values=terms.g, baseline=True, g_anchor=np.zeros(8))
    leaked = grad_gaussian_moments(q, samples, obs, model, g_values=terms.g + offsets, baseline=True,
                                   g_anchor=np.zeros(8))
    assert np.max(np.abs(leaked["delta_mu"] - plain["delta_mu"])) > 1e-3 * np.max(np.abs(plain["delta_mu"]))


# ----------------------------------------------------------------------------
# Surrogate solves
# ----------------------------------------------------------------------------

def simplex_oracle(V, floor=0.0):
    """Brute-force KKT enumeration over every support set, vectorized over rows of V."""
    n = V.shape[1]
    masks = np.array([m for m in itertools.product([0, 1], repeat=n) if any(m)], dtype=float)
    sizes = masks.sum(axis=1)
    theta = (V @ masks.T + (n - sizes) * floor - 1.0) / sizes               # (rows, supports)
    shifted = V[:, None, :] - theta[:, :, None]                              # (rows, supports, n)
    on = masks[None, :, :] > 0
    valid = np.all(np.where(on, shifted >= floor - 1e-12, shifted <= floor + 1e-12), axis=2)
    first = np.argmax(valid, axis=1)
    assert np.all(valid[np.arange(V.shape[0]), first])
    chosen = shifted[np.arange(V.shape[0]), first]
    return np.where(on[0, first], chosen, floor)


def test_project_simplex_matches_kkt_oracle():
    print("🚀 Testing simplex projection...")
    rng = np.random.default_rng(0)
    V = rng.normal(0.0, 1.0, (1000, 10))
    expected = np.vstack([simplex_oracle(chunk) for chunk in np.split(V, 10)])
    got = np.array([project_simplex(v) for v in V])
    assert np.max(np.abs(got - expected)) < 1e-10

    floor = 0.02
    expected = simplex_oracle(V[:200], floor)
    got = np.array([project_simplex(v, floor) for v in V[:200]])
    assert np.max(np.abs(got - expected)) < 1e-10
    assert np.all(got >= floor - 1e-15)
    np.testing.assert_allclose(got.sum(axis=1), 1.0, atol=1e-12)
    print("✅ Projection matches brute-force KKT")


def test_project_simplex_edge_cases():
    np.testing.assert_allclose(project_simplex([2.0, 0.0, 0.0]), [1.0, 0.0, 0.0])
    np.testing.assert_allclose(project_simplex([0.2, 0.3, 0.5]), [0.2, 0.3, 0.5])
    np.testing.assert_allclose(project_simplex([5.0, 1.0], floor=0.5), [0.5, 0.5])
    with pytest.raises(ValueError):
        project_simplex([0.5, 0.5], floor=0.6)
    with pytest.raises(ValueError):
        project_simplex([])


def test_weighted_projection_satisfies_kkt():
    rng = np.random.default_rng(4)
    floor = 0.01
    for _ in range(500):
        v = rng.normal(0.1, 0.3, 8)
        scale = 10.0 ** rng.uniform(-2, 2, 8)
        x = project_simplex(v, floor, scale=scale)
        assert abs(x.sum() - 1.0) < 1e-12
        assert np.all(x >= floor - 1e-15)
        ratio = (v - x) / scale                      # common multiplier on the free entries
        free = x > floor + 1e-12
        assert np.ptp(ratio[free]) < 1e-9
        assert np.all((v[~free] - floor) / scale[~free] <= ratio[free][0] + 1e-9)

    v = rng.normal(0.0, 1.0, 6)
    np.testing.assert_allclose(project_simplex(v, 0.02, scale=np.full(6, 0.3)), project_simplex(v, 0.02),
                               atol=1e-12)
    with pytest.raises(ValueError):
        project_simplex(v, scale=np.zeros(6))


def test_solve_surrogate():
    assert solve_surrogate(0.5, 1.0, 0.2, BoxConstraint(0.0, 1.0)) == pytest.approx(0.3)
    assert solve_surrogate(0.5, -10.0, 0.2, BoxConstraint(0.0, 1.0)) == pytest.approx(1.0)
    x = np.array([0.2, 0.3, 0.5])
    np.testing.assert_allclose(solve_surrogate(x, np.zeros(3), 0.1, SimplexConstraint()), x)
    with pytest.raises(ValueError):
        solve_surrogate(0.5, 1.0, 0.0, BoxConstraint())
    # per-coordinate Gamma: x - Gamma (f + theta) with theta = -1/6
    got = solve_surrogate(x, np.array([1.0, 0.0, 0.0]), np.array([0.1, 0.2, 0.3]), SimplexConstraint())
    np.testing.assert_allclose(got, [0.1 + 0.1 / 6, 0.3 + 0.2 / 6, 0.5 + 0.3 / 6])


def test_limit_step():
    np.testing.assert_allclose(limit_step([0.5, 0.5], [0.9, 0.1], 0.1), [0.6, 0.4])
    np.testing.assert_allclose(limit_step([0.5, 0.5], [0.55, 0.45], 0.1), [0.55, 0.45])


def test_block_gamma_newton_and_cap():
    # Newton regime: the step shrinks with the gradient
    steps = [float(block_gamma(f, 1.0, 0.1, 2.0, damping=1.0) * f) for f in (0.1, 0.01, 0.001)]
    np.testing.assert_allclose(steps, [0.05, 0.005, 0.0005])
    # the cap only clips large steps
    assert float(block_gamma(10.0, 1.0, 0.1, 2.0) * 10.0) == pytest.approx(0.1)
    assert float(block_gamma(0.0, 1.0, 0.1, 0.0)) == 1.0
    assert float(block_gamma(0.1, 1.0, 0.1, 2.0, damping=0.5) * 0.1) == pytest.approx(0.025)


def test_surrogate_iteration_converges_on_quadratic():
    """Smoothed surrogate steps on 0.5 ||x - c||^2 over a box reach the projected minimizer."""
    c = np.array([0.3, 1.7, -0.4])
    lo, hi = np.zeros(3), np.ones(3)
    x = np.array([0.9, 0.1, 0.5])
    f = np.zeros(3)
    schedule = StepSchedule()
    last_step = np.inf
    for t in range(3000):
        rho, gamma = schedule.step_sizes(t)
        f = smooth_gradient(f, x - c, rho)
        x_bar = solve_surrogate(x, f, 0.5, BoxConstraint(lo, hi))
        x_new = (1 - gamma) * x + gamma * x_bar
        last_step = np.max(np.abs(x_new - x))
        x = x_new
    assert last_step < 1e-4
    np.testing.assert_allclose(x, np.clip(c, lo, hi), atol=1e-4)
    # projected-gradient stationarity
    residual = np.max(np.abs(x - np.clip(x - (x - c), lo, hi)))
    assert residual < 1e-4


# ----------------------------------------------------------------------------
# eta update
# ----------------------------------------------------------------------------

def test_update_eta_gamma_extremes_and_zero_gradient():
    rng = np.random.default_rng(13)
    plan, truth, obs, coarse, model, q = random_setup(rng)
    samples = [sample_theta(q, rng) for _ in range(5)]
    grads, _ = compute_eta_gradients(q, samples, obs, model)
    curvature = eta_curvature(q, obs)
    schedule = StepSchedule()

    still = update_eta(q, grads, curvature, schedule, 3, 0.5, gamma=0.0)
    np.testing.assert_array_equal(still.posterior.positions, q.positions)
    np.testing.assert_array_equal(still.posterior.weights, q.weights)
    assert still.delta == 0.0

    zero = update_eta(q, EtaGradients.zeros_for(q), curvature, schedule, 0, 0.5, gamma=1.0)
    np.testing.assert_allclose(zero.posterior.positions, q.positions, rtol=0, atol=1e-20)
    np.testing.assert_allclose(zero.posterior.weights, q.weights, atol=1e-12)
    np.testing.assert_allclose(zero.posterior.delta_means, q.delta_means)
    assert zero.gap < 1e-9

    full = update_eta(q, grads, curvature, schedule, 0, 1.0, gamma=1.0)
    assert full.delta == pytest.approx(full.gap)
    full.posterior.check()


def test_update_eta_gap_shrinks_with_gradient():
    """Away from the caps the surrogate step, and with it the residual, is linear in the gradient."""
    rng = np.random.default_rng(21)
    plan, truth, obs, coarse, model, q = random_setup(rng)
    samples = [sample_theta(q, rng) for _ in range(10)]
    grads, _ = compute_eta_gradients(q, samples, obs, model)
    curvature = eta_curvature(q, obs)
    schedule = StepSchedule()

    mid = update_eta(q, grads.scaled(1e-5), curvature, schedule, 0, 1.0)
    small = update_eta(q, grads.scaled(1e-7), curvature, schedule, 0, 1.0)
    assert 0.0 < mid.gap < 1e-2
    np.testing.assert_allclose(small.gap, 1e-2 * mid.gap, rtol=1e-3)
    for name, value in mid.block_delta.items():
        np.testing.assert_allclose(small.block_delta[name], 1e-2 * value, rtol=1e-3, atol=1e-15)


def test_update_eta_smooths_curvature():
    rng = np.random.default_rng(8)
    plan, truth, obs, coarse, model, q = random_setup(rng)
    grads = EtaGradients.zeros_for(q)
    curvature = eta_curvature(q, obs)
    schedule = StepSchedule()

    first = update_eta(q, grads, curvature, schedule, 0, 0.5)
    np.testing.assert_allclose(first.curvature.positions, 0.5 * curvature.positions)
    rho, _ = schedule.step_sizes(1)
    second = update_eta(q, grads, curvature.scaled(3.0), schedule, 1, 0.5, first.f_eta, first.curvature)
    expected = (1 - rho) * first.curvature.delta_mu + rho * 1.5 * curvature.delta_mu
    np.testing.assert_allclose(second.curvature.delta_mu, expected)


def test_update_eta_fuzz_keeps_invariants():
    print("🚀 Fuzzing eta updates...")
    rng = np.random.default_rng(99)
    plan, truth, obs, coarse, model, q = random_setup(rng)
    curvature = eta_curvature(q, obs)
    schedule = StepSchedule()
    for trial in range(2000):
        scale = 10.0 ** rng.uniform(-3, 12)
        grads = EtaGradients(
            positions=scale * rng.standard_normal(q.positions.shape),
            weights=scale * rng.standard_normal(q.weights.shape),
            delta_mu=scale * rng.standard_normal(2),
            delta_var=scale * rng.standard_normal(2),
            phi_mu=scale * rng.standard_normal(1),
            phi_var=scale * rng.standard_normal(1),
        )
        upd = update_eta(q, grads, curvature, schedule, int(rng.integers(0, 200)), float(rng.uniform(1e-6, 1.0)),
                         curv_prev=curvature if trial % 2 else None)
        upd.posterior.check()
        assert np.max(np.abs(upd.posterior.weights - q.weights)) <= 0.1 + 1e-12
        if trial % 10 == 0:
            q, curvature = upd.posterior, eta_curvature(upd.posterior, obs)
    print("✅ 2000 random updates kept every invariant")


# ----------------------------------------------------------------------------
# Gains
# ----------------------------------------------------------------------------

def test_ls_alpha():
    plan = small_plan()
    y = 0.7 - 0.2j
    obs = synthesize(plan, ChannelTruth(alpha=[y], tau=[0.0], phi=[0.0, 0.0], delta=[0.0, 0.0], noise_var=1.0),
                     0, noiseless=True)
    np.testing.assert_allclose(ls_alpha(obs, plan, [0.0], [0.0], [0.0, 0.0]), [y], atol=1e-12)

    rng = np.random.default_rng(3)
    for _ in range(20):
        plan_, truth, obs, coarse, model, q = random_setup(rng)
        tau, phi, delta = q.tau_map, q.phi_means, q.delta_means
        D = steering_matrix(plan, tau, phi, delta)
        if np.linalg.cond(D.conj().T @ D) > 1e4:
            continue
        np.testing.assert_allclose(ls_alpha(obs, plan, tau, phi, delta), np.linalg.pinv(D) @ obs.y, atol=1e-10)


def test_ls_alpha_singular():
    plan = small_plan()
    truth = ChannelTruth(alpha=[1.0], tau=[50 * NS], phi=[0.0, 0.0], delta=[0.0, 0.0], noise_var=1.0)
    obs = synthesize(plan, truth, 0, noiseless=True)
    alpha = ls_alpha(obs, plan, [50 * NS, 50 * NS], [0.0], [0.0, 0.0])
    assert np.all(np.isfinite(alpha))
    with pytest.raises(np.linalg.LinAlgError):
        ls_alpha(obs, plan, [50 * NS, 50 * NS], [0.0], [0.0, 0.0], ridge=False)


def test_smooth_alpha():
    np.testing.assert_allclose(smooth_alpha([1 + 0j], [3 + 2j], 0.5), [2 + 1j])
    np.testing.assert_allclose(smooth_alpha([1 + 0j], [3 + 2j], 1.0), [3 + 2j])
    a = np.array([0j])
    for _ in range(200):
        a = smooth_alpha(a, [1 + 1j], 0.1)
    np.testing.assert_allclose(a, [1 + 1j], atol=1e-8)


# ----------------------------------------------------------------------------
# zeta update
# ----------------------------------------------------------------------------

def ensemble_of(n):
    models = [CandidateModel(id=v, tau_seeds=[100 * NS], interval_half_width=[25 * NS]) for v in range(n)]
    zeta0 = model_prior(n)
    return ModelEnsemble(models=models, zeta=zeta0.copy(), zeta0=zeta0)


def test_grad_zeta_values():
    g = grad_zeta([1.0, 2.0, 3.0], [0.5, 0.3, 0.2], [1 / 3] * 3)
    expected = np.array([1.0, 2.0, 3.0]) + np.log([0.5, 0.3, 0.2]) + 1.0 - np.log(1 / 3)
    np.testing.assert_allclose(g, expected)
    with pytest.raises(ValueError):
        grad_zeta([1.0, 1.0], [1.0, 0.0], [0.5, 0.5])


def test_update_zeta_symmetry_and_monotonicity():
    schedule = StepSchedule()
    ens = ensemble_of(3)
    same = update_zeta(ens, grad_zeta([5.0] * 3, ens.zeta, ens.zeta0), schedule, 0)
    np.testing.assert_allclose(same.zeta, [1 / 3] * 3, atol=1e-12)

    favoured = update_zeta(ens, grad_zeta([5.0, 4.0, 5.0], ens.zeta, ens.zeta0), schedule, 0)
    assert favoured.zeta[1] > 1 / 3
    assert abs(favoured.zeta.sum() - 1.0) < 1e-12
    # input untouched
    np.testing.assert_allclose(ens.zeta, [1 / 3] * 3)

    single = ensemble_of(1)
    for t in range(5):
        single = update_zeta(single, grad_zeta([float(t)], single.zeta, single.zeta0), schedule, t)
    np.testing.assert_allclose(single.zeta, [1.0])


def test_update_zeta_dominant_model():
    schedule = StepSchedule()
    ens = ensemble_of(3)
    floor = 1e-6
    for t in range(50):
        g_means = np.array([100.0, 0.0, 100.0])
        ens = update_zeta(ens, grad_zeta(g_means, ens.zeta, ens.zeta0), schedule, t)
        assert np.all(ens.zeta >= floor - 1e-12)
        assert abs(ens.zeta.sum() - 1.0) < 1e-9
    assert ens.zeta[1] == pytest.approx(1 - 2 * floor, abs=1e-9)


def test_update_zeta_limits_large_gradient_spread():
    schedule = StepSchedule()
    ens = ensemble_of(3)
    grad = np.array([1e4, 0.0, -1e4])
    new = update_zeta(ens, grad, schedule, 0)
    assert np.max(np.abs(new.zeta - ens.zeta)) <= 0.1 + 1e-12
    assert new.zeta[2] > new.zeta[1] > new.zeta[0]
    np.testing.assert_allclose(new.zeta, [1 / 3 - 0.1, 1 / 3, 1 / 3 + 0.1])
    np.testing.assert_allclose(new.f_zeta, grad)

    # small spreads keep the configured Gamma_zeta
    mild = update_zeta(ens, np.array([0.3, 0.0, -0.3]), schedule, 0, gamma_zeta=0.1)
    np.testing.assert_allclose(mild.zeta, [1 / 3 - 0.03, 1 / 3, 1 / 3 + 0.03])
    with pytest.raises(ValueError):
        update_zeta(ens, grad, schedule, 0, max_step=0.0)


def test_zeta_smoothing_state_lives_on_the_ensemble():
    rng = np.random.default_rng(6)
    plan, truth, obs, coarse, model, q = random_setup(rng)
    state = SmoothedGradients.zeros([q, q.copy()])
    assert not hasattr(state, "f_zeta")
    assert state.curvature == [None, None]

    schedule = StepSchedule()
    ens = ensemble_of(2)
    first = update_zeta(ens, np.array([1.0, 0.0]), schedule, 0)
    rho, _ = schedule.step_sizes(1)
    second = update_zeta(first, np.array([0.0, 1.0]), schedule, 1)
    np.testing.assert_allclose(second.f_zeta, (1 - rho) * np.array([1.0, 0.0]) + rho * np.array([0.0, 1.0]))


if __name__ == "__main__":
    print("🚀 Running SSCA Engine Tests...\n")

    test_step_sizes()
    test_position_gradient_matches_finite_differences()
    print()

    test_score_function_quadratic_toy()
    test_project_simplex_matches_kkt_oracle()
    print()

    test_surrogate_iteration_converges_on_quadratic()
    test_update_eta_gap_shrinks_with_gradient()
    test_update_eta_fuzz_keeps_invariants()
    test_update_zeta_dominant_model()
    test_update_zeta_limits_large_gradient_spread()
    print()

    print("🎉 All SSCA engine tests passed!")
