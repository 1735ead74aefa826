"""
Test file for the hybrid variational posterior.
"""

import sys
import os
sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

import json

import numpy as np
import pytest
from scipy.stats import norm

from spvbi_types import BandPlan, CandidateModel, ChannelTruth
from signal_model import absorb_reference, log_likelihood, synthesize
from coarse_stage import ErrorSpec, oracle_coarse
from model_space import PriorConfig, build_candidates, log_prior
from posterior import (
    GaussianDist, HybridPosterior, ParticleDist, PosteriorConfig, ThetaSample, dump_snapshot,
    extract_estimates, g_value, init_posterior, log_q, posterior_from_dict, posterior_to_dict, sample_theta,
)

NS = 1e-9


def one_path_setup(n_sub=64):
    plan = BandPlan.default().with_subcarriers(n_sub)
    truth = ChannelTruth(alpha=[0.5 * np.exp(0.7j)], tau=[100 * NS], phi=[0.3, 1.1], delta=[0.0, 0.0],
                         noise_var=0.01)
    obs = synthesize(plan, truth, 0, noiseless=True)
    coarse = oracle_coarse(truth, plan, ErrorSpec(), 0)
    model = build_candidates(coarse, 0, 25 * NS)[0]
    return plan, truth, obs, coarse, model


def test_init_posterior_grid_and_gains():
    print("🚀 Testing posterior initialization...")
    plan, truth, obs, coarse, model = one_path_setup()
    q = init_posterior(model, coarse, plan, obs)
    d = q.tau_dists[0]
    assert d.n_particles == 10
    np.testing.assert_allclose(d.positions[[0, 1, -1]] / NS, [75, 75 + 50 / 9, 125], rtol=1e-12)
    np.testing.assert_allclose(d.weights, 0.1)
    # noiseless data at the true delay: LS recovers the absorbed gain
    expected = absorb_reference(truth, plan).alpha_ref
    np.testing.assert_allclose(q.alpha_point, expected, atol=1e-6)
    assert q.delta_dists[0].var < PriorConfig().delta_std ** 2
    q.check()
    print("✅ Uniform particles and LS gains")


def test_init_posterior_variances_follow_local_curvature():
    plan, truth, obs, coarse, model = one_path_setup()
    q = init_posterior(model, coarse, plan, obs)
    power = np.abs(q.alpha_point[0]) ** 2
    scale = 2.0 / truth.noise_var
    for m, dist in enumerate(q.delta_dists):
        rows = plan.band_index == m
        curv = scale * power * np.sum((2 * np.pi * plan.sub_freq[rows]) ** 2)
        assert dist.var == pytest.approx(1.0 / (curv + 1.0 / PriorConfig().delta_std ** 2), rel=1e-6)
    assert q.phi_dists[0].var == pytest.approx(1.0 / (scale * power * np.sum(plan.band_index == 1)), rel=1e-6)

    # explicit values win
    fixed = init_posterior(model, coarse, plan, obs, PosteriorConfig(phi_init_var=0.25, delta_init_var=1e-20))
    assert fixed.phi_dists[0].var == 0.25
    assert fixed.delta_dists[1].var == 1e-20

    # no signal: the uniform phase prior caps the variance
    silent = synthesize(plan, ChannelTruth(alpha=[0.0], tau=[100 * NS], phi=[0.3, 1.1], delta=[0.0, 0.0],
                                           noise_var=0.01), 0, noiseless=True)
    empty = init_posterior(model, coarse, plan, silent)
    assert empty.phi_dists[0].var == pytest.approx((2 * np.pi) ** 2 / 12)
    assert empty.delta_dists[0].var == pytest.approx(PriorConfig().delta_std ** 2)


def test_init_posterior_variance_floor():
    plan, truth, obs, coarse, model = one_path_setup()
    cfg = PosteriorConfig(delta_init_var=1e-30)
    q = init_posterior(model, coarse, plan, obs, cfg)
    assert q.delta_dists[0].var == cfg.delta_var_floor


def test_posterior_config_validation():
    with pytest.raises(ValueError):
        PosteriorConfig(n_particles=0)
    with pytest.raises(ValueError):
        PosteriorConfig(weight_floor_scale=1.5)
    assert PosteriorConfig(n_particles=10).weight_floor == pytest.approx(1e-5)


def test_sample_theta_frequencies():
    rng = np.random.default_rng(3)
    weights = np.array([0.5, 0.3, 0.2])
    q = HybridPosterior(
        tau_dists=[ParticleDist(np.array([1.0, 2.0, 3.0]) * NS, weights, 1 * NS, 3 * NS, 1e-5)],
        alpha_point=np.array([1.0 + 0j]),
        delta_dists=[GaussianDist(0.2, 0.04, 1e-6)],
        phi_dists=[],
    )
    n = 20000
    draws = [sample_theta(q, rng) for _ in range(n)]
    counts = np.bincount([s.particle_index[0] for s in draws], minlength=3) / n
    assert np.all(np.abs(counts - weights) < 3 * np.sqrt(weights * (1 - weights) / n) + 1e-3)

    deltas = np.array([s.delta[0] for s in draws])
    assert abs(deltas.mean() - 0.2) < 3 * 0.2 / np.sqrt(n)
    assert abs(deltas.var() - 0.04) < 0.04 * 0.05


def test_sample_theta_degenerate_weights():
    rng = np.random.default_rng(0)
    floor = 1e-5
    weights = np.array([1 - 2 * floor, floor, floor])
    q = HybridPosterior(
        tau_dists=[ParticleDist(np.array([1.0, 2.0, 3.0]) * NS, weights, 1 * NS, 3 * NS, floor)],
        alpha_point=np.array([1.0 + 0j]), delta_dists=[GaussianDist(0.0, 1.0, 1e-6)], phi_dists=[])
    picks = [sample_theta(q, rng).particle_index[0] for _ in range(2000)]
    assert sum(p == 0 for p in picks) >= 1990


def test_log_q_terms():
    positions = np.linspace(0, 9, 10) * NS
    tau_dists = [ParticleDist(positions.copy(), np.full(10, 0.1), 0.0, 9 * NS, 1e-5) for _ in range(2)]
    q = HybridPosterior(tau_dists=tau_dists, alpha_point=np.ones(2, dtype=complex),
                        delta_dists=[GaussianDist(0.0, 1.0, 1e-6), GaussianDist(0.0, 1.0, 1e-6)],
                        phi_dists=[GaussianDist(1.0, 1.0, 1e-6, 0.0, 2 * np.pi)])
    s = ThetaSample(tau=positions[[2, 5]], particle_index=np.array([2, 5]), phi_rel=np.array([1.0]),
                    delta=np.array([0.0, 0.0]), alpha=q.alpha_point)
    expected = 2 * np.log(0.1) + 3 * np.log(1 / np.sqrt(2 * np.pi))
    assert log_q(q, s) == pytest.approx(expected, rel=1e-12)

    single = HybridPosterior(
        tau_dists=[ParticleDist(np.array([1.0, 2.0]) * NS, np.array([0.7, 0.3]), 1 * NS, 2 * NS, 1e-5)],
        alpha_point=np.ones(1, dtype=complex), delta_dists=[], phi_dists=[])
    s1 = ThetaSample(tau=np.array([1.0]) * NS, particle_index=np.array([0]), phi_rel=np.array([]),
                     delta=np.array([]), alpha=single.alpha_point)
    assert log_q(single, s1) == pytest.approx(np.log(0.7))


def test_g_value_is_sum_of_terms():
    plan, truth, obs, coarse, model = one_path_setup()
    q = init_posterior(model, coarse, plan, obs)
    s = sample_theta(q, np.random.default_rng(5))
    params = s.as_params()
    expected = log_q(q, s) - log_likelihood(obs, params, plan) - log_prior(model, params)
    assert g_value(q, s, obs, model) == pytest.approx(expected, abs=1e-12 * abs(expected))


def test_g_value_decreases_with_better_fit():
    plan, truth, obs, coarse, model = one_path_setup()
    q = init_posterior(model, coarse, plan, obs)
    ref = absorb_reference(truth, plan)
    base = dict(phi_rel=ref.phi_rel, delta=ref.delta, alpha=q.alpha_point)
    d = q.tau_dists[0]
    near = int(np.argmin(np.abs(d.positions - truth.tau[0])))
    far = 0 if near != 0 else d.n_particles - 1
    s_near = ThetaSample(tau=d.positions[[near]], particle_index=np.array([near]), **base)
    s_far = ThetaSample(tau=d.positions[[far]], particle_index=np.array([far]), **base)
    assert g_value(q, s_near, obs, model) < g_value(q, s_far, obs, model)


def test_g_value_outside_support():
    plan, truth, obs, coarse, model = one_path_setup()
    q = init_posterior(model, coarse, plan, obs)
    s = ThetaSample(tau=np.array([300 * NS]), particle_index=np.array([0]), phi_rel=np.array([0.0]),
                    delta=np.zeros(2), alpha=q.alpha_point)
    assert g_value(q, s, obs, model) == np.inf


def test_extract_estimates():
    q = HybridPosterior(
        tau_dists=[ParticleDist(np.array([1.0, 2.0, 3.0]) * NS, np.array([0.1, 0.7, 0.2]), 1 * NS, 3 * NS, 1e-5)],
        alpha_point=np.array([0.5 + 0.5j]),
        delta_dists=[GaussianDist(0.1 * NS, 1e-20, 1e-24)], phi_dists=[])
    est = extract_estimates(q)
    assert est.tau_map[0] == pytest.approx(2 * NS)
    assert est.tau_mmse[0] == pytest.approx(2.1 * NS)
    assert est.delta_hat[0] == pytest.approx(0.1 * NS)

    tie = HybridPosterior(
        tau_dists=[ParticleDist(np.array([1.0, 2.0, 3.0]) * NS, np.array([0.4, 0.4, 0.2]), 1 * NS, 3 * NS, 1e-5)],
        alpha_point=np.array([1 + 0j]), delta_dists=[], phi_dists=[])
    assert extract_estimates(tie).tau_map[0] == pytest.approx(1 * NS)

    sym = HybridPosterior(
        tau_dists=[ParticleDist(np.linspace(90, 110, 5) * NS, np.full(5, 0.2), 90 * NS, 110 * NS, 1e-5)],
        alpha_point=np.array([1 + 0j]), delta_dists=[], phi_dists=[])
    assert extract_estimates(sym).tau_mmse[0] == pytest.approx(100 * NS)


def test_check_catches_broken_invariants():
    plan, truth, obs, coarse, model = one_path_setup()
    q = init_posterior(model, coarse, plan, obs)
    broken = q.copy()
    broken.tau_dists[0].weights[0] += 0.5
    with pytest.raises(ValueError):
        broken.check()
    broken = q.copy()
    broken.delta_dists[0].var = 0.0
    with pytest.raises(ValueError):
        broken.check()
    broken = q.copy()
    broken.tau_dists[0].positions[0] = 0.0
    with pytest.raises(ValueError):
        broken.check()
    # copies are independent
    q.check()


def test_snapshot_round_trip():
    plan, truth, obs, coarse, model = one_path_setup()
    q = init_posterior(model, coarse, plan, obs)
    restored = posterior_from_dict(json.loads(dump_snapshot(q)))
    np.testing.assert_array_equal(restored.positions, q.positions)
    np.testing.assert_array_equal(restored.alpha_point, q.alpha_point)
    assert restored.phi_dists[0].mean_hi == q.phi_dists[0].mean_hi
    assert posterior_to_dict(restored) == posterior_to_dict(q)


if __name__ == "__main__":
    print("🚀 Running Posterior Tests...\n")

    test_init_posterior_grid_and_gains()
    test_init_posterior_variances_follow_local_curvature()
    print()

    test_sample_theta_frequencies()
    test_log_q_terms()
    test_g_value_is_sum_of_terms()
    test_extract_estimates()
    print()

    print("🎉 All posterior tests passed!")
