"""
Test file for auto-focusing sample allocation.
"""

import sys
import os
sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

import numpy as np
import pytest

from autofocus_sampler import Allocation, allocate, leader, prune, robust_ceil


def test_robust_ceil():
    assert robust_ceil(0.3 * 20) == 6
    assert robust_ceil(6.2) == 7
    assert robust_ceil(10.0) == 10
    assert robust_ceil(0.0) == 0


def test_allocate_worked_examples():
    print("🚀 Testing allocation arithmetic...")
    alloc = allocate([0.5, 0.3, 0.2], 10)
    assert alloc.n_total == 20
    assert alloc.per_model == [10, 6, 4]

    alloc = allocate([1.0], 10)
    assert alloc.n_total == 10 and alloc.per_model == [10]

    alloc = allocate([0.34, 0.33, 0.33], 10)
    assert alloc.n_total == 30
    assert alloc.per_model == [11, 10, 10]
    print("✅ N_s and B_v follow the ceiling rules")


def test_allocate_rejects_bad_input():
    with pytest.raises(ValueError):
        allocate([0.5, 0.5], 0)
    with pytest.raises(ValueError):
        allocate([0.7, 0.7], 10)
    with pytest.raises(ValueError):
        allocate([], 10)


def test_every_model_keeps_a_sample():
    alloc = allocate([1 - 2e-6, 1e-6, 1e-6], 10)
    assert alloc.per_model[0] >= 10
    assert min(alloc.per_model) >= 1


def test_allocate_tracks_weight_ratio():
    rng = np.random.default_rng(6)
    B = 10
    for _ in range(500):
        zeta = rng.dirichlet(np.ones(4))
        alloc = allocate(zeta, B)
        ratio = B * zeta / zeta.max()
        per_model = np.array(alloc.per_model)
        # B_v sits within one ceiling step of B * zeta_v / zeta_max
        assert np.all(per_model >= np.floor(ratio + 1e-9))
        assert np.all(per_model <= ratio + zeta + 1 + 1e-9)
        assert per_model[leader(zeta)] >= B


def test_prune_dominance():
    zeta = [0.6, 0.25, 0.15]
    alloc = prune(allocate(zeta, 10), zeta, 0.5, 0.5, 10)
    assert alloc.per_model == [10, 1, 1]
    assert alloc.dominance_active
    assert alloc.drawn == 12
    assert alloc.pruned == [1, 2]


def test_prune_uniform_untouched():
    zeta = [1 / 3] * 3
    base = allocate(zeta, 10)
    alloc = prune(base, zeta, 0.5, 0.5, 10)
    assert alloc.per_model == base.per_model
    assert not alloc.dominance_active and alloc.pruned == []


def test_prune_only_weak_model():
    zeta = [0.5, 0.45, 0.05]
    alloc = prune(allocate(zeta, 10), zeta, 0.5, 0.5, 10)
    assert alloc.per_model == [10, 9, 1]
    assert alloc.pruned == [2]
    assert not alloc.dominance_active


def test_prune_disabled():
    zeta = [0.9, 0.05, 0.05]
    base = allocate(zeta, 10)
    for kappa2 in (0.0, np.inf):
        alloc = prune(base, zeta, 0.0, kappa2, 10)
        assert alloc.per_model == base.per_model
        assert not alloc.dominance_active


def test_post_dominance_count():
    for n_models in (2, 3, 5):
        zeta = np.full(n_models, 0.01 / (n_models - 1))
        zeta[0] = 0.99
        alloc = prune(allocate(zeta, 10), zeta, 0.5, 0.5, 10)
        assert alloc.drawn == 10 + (n_models - 1)


def test_leader_ties_and_record():
    assert leader([0.4, 0.4, 0.2]) == 0
    record = Allocation(n_total=20, per_model=[10, 6, 4]).as_record()
    assert record == {"n_total": 20, "per_model": [10, 6, 4], "dominance": False, "pruned": []}
    with pytest.raises(ValueError):
        prune(Allocation(n_total=10, per_model=[10]), [0.5, 0.5], 0.5, 0.5, 10)


if __name__ == "__main__":
    print("🚀 Running Auto-Focus Sampler Tests...\n")

    test_allocate_worked_examples()
    print()

    test_prune_dominance()
    test_prune_only_weak_model()
    test_post_dominance_count()
    print()

    print("🎉 All auto-focus sampler tests passed!")
