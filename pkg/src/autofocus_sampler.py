"""
Auto-focusing sample allocation.

Per iteration the budget is N_s = ceil(B / zeta_max) samples, split as
B_v = ceil(zeta_v * N_s). Models far below the leader are cut to a single
sample, and a clearly dominant leader takes B samples while every other model
keeps one.
"""

import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np

logger = logging.getLogger(__name__)

CEIL_TOL = 1e-9


def robust_ceil(x: float) -> int:
    """Ceiling that ignores float noise just above an integer (0.3 * 20 = 6.000000000000001)."""
    return int(np.ceil(x - CEIL_TOL * max(1.0, abs(x))))


@dataclass
class Allocation:
    n_total: int
    per_model: List[int]
    dominance_active: bool = False
    pruned: List[int] = field(default_factory=list)

    @property
    def drawn(self) -> int:
        """Samples actually drawn this iteration."""
        return int(sum(self.per_model))

    def as_record(self) -> dict:
        return {"n_total": self.n_total, "per_model": list(self.per_model),
                "dominance": self.dominance_active, "pruned": list(self.pruned)}


def leader(zeta) -> int:
    """Index of zeta_max, lowest index on ties."""
    return int(np.argmax(np.asarray(zeta, dtype=float)))


def allocate(zeta, B: int) -> Allocation:
    """
    Proportional allocation N_s = ceil(B / zeta_max), B_v = max(1, ceil(zeta_v N_s)).

    Args:
        zeta: model weights on the simplex
        B (int): samples for the leading model

    Returns:
        Allocation
    """
    zeta = np.asarray(zeta, dtype=float)
    if B < 1:
        raise ValueError(f"B must be >= 1, got {B}")
    if zeta.size == 0 or np.any(zeta < 0) or abs(zeta.sum() - 1.0) > 1e-6:
        raise ValueError("zeta must be a non-empty probability vector")
    n_total = robust_ceil(B / zeta.max())
    per_model = [max(1, robust_ceil(z * n_total)) for z in zeta]
    return Allocation(n_total=n_total, per_model=per_model)


def prune(alloc: Allocation, zeta, kappa1: float, kappa2: float, B: int) -> Allocation:
    """
    Apply the pruning and dominance rules.

    - zeta_v < kappa1 * zeta_max            -> B_v = 1
    - kappa2 * zeta_max > second-highest zeta -> leader gets B, all others 1

    kappa1 = 0 disables pruning; kappa2 <= 0 or kappa2 = inf disables dominance.
    """
    zeta = np.asarray(zeta, dtype=float)
    if len(alloc.per_model) != zeta.size:
        raise ValueError("allocation and zeta differ in length")
    top = leader(zeta)
    z_max = zeta[top]
    per_model = list(alloc.per_model)

    pruned = [v for v in range(zeta.size) if v != top and zeta[v] < kappa1 * z_max]
    for v in pruned:
        per_model[v] = 1

    dominance = False
    if zeta.size > 1 and 0 < kappa2 < np.inf:
        second = np.max(np.delete(zeta, top))
        if kappa2 * z_max > second:
            dominance = True
            per_model = [1] * zeta.size
            per_model[top] = B
            pruned = [v for v in range(zeta.size) if v != top]

    logger.debug("allocation N_s=%d B_v=%s dominance=%s", alloc.n_total, per_model, dominance)
    return Allocation(n_total=alloc.n_total, per_model=per_model, dominance_active=dominance, pruned=pruned)
