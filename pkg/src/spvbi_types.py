"""
Shared data types for the multiband delay estimator.

Band plans, channel ground truth, refined-model parameters, observations,
coarse estimates and candidate models all live here so that the stage modules
can import each other's types without import cycles.

Row layout convention used everywhere: band-major, subcarrier-minor, i.e.
row index = offset(m) + n with offset(m) = N_1 + ... + N_{m-1}.
"""

### TYPES LIVE IN THIS SOLE FILE SO THE STAGE MODULES CAN SHARE THEM WITHOUT IMPORTING EACH OTHER

from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import List, Optional

import numpy as np


TWO_PI = 2.0 * np.pi


class OrderCriterion(Enum):
    """Information criteria for model-order selection."""
    AIC = "AIC"
    MDL = "MDL"
    BIC = "BIC"


class CoarseMode(Enum):
    """How the coarse stage is produced in a trial."""
    ESTIMATED = "estimated"
    ORACLE = "oracle"


@dataclass(frozen=True)
class Band:
    """One OFDM subband: start frequency, subcarrier spacing, subcarrier count."""
    f_c: float
    f_s: float
    n_sub: int

    @property
    def bandwidth(self) -> float:
        return self.f_s * self.n_sub


@dataclass
class BandPlan:
    """Multiband spectrum layout. Band 1 (index 0) is the reference band."""
    bands: List[Band]

    def __post_init__(self):
        if len(self.bands) < 1:
            raise ValueError("BandPlan needs at least one band")
        for i, band in enumerate(self.bands):
            if band.f_s <= 0:
                raise ValueError(f"band {i + 1}: subcarrier spacing must be > 0, got {band.f_s}")
            if band.n_sub < 1:
                raise ValueError(f"band {i + 1}: n_sub must be >= 1, got {band.n_sub}")
        starts = [band.f_c for band in self.bands]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("bands must be sorted by start frequency (ascending)")

    @property
    def n_bands(self) -> int:
        return len(self.bands)

    @property
    def n_all(self) -> int:
        return sum(band.n_sub for band in self.bands)

    @property
    def max_bandwidth(self) -> float:
        return max(band.bandwidth for band in self.bands)

    @cached_property
    def band_index(self) -> np.ndarray:
        """Band index (0-based) of every row."""
        return np.concatenate([np.full(b.n_sub, m) for m, b in enumerate(self.bands)])

    @cached_property
    def sub_freq(self) -> np.ndarray:
        """n * f_s,m for every row."""
        return np.concatenate([np.arange(b.n_sub) * b.f_s for b in self.bands])

    @cached_property
    def rel_freq(self) -> np.ndarray:
        """f'_c,m + n * f_s,m for every row (offset from the reference band start)."""
        f_ref = self.bands[0].f_c
        return np.concatenate([(b.f_c - f_ref) + np.arange(b.n_sub) * b.f_s for b in self.bands])

    @cached_property
    def abs_freq(self) -> np.ndarray:
        """f_c,m + n * f_s,m for every row."""
        return np.concatenate([b.f_c + np.arange(b.n_sub) * b.f_s for b in self.bands])

    def band_slice(self, m: int) -> slice:
        start = sum(b.n_sub for b in self.bands[:m])
        return slice(start, start + self.bands[m].n_sub)

    def with_subcarriers(self, n_sub: int) -> "BandPlan":
        """Same bands and bandwidths, `n_sub` subcarriers each (spacing adjusted)."""
        return BandPlan([Band(b.f_c, b.bandwidth / n_sub, n_sub) for b in self.bands])

    @classmethod
    def default(cls) -> "BandPlan":
        """Two 20 MHz bands at 2.4 / 2.6 GHz, 78.125 kHz spacing."""
        return cls([Band(2.4e9, 78.125e3, 256), Band(2.6e9, 78.125e3, 256)])


@dataclass
class ChannelTruth:
    """Ground truth of the original signal model."""
    alpha: np.ndarray          # complex gain per path
    tau: np.ndarray            # seconds per path, strictly increasing
    phi: np.ndarray            # radians per band, absolute initial phase
    delta: np.ndarray          # seconds per band, timing offset
    noise_var: float

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=complex)
        self.tau = np.asarray(self.tau, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        self.delta = np.asarray(self.delta, dtype=float)

    @property
    def k_paths(self) -> int:
        return len(self.tau)

    def validate(self, plan: BandPlan) -> None:
        if len(self.alpha) != len(self.tau):
            raise ValueError("alpha and tau must have the same length")
        if self.k_paths < 1:
            raise ValueError("ChannelTruth needs at least one path")
        if np.any(np.diff(self.tau) <= 0):
            raise ValueError("tau must be strictly increasing")
        if len(self.phi) != plan.n_bands or len(self.delta) != plan.n_bands:
            raise ValueError(
                f"phi/delta need {plan.n_bands} entries, got {len(self.phi)}/{len(self.delta)}"
            )
        if np.any(self.phi < 0) or np.any(self.phi >= TWO_PI):
            raise ValueError("phi entries must lie in [0, 2*pi)")
        if not np.all(np.isfinite(self.delta)):
            raise ValueError("delta entries must be finite")
        if not self.noise_var > 0:
            raise ValueError("noise_var must be > 0")


@dataclass
class RefinedParams:
    """Parameters of the refined signal model (reference band absorbed)."""
    alpha_ref: np.ndarray      # complex, alpha'_k
    tau: np.ndarray            # seconds
    phi_rel: np.ndarray        # radians, bands 2..M
    delta: np.ndarray          # seconds, bands 1..M

    def __post_init__(self):
        self.alpha_ref = np.asarray(self.alpha_ref, dtype=complex)
        self.tau = np.asarray(self.tau, dtype=float)
        self.phi_rel = np.asarray(self.phi_rel, dtype=float)
        self.delta = np.asarray(self.delta, dtype=float)

    def check_against(self, plan: BandPlan) -> None:
        if len(self.phi_rel) != plan.n_bands - 1:
            raise ValueError(f"phi_rel needs {plan.n_bands - 1} entries, got {len(self.phi_rel)}")
        if len(self.delta) != plan.n_bands:
            raise ValueError(f"delta needs {plan.n_bands} entries, got {len(self.delta)}")
        if len(self.alpha_ref) != len(self.tau):
            raise ValueError("alpha_ref and tau must have the same length")


@dataclass
class Observation:
    """Frequency-domain CSI vector y over all bands."""
    y: np.ndarray
    band_plan: BandPlan
    noise_var: float

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=complex)
        if len(self.y) != self.band_plan.n_all:
            raise ValueError(f"y has {len(self.y)} samples, band plan expects {self.band_plan.n_all}")


@dataclass
class CoarseEstimate:
    """Preliminary estimates that seed the refined stage."""
    k_hat: int
    tau_hat: np.ndarray
    interval_half_width: np.ndarray
    alpha_hat: np.ndarray
    phi_rel_hat: np.ndarray
    delta_hat: np.ndarray
    merged: bool = False                 # fewer separable peaks than requested
    merged_index: Optional[int] = None   # oracle merge: coarse path holding two true delays

    def __post_init__(self):
        self.tau_hat = np.asarray(self.tau_hat, dtype=float)
        self.interval_half_width = np.asarray(self.interval_half_width, dtype=float)
        self.alpha_hat = np.asarray(self.alpha_hat, dtype=complex)
        self.phi_rel_hat = np.asarray(self.phi_rel_hat, dtype=float)
        self.delta_hat = np.asarray(self.delta_hat, dtype=float)
        if len(self.tau_hat) != self.k_hat:
            raise ValueError(f"k_hat={self.k_hat} but {len(self.tau_hat)} delays given")
        if np.any(np.diff(self.tau_hat) < 0):
            raise ValueError("tau_hat must be sorted ascending")
        if np.any(self.interval_half_width <= 0):
            raise ValueError("interval half widths must be > 0")


@dataclass
class CandidateModel:
    """One delay-structure hypothesis."""
    id: int
    tau_seeds: np.ndarray
    interval_half_width: np.ndarray
    split_origin: Optional[int] = None   # coarse path index that was split

    def __post_init__(self):
        self.tau_seeds = np.asarray(self.tau_seeds, dtype=float)
        self.interval_half_width = np.asarray(self.interval_half_width, dtype=float)

    @property
    def k_v(self) -> int:
        return len(self.tau_seeds)

    @property
    def lo(self) -> np.ndarray:
        return self.tau_seeds - self.interval_half_width

    @property
    def hi(self) -> np.ndarray:
        return self.tau_seeds + self.interval_half_width


@dataclass
class ModelEnsemble:
    """Candidate models, their weights zeta, the prior zeta0 and the zeta smoothing state."""
    models: List[CandidateModel]
    zeta: np.ndarray
    zeta0: np.ndarray
    f_zeta: np.ndarray = field(default=None)

    def __post_init__(self):
        self.zeta = np.asarray(self.zeta, dtype=float)
        self.zeta0 = np.asarray(self.zeta0, dtype=float)
        if self.f_zeta is None:
            self.f_zeta = np.zeros(len(self.models))
        if len(self.zeta) != len(self.models) or len(self.zeta0) != len(self.models):
            raise ValueError("zeta/zeta0 length must match the number of models")

    @property
    def n_models(self) -> int:
        return len(self.models)

    def best(self) -> int:
        """Index of the highest weight, lowest index on ties."""
        return int(np.argmax(self.zeta))
