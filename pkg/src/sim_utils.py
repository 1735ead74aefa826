"""
Numeric helpers shared by the simulation stages.

Features:
- dB / linear conversion
- Phase wrapping into [0, 2*pi)
- Deterministic, hierarchically keyed random streams
- Empirical CDF points
"""

from typing import List, Tuple

import numpy as np

from spvbi_types import TWO_PI


class SimUtils:
    """Utilities for the multiband simulation and inference stages."""

    NS = 1e-9

    @staticmethod
    def db_to_linear(value_db: float) -> float:
        return 10.0 ** (value_db / 10.0)

    @staticmethod
    def wrap_phase(phase):
        """
        Wrap phases into [0, 2*pi).

        np.mod can return exactly 2*pi for tiny negative inputs, so that
        case is folded back to 0.

        Args:
            phase: scalar or array of radians

        Returns:
            Same shape, every entry in [0, 2*pi)
        """
        wrapped = np.mod(phase, TWO_PI)
        return np.where(wrapped >= TWO_PI, 0.0, wrapped)

    ## Every random draw in the package goes through here
    @staticmethod
    def stream(seed: int, *keys: int) -> np.random.Generator:
        """
        Build an independent generator for a (seed, key, key, ...) address.

        Example:
        - stream(7, trial) for one Monte-Carlo trial
        - stream(7, model, iteration) for one model's samples at one iteration

        Args:
            seed (int): master seed
            *keys (int): non-negative integers addressing the sub-stream

        Returns:
            np.random.Generator
        """
        entropy = [int(seed)] + [int(k) for k in keys]
        if any(k < 0 for k in entropy):
            raise ValueError(f"seed and stream keys must be non-negative, got {entropy}")
        return np.random.default_rng(np.random.SeedSequence(entropy))

    @staticmethod
    def empirical_cdf(errors) -> List[Tuple[float, float]]:
        """
        Empirical CDF of a sample as (value, cumulative probability) points.

        Repeated values collapse into one point carrying the cumulative mass
        up to and including them: [1, 2, 2, 5] -> (1, .25), (2, .75), (5, 1).
        """
        values = np.sort(np.asarray(errors, dtype=float))
        if values.size == 0:
            return []
        unique, counts = np.unique(values, return_counts=True)
        cum = np.cumsum(counts) / values.size
        return [(float(v), float(c)) for v, c in zip(unique, cum)]

    @staticmethod
    def to_ns(seconds):
        return np.asarray(seconds, dtype=float) / SimUtils.NS
