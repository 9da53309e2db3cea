"""Hop sampling: draw the number of propagation steps per optimization step."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DISTRIBUTIONS = ("uniform_1_to_K", "uniform_0_to_K", "fixed")


@dataclass(frozen=True)
class HopSamplingConfig:
    enabled: bool = False
    K_max: int = 4
    distribution: str = "uniform_1_to_K"

    def __post_init__(self):
        if self.K_max < 1:
            raise ValueError("K_max must be >= 1")
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"distribution must be one of {DISTRIBUTIONS}, got {self.distribution!r}")

    def support(self) -> range:
        if not self.enabled or self.distribution == "fixed":
            return range(self.K_max, self.K_max + 1)
        lo = 0 if self.distribution == "uniform_0_to_K" else 1
        return range(lo, self.K_max + 1)


def sample_hops(cfg: HopSamplingConfig, rng: np.random.Generator) -> int:
    # degenerate configs must not consume randomness, so they match the baseline stream exactly
    support = cfg.support()
    if len(support) == 1:
        return support[0]
    return int(rng.integers(support.start, support.stop))


def effective_hops_for_eval(cfg: HopSamplingConfig) -> int:
    return cfg.K_max
