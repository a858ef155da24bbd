from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hwqueue.model import SystemParams, counterexample_b, mix_from_rates

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SQRT2 = math.sqrt(2.0)
SB_P = (7 - 4 * SQRT2) / 17
SB_MU1 = (3 - SQRT2) / 7
SB_MU2 = SQRT2


def sb_params(n: int = 100, B: float = 0.0, theta: float = 0.2) -> SystemParams:
    d = counterexample_b()
    return SystemParams.build(n, B, d.p, d.mu1, d.mu2, theta)


def valid_rates(rng: np.random.Generator):
    """Random (theta, mu1, mu2, p) with unit mean, mu1 < 1 < mu2 and theta < min rate."""
    while True:
        mu1 = rng.uniform(0.05, 0.98)
        mu2 = rng.uniform(1.02, 20.0)
        p = mix_from_rates(mu1, mu2)
        theta = rng.uniform(0.01, 0.99) * min(mu1, mu2)
        if 0.0 < p < 1.0:
            return theta, mu1, mu2, p


@pytest.fixture
def sb():
    return sb_params()


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(12345)))
