"""Shared fixtures for the test suite."""

import numpy as np
import pytest

from ocm import OcmModel


@pytest.fixture
def make_random_ocm():
    """Factory for small dense instances with costly observation.

    Per-action kernels are squared uniforms renormalized row-wise (so
    they are strictly positive and well away from permutation matrices),
    rewards are uniform on [-1, 1], discounts on [0.80, gamma_max].
    """

    def make(rng, *, zero_cost=False, gamma_max=0.95, n_max=30,
             L_max=6, d_max=3):
        L = int(rng.integers(2, L_max + 1))
        d = int(rng.integers(2, d_max + 1))
        P = rng.random((d, L, L)) ** 2
        P /= P.sum(axis=2, keepdims=True)
        r = rng.uniform(-1.0, 1.0, (L, d))
        gamma = float(rng.uniform(0.80, gamma_max))
        N = int(rng.integers(5, n_max + 1))
        c = 0.0 if zero_cost else float(rng.uniform(0.05, 0.5))
        return OcmModel(transition=P, reward=r, c_obs=c, gamma=gamma,
                        switching_cost=np.zeros((d, d)), horizon=N)

    return make
