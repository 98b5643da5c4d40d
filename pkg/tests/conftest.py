import numpy as np
import pytest

from safesynth.experiments import benchmark_model
from safesynth.iop import ToeplitzOperator, block_causal_mask, toeplitz_expand
from safesynth.plant import true_impulse_response


def random_causal_gain(rng, N, m=1, p=1, scale=1.0):
    K = rng.normal(0.0, scale, (m * N, p * N))
    return np.where(block_causal_mask(N, m, p), K, 0.0)


def random_strict_toeplitz(rng, N, p=1, m=1, scale=1.0):
    col = rng.normal(0.0, scale, (p * N, m))
    col[:p] = 0.0
    return ToeplitzOperator(col, p=p, m=m)


def scaled_causal_perturbation(rng, N, p, m, norm, target, which="two"):
    """Random strictly causal Toeplitz perturbation with the given induced
    norm equal to target."""
    from safesynth.iop import mat_inf_norm, mat_two_norm
    col = rng.normal(size=(p * N, m))
    col[:p] = 0.0
    dense = toeplitz_expand(col, p, m)
    current = mat_two_norm(dense) if which == "two" else mat_inf_norm(dense)
    return col * (target / current)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def bench():
    return benchmark_model(1.0)


@pytest.fixture(scope="session")
def bench_g12(bench):
    return true_impulse_response(bench, 12)
