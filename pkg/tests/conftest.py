import numpy as np
import pytest

from ulmfit import autodiff as ad


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def to_scalar(t: ad.Tensor, weights: np.ndarray) -> ad.Tensor:
    """Reduce any tensor to a scalar via a fixed random projection."""
    prod = ad.mul(t, ad.Tensor(np.asarray(weights, dtype=t.data.dtype)))
    flat = ad.reshape(prod, (t.size, 1))
    return ad.mean_over_time(flat)


@pytest.fixture
def scalarize():
    return to_scalar
