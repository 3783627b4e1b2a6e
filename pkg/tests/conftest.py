import numpy as np
import pytest

from faenet.tensor import parameters_of


def perturb(params, seed=0):
    """Give batch-norm affines and biases non-trivial values so oracles see them."""
    rng = np.random.default_rng(seed)
    for name, t in parameters_of(params):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            t.data = rng.uniform(0.5, 1.5, t.shape)
        elif leaf in ("beta", "bias", "fc_bias", "fc1_bias", "fc2_bias"):
            t.data = rng.standard_normal(t.shape) * 0.1
    return params


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
