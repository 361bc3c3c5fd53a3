import numpy as np
import pytest
import torch

from multiref.backbone import ModelConfig, init_params
from multiref.taskgen import generate

SMALL = ModelConfig(layers=2, width=32, heads=2)


def randomized(params, seed=0, std=0.05):
    """Copy of ``params`` with every array perturbed, so no path is trivially zero."""
    gen = torch.Generator().manual_seed(seed)
    return type(params)(params.config, {
        k: v + std * torch.randn(v.shape, generator=gen, dtype=torch.float64).to(v.dtype)
        for k, v in params.arrays.items()
    })


@pytest.fixture(scope="session")
def small_params():
    return randomized(init_params(SMALL, 0, torch.float64), seed=1)


@pytest.fixture(scope="session")
def samples():
    return generate(11, 24)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
