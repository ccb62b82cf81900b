import numpy as np
import pytest
import torch

torch.set_num_threads(4)


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def rand_image():
    gen = torch.Generator().manual_seed(42)

    def make(size=64, channels=3):
        return torch.rand((channels, size, size), generator=gen) * 2.0 - 1.0

    return make
