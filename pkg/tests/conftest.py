import numpy as np
import pytest
import torch

from restyle.encoder import build_encoder
from restyle.generator import build_generator, sample_latent, synthesize
from restyle.losses import LossBundle

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_g():
    return build_generator(3, k=4, d=8, resolution=16, avg_samples=2000)


@pytest.fixture(scope="session")
def tiny_g64():
    return build_generator(3, k=4, d=8, resolution=16, avg_samples=2000, dtype=torch.float64)


@pytest.fixture(scope="session")
def g():
    return build_generator(1)


@pytest.fixture(scope="session")
def bundle():
    return LossBundle(seed=0)


@pytest.fixture(scope="session")
def tiny_images(tiny_g):
    w = sample_latent(tiny_g, 11, n=8)
    with torch.no_grad():
        return synthesize(tiny_g, w).numpy(), w.numpy()


def randomize_heads(e, seed=0, scale=0.05):
    """Give a zero-initialised encoder non-trivial output for plumbing tests."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in e.net.named_parameters():
            if "dense_weight" in name:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * scale)
    return e


@pytest.fixture
def random_encoder(tiny_g):
    return randomize_heads(build_encoder("simple", 6, tiny_g, 0))


def rand_images(n, res, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, size=(n, res, res, 3)).astype(np.float32)
