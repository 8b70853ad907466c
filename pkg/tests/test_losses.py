import time

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from restyle.errors import ConfigurationError, ContractError
from restyle.generator import sample_latent, synthesize
from restyle.losses import (
    LossBundle, PerceptualNet, SimilarityNet, l2_loss, perceptual_loss, similarity, timed,
)


def _img(seed, res=8, n=None):
    shape = (res, res, 3) if n is None else (n, res, res, 3)
    return np.random.default_rng(seed).uniform(-1, 1, size=shape)


def test_l2_basics():
    x = _img(0)
    assert l2_loss(x, x) == 0.0
    assert l2_loss(np.full((4, 4, 3), -1.0), np.full((4, 4, 3), 1.0)) == 4.0


def test_l2_matches_scalar_loop():
    a, b = _img(1), _img(2)
    total = 0.0
    for i in range(8):
        for j in range(8):
            for c in range(3):
                total += (a[i, j, c] - b[i, j, c]) ** 2
    assert abs(l2_loss(a, b) - total / (8 * 8 * 3)) < 1e-12


def test_l2_per_image():
    a, b = _img(1, n=3), _img(2, n=3)
    per = l2_loss(a, b, reduce=False)
    assert per.shape == (3,)
    assert np.allclose(per, [l2_loss(a[i], b[i]) for i in range(3)], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 4, 3), elements=st.floats(-1, 1)),
       arrays(np.float64, (4, 4, 3), elements=st.floats(-1, 1)))
def test_l2_symmetric_nonnegative(a, b):
    assert l2_loss(a, b) >= 0
    assert l2_loss(a, b) == l2_loss(b, a)


def test_shape_mismatch_raises():
    p, s = PerceptualNet(0), SimilarityNet(1)
    with pytest.raises(ContractError):
        l2_loss(_img(0, 8), _img(0, 4))
    with pytest.raises(ContractError):
        perceptual_loss(p, _img(0, 8), _img(0, 4))
    with pytest.raises(ContractError):
        similarity(s, _img(0, 8), _img(0, 4))


def test_perceptual_identity_and_symmetry():
    p = PerceptualNet(0).double()
    a, b = _img(3, 16), _img(4, 16)
    assert perceptual_loss(p, a, a) == 0.0
    assert abs(perceptual_loss(p, a, b) - perceptual_loss(p, b, a)) <= 1e-12
    assert perceptual_loss(p, a, b) > 0


def test_perceptual_prefers_translation(g):
    # a one-pixel shift keeps structure; equal-L2 noise destroys it
    p = PerceptualNet(0)
    ws = sample_latent(g, 21, n=50)
    with torch.no_grad():
        imgs = synthesize(g, ws).numpy()
    rng = np.random.default_rng(0)
    wins = 0
    for x in imgs:
        shifted = np.roll(x, 1, axis=1)
        noise = rng.normal(size=x.shape).astype(np.float32)
        noise *= np.sqrt(l2_loss(shifted, x) / np.mean(noise ** 2))
        noisy = x + noise
        wins += perceptual_loss(p, shifted, x) < perceptual_loss(p, noisy, x)
    assert wins >= 35


def test_similarity_identity_and_bounds():
    s = SimilarityNet(1)
    a = _img(5, 16).astype(np.float32)
    assert abs(similarity(s, a, a) - 1.0) < 1e-6
    vals = similarity(s, _img(6, 16, n=20).astype(np.float32), _img(7, 16, n=20).astype(np.float32), reduce=False)
    assert np.all(vals >= -1) and np.all(vals <= 1)


def test_similarity_continuity(g):
    s = SimilarityNet(1)
    ws = sample_latent(g, 31, n=32)
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        a = synthesize(g, ws)
        b = synthesize(g, ws + 0.05 * torch.randn(ws.shape, generator=gen))
    near = similarity(s, a.numpy(), b.numpy(), reduce=False).mean()
    rand = similarity(s, a.numpy(), np.roll(a.numpy(), 1, axis=0), reduce=False).mean()
    assert near > rand


def test_embedding_unit_norm():
    s = SimilarityNet(1)
    e = s.embed(torch.from_numpy(_img(8, 16, n=4).astype(np.float32)).permute(0, 3, 1, 2))
    assert torch.allclose(e.norm(dim=1), torch.ones(4), atol=1e-5)


def test_frozen_reproducible():
    a, b = _img(9, 16, n=2).astype(np.float32), _img(10, 16, n=2).astype(np.float32)
    assert LossBundle(seed=3).terms(a, b) == LossBundle(seed=3).terms(a, b)
    assert all(not p.requires_grad for p in LossBundle(seed=3).perceptual.parameters())


def test_weighted_total_is_linear():
    bundle = LossBundle(seed=0, dtype=torch.float64)
    a, b = torch.from_numpy(_img(11, 16, n=2)), torch.from_numpy(_img(12, 16, n=2))
    t = bundle.terms(a, b)
    w = bundle.weights
    expected = w["l2"] * t["l2"] + w["perceptual"] * t["perceptual"] + w["similarity"] * (1 - t["similarity"])
    assert abs(float(bundle.total(a, b)) - float(expected)) < 1e-12


def test_zero_weight_removes_gradient():
    a = torch.from_numpy(_img(13, 16, n=2))
    b = torch.from_numpy(_img(14, 16, n=2))
    full = LossBundle(seed=0, dtype=torch.float64, weights={"l2": 1.0, "perceptual": 0.0, "similarity": 0.0})
    av = a.clone().requires_grad_(True)
    g1, = torch.autograd.grad(full.total(av, b), av)
    g2, = torch.autograd.grad(l2_loss(av, b), av)
    assert torch.equal(g1, g2)


def test_weight_validation():
    with pytest.raises(ConfigurationError):
        LossBundle(weights={"l2": -1.0})
    with pytest.raises(ConfigurationError):
        LossBundle(weights={"l2": 0.0, "perceptual": 0.0})
    with pytest.raises(ConfigurationError):
        LossBundle(weights={"lpips": 1.0})


def test_timed_noop_and_per_item():
    result, dt = timed(lambda: 3)
    assert result == 3 and 0 <= dt < 1e-3
    _, per = timed(time.sleep, 0.02, batch_size=4)
    assert 0.004 <= per < 0.02
