import numpy as np
import pytest
import torch

from restyle.errors import ConfigurationError, ContractError
from restyle.generator import (
    apply_transform, build_generator, compute_avg_latent, default_style_groups, finetune_stylized,
    sample_latent, synthesize,
)


def test_shape_contract(g):
    assert g.avg_latent.shape == (8, 64)
    assert g.latent_shape == (8, 64)
    img = synthesize(g, g.avg_latent)
    assert img.shape == (32, 32, 3)
    assert g.style_groups == ((0, 2), (2, 5), (5, 8))


def test_same_seed_bit_identical():
    a = build_generator(7, k=4, d=8, resolution=16, avg_samples=500)
    b = build_generator(7, k=4, d=8, resolution=16, avg_samples=500)
    assert a.checksum() == b.checksum()
    c = build_generator(8, k=4, d=8, resolution=16, avg_samples=500)
    assert a.checksum() != c.checksum()


@pytest.mark.parametrize("kwargs", [
    dict(k=2, d=64, resolution=32),
    dict(k=8, d=4, resolution=32),
    dict(k=8, d=64, resolution=48),
    dict(k=8, d=64, resolution=128),
    dict(k=3, d=64, resolution=64),   # fewer styles than synthesis stages
])
def test_invalid_arguments(kwargs):
    with pytest.raises(ConfigurationError):
        build_generator(0, **kwargs)


def test_default_groups_partition():
    for k in range(3, 20):
        groups = default_style_groups(k)
        assert groups[0][0] == 0 and groups[-1][1] == k
        for (a0, a1), (b0, b1) in zip(groups, groups[1:]):
            assert a1 == b0 and a0 < a1 and b0 < b1


def test_avg_latent_monte_carlo(g):
    # an independent 10 000-sample pass agrees with the cached mean: the difference
    # of two independent means has standard error sigma * sqrt(2 / n) per coordinate
    n = 10_000
    fresh = sample_latent(g, 424242, n=n)[:, 0].double()
    sigma = fresh.std(dim=0)
    se_diff = sigma * np.sqrt(2.0 / n)
    z = (fresh.mean(dim=0) - g.avg_latent[0].double()).abs() / se_diff
    assert float(z.max()) < 4.0
    # and the recorded procedure reproduces the cache exactly
    again = compute_avg_latent(g.mapping, g.k, g.d, g.meta["avg_samples"], g.meta["avg_seed"], g.dtype)
    assert torch.equal(again, g.avg_latent)


def test_average_image_is_init(g):
    y0 = synthesize(g, g.avg_latent.numpy())
    assert np.array_equal(y0, synthesize(g, g.avg_latent.numpy()))


def test_synthesize_pure_and_bounded(g):
    w = sample_latent(g, 3, n=16)
    a = synthesize(g, w.numpy())
    b = synthesize(g, w.numpy())
    assert np.array_equal(a, b)
    assert a.min() >= -1 and a.max() <= 1
    far = synthesize(g, (w * 50).numpy())
    assert np.isfinite(far).all() and far.min() >= -1 and far.max() <= 1


def test_synthesize_contract_error(g):
    with pytest.raises(ContractError):
        synthesize(g, np.zeros((7, 64), np.float32))
    with pytest.raises(ContractError):
        synthesize(g, np.zeros((2, 8, 63), np.float32))


def test_every_style_row_matters(g):
    w = sample_latent(g, 5)
    base = synthesize(g, w.numpy())
    for i in range(g.k):
        w2 = w.clone()
        w2[i] += 1.0
        assert np.abs(synthesize(g, w2.numpy()) - base).max() > 1e-4


def test_gradient_matches_finite_differences(tiny_g64):
    g = tiny_g64
    with torch.no_grad():
        x = synthesize(g, sample_latent(g, 200))
    w = sample_latent(g, 100)

    def loss(v):
        return ((synthesize(g, v) - x) ** 2).mean()

    wv = w.clone().requires_grad_(True)
    analytic, = torch.autograd.grad(loss(wv), wv)
    h = 1e-3
    fd = torch.zeros_like(w)
    with torch.no_grad():
        for idx in np.ndindex(4, 8):
            wp, wm = w.clone(), w.clone()
            wp[idx] += h
            wm[idx] -= h
            fd[idx] = (loss(wp) - loss(wm)) / (2 * h)
    denom = torch.maximum(fd.abs(), 1e-3 * fd.abs().max())
    assert float(((analytic - fd).abs() / denom).max()) < 1e-3


def test_sample_latent_broadcast(g):
    w = sample_latent(g, 1)
    assert w.shape == (8, 64)
    assert all(torch.equal(w[0], w[i]) for i in range(8))
    assert not torch.equal(w, sample_latent(g, 2))
    batch = sample_latent(g, 1, n=3)
    assert torch.allclose(batch[0], w, atol=1e-5)


def test_style_locality(g):
    # equal-norm perturbations of the fine rows change the image less than the coarse rows
    gen = torch.Generator().manual_seed(0)
    w = sample_latent(g, 9, n=32)
    effect = {}
    for name, (lo, hi) in zip(("coarse", "fine"), (g.style_groups[0], g.style_groups[2])):
        total = 0.0
        for i in range(32):
            e = torch.zeros(g.k, g.d)
            n = torch.randn(hi - lo, g.d, generator=gen)
            e[lo:hi] = 2.0 * n / n.norm()
            total += float(((synthesize(g, w[i] + e) - synthesize(g, w[i])) ** 2).mean())
        effect[name] = total / 32
    assert effect["fine"] < effect["coarse"]


def test_frozen_parameters(g):
    assert all(not p.requires_grad for p in g.synthesis.parameters())
    assert all(not p.requires_grad for p in g.mapping.parameters())


def test_transforms():
    x = np.random.default_rng(0).uniform(-1, 1, size=(2, 4, 4, 3)).astype(np.float32)
    assert np.array_equal(apply_transform("invert", x), -x)
    post = apply_transform("posterize", x)
    assert len(np.unique(np.round(post, 5))) <= 4
    hue = apply_transform("hue_shift", x)
    assert hue.shape == x.shape and hue.min() >= -1 and hue.max() <= 1
    gray = np.full((1, 2, 2, 3), 0.3, np.float32)
    assert np.allclose(apply_transform("hue_shift", gray), gray, atol=1e-6)
    with pytest.raises(ConfigurationError):
        apply_transform("sepia", x)


def test_finetune_zero_steps_is_identity(tiny_g):
    g2 = finetune_stylized(tiny_g, "invert", 0, seed=0)
    a, b = tiny_g.state_arrays(), g2.state_arrays()
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    assert g2 is not tiny_g


def test_finetune_leaves_original_untouched_and_improves(tiny_g):
    before = tiny_g.checksum()
    w = sample_latent(tiny_g, 77, n=64)
    with torch.no_grad():
        target = apply_transform("invert", synthesize(tiny_g, w))

    def err(gen):
        with torch.no_grad():
            return float(((synthesize(gen, w) - target) ** 2).mean())

    g2 = finetune_stylized(tiny_g, "invert", 150, seed=1)
    assert tiny_g.checksum() == before
    assert err(g2) < err(finetune_stylized(tiny_g, "invert", 0, seed=1))
    assert torch.equal(g2.avg_latent, tiny_g.avg_latent)
    assert g2.meta["transform"] == "invert"


def test_finetune_same_latent_alignment(tiny_g):
    g2 = finetune_stylized(tiny_g, "hue_shift", 150, seed=1)
    w = sample_latent(tiny_g, 99, n=64)
    with torch.no_grad():
        a = synthesize(tiny_g, w).reshape(64, -1).double().numpy()
        b = synthesize(g2, w).reshape(64, -1).double().numpy()

    def corr(u, v):
        u = u - u.mean(1, keepdims=True)
        v = v - v.mean(1, keepdims=True)
        return (u * v).sum(1) / np.sqrt((u * u).sum(1) * (v * v).sum(1))

    assert corr(a, b).mean() > corr(a, np.roll(b, 1, axis=0)).mean()


def test_finetune_unknown_transform(tiny_g):
    with pytest.raises(ConfigurationError):
        finetune_stylized(tiny_g, "cartoon", 1, seed=0)
