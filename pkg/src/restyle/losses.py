"""Loss terms and evaluation metrics, plus wall-clock timing.

The perceptual and similarity networks are fixed random convolutional
feature extractors. They stand in for LPIPS and a face-recognition
embedding; their absolute values are only meaningful relative to each other.
All image arguments are NHWC (or HWC) in [-1, 1]; tensors keep gradients.
"""

from __future__ import annotations

import math
import time
from contextlib import contextmanager

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ContractError

DEFAULT_WEIGHTS = {"l2": 1.0, "perceptual": 0.8, "similarity": 0.1}
LOSS_NAMES = ("l2", "perceptual", "similarity")


def _pair(a, b):
    ta, tb = torch.as_tensor(a), torch.as_tensor(b)
    if ta.shape != tb.shape:
        raise ContractError(f"image shapes differ: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    if ta.shape[-1] != 3:
        raise ContractError(f"expected 3 channels last, got shape {tuple(ta.shape)}")
    return ta, tb, isinstance(a, np.ndarray) and isinstance(b, np.ndarray)


def _nchw(t):
    if t.dim() == 3:
        t = t.unsqueeze(0)
    return t.permute(0, 3, 1, 2)


def _out(v, to_float, batched):
    if to_float:
        v = v.detach()
        return v.numpy() if batched else float(v)
    return v


def l2_loss(a, b, reduce=True):
    """Mean squared pixel difference. ``reduce=False`` keeps the batch axis."""
    ta, tb, np_in = _pair(a, b)
    diff = (ta - tb).pow(2)
    if diff.dim() == 4 and not reduce:
        return _out(diff.mean(dim=(1, 2, 3)), np_in, True)
    return _out(diff.mean(), np_in, False)


class _FrozenNet(nn.Module):
    def __init__(self, seed):
        super().__init__()
        self.seed = int(seed)

    def _freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()


def _random_init(module, seed):
    gen = torch.Generator().manual_seed(int(seed))
    for name, p in module.named_parameters():
        with torch.no_grad():
            if name.endswith("bias"):
                p.copy_(0.1 * torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype))
            else:
                fan_in = p[0].numel()
                p.copy_((torch.randn(p.shape, generator=gen, dtype=torch.float64)
                         * math.sqrt(2.0 / fan_in)).to(p.dtype))


class PerceptualNet(_FrozenNet):
    """Three fixed random conv layers, each followed by a smooth magnitude and average pooling.

    Taking the magnitude before pooling keeps the energy of unstructured noise
    in the features while a small shift only moves them, so the distance is
    more tolerant of translation than of noise at equal pixel error.
    sqrt(x^2 + 1) is used instead of |x| or a rectifier because it has no kink,
    which keeps finite-difference gradient checks accurate at h=1e-3.
    """

    widths = (16, 32, 32)

    def __init__(self, seed=0):
        super().__init__(seed)
        chans = (3,) + self.widths
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 5, padding=2)
            for i in range(3)
        )
        _random_init(self, seed)
        self._freeze()

    def features(self, x):
        feats = []
        h = x
        for conv in self.convs:
            h = F.avg_pool2d(torch.sqrt(conv(h).pow(2) + 1.0), 2)
            feats.append(h * torch.rsqrt(h.pow(2).sum(dim=1, keepdim=True) + 1e-6))
        return feats


def perceptual_loss(p, a, b, reduce=True):
    """Mean squared distance between unit-normalised feature maps, averaged over layers."""
    ta, tb, np_in = _pair(a, b)
    batched = ta.dim() == 4
    x = _nchw(ta).to(p.convs[0].weight.dtype)
    y = _nchw(tb).to(p.convs[0].weight.dtype)
    # separate passes: a constant target costs no backward work, and the
    # squared difference is symmetric bitwise either way
    fa, fb = p.features(x), p.features(y)
    per_image = 0
    for u, v in zip(fa, fb):
        per_image = per_image + (u - v).pow(2).sum(dim=1).mean(dim=(1, 2))
    per_image = per_image / len(fa)
    if batched and not reduce:
        return _out(per_image, np_in, True)
    return _out(per_image.mean() if batched else per_image[0], np_in, False)


class SimilarityNet(_FrozenNet):
    """Fixed random embedding into unit-norm 32-vectors."""

    dim = 32

    def __init__(self, seed=0):
        super().__init__(seed)
        self.convs = nn.ModuleList([
            nn.Conv2d(3, 16, 3, stride=2, padding=1),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
        ])
        self.head = nn.Linear(64 * 2, self.dim)
        _random_init(self, seed)
        self._freeze()

    def embed(self, x):
        h = x
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
        # mean and spread pooling so the embedding sees more than average colour
        pooled = torch.cat([h.mean(dim=(2, 3)), h.std(dim=(2, 3))], dim=1)
        pooled = pooled - pooled.mean(dim=1, keepdim=True)
        e = self.head(pooled)
        return e / e.norm(dim=1, keepdim=True).clamp_min(1e-12)


def similarity(s, a, b, reduce=True):
    """Inner product of unit embeddings, in [-1, 1]."""
    ta, tb, np_in = _pair(a, b)
    batched = ta.dim() == 4
    x = _nchw(ta).to(s.head.weight.dtype)
    y = _nchw(tb).to(s.head.weight.dtype)
    e = s.embed(torch.cat([x, y]))
    n = x.shape[0]
    per_image = (e[:n] * e[n:]).sum(dim=1).clamp(-1.0, 1.0)
    if batched and not reduce:
        return _out(per_image, np_in, True)
    return _out(per_image.mean() if batched else per_image[0], np_in, False)


class LossBundle:
    """The frozen metric networks plus the training loss weights."""

    def __init__(self, seed=0, weights=None, dtype=torch.float32):
        self.weights = dict(DEFAULT_WEIGHTS if weights is None else weights)
        check_weights(self.weights)
        self.seed = int(seed)
        self.perceptual = PerceptualNet(seed).to(dtype)
        self.similarity = SimilarityNet(seed + 1).to(dtype)

    def with_weights(self, weights):
        clone = object.__new__(LossBundle)
        clone.weights = dict(weights)
        check_weights(clone.weights)
        clone.seed = self.seed
        clone.perceptual = self.perceptual
        clone.similarity = self.similarity
        return clone

    def terms(self, y_hat, x, reduce=True):
        """All three metrics (similarity as a similarity, not a loss)."""
        return {
            "l2": l2_loss(y_hat, x, reduce=reduce),
            "perceptual": perceptual_loss(self.perceptual, y_hat, x, reduce=reduce),
            "similarity": similarity(self.similarity, y_hat, x, reduce=reduce),
        }

    def total(self, y_hat, x, reduce=True):
        """Weighted training loss: sum of weight * term, similarity entering as 1 - sim.

        Zero-weighted terms are skipped so they contribute no gradient.
        """
        total = 0.0
        w = self.weights
        if w.get("l2", 0) > 0:
            total = total + w["l2"] * l2_loss(y_hat, x, reduce=reduce)
        if w.get("perceptual", 0) > 0:
            total = total + w["perceptual"] * perceptual_loss(self.perceptual, y_hat, x, reduce=reduce)
        if w.get("similarity", 0) > 0:
            total = total + w["similarity"] * (1.0 - similarity(self.similarity, y_hat, x, reduce=reduce))
        return total

    def evaluate(self, y_hat, x):
        """Per-image float metrics for a batch, as a dict of numpy arrays."""
        with torch.no_grad():
            t = self.terms(torch.as_tensor(y_hat), torch.as_tensor(x), reduce=False)
        return {k: v.detach().cpu().numpy().astype(np.float64) for k, v in t.items()}


def check_weights(weights):
    unknown = set(weights) - set(LOSS_NAMES)
    if unknown:
        raise ConfigurationError(f"unknown loss weights {sorted(unknown)}")
    if any(v < 0 for v in weights.values()):
        raise ConfigurationError("loss weights must be non-negative")
    if not any(v > 0 for v in weights.values()):
        raise ConfigurationError("at least one loss weight must be positive")


class Stopwatch:
    """Accumulates monotonic wall time over explicitly timed sections only."""

    def __init__(self):
        self.elapsed = 0.0

    @contextmanager
    def running(self):
        start = time.perf_counter()
        try:
            yield self
        finally:
            self.elapsed += time.perf_counter() - start


def timed(op, *args, batch_size=1, **kwargs):
    """Run ``op`` and return ``(result, seconds)``; seconds are per item for batched calls."""
    start = time.perf_counter()
    result = op(*args, **kwargs)
    elapsed = time.perf_counter() - start
    return result, elapsed / batch_size
