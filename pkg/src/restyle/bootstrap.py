"""Initialising a stylized-domain inversion from a base-domain inversion, and
a check that two generators sharing a mapping network stay latent-aligned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError, ContractError
from .generator import sample_latent, synthesize
from .schemes import InversionTrace, residual_loop, _as_image_batch

INIT_MODES = ("average", "bootstrapped")


@dataclass
class BootstrapResult:
    base_trace: InversionTrace | None
    styled_trace: InversionTrace
    init_mode: str


def _check_generators(g_base, g_styled):
    if (g_base.k, g_base.d, g_base.resolution) != (g_styled.k, g_styled.d, g_styled.resolution):
        raise ContractError("base and stylized generators differ in (k, d, resolution)")


def bootstrap_invert_batch(e_base, e_styled, g_base, g_styled, xs, n_steps, init_mode,
                           *, base_steps=1, bundle=None):
    """Invert ``xs`` into the stylized generator.

    ``average``: the stylized loop starts from the stylized average latent.
    ``bootstrapped``: ``base_steps`` base-encoder steps against the base generator
    give (w, y); the stylized loop starts at that w with y as its current image.
    Step 0 of the stylized trace records the base reconstruction as ``y_hat``;
    for ``n_steps=0`` the trace additionally holds the base latent re-rendered
    through the stylized generator.
    """
    if init_mode not in INIT_MODES:
        raise ConfigurationError(f"init_mode must be one of {INIT_MODES}, got {init_mode!r}")
    if e_base.in_channels != 6 or e_styled.in_channels != 6:
        raise ContractError("bootstrapping needs two 6-channel encoders")
    if n_steps < 0:
        raise ConfigurationError("n_steps must be non-negative")
    _check_generators(g_base, g_styled)
    if init_mode == "average":
        styled = residual_loop(e_styled, g_styled, xs, n_steps, bundle=bundle, scheme="styled_average")
        if n_steps == 0:
            styled = [_append_rerender(g_styled, xs, tr, bundle) for tr in styled]
        return [BootstrapResult(None, tr, init_mode) for tr in styled]
    base = residual_loop(e_base, g_base, xs, base_steps, bundle=bundle, scheme="base")
    w0 = np.stack([tr.final.w for tr in base])
    y0 = np.stack([tr.final.y_hat for tr in base])
    styled = residual_loop(e_styled, g_styled, xs, n_steps, w0=w0, y0=y0, bundle=bundle,
                           scheme="styled_bootstrapped")
    out = []
    offset = np.array([tr.final.wall_clock_s for tr in base])
    for i, (b_tr, s_tr) in enumerate(zip(base, styled)):
        for s in s_tr.steps:
            s.wall_clock_s += float(offset[i])
        if n_steps == 0:
            s_tr = _append_rerender(g_styled, xs[i:i + 1], s_tr, bundle)
        s_tr.meta.update(init_mode=init_mode, base_steps=base_steps)
        out.append(BootstrapResult(b_tr, s_tr, init_mode))
    return out


def _append_rerender(g, x, trace, bundle):
    # zero-step case: the output is the initial latent rendered through g
    from .schemes import default_metrics

    bundle = bundle or default_metrics()
    w = trace.steps[0].w
    with torch.no_grad():
        y = synthesize(g, torch.as_tensor(w)[None])[0]
    x_t = _as_image_batch(g, x)[0].permute(0, 2, 3, 1)[:1]
    metrics = bundle.evaluate(y[None], x_t)
    rec = type(trace.steps[0])(
        w=w.copy(), delta=np.zeros_like(w), y_hat=y.numpy().copy(),
        losses={k: float(v[0]) for k, v in metrics.items()},
        wall_clock_s=trace.steps[0].wall_clock_s, iteration=0, phase="rerender")
    return InversionTrace(trace.steps + [rec], dict(trace.meta, rerendered=True))


def bootstrap_invert(e_base, e_styled, g_base, g_styled, x, n_steps, init_mode, **kwargs):
    return bootstrap_invert_batch(e_base, e_styled, g_base, g_styled, np.asarray(x)[None],
                                  n_steps, init_mode, **kwargs)[0]


@dataclass
class AlignmentReport:
    paired: np.ndarray
    shuffled: np.ndarray
    paired_mean: float
    shuffled_mean: float
    standard_error: float
    margin_in_se: float
    passed: bool


def _corr(a, b):
    """|Pearson correlation| of the grey-level images, per pair.

    Grey levels and the absolute value make the statistic blind to hue
    rotation and inversion, which change colours but not structure.
    """
    a = a.astype(np.float64).mean(axis=-1).reshape(a.shape[0], -1)
    b = b.astype(np.float64).mean(axis=-1).reshape(b.shape[0], -1)
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=1, keepdims=True)
    den = np.sqrt((a * a).sum(axis=1) * (b * b).sum(axis=1))
    return np.abs((a * b).sum(axis=1) / np.where(den > 0, den, 1.0))


def alignment_probe(g_base, g_styled, n_samples, seed):
    """Structural correlation of G_base(w) with G_styled(w) versus with G_styled(w') for shuffled w'.

    The standard error is that of the per-sample paired-minus-shuffled difference;
    ``passed`` means the paired mean is higher than the shuffled mean.
    """
    _check_generators(g_base, g_styled)
    if n_samples < 1:
        raise ConfigurationError("n_samples must be >= 1")
    w = sample_latent(g_base, seed, n=n_samples)
    with torch.no_grad():
        yb = synthesize(g_base, w).numpy()
        ys = synthesize(g_styled, w).numpy()
    paired = _corr(yb, ys)
    if n_samples > 1:
        # a derangement: every image is compared against a different latent
        perm = np.random.default_rng(seed).permutation(n_samples)
        perm = np.roll(perm, 1)[np.argsort(perm)]
        shuffled = _corr(yb, ys[perm])
    else:
        shuffled = np.zeros(0)
    pm = float(paired.mean())
    sm = float(shuffled.mean()) if shuffled.size else float("nan")
    if shuffled.size > 1:
        diff = paired - shuffled
        se = float(diff.std(ddof=1) / np.sqrt(diff.size))
    else:
        se = float("nan")
    margin = (pm - sm) / se if se and np.isfinite(se) and se > 0 else float("nan")
    return AlignmentReport(paired, shuffled, pm, sm, se, margin, bool(shuffled.size and pm > sm))
