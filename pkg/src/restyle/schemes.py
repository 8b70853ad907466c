"""Inversion regimes: iterative residual encoding, single pass, latent
optimisation, hybrid, and naive re-encoding.

Every regime produces one ``InversionTrace`` per image. Batched entry points
(``*_batch``) share one forward pass across images and report per-image wall
time as batch time divided by batch size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .encoder import encode_nchw
from .errors import ConfigurationError, ContractError, TrainingError
from .generator import synthesize_nchw
from .losses import LossBundle, Stopwatch, check_weights

DEFAULT_INFER_STEPS = 5
MAX_INFER_STEPS = 10
DIVERGENCE_LIMIT = 1e6

_default_bundle = None


def default_metrics():
    """Shared metric networks (seed 0) used when callers do not pass their own."""
    global _default_bundle
    if _default_bundle is None:
        _default_bundle = LossBundle(seed=0)
    return _default_bundle


@dataclass
class StepRecord:
    w: np.ndarray
    delta: np.ndarray | None
    y_hat: np.ndarray
    losses: dict
    wall_clock_s: float
    iteration: int = 0
    phase: str = "encoder"


@dataclass
class InversionTrace:
    steps: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.steps)

    @property
    def final(self):
        return self.steps[-1]

    def latents(self):
        return np.stack([s.w for s in self.steps])

    def images(self):
        return np.stack([s.y_hat for s in self.steps])

    def loss_curve(self, name="l2"):
        return np.array([s.losses[name] for s in self.steps])

    def times(self):
        return np.array([s.wall_clock_s for s in self.steps])

    def check_replay(self):
        """True when every recorded step satisfies w[t+1] == w[t] + delta[t+1] bitwise."""
        for prev, cur in zip(self.steps, self.steps[1:]):
            if cur.delta is None or not np.array_equal(prev.w + cur.delta, cur.w):
                return False
        return True


@dataclass
class TrainConfig:
    n_steps: int = 5
    batch_size: int = 32
    learning_rate: float = 1e-3
    loss_weights: dict = field(default_factory=lambda: {"l2": 1.0, "perceptual": 0.8, "similarity": 0.1})
    total_iterations: int = 1000
    seed: int = 0
    isolate_steps: bool = True
    lr_schedule: str = "constant"   # or "cosine": decay to zero over total_iterations

    def validate(self):
        if self.n_steps < 1:
            raise ConfigurationError("n_steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.total_iterations < 0:
            raise ConfigurationError("total_iterations must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigurationError(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")
        check_weights(self.loss_weights)
        return self


# -- helpers ------------------------------------------------------------------

def _as_image_batch(g, x):
    t = torch.as_tensor(x)
    single = t.dim() == 3
    if single:
        t = t.unsqueeze(0)
    if t.dim() != 4 or tuple(t.shape[1:]) != (g.resolution, g.resolution, 3):
        raise ContractError(
            f"image shape {tuple(torch.as_tensor(x).shape)} does not match generator "
            f"resolution ({g.resolution}, {g.resolution}, 3)")
    return t.to(g.dtype).permute(0, 3, 1, 2).contiguous(), single


def _check_pair(e, g):
    if (e.k, e.d, e.resolution) != (g.k, g.d, g.resolution):
        raise ContractError(f"encoder targets (k={e.k}, d={e.d}, res={e.resolution}) but generator is "
                            f"(k={g.k}, d={g.d}, res={g.resolution})")


def _encoder_input(e, x, y_hat):
    # 3-channel encoders only ever see one image
    if e.in_channels == 3:
        return y_hat if x is None else x
    return torch.cat([x, y_hat], dim=1)


def _records(bundle, x_nchw, ws, deltas, ys, times, iterations, phase):
    """Turn per-step batched tensors into per-image StepRecord lists."""
    b = x_nchw.shape[0]
    xs_nhwc = x_nchw.permute(0, 2, 3, 1)
    per_image = [[] for _ in range(b)]
    for t, (w, delta, y, clock, it) in enumerate(zip(ws, deltas, ys, times, iterations)):
        y_nhwc = y.permute(0, 2, 3, 1)
        metrics = bundle.evaluate(y_nhwc, xs_nhwc)
        w_np = w.detach().cpu().numpy()
        d_np = None if delta is None else delta.detach().cpu().numpy()
        y_np = y_nhwc.detach().cpu().numpy()
        for i in range(b):
            per_image[i].append(StepRecord(
                w=w_np[i].copy(),
                delta=None if d_np is None else d_np[i].copy(),
                y_hat=y_np[i].copy(),
                losses={k: float(v[i]) for k, v in metrics.items()},
                wall_clock_s=float(clock),
                iteration=int(it),
                phase=phase,
            ))
    return per_image


def _init_state(g, b, init=None):
    if init is None:
        w0 = g.avg_latent.unsqueeze(0).expand(b, -1, -1).clone()
    else:
        w0 = torch.as_tensor(init).to(g.dtype)
        if w0.dim() == 2:
            w0 = w0.unsqueeze(0).expand(b, -1, -1).clone()
        if tuple(w0.shape) != (b, g.k, g.d):
            raise ContractError(f"init latent shape {tuple(w0.shape)} does not match ({b}, {g.k}, {g.d})")
    return w0


def residual_loop(e, g, x, n_steps, *, w0=None, y0=None, mode="residual", bundle=None, scheme="restyle"):
    """Run the feedback loop on a batch and return one trace per image.

    ``mode='residual'``: w[t+1] = w[t] + E(x | y[t]).
    ``mode='absolute'``: w[t+1] = avg + E(y[t]) (x at t=0), for 3-channel
    conventional encoders. In both modes the stored delta is chosen so that
    w[t+1] == w[t] + delta bitwise.
    """
    _check_pair(e, g)
    if n_steps < 0:
        raise ConfigurationError("n_steps must be non-negative")
    if mode == "residual" and e.in_channels != 6 and n_steps > 0:
        raise ContractError("residual refinement needs a 6-channel encoder")
    if mode == "absolute" and e.in_channels != 3:
        raise ContractError("naive iteration needs a 3-channel encoder")
    bundle = bundle or default_metrics()
    x_nchw, _ = _as_image_batch(g, x)
    b = x_nchw.shape[0]
    clock = Stopwatch()
    ws, deltas, ys, times = [], [], [], []
    with torch.no_grad():
        with clock.running():
            w = _init_state(g, b, w0)
            y = synthesize_nchw(g, w) if y0 is None else _as_image_batch(g, y0)[0]
        ws.append(w); deltas.append(None); ys.append(y); times.append(clock.elapsed / b)
        avg = g.avg_latent.unsqueeze(0)
        for t in range(n_steps):
            with clock.running():
                if mode == "residual":
                    delta = encode_nchw(e, _encoder_input(e, x_nchw, y))
                else:
                    src = x_nchw if t == 0 else y
                    delta = (avg + encode_nchw(e, src)) - w
                w = w + delta
                y = synthesize_nchw(g, w)
            ws.append(w); deltas.append(delta); ys.append(y); times.append(clock.elapsed / b)
    traces = []
    for recs in _records(bundle, x_nchw, ws, deltas, ys, times, range(len(ws)), "encoder"):
        traces.append(InversionTrace(recs, {
            "scheme": scheme, "n_steps": n_steps, "mode": mode,
            "encoder": dict(e.meta), "batch_size": b,
        }))
    return traces


# -- inference regimes --------------------------------------------------------

def restyle_infer_batch(e, g, xs, n_steps=DEFAULT_INFER_STEPS, bundle=None):
    if e.in_channels != 6:
        raise ContractError("iterative residual inference needs a 6-channel encoder")
    if n_steps < 1:
        raise ConfigurationError("n_steps must be >= 1")
    return residual_loop(e, g, xs, n_steps, bundle=bundle, scheme="restyle")


def restyle_infer(e, g, x, n_steps=DEFAULT_INFER_STEPS, bundle=None):
    """Iteratively refine an inversion of ``x`` starting from the average latent."""
    return restyle_infer_batch(e, g, np.asarray(x)[None], n_steps, bundle)[0]


def single_pass_infer_batch(e, g, xs, bundle=None):
    if e.in_channels == 6:
        return residual_loop(e, g, xs, 1, bundle=bundle, scheme="single_pass")
    return residual_loop(e, g, xs, 1, mode="absolute", bundle=bundle, scheme="single_pass")


def single_pass_infer(e, g, x, bundle=None):
    """One encoder pass; identical to the iterative scheme with one step."""
    return single_pass_infer_batch(e, g, np.asarray(x)[None], bundle)[0]


def naive_iterate_batch(e3, g, xs, n_steps=DEFAULT_INFER_STEPS, bundle=None):
    if e3.in_channels != 3:
        raise ContractError("naive iteration needs a 3-channel conventional encoder")
    traces = residual_loop(e3, g, xs, n_steps, mode="absolute", bundle=bundle, scheme="naive")
    for tr in traces:
        tr.meta["latent_interpretation"] = "absolute = avg_latent + encoder output"
    return traces


def naive_iterate(e3, g, x, n_steps=DEFAULT_INFER_STEPS, bundle=None):
    """Feed each reconstruction back into a conventional encoder as if it were the input."""
    return naive_iterate_batch(e3, g, np.asarray(x)[None], n_steps, bundle)[0]


def optimize_latent_batch(g, xs, init, n_iters, lr=0.05, *, record_every=10, bundle=None,
                          weights=None, time_offset=None, scheme="optimization"):
    """Plain gradient descent on the weighted l2 + perceptual loss over all k rows of w.

    Each image's loss is summed (not averaged) across the batch so that per-image
    updates do not depend on batch size. Records are taken at iteration 0,
    every ``record_every`` iterations and at the last iteration.
    """
    if n_iters < 0:
        raise ConfigurationError("n_iters must be non-negative")
    if record_every < 1:
        raise ConfigurationError("record_every must be >= 1")
    bundle = bundle or default_metrics()
    weights = dict(weights or {"l2": bundle.weights.get("l2", 1.0),
                               "perceptual": bundle.weights.get("perceptual", 0.8)})
    opt_bundle = bundle.with_weights(weights)
    x_nchw, _ = _as_image_batch(g, xs)
    x_nhwc = x_nchw.permute(0, 2, 3, 1)
    b = x_nchw.shape[0]
    w = _init_state(g, b, init).clone()
    offsets = np.zeros(b) if time_offset is None else np.asarray(time_offset, dtype=float)
    clock = Stopwatch()

    ws, deltas, ys, times, iters = [], [], [], [], []

    def record(it, w_rec, delta):
        with torch.no_grad():
            y_rec = synthesize_nchw(g, w_rec)
        ws.append(w_rec.clone()); deltas.append(None if delta is None else delta.clone())
        ys.append(y_rec); times.append(clock.elapsed / b); iters.append(it)

    record(0, w, None)
    last = w.clone()
    for it in range(1, n_iters + 1):
        with clock.running():
            wv = w.detach().requires_grad_(True)
            y = synthesize_nchw(g, wv).permute(0, 2, 3, 1)
            per_image = opt_bundle.total(y, x_nhwc, reduce=False)
            loss = per_image.sum()
            grad, = torch.autograd.grad(loss, wv)
            w = (wv - lr * grad).detach()
        worst = float(per_image.detach().max())
        if not math.isfinite(worst) or worst > DIVERGENCE_LIMIT:
            partial = _finish_traces(bundle, x_nchw, ws, deltas, ys, times, iters, offsets, scheme, lr)
            raise TrainingError(f"latent optimisation diverged at iteration {it} (loss {worst:.3g})",
                                partial=partial)
        if it % record_every == 0 or it == n_iters:
            delta = w - last
            w = last + delta
            record(it, w, delta)
            last = w.clone()
    return _finish_traces(bundle, x_nchw, ws, deltas, ys, times, iters, offsets, scheme, lr)


def _finish_traces(bundle, x_nchw, ws, deltas, ys, times, iters, offsets, scheme, lr):
    traces = []
    recs = _records(bundle, x_nchw, ws, deltas, ys, times, iters, "optimization")
    for i, steps in enumerate(recs):
        for s in steps:
            s.wall_clock_s += float(offsets[i])
        traces.append(InversionTrace(steps, {"scheme": scheme, "lr": lr, "n_iters": iters[-1],
                                             "batch_size": x_nchw.shape[0]}))
    return traces


def optimize_latent(g, x, init=None, n_iters=500, lr=0.05, *, record_every=10, bundle=None, weights=None):
    """Per-image latent optimisation starting from ``init`` (default: average latent)."""
    return optimize_latent_batch(g, np.asarray(x)[None], init, n_iters, lr,
                                 record_every=record_every, bundle=bundle, weights=weights)[0]


def latent_gradient(g, x, w, bundle=None, weights=None):
    """Analytic gradient of the optimisation objective with respect to one latent (k, d)."""
    bundle = bundle or default_metrics()
    weights = dict(weights or {"l2": 1.0, "perceptual": 0.8})
    opt_bundle = bundle.with_weights(weights)
    x_nchw, _ = _as_image_batch(g, x)
    wv = torch.as_tensor(w).to(g.dtype).unsqueeze(0).clone().requires_grad_(True)
    y = synthesize_nchw(g, wv).permute(0, 2, 3, 1)
    loss = opt_bundle.total(y, x_nchw.permute(0, 2, 3, 1), reduce=False).sum()
    grad, = torch.autograd.grad(loss, wv)
    return grad[0]


def objective_value(g, x, w, bundle=None, weights=None):
    bundle = bundle or default_metrics()
    weights = dict(weights or {"l2": 1.0, "perceptual": 0.8})
    x_nchw, _ = _as_image_batch(g, x)
    with torch.no_grad():
        y = synthesize_nchw(g, torch.as_tensor(w).to(g.dtype).unsqueeze(0)).permute(0, 2, 3, 1)
        return float(bundle.with_weights(weights).total(y, x_nchw.permute(0, 2, 3, 1), reduce=False).sum())


def hybrid_infer_batch(e, g, xs, n_opt_iters, *, n_enc_steps=None, lr=0.05, record_every=10, bundle=None):
    """Encoder inversion followed by latent optimisation from the encoder's latent.

    ReStyle encoders (trained with more than one step) run their iterative
    loop; conventional encoders run a single pass.
    """
    if n_enc_steps is None:
        n_enc_steps = DEFAULT_INFER_STEPS if e.meta.get("train_steps", 1) > 1 else 1
    if e.in_channels == 3:
        enc = residual_loop(e, g, xs, 1, mode="absolute", bundle=bundle, scheme="single_pass")
        enc_scheme = "single_pass"
    elif n_enc_steps > 1:
        enc = restyle_infer_batch(e, g, xs, n_enc_steps, bundle)
        enc_scheme = "restyle"
    else:
        enc = single_pass_infer_batch(e, g, xs, bundle)
        enc_scheme = "single_pass"
    if n_opt_iters == 0:
        for tr in enc:
            tr.meta.update(scheme="hybrid", encoder_scheme=enc_scheme, n_opt_iters=0)
        return enc
    init = np.stack([tr.final.w for tr in enc])
    offsets = np.array([tr.final.wall_clock_s for tr in enc])
    opt = optimize_latent_batch(g, xs, init, n_opt_iters, lr, record_every=record_every,
                                bundle=bundle, time_offset=offsets, scheme="hybrid")
    out = []
    for enc_tr, opt_tr in zip(enc, opt):
        # the optimiser's iteration-0 record duplicates the encoder's final step
        steps = list(enc_tr.steps) + list(opt_tr.steps[1:])
        meta = {"scheme": "hybrid", "encoder_scheme": enc_scheme, "n_enc_steps": n_enc_steps,
                "n_opt_iters": n_opt_iters, "lr": lr, "encoder": enc_tr.meta.get("encoder"),
                "opt_start_loss": opt_tr.steps[0].losses}
        out.append(InversionTrace(steps, meta))
    return out


def hybrid_infer(e, g, x, n_opt_iters, **kwargs):
    return hybrid_infer_batch(e, g, np.asarray(x)[None], n_opt_iters, **kwargs)[0]


# -- training -----------------------------------------------------------------

def _dataset_arrays(data):
    images = getattr(data, "images", data)
    targets = getattr(data, "targets", None)
    images = np.asarray(images)
    if targets is None:
        targets = images
    return images, np.asarray(targets)


def restyle_train(e, g, data, cfg, *, bundle=None, target_transform=None, progress=None):
    """Train a copy of ``e`` with the N-step residual scheme; returns (encoder, log).

    Per batch, every step computes the weighted loss against the target, back-
    propagates and updates the encoder once. With ``cfg.isolate_steps`` the
    latent and image passed to the next step are detached; otherwise the step
    losses are summed and a single update is taken per batch.
    3-channel encoders are trained as conventional single-pass encoders whose
    output is an offset from the average latent.
    """
    cfg.validate()
    _check_pair(e, g)
    images, targets = _dataset_arrays(data)
    if images.ndim != 4 or images.shape[1:] != (g.resolution, g.resolution, 3):
        raise ContractError(f"dataset images of shape {images.shape[1:]} do not match the generator")
    if e.in_channels == 3 and cfg.n_steps != 1:
        raise ConfigurationError("3-channel encoders are trained single-pass (n_steps=1)")
    out = e.clone()
    out.meta.update(train_steps=cfg.n_steps, absolute=e.in_channels == 3,
                    trained_iterations=e.meta.get("trained_iterations", 0) + cfg.total_iterations)
    log = []
    if cfg.total_iterations == 0 or len(images) == 0:
        return out, log
    bundle = (bundle or default_metrics()).with_weights(cfg.loss_weights)
    for p in out.net.parameters():
        p.requires_grad_(True)
    out.net.train()
    opt = torch.optim.Adam(out.net.parameters(), lr=cfg.learning_rate)
    sched = None
    if cfg.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.total_iterations)
    rng = np.random.default_rng(cfg.seed)
    n = len(images)
    bs = min(cfg.batch_size, n)
    order = rng.permutation(n)
    cursor = 0
    avg = g.avg_latent.unsqueeze(0)
    with torch.no_grad():
        y_avg = synthesize_nchw(g, avg)
    for it in range(cfg.total_iterations):
        if cursor + bs > n:
            order = rng.permutation(n)
            cursor = 0
        idx = np.sort(order[cursor:cursor + bs])
        cursor += bs
        x = torch.from_numpy(images[idx]).to(g.dtype).permute(0, 3, 1, 2)
        tgt = torch.from_numpy(targets[idx]).to(g.dtype)
        if target_transform is not None:
            tgt = target_transform(tgt)
        w = avg.expand(bs, -1, -1)
        y = y_avg.expand(bs, -1, -1, -1)
        pending = 0.0
        for t in range(cfg.n_steps):
            delta = encode_nchw(out, _encoder_input(out, x, y))
            w = w + delta
            y = synthesize_nchw(g, w)
            loss = bundle.total(y.permute(0, 2, 3, 1), tgt)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at iteration {it}, step {t}")
            log.append({"iteration": it, "step": t, "loss": float(loss.detach())})
            if cfg.isolate_steps:
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                w = w.detach()
                y = y.detach()
            else:
                pending = pending + loss
        if not cfg.isolate_steps:
            opt.zero_grad(set_to_none=True)
            pending.backward()
            opt.step()
        if sched is not None:
            sched.step()
        if progress is not None:
            progress(it, log[-1])
    for p in out.net.parameters():
        p.requires_grad_(False)
    out.net.eval()
    return out, log

