"""A small frozen style-based generator.

The generator is randomly initialised and never adversarially trained: its
image manifold is procedural, which gives every sampled image an exact
ground-truth latent. Images are returned NHWC in [-1, 1]; the synthesis
network itself works NCHW.
"""

from __future__ import annotations

import copy
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ContractError

ALLOWED_RESOLUTIONS = (16, 32, 64)
DEFAULT_AVG_SAMPLES = 10_000
TRANSFORMS = ("hue_shift", "invert", "posterize")
# spread of mapped latents; a tight latent cloud keeps plain gradient descent at
# lr 0.05 well conditioned (affines are renormalised, so images do not depend on it)
LATENT_SCALE = 0.15


def default_style_groups(k):
    """Coarse/medium/fine split of ``[0, k)``; ``k=8`` gives (0,2), (2,5), (5,8)."""
    if k < 3:
        raise ConfigurationError(f"need k >= 3 for three style groups, got {k}")
    coarse = max(1, round(k / 4))
    medium = max(1, round(3 * k / 8))
    if coarse + medium >= k:
        coarse, medium = 1, 1
    return ((0, coarse), (coarse, coarse + medium), (coarse + medium, k))


def _layers_per_stage(k, n_stages):
    # earlier stages take the extra layer so that coarse styles stay coarse
    base, extra = divmod(k, n_stages)
    return [base + (1 if i < extra else 0) for i in range(n_stages)]


class MappingNetwork(nn.Module):
    def __init__(self, d, n_hidden=2):
        super().__init__()
        self.layers = nn.ModuleList(nn.Linear(d, d) for _ in range(n_hidden + 1))

    def forward(self, z):
        x = z * torch.rsqrt(z.pow(2).mean(dim=1, keepdim=True) + 1e-8)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.leaky_relu(x, 0.2) * math.sqrt(2.0)
        return x


class ModulatedConv(nn.Module):
    """Conv, fixed spatial pattern, then feature-wise scale and shift from one style vector.

    There is no data-dependent normalisation: per-channel shifts must survive
    to the output, otherwise parts of each style vector would be invisible.
    The spatial pattern gives every channel position-dependent content so that
    shifts and scales are not confined to flat colour changes.
    """

    def __init__(self, in_ch, out_ch, d, size, upsample, style_gain, kernel=3):
        super().__init__()
        self.upsample = upsample
        self.conv = nn.Conv2d(in_ch, out_ch, kernel, padding=kernel // 2, bias=False)
        self.pattern = nn.Parameter(torch.zeros(out_ch, size, size))
        self.affine = nn.Linear(d, 2 * out_ch)
        self.to_rgb = nn.Conv2d(out_ch, 3, 1, bias=False)
        self.style_gain = style_gain
        # static gains fixed at build time keep activations O(1)
        self.register_buffer("act_gain", torch.ones(()))
        self.register_buffer("out_gain", torch.ones(()))

    def pre_activation(self, x):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.conv(x) * self.act_gain + self.pattern

    def forward(self, x, w):
        x = self.pre_activation(x) * self.out_gain
        scale, shift = (self.style_gain * self.affine(w)).chunk(2, dim=1)
        x = x * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        return F.silu(x)


class SynthesisNetwork(nn.Module):
    """Constant 4x4 input, doubling resolution per stage, RGB skip outputs summed across layers."""

    def __init__(self, k, d, resolution, channels):
        super().__init__()
        n_stages = int(math.log2(resolution)) - 1
        per_stage = _layers_per_stage(k, n_stages)
        self.const = nn.Parameter(torch.empty(channels[0], 4, 4))
        layers = []
        in_ch = channels[0]
        idx = 0
        for stage, n_layers in enumerate(per_stage):
            out_ch = channels[min(stage, len(channels) - 1)]
            # pointwise convs at the top stage keep synthesis cheap
            kernel = 1 if stage == n_stages - 1 and n_stages > 1 else 3
            for j in range(n_layers):
                # modulation strength decays with depth (style locality)
                gain = 0.6 / (1.0 + 0.25 * idx)
                layers.append(ModulatedConv(in_ch, out_ch, d, 4 * 2 ** stage,
                                            stage > 0 and j == 0, gain, kernel))
                in_ch = out_ch
                idx += 1
        self.layers = nn.ModuleList(layers)
        self.stage_layout = per_stage
        self.register_buffer("rgb_gain", torch.ones(()))

    def _run(self, ws, calibrate=False):
        x = self.const.unsqueeze(0).expand(ws.shape[0], -1, -1, -1)
        img = None
        for i, layer in enumerate(self.layers):
            if calibrate:
                layer.act_gain.fill_(1.0)
                layer.out_gain.fill_(1.0)
                layer.act_gain.fill_(float(layer.conv(_maybe_up(x, layer)).pow(2).mean().rsqrt()))
                layer.out_gain.fill_(float(layer.pre_activation(x).pow(2).mean().rsqrt()))
            if layer.upsample and img is not None:
                img = F.interpolate(img, scale_factor=2, mode="bilinear", align_corners=False)
            x = layer(x, ws[:, i])
            rgb = layer.to_rgb(x)
            if img is None:
                img = rgb
            else:
                # only the first layer sets the global colour
                img = img + rgb - rgb.mean(dim=(2, 3), keepdim=True)
        return img

    @torch.no_grad()
    def calibrate(self, ws, rgb_std=0.5):
        """Fix the static gains so pre-activations have unit RMS and RGB std ``rgb_std`` on ``ws``."""
        self.rgb_gain.fill_(1.0)
        img = self._run(ws, calibrate=True)
        self.rgb_gain.fill_(rgb_std / float(img.std()))

    def forward(self, ws):
        return torch.tanh(self._run(ws) * self.rgb_gain)


def _maybe_up(x, layer):
    if layer.upsample:
        return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
    return x


def _init_params(mapping, synthesis, d, gen):
    def randn(shape, std):
        return torch.randn(shape, generator=gen, dtype=torch.float64) * std

    with torch.no_grad():
        for layer in mapping.layers:
            layer.weight.copy_(randn(layer.weight.shape, math.sqrt(1.0 / d)))
            layer.bias.zero_()
        mapping.layers[-1].weight.mul_(LATENT_SCALE)
        synthesis.const.copy_(randn(synthesis.const.shape, 1.0))
        for layer in synthesis.layers:
            w = layer.conv.weight
            layer.conv.weight.copy_(randn(w.shape, math.sqrt(2.0 / w[0].numel())))
            layer.pattern.copy_(randn(layer.pattern.shape, 1.0))
            layer.affine.weight.copy_(randn(layer.affine.weight.shape, math.sqrt(1.0 / d)))
            layer.affine.bias.zero_()
            c = layer.to_rgb.weight.shape[1]
            layer.to_rgb.weight.copy_(randn(layer.to_rgb.weight.shape, math.sqrt(1.0 / c)))


def _center_affines(synthesis, w):
    """Re-express every affine relative to the mean mapped latent, in per-coordinate std units.

    A style equal to the mean then leaves features unmodulated.
    """
    mean = w.mean(dim=0)
    std = float(w.std(dim=0).mean())
    with torch.no_grad():
        for layer in synthesis.layers:
            layer.affine.weight.div_(std)
            layer.affine.bias.copy_(-layer.affine.weight @ mean)


class GeneratorHandle:
    """Frozen generator parameters plus the latent bookkeeping around them.

    Handles are never mutated after construction; ``finetune_stylized`` and
    ``to`` return new handles.
    """

    def __init__(self, mapping, synthesis, k, d, resolution, avg_latent, style_groups, meta):
        self.mapping = mapping
        self.synthesis = synthesis
        self.k = k
        self.d = d
        self.resolution = resolution
        self.avg_latent = avg_latent
        self.style_groups = tuple(tuple(g) for g in style_groups)
        self.meta = dict(meta)
        for p in list(mapping.parameters()) + list(synthesis.parameters()):
            p.requires_grad_(False)
        mapping.eval()
        synthesis.eval()

    @property
    def dtype(self):
        return self.synthesis.const.dtype

    @property
    def latent_shape(self):
        return (self.k, self.d)

    def state_arrays(self):
        """Flat name -> numpy mapping of all parameters and the cached average latent."""
        out = {}
        for prefix, mod in (("mapping", self.mapping), ("synthesis", self.synthesis)):
            for name, p in mod.state_dict().items():
                out[f"{prefix}.{name}"] = p.detach().cpu().numpy()
        out["avg_latent"] = self.avg_latent.detach().cpu().numpy()
        return out

    def checksum(self):
        import hashlib

        h = hashlib.sha256()
        for name, arr in sorted(self.state_arrays().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def to(self, dtype):
        """Copy of this handle with parameters cast to ``dtype``."""
        mapping = copy.deepcopy(self.mapping).to(dtype)
        synthesis = copy.deepcopy(self.synthesis).to(dtype)
        return GeneratorHandle(
            mapping, synthesis, self.k, self.d, self.resolution,
            self.avg_latent.to(dtype), self.style_groups, self.meta,
        )

    def __repr__(self):
        return (f"GeneratorHandle(k={self.k}, d={self.d}, resolution={self.resolution}, "
                f"seed={self.meta.get('seed')}, stylized={self.meta.get('transform')})")


def _check_args(k, d, resolution):
    if not isinstance(resolution, int) or resolution not in ALLOWED_RESOLUTIONS:
        raise ConfigurationError(f"resolution must be one of {ALLOWED_RESOLUTIONS}, got {resolution!r}")
    if not isinstance(k, int) or k < 3:
        raise ConfigurationError(f"k must be an integer >= 3, got {k!r}")
    if not isinstance(d, int) or d < 8:
        raise ConfigurationError(f"d must be an integer >= 8, got {d!r}")
    n_stages = int(math.log2(resolution)) - 1
    if k < n_stages:
        raise ConfigurationError(
            f"k={k} style inputs cannot cover {n_stages} synthesis stages at resolution {resolution}")


def _map_samples(mapping, d, n, seed, dtype, chunk=2048):
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(n, d, generator=gen, dtype=torch.float64).to(dtype)
    with torch.no_grad():
        return torch.cat([mapping(z[i:i + chunk]) for i in range(0, n, chunk)])


def compute_avg_latent(mapping, k, d, n_samples, seed, dtype):
    w = _map_samples(mapping, d, n_samples, seed, dtype)
    return w.mean(dim=0).unsqueeze(0).repeat(k, 1)


def build_generator(seed, k=8, d=64, resolution=32, *, channels=(32, 32, 32, 32),
                    avg_samples=DEFAULT_AVG_SAMPLES, style_groups=None, dtype=torch.float32):
    """Build a deterministic, frozen generator.

    ``avg_latent`` is the mean of ``avg_samples`` mapped standard-normal draws
    (seeded from ``seed``), broadcast to all ``k`` rows.
    """
    _check_args(k, d, resolution)
    if avg_samples < 1:
        raise ConfigurationError("avg_samples must be positive")
    groups = tuple(style_groups) if style_groups is not None else default_style_groups(k)
    _check_groups(groups, k)

    gen = torch.Generator().manual_seed(int(seed))
    mapping = MappingNetwork(d).to(torch.float64)
    synthesis = SynthesisNetwork(k, d, resolution, tuple(channels)).to(torch.float64)
    _init_params(mapping, synthesis, d, gen)
    with torch.no_grad():
        w_cal = mapping(torch.randn(1024, d, generator=gen, dtype=torch.float64))
        _center_affines(synthesis, w_cal)
        synthesis.calibrate(w_cal[:256].unsqueeze(1).repeat(1, k, 1))
    mapping = mapping.to(dtype)
    synthesis = synthesis.to(dtype)

    avg_seed = int(seed) + 7919
    avg = compute_avg_latent(mapping, k, d, avg_samples, avg_seed, dtype)
    meta = {
        "seed": int(seed), "k": k, "d": d, "resolution": resolution,
        "channels": list(channels), "avg_samples": int(avg_samples), "avg_seed": avg_seed,
        "style_groups": [list(g) for g in groups], "transform": None, "finetune_steps": 0,
    }
    return GeneratorHandle(mapping, synthesis, k, d, resolution, avg, groups, meta)


def _check_groups(groups, k):
    if len(groups) != 3:
        raise ConfigurationError("style_groups must have exactly three ranges")
    pos = 0
    for lo, hi in groups:
        if lo != pos or hi <= lo:
            raise ConfigurationError(f"style_groups {groups} do not partition [0, {k}) in order")
        pos = hi
    if pos != k:
        raise ConfigurationError(f"style_groups {groups} do not partition [0, {k})")


def as_latent_batch(g, w):
    """Coerce a latent or latent batch to a (B, k, d) tensor of the generator dtype."""
    t = torch.as_tensor(w)
    squeeze = t.dim() == 2
    if squeeze:
        t = t.unsqueeze(0)
    if t.dim() != 3 or tuple(t.shape[1:]) != (g.k, g.d):
        raise ContractError(f"latent shape {tuple(torch.as_tensor(w).shape)} does not match ({g.k}, {g.d})")
    return t.to(g.dtype), squeeze


def synthesize_nchw(g, ws):
    """Differentiable batched synthesis: (B, k, d) tensor -> (B, 3, H, W) tensor."""
    if ws.dim() != 3 or tuple(ws.shape[1:]) != (g.k, g.d):
        raise ContractError(f"latent batch shape {tuple(ws.shape)} does not match (B, {g.k}, {g.d})")
    return g.synthesis(ws)


def synthesize(g, w):
    """Render a latent (k, d) or batch (B, k, d) to NHWC images in [-1, 1].

    Tensors in give tensors out (gradient preserved); numpy in gives numpy out.
    """
    is_numpy = isinstance(w, np.ndarray)
    t, squeeze = as_latent_batch(g, w)
    if is_numpy:
        with torch.no_grad():
            img = synthesize_nchw(g, t)
    else:
        img = synthesize_nchw(g, t)
    img = img.permute(0, 2, 3, 1)
    if squeeze:
        img = img[0]
    return img.numpy() if is_numpy else img


def sample_latent(g, seed, n=None):
    """Draw z ~ N(0, I), map it, and broadcast the W vector to all k rows."""
    count = 1 if n is None else n
    w = _map_samples(g.mapping, g.d, count, int(seed), g.dtype)
    ws = w.unsqueeze(1).repeat(1, g.k, 1)
    return ws[0] if n is None else ws


# -- stylized fine-tuning -----------------------------------------------------

_HUE_ANGLE = 2.0 * math.pi / 3.0


def _hue_matrix(angle):
    c, s = math.cos(angle), math.sin(angle)
    k = 1.0 / 3.0
    sq = math.sqrt(k)
    return torch.tensor([
        [c + (1 - c) * k, k * (1 - c) - sq * s, k * (1 - c) + sq * s],
        [k * (1 - c) + sq * s, c + (1 - c) * k, k * (1 - c) - sq * s],
        [k * (1 - c) - sq * s, k * (1 - c) + sq * s, c + (1 - c) * k],
    ], dtype=torch.float64)


def apply_transform(name, images):
    """Deterministic pixel transform on NHWC (or HWC) images in [-1, 1]."""
    is_numpy = isinstance(images, np.ndarray)
    x = torch.as_tensor(images)
    if name == "hue_shift":
        m = _hue_matrix(_HUE_ANGLE).to(x.dtype)
        out = torch.clamp(x @ m.T, -1.0, 1.0)
    elif name == "invert":
        out = -x
    elif name == "posterize":
        levels = 4
        out = torch.round((x + 1.0) / 2.0 * (levels - 1)) / (levels - 1) * 2.0 - 1.0
    else:
        raise ConfigurationError(f"unknown transform {name!r}; expected one of {TRANSFORMS}")
    return out.numpy() if is_numpy else out


def finetune_stylized(g, transform_name, steps, seed, *, batch_size=32, lr=2e-3):
    """Fit a copy of the synthesis network so that G'(w) ~ transform(G(w)).

    The mapping network and average-latent procedure are shared with ``g``;
    ``avg_latent`` is recomputed with the same seed and sample count.
    """
    if transform_name not in TRANSFORMS:
        raise ConfigurationError(f"unknown transform {transform_name!r}; expected one of {TRANSFORMS}")
    if steps < 0:
        raise ConfigurationError("steps must be non-negative")
    mapping = copy.deepcopy(g.mapping)
    synthesis = copy.deepcopy(g.synthesis)
    if steps > 0:
        for p in synthesis.parameters():
            p.requires_grad_(True)
        synthesis.train()
        opt = torch.optim.Adam(synthesis.parameters(), lr=lr)
        gen = torch.Generator().manual_seed(int(seed))
        for _ in range(steps):
            z = torch.randn(batch_size, g.d, generator=gen, dtype=torch.float64).to(g.dtype)
            with torch.no_grad():
                w = mapping(z).unsqueeze(1).repeat(1, g.k, 1)
                target = apply_transform(transform_name, g.synthesis(w).permute(0, 2, 3, 1))
            out = synthesis(w).permute(0, 2, 3, 1)
            loss = (out - target).pow(2).mean()
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    avg = g.avg_latent.clone()
    meta = dict(g.meta, transform=transform_name, finetune_steps=int(steps), finetune_seed=int(seed))
    return GeneratorHandle(mapping, synthesis, g.k, g.d, g.resolution, avg, g.style_groups, meta)
