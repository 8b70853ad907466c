"""Inversion encoders: the simplified single-map design and the FPN variant.

Both variants map an NCHW stack (3 or 6 channels) to ``(B, k, d)`` and have
zero-initialised final dense layers, so an untrained encoder predicts an
all-zero residual.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ContractError

VARIANTS = ("simple", "fpn")
BACKBONE_WIDTHS = (32, 64, 128, 128)
HEAD_WIDTH = 64


class ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)

    def forward(self, x):
        x = F.leaky_relu(self.conv1(x), 0.2)
        return F.leaky_relu(self.conv2(x), 0.2)


class Backbone(nn.Module):
    """Strided conv stack; returns the feature map after every block."""

    def __init__(self, in_channels, resolution):
        super().__init__()
        # downsample to 4x4, then one stride-1 block at 4x4
        n_down = int(math.log2(resolution)) - 2
        strides = [2] * min(n_down, 3) + [1] * max(0, 4 - min(n_down, 3))
        if n_down > 3:
            strides = [2] * 4
        blocks = []
        ch = in_channels
        for width, stride in zip(BACKBONE_WIDTHS, strides):
            blocks.append(ConvBlock(ch, width, stride))
            ch = width
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats


class Map2Style(nn.Module):
    """``n`` parallel map2style heads sharing one input map.

    Each head is two strided 3x3 convs followed by average pooling into a
    dense layer; the heads are packed into grouped convolutions but share no weights.
    """

    def __init__(self, in_ch, n_heads, d):
        super().__init__()
        self.n_heads = n_heads
        self.d = d
        self.convs = nn.ModuleList([
            nn.Conv2d(in_ch, n_heads * HEAD_WIDTH, 3, stride=2, padding=1),
            nn.Conv2d(n_heads * HEAD_WIDTH, n_heads * HEAD_WIDTH, 3, stride=2, padding=1, groups=n_heads),
        ])
        self.dense_weight = nn.Parameter(torch.zeros(n_heads, HEAD_WIDTH, d))
        self.dense_bias = nn.Parameter(torch.zeros(n_heads, d))

    def forward(self, x):
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        x = x.mean(dim=(2, 3)).view(-1, self.n_heads, HEAD_WIDTH)
        return torch.einsum("bhc,hcd->bhd", x, self.dense_weight) + self.dense_bias


class SimpleEncoder(nn.Module):
    """All k styles from the final (4x4) backbone map."""

    def __init__(self, in_channels, k, d, resolution):
        super().__init__()
        self.backbone = Backbone(in_channels, resolution)
        self.heads = Map2Style(BACKBONE_WIDTHS[-1], k, d)

    def forward(self, x):
        return self.heads(self.backbone(x)[-1])


class FPNEncoder(nn.Module):
    """Coarse heads on the deepest map, medium and fine on progressively shallower merged maps."""

    def __init__(self, in_channels, k, d, resolution, style_groups):
        super().__init__()
        self.backbone = Backbone(in_channels, resolution)
        self.groups = tuple(tuple(g) for g in style_groups)
        top = BACKBONE_WIDTHS[-1]
        self.lateral_mid = nn.Conv2d(BACKBONE_WIDTHS[1], top, 1)
        self.lateral_shallow = nn.Conv2d(BACKBONE_WIDTHS[0], top, 1)
        (c0, c1), (m0, m1), (f0, f1) = self.groups
        self.coarse = Map2Style(top, c1 - c0, d)
        self.medium = Map2Style(top, m1 - m0, d)
        self.fine = Map2Style(top, f1 - f0, d)

    def forward(self, x):
        feats = self.backbone(x)
        deep = feats[-1]
        mid = F.interpolate(deep, size=feats[1].shape[-2:], mode="bilinear",
                            align_corners=False) + self.lateral_mid(feats[1])
        shallow = F.interpolate(mid, size=feats[0].shape[-2:], mode="bilinear",
                                align_corners=False) + self.lateral_shallow(feats[0])
        return torch.cat([self.coarse(deep), self.medium(mid), self.fine(shallow)], dim=1)


def _init_encoder(module, seed):
    gen = torch.Generator().manual_seed(int(seed))
    for name, p in module.named_parameters():
        with torch.no_grad():
            if "dense" in name or name.endswith("bias"):
                p.zero_()
            else:
                fan_in = p[0].numel()
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype)
                        * math.sqrt(2.0 / fan_in))


class EncoderHandle:
    """A trainable encoder bound to a target generator's (k, d, resolution).

    ``absolute`` marks conventional encoders whose output is read as an
    offset from the average latent rather than a residual on the current one.
    """

    def __init__(self, net, variant, in_channels, k, d, resolution, meta):
        self.net = net
        self.variant = variant
        self.in_channels = in_channels
        self.k = k
        self.d = d
        self.resolution = resolution
        self.meta = dict(meta)

    @property
    def dtype(self):
        return next(self.net.parameters()).dtype

    def parameters(self):
        return self.net.parameters()

    def state_arrays(self):
        return {name: p.detach().cpu().numpy() for name, p in self.net.state_dict().items()}

    def checksum(self):
        h = hashlib.sha256()
        for name, arr in sorted(self.state_arrays().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def clone(self):
        import copy

        return EncoderHandle(copy.deepcopy(self.net), self.variant, self.in_channels,
                             self.k, self.d, self.resolution, self.meta)

    def __repr__(self):
        return (f"EncoderHandle(variant={self.variant!r}, in_channels={self.in_channels}, "
                f"k={self.k}, d={self.d})")


def _make_net(variant, in_channels, k, d, resolution, style_groups):
    if variant == "simple":
        return SimpleEncoder(in_channels, k, d, resolution)
    return FPNEncoder(in_channels, k, d, resolution, style_groups)


def build_encoder(variant, in_channels, g, seed, dtype=None):
    """Build a deterministic encoder targeting generator ``g``."""
    if variant not in VARIANTS:
        raise ConfigurationError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if in_channels not in (3, 6):
        raise ConfigurationError(f"in_channels must be 3 or 6, got {in_channels!r}")
    net = _make_net(variant, in_channels, g.k, g.d, g.resolution, g.style_groups)
    net = net.to(dtype or g.dtype)
    _init_encoder(net, seed)
    meta = {
        "variant": variant, "in_channels": in_channels, "k": g.k, "d": g.d,
        "resolution": g.resolution, "seed": int(seed),
        "style_groups": [list(x) for x in g.style_groups],
        "absolute": False,
    }
    return EncoderHandle(net, variant, in_channels, g.k, g.d, g.resolution, meta)


def rebuild_encoder(meta, arrays):
    """Reconstruct an encoder from checkpoint metadata and parameter arrays."""
    net = _make_net(meta["variant"], meta["in_channels"], meta["k"], meta["d"],
                    meta["resolution"], meta["style_groups"])
    state = {name: torch.from_numpy(np.array(arr)) for name, arr in arrays.items()}
    net.load_state_dict(state)
    net = net.to(state[next(iter(state))].dtype)
    return EncoderHandle(net, meta["variant"], meta["in_channels"], meta["k"], meta["d"],
                         meta["resolution"], meta)


def encode_nchw(e, x):
    """Differentiable forward on an NCHW tensor -> (B, k, d)."""
    if x.dim() != 4 or x.shape[1] != e.in_channels:
        raise ContractError(f"encoder expects (B, {e.in_channels}, H, W), got {tuple(x.shape)}")
    if x.shape[2] != e.resolution or x.shape[3] != e.resolution:
        raise ContractError(f"encoder expects {e.resolution}x{e.resolution} input, got {tuple(x.shape[2:])}")
    return e.net(x.to(e.dtype))


def encode(e, images):
    """Encode an NHWC stack (or one HWC image) of ``e.in_channels`` channels.

    numpy in -> numpy out under no_grad; tensors keep the autograd graph.
    """
    is_numpy = isinstance(images, np.ndarray)
    t = torch.as_tensor(images)
    single = t.dim() == 3
    if single:
        t = t.unsqueeze(0)
    if t.dim() != 4:
        raise ContractError(f"expected an NHWC image stack, got shape {tuple(t.shape)}")
    nchw = t.permute(0, 3, 1, 2)
    if is_numpy:
        with torch.no_grad():
            out = encode_nchw(e, nchw)
    else:
        out = encode_nchw(e, nchw)
    if single:
        out = out[0]
    return out.numpy() if is_numpy else out


def concat_input(x, y_hat):
    """Channel-concatenate source and current reconstruction: [x | y_hat] along the last axis."""
    if tuple(x.shape) != tuple(y_hat.shape):
        raise ContractError(f"cannot concatenate images of shapes {tuple(x.shape)} and {tuple(y_hat.shape)}")
    if x.shape[-1] != 3:
        raise ContractError(f"expected 3-channel images, got shape {tuple(x.shape)}")
    if isinstance(x, np.ndarray):
        return np.concatenate([x, np.asarray(y_hat)], axis=-1)
    return torch.cat([x, y_hat], dim=-1)
