"""Datasets: images sampled from a frozen generator (with their latents), or
images read from a directory.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError, IngestionError
from .generator import apply_transform, sample_latent, synthesize

SOURCES = ("frozen_generator", "image_directory")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".npy")


@dataclass
class DatasetSpec:
    source: str = "frozen_generator"
    size: int = 2304
    seed: int = 0
    splits: dict = field(default_factory=lambda: {"train": 2048, "test": 256})
    latent_jitter: float = 0.0
    directory: str | None = None

    def validate(self):
        if self.source not in SOURCES:
            raise ConfigurationError(f"dataset source must be one of {SOURCES}, got {self.source!r}")
        if self.size < 0:
            raise ConfigurationError("dataset size must be non-negative")
        if self.latent_jitter < 0:
            raise ConfigurationError("latent_jitter must be non-negative")
        if any(v < 0 for v in self.splits.values()):
            raise ConfigurationError("split sizes must be non-negative")
        if self.source == "image_directory" and not self.directory:
            raise ConfigurationError("image_directory datasets need a directory")
        return self

    def split_sizes(self, n):
        """Resolve split sizes for n items; fractions (<= 1.0 floats) are scaled, remainder dropped."""
        sizes = {}
        for name, v in self.splits.items():
            sizes[name] = int(round(v * n)) if isinstance(v, float) and v <= 1.0 else int(v)
        if sum(sizes.values()) > n:
            raise ConfigurationError(f"splits {sizes} need more than the {n} available items")
        return sizes

    def to_dict(self):
        return asdict(self)


@dataclass
class Dataset:
    images: np.ndarray                 # (n, H, W, 3) float32 in [-1, 1]
    latents: np.ndarray | None         # (n, k, d) for generated data
    ids: list
    splits: dict                       # name -> index array
    spec: DatasetSpec
    targets: np.ndarray | None = None  # paired targets (e.g. stylized images); defaults to images

    def __len__(self):
        return len(self.images)

    def subset(self, name, limit=None):
        idx = self.splits[name]
        if limit is not None:
            idx = idx[:limit]
        return Dataset(
            self.images[idx],
            None if self.latents is None else self.latents[idx],
            [self.ids[i] for i in idx],
            {"all": np.arange(len(idx))},
            self.spec,
            None if self.targets is None else self.targets[idx],
        )

    def with_targets(self, transform_name):
        """Paired copy whose targets are ``transform(images)``."""
        targets = apply_transform(transform_name, self.images)
        return Dataset(self.images, self.latents, self.ids, self.splits, self.spec, targets)

    def item_hashes(self):
        out = []
        for i in range(len(self)):
            h = hashlib.sha256(np.ascontiguousarray(self.images[i]).tobytes())
            if self.latents is not None:
                h.update(np.ascontiguousarray(self.latents[i]).tobytes())
            out.append(h.hexdigest())
        return out


def make_dataset(g, spec):
    """Build a deterministic dataset; splits are consecutive index ranges in split order."""
    spec.validate()
    if spec.source == "frozen_generator":
        images, latents, ids = _generated(g, spec)
    else:
        images, ids = _from_directory(g, spec)
        latents = None
    n = len(images)
    sizes = spec.split_sizes(n)
    splits, pos = {}, 0
    for name, size in sizes.items():
        splits[name] = np.arange(pos, pos + size)
        pos += size
    return Dataset(images, latents, ids, splits, spec)


def _generated(g, spec, chunk=512):
    if spec.size == 0:
        r = g.resolution
        return (np.zeros((0, r, r, 3), np.float32), np.zeros((0, g.k, g.d), np.float32), [])
    w = sample_latent(g, spec.seed, n=spec.size)
    if spec.latent_jitter > 0:
        gen = torch.Generator().manual_seed(int(spec.seed) + 1)
        noise = torch.randn(w.shape, generator=gen, dtype=torch.float64).to(w.dtype)
        w = w + spec.latent_jitter * noise
    with torch.no_grad():
        imgs = torch.cat([synthesize(g, w[i:i + chunk]) for i in range(0, spec.size, chunk)])
    ids = [f"gen-{spec.seed}-{i:05d}" for i in range(spec.size)]
    return imgs.numpy(), w.numpy(), ids


def _from_directory(g, spec):
    root = Path(spec.directory)
    if not root.is_dir():
        raise IngestionError(f"image directory {root} does not exist")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise IngestionError(f"no images found in {root}")
    if spec.size:
        files = files[:spec.size]
    images = [_load_image(p, g.resolution) for p in files]
    return np.stack(images).astype(np.float32), [p.name for p in files]


def _load_image(path, resolution):
    try:
        if path.suffix.lower() == ".npy":
            arr = np.load(path).astype(np.float32)
            if arr.shape != (resolution, resolution, 3):
                raise IngestionError(f"{path} has shape {arr.shape}, expected ({resolution}, {resolution}, 3)")
            return np.clip(arr, -1.0, 1.0)
        from PIL import Image

        with Image.open(path) as im:
            im = im.convert("RGB").resize((resolution, resolution), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32)
        return arr / 127.5 - 1.0
    except IngestionError:
        raise
    except Exception as exc:  # unreadable or corrupt file
        raise IngestionError(f"could not read {path}: {exc}") from exc
