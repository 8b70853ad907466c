"""Diagnostics over inversion traces: per-step image change maps, per-style
latent change, and quality/time curves.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError

DIFF_MODES = ("per_step", "global")
GROUP_NAMES = ("coarse", "medium", "fine")


@dataclass
class StepDiffMap:
    transition: int          # t, for the change t-1 -> t
    values: np.ndarray       # (H, W), normalised
    raw: np.ndarray          # (H, W), before normalisation
    mode: str

    @property
    def mean(self):
        return float(self.values.mean())

    @property
    def max(self):
        return float(self.values.max())


def _stack_images(traces):
    if not traces:
        raise ContractError("no traces given")
    lengths = {len(t.steps) for t in traces}
    if len(lengths) != 1:
        raise ContractError(f"traces have mixed lengths {sorted(lengths)}")
    shapes = {t.steps[0].y_hat.shape for t in traces}
    if len(shapes) != 1:
        raise ContractError(f"traces have mixed image shapes {sorted(shapes)}")
    return np.stack([t.images() for t in traces]).astype(np.float64)  # (n, T, H, W, C)


def image_diff_maps(traces, mode="global"):
    """One (H, W) map per transition: sqrt of the trace-mean of channel-summed squared change.

    ``per_step`` scales each map to max 1; ``global`` divides every map by the
    largest value over all transitions. All-zero maps stay zero.
    """
    if mode not in DIFF_MODES:
        raise ConfigurationError(f"mode must be one of {DIFF_MODES}, got {mode!r}")
    ys = _stack_images(traces)
    sq = ((ys[:, 1:] - ys[:, :-1]) ** 2).sum(axis=-1)   # (n, T-1, H, W)
    raw = np.sqrt(sq.mean(axis=0))
    if mode == "per_step":
        peaks = raw.reshape(raw.shape[0], -1).max(axis=1)
        scale = np.where(peaks > 0, peaks, 1.0)[:, None, None]
        norm = raw / scale
    else:
        peak = raw.max() if raw.size else 0.0
        norm = raw / peak if peak > 0 else raw.copy()
    return [StepDiffMap(t + 1, norm[t], raw[t], mode) for t in range(raw.shape[0])]


@dataclass
class LatentChangeTable:
    v: np.ndarray                # (k, T): v[l, t-1] for steps t = 1..T
    groups: tuple
    group_means: dict            # name -> (T,) array

    @property
    def n_steps(self):
        return self.v.shape[1]

    def rows(self):
        """(style_index, group, step, v) tuples in index-then-step order."""
        out = []
        for l in range(self.v.shape[0]):
            group = _group_of(l, self.groups)
            for t in range(self.v.shape[1]):
                out.append((l, group, t + 1, float(self.v[l, t])))
        return out


def _group_of(l, groups):
    for name, (lo, hi) in zip(GROUP_NAMES, groups):
        if lo <= l < hi:
            return name
    raise ContractError(f"style index {l} is outside the style groups {groups}")


def latent_change_table(traces, g):
    """Per style input l and step t: v = || mean_i (w_i[l,t] - w_i[l,t-1])^2 ||_2.

    The mean over traces is taken per coordinate first, giving a d-vector whose
    Euclidean norm is v.
    """
    if not traces:
        raise ContractError("no traces given")
    lengths = {len(t.steps) for t in traces}
    if len(lengths) != 1:
        raise ContractError(f"traces have mixed lengths {sorted(lengths)}")
    ws = np.stack([t.latents() for t in traces]).astype(np.float64)  # (n, T+1, k, d)
    if ws.shape[2:] != (g.k, g.d):
        raise ContractError(f"trace latents of shape {ws.shape[2:]} do not target generator ({g.k}, {g.d})")
    d = ((ws[:, 1:] - ws[:, :-1]) ** 2).mean(axis=0)   # (T, k, d)
    v = np.linalg.norm(d, axis=2).T                    # (k, T)
    means = {name: v[lo:hi].mean(axis=0) for name, (lo, hi) in zip(GROUP_NAMES, g.style_groups) if hi > lo}
    return LatentChangeTable(v, tuple(g.style_groups), means)


# -- quality / time ------------------------------------------------------------

ENCODER_SCHEMES = ("restyle", "single_pass", "naive")


@dataclass
class Curve:
    scheme: str
    metric: str
    times: np.ndarray
    values: np.ndarray
    labels: list             # step count or iteration per point
    points_only: bool        # encoder schemes are drawn as markers, not lines


@dataclass
class CurveSet:
    curves: dict             # scheme -> Curve
    empty: bool = False

    def __getitem__(self, scheme):
        return self.curves[scheme]

    def __contains__(self, scheme):
        return scheme in self.curves


def quality_time_curves(records, metric="l2"):
    """Average per-image records into one (time, metric) polyline per scheme.

    ``records`` are dicts with ``scheme``, ``step``, ``cum_time_s`` and the metric.
    Points are grouped by (scheme, step), averaged over images, and sorted by time;
    points that would not strictly increase time are merged into their predecessor.
    """
    records = list(records)
    if not records:
        return CurveSet({}, empty=True)
    buckets = {}
    for r in records:
        if metric not in r:
            raise ContractError(f"record lacks metric {metric!r}: {sorted(r)}")
        key = (r["scheme"], int(r["step"]))
        buckets.setdefault(key, []).append((float(r["cum_time_s"]), float(r[metric])))
    curves = {}
    for scheme in sorted({k[0] for k in buckets}):
        pts = []
        for (s, step), vals in sorted(buckets.items()):
            if s != scheme:
                continue
            arr = np.array(vals)
            pts.append((arr[:, 0].mean(), arr[:, 1].mean(), step))
        pts.sort(key=lambda p: (p[0], p[2]))
        times, values, labels = [], [], []
        for t, v, step in pts:
            if times and t <= times[-1]:
                values[-1] = v
                labels[-1] = step
                continue
            times.append(t)
            values.append(v)
            labels.append(step)
        curves[scheme] = Curve(scheme, metric, np.array(times), np.array(values), labels,
                               scheme in ENCODER_SCHEMES)
    return CurveSet(curves)


def first_crossing_time(curve, threshold):
    """Earliest time at which ``curve`` reaches a value strictly below ``threshold`` (None if never)."""
    below = np.nonzero(curve.values < threshold)[0]
    return float(curve.times[below[0]]) if below.size else None


def curves_csv(curve_set):
    """CSV text with columns scheme, time_s, metric_name, value (no header comment)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["scheme", "time_s", "metric_name", "value"])
    if curve_set.empty:
        writer.writerow(["<empty>", "", "", ""])
    for scheme in sorted(curve_set.curves):
        c = curve_set.curves[scheme]
        for t, v in zip(c.times, c.values):
            writer.writerow([scheme, repr(float(t)), c.metric, repr(float(v))])
    return buf.getvalue()


def plot_curves(curve_set, path, title=None):
    """Log-log quality/time plot; encoder schemes as star markers, iterative schemes as lines."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4.5))
    if curve_set.empty:
        ax.text(0.5, 0.5, "no records", ha="center", va="center", transform=ax.transAxes)
    for scheme in sorted(curve_set.curves):
        c = curve_set.curves[scheme]
        if c.points_only:
            ax.plot(c.times, c.values, "*", markersize=10, label=scheme)
        else:
            ax.plot(c.times, c.values, "-", label=scheme)
    if not curve_set.empty:
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.legend()
    ax.set_xlabel("time per image (s)")
    ax.set_ylabel(next(iter(curve_set.curves.values())).metric if curve_set.curves else "metric")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def save_heatmaps(maps, path):
    """Render diff maps side by side with a fixed blue-to-red colormap."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = max(1, len(maps))
    fig, axes = plt.subplots(1, n, figsize=(2 * n, 2.2), squeeze=False)
    vmax = 1.0
    for ax, m in zip(axes[0], maps):
        ax.imshow(m.values, cmap="coolwarm", vmin=0.0, vmax=vmax)
        ax.set_title(f"{m.transition - 1}->{m.transition}", fontsize=8)
        ax.axis("off")
    for ax in axes[0][len(maps):]:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def pca_directions(g, n_samples=2000, n_components=8, seed=0):
    """Principal directions of mapped latents, usable as simple edit directions.

    Returns (components (n_components, d), explained variance ratios).
    """
    from .generator import sample_latent

    w = sample_latent(g, seed, n=n_samples)[:, 0].double().numpy()
    centered = w - w.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    var = s ** 2
    return vt[:n_components], var[:n_components] / var.sum()


def apply_edit(w, direction, strength, rows=None):
    """Move latent ``w`` (k, d) along a d-vector ``direction``, optionally only on some rows."""
    w = np.array(w, dtype=np.float64 if np.asarray(w).dtype == np.float64 else np.float32)
    sel = slice(None) if rows is None else list(rows)
    w[sel] = w[sel] + strength * np.asarray(direction, dtype=w.dtype)
    return w
