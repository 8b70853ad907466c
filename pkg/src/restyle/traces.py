"""Trace persistence and line-delimited metric records."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .schemes import InversionTrace, StepRecord

RECORD_FIELDS = ("image_id", "scheme", "step", "l2", "perceptual", "similarity", "cum_time_s")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def save_trace(trace, directory, extra_meta=None):
    """Write ``metadata.json`` plus stacked ``w``, ``delta``, ``y_hat`` arrays.

    ``delta[0]`` is stored as zeros with ``has_delta[0] = False``.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    ws = trace.latents()
    deltas = np.stack([np.zeros_like(s.w) if s.delta is None else s.delta for s in trace.steps])
    has_delta = np.array([s.delta is not None for s in trace.steps])
    np.save(out / "w.npy", ws)
    np.save(out / "delta.npy", deltas)
    np.save(out / "has_delta.npy", has_delta)
    np.save(out / "y_hat.npy", trace.images())
    meta = {
        "meta": _jsonable(trace.meta),
        "extra": _jsonable(extra_meta or {}),
        "steps": [
            {"losses": s.losses, "wall_clock_s": s.wall_clock_s, "iteration": s.iteration, "phase": s.phase}
            for s in trace.steps
        ],
    }
    (out / "metadata.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    return out


def load_trace(directory):
    src = Path(directory)
    meta = json.loads((src / "metadata.json").read_text())
    ws = np.load(src / "w.npy")
    deltas = np.load(src / "delta.npy")
    has_delta = np.load(src / "has_delta.npy")
    ys = np.load(src / "y_hat.npy")
    steps = []
    for t, info in enumerate(meta["steps"]):
        steps.append(StepRecord(
            w=ws[t], delta=deltas[t] if has_delta[t] else None, y_hat=ys[t],
            losses=info["losses"], wall_clock_s=info["wall_clock_s"],
            iteration=info["iteration"], phase=info["phase"],
        ))
    return InversionTrace(steps, meta["meta"])


def trace_records(trace, image_id, scheme=None):
    """One metric record per step; ``step`` is the iteration for optimisation phases."""
    scheme = scheme or trace.meta.get("scheme", "unknown")
    out = []
    for t, s in enumerate(trace.steps):
        step = t if s.phase == "encoder" else s.iteration
        out.append({
            "image_id": image_id, "scheme": scheme, "step": int(step),
            "l2": s.losses["l2"], "perceptual": s.losses["perceptual"],
            "similarity": s.losses["similarity"], "cum_time_s": s.wall_clock_s,
        })
    return out


def hybrid_records(trace, image_id, scheme="hybrid"):
    """Records for the optimisation phase of a hybrid trace, starting at the encoder's final step."""
    n_enc = sum(1 for s in trace.steps if s.phase == "encoder")
    out = []
    for s in trace.steps[n_enc - 1:]:
        it = 0 if s.phase == "encoder" else s.iteration
        out.append({
            "image_id": image_id, "scheme": scheme, "step": int(it),
            "l2": s.losses["l2"], "perceptual": s.losses["perceptual"],
            "similarity": s.losses["similarity"], "cum_time_s": s.wall_clock_s,
        })
    return out


def write_jsonl(records, path, header=None):
    """Line-delimited JSON; an optional first line carries provenance under the key ``_header``."""
    with open(path, "w") as fh:
        if header is not None:
            fh.write(json.dumps({"_header": header}, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path):
    records, header = [], None
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "_header" in obj:
                header = obj["_header"]
            else:
                records.append(obj)
    return records, header
