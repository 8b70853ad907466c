"""Single-file checkpoints: a zip of .npy arrays plus a metadata.json record.

Entries and metadata are written deterministically so that
save -> load -> save reproduces the same bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .encoder import EncoderHandle, rebuild_encoder
from .errors import ContractError
from .generator import GeneratorHandle, MappingNetwork, SynthesisNetwork

_EPOCH = (1980, 1, 1, 0, 0, 0)
FORMAT_VERSION = 1


def _entry(zf, name, data):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def write_archive(path, arrays, meta):
    """Write ``arrays`` (name -> ndarray) and ``meta`` (JSON-able) deterministically."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _entry(zf, "metadata.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for name in sorted(arrays):
            arr_buf = io.BytesIO()
            np.save(arr_buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            _entry(zf, f"arrays/{name}.npy", arr_buf.getvalue())
    Path(path).write_bytes(buf.getvalue())


def read_archive(path):
    arrays = {}
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("metadata.json"))
        for name in zf.namelist():
            if name.startswith("arrays/") and name.endswith(".npy"):
                arrays[name[len("arrays/"):-len(".npy")]] = np.load(io.BytesIO(zf.read(name)),
                                                                   allow_pickle=False)
    return arrays, meta


def save_generator(g, path):
    meta = {"kind": "generator", "format": FORMAT_VERSION, **g.meta}
    write_archive(path, g.state_arrays(), meta)


def load_generator(path):
    arrays, meta = read_archive(path)
    if meta.get("kind") != "generator":
        raise ContractError(f"{path} is not a generator checkpoint")
    k, d, res = meta["k"], meta["d"], meta["resolution"]
    mapping = MappingNetwork(d)
    synthesis = SynthesisNetwork(k, d, res, tuple(meta["channels"]))
    _load_state(mapping, arrays, "mapping.")
    _load_state(synthesis, arrays, "synthesis.")
    avg = torch.from_numpy(arrays["avg_latent"].copy())
    mapping = mapping.to(avg.dtype)
    synthesis = synthesis.to(avg.dtype)
    clean = {key: v for key, v in meta.items() if key not in ("kind", "format")}
    return GeneratorHandle(mapping, synthesis, k, d, res, avg, meta["style_groups"], clean)


def _load_state(module, arrays, prefix):
    state = {name[len(prefix):]: torch.from_numpy(arr.copy())
             for name, arr in arrays.items() if name.startswith(prefix)}
    module.to(next(iter(state.values())).dtype)
    module.load_state_dict(state)


def save_encoder(e, path):
    meta = {"kind": "encoder", "format": FORMAT_VERSION, **e.meta}
    write_archive(path, e.state_arrays(), meta)


def load_encoder(path) -> EncoderHandle:
    arrays, meta = read_archive(path)
    if meta.get("kind") != "encoder":
        raise ContractError(f"{path} is not an encoder checkpoint")
    clean = {key: v for key, v in meta.items() if key not in ("kind", "format")}
    return rebuild_encoder(clean, arrays)
