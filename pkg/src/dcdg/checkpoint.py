"""Single-file checkpoint container.

Layout::

    b"DCDGCKPT"            8-byte magic
    uint32 LE              format version
    uint64 LE              header length N
    N bytes                UTF-8 JSON header (arch, epoch, seed, array index, optimizer hyperparameters)
    ...                    raw little-endian float32 arrays at the offsets in the index

Optimizer moments are stored as arrays named ``opt.<group>.<param#>.<key>``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import ArtifactIOError, DataError
from .networks import GROUPS, ArchConfig, ModelState, init_model

MAGIC = b"DCDGCKPT"
VERSION = 1


def _arrays(state: ModelState) -> dict[str, np.ndarray]:
    out = {}
    for g in GROUPS:
        for k, v in state.named_arrays(g).items():
            out[k] = v.detach().cpu().numpy().astype("<f4", copy=False)
    for name, opt in sorted(state.optimizers.items()):
        for idx, st in sorted(opt.state_dict()["state"].items()):
            for key, val in sorted(st.items()):
                out[f"opt.{name}.{idx}.{key}"] = np.asarray(val.detach().cpu().numpy(), dtype="<f4")
    return out


def _opt_meta(state: ModelState) -> dict:
    meta = {}
    for name, opt in state.optimizers.items():
        g = opt.param_groups[0]
        meta[name] = {"lr": g["lr"], "betas": list(g["betas"]), "eps": g["eps"]}
    return meta


def to_bytes(state: ModelState, extra: dict | None = None) -> bytes:
    arrays = _arrays(state)
    index, offset = [], 0
    for name, arr in arrays.items():
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {
        "arch": state.arch.to_dict(),
        "epoch": state.epoch,
        "seed": state.seed,
        "optimizers": _opt_meta(state),
        "arrays": index,
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(hb)), hb]
    parts += [np.ascontiguousarray(a).tobytes() for a in arrays.values()]
    return b"".join(parts)


def save_checkpoint(state: ModelState, path, extra: dict | None = None) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(to_bytes(state, extra))
    except OSError as exc:
        raise ArtifactIOError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def read_header(blob: bytes) -> tuple[dict, int]:
    if blob[:8] != MAGIC:
        raise DataError("not a DCDG checkpoint (bad magic)")
    version, n = struct.unpack("<IQ", blob[8:20])
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    return json.loads(blob[20:20 + n]), 20 + n


def from_bytes(blob: bytes) -> ModelState:
    header, base = read_header(blob)
    state = init_model(ArchConfig.from_dict(header["arch"]), header["seed"])
    state.epoch = header["epoch"]
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=base + entry["offset"]).reshape(shape)
        arrays[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    for g in GROUPS:
        prefix = g + "."
        sd = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        state.group(g).load_state_dict(sd)

    opt_params = {
        "d": list(state.d.parameters()),
        "fg": list(state.fg.parameters()),
        "smrm": list(state.sm.parameters()) + list(state.rm.parameters()),
    }
    for name, meta in header.get("optimizers", {}).items():
        opt = torch.optim.Adam(opt_params[name], lr=meta["lr"], betas=tuple(meta["betas"]), eps=meta["eps"])
        per_param: dict[int, dict] = {}
        prefix = f"opt.{name}."
        for k, v in arrays.items():
            if k.startswith(prefix):
                idx, key = k[len(prefix):].split(".", 1)
                per_param.setdefault(int(idx), {})[key] = v
        sd = opt.state_dict()
        sd["state"] = per_param
        opt.load_state_dict(sd)
        state.optimizers[name] = opt
    return state


def load_checkpoint(path) -> ModelState:
    path = Path(path)
    if not path.exists():
        raise ArtifactIOError(f"missing checkpoint: {path}")
    return from_bytes(path.read_bytes())
