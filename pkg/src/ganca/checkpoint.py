"""Checkpoint files: one JSON header line, then raw little-endian float32 tensors.

The header lists every tensor as ``[name, shape]`` in the order the data
follows. Keys are sorted and no timestamps are written, so identical runs
produce byte-identical files.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, UsageError
from .nca import NcaParams
from .optim import AdamState

VERSION = 1
KINDS = ("nca", "ganca")
_LE_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    header: dict
    tensors: dict[str, np.ndarray]

    @property
    def kind(self) -> str:
        return self.header["kind"]

    def nca_params(self) -> NcaParams:
        return NcaParams.from_arrays([self.tensors["nca/" + n] for n in NcaParams.NAMES])

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix) :]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def save(path, kind: str, tensors: dict[str, np.ndarray], depth: int, hidden: int, adam_step: int, **extra) -> Path:
    if kind not in KINDS:
        raise ConfigError(f"unknown checkpoint kind {kind!r}")
    header = {
        "version": VERSION,
        "kind": kind,
        "D": int(depth),
        "F": int(hidden),
        "adam_step": int(adam_step),
        "shapes": [[name, list(np.shape(a))] for name, a in tensors.items()],
        **extra,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        for a in tensors.values():
            fh.write(np.ascontiguousarray(a, dtype=_LE_F32).tobytes())
    os.replace(tmp, path)
    return path


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (ValueError, UnicodeDecodeError):
        raise ConfigError(f"{path}: not a checkpoint (bad header)") from None
    if header.get("version") != VERSION or header.get("kind") not in KINDS:
        raise ConfigError(f"{path}: unsupported checkpoint version/kind")
    tensors = {}
    offset = nl + 1
    for name, shape in header["shapes"]:
        n = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * n
        if end > len(raw):
            raise ConfigError(f"{path}: truncated at tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=_LE_F32, count=n, offset=offset).reshape(shape).astype(np.float32)
        offset = end
    if offset != len(raw):
        raise ConfigError(f"{path}: {len(raw) - offset} trailing bytes")
    return Checkpoint(header, tensors)


def load_nca(path) -> NcaParams:
    """Generator parameters from either checkpoint kind."""
    return load(path).nca_params()


def params_tensors(prefix: str, names, tensors) -> dict[str, np.ndarray]:
    return {f"{prefix}/{n}": t.data for n, t in zip(names, tensors)}


def adam_tensors(prefix: str, names, state: AdamState) -> dict[str, np.ndarray]:
    out = {f"{prefix}/m/{n}": m for n, m in zip(names, state.m)}
    out.update({f"{prefix}/v/{n}": v for n, v in zip(names, state.v)})
    return out


def restore_adam(ckpt: Checkpoint, prefix: str, names, state: AdamState, step: int) -> AdamState:
    state.m = [ckpt.tensors[f"{prefix}/m/{n}"].copy() for n in names]
    state.v = [ckpt.tensors[f"{prefix}/v/{n}"].copy() for n in names]
    state.step_count = int(step)
    return state
