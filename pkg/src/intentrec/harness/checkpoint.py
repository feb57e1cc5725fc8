"""Versioned binary checkpoints.

Layout::

    8 bytes   magic b"INTCKPT\\0"
    4 bytes   format version, uint32 little-endian
    8 bytes   manifest length N, uint64 little-endian
    N bytes   manifest, UTF-8 JSON (sorted keys, compact separators)
    rest      tensor values, float64 in the byte order named by the manifest

The manifest holds the run config text, training step, REINFORCE baseline,
Adam hyperparameters and one ``{name, shape, offset}`` entry per tensor
(offsets in bytes from the start of the data section). Parameters are
named ``set.key``; Adam moments ``adam.m/set.key`` and ``adam.v/set.key``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..numerics import AdamState
from ..recommender import TrainingState
from .config import RunConfig

MAGIC = b"INTCKPT\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _tensors(state: TrainingState) -> list[tuple[str, np.ndarray]]:
    out = []
    for ps in state.param_sets:
        out.extend((name, t.data) for name, t in ps.qualified())
    for ps in state.param_sets:
        adam = state.adam.get(ps.name)
        if adam is None:
            continue
        for key in ps:
            out.append((f"adam.m/{ps.name}.{key}", adam.m[key]))
            out.append((f"adam.v/{ps.name}.{key}", adam.v[key]))
    return out


def to_bytes(config: RunConfig, state: TrainingState) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, arr in _tensors(state):
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    manifest = {
        "byte_order": "little",
        "dtype": "float64",
        "config": config.to_text(),
        "training_step": state.step,
        "baseline": state.baseline,
        "adam": {
            name: {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "step": a.step}
            for name, a in state.adam.items()
        },
        "tensors": entries,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(head)) + head + b"".join(blobs)


def save_checkpoint(path, config: RunConfig, state: TrainingState) -> None:
    Path(path).write_bytes(to_bytes(config, state))


def read_manifest(raw: bytes) -> tuple[dict, memoryview]:
    if raw[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, n = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
        )
    manifest = json.loads(raw[20:20 + n].decode("utf-8"))
    return manifest, memoryview(raw)[20 + n:]


def from_bytes(raw: bytes) -> tuple[RunConfig, TrainingState]:
    from .runner import build_state  # deferred: runner imports this module

    manifest, data = read_manifest(raw)
    order = "<" if manifest["byte_order"] == "little" else ">"
    config = RunConfig.from_text(manifest["config"])
    state = build_state(config)
    arrays = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(data, dtype=f"{order}f8", count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    for ps in state.param_sets:
        for name, t in ps.qualified():
            if name not in arrays:
                raise CheckpointError(f"checkpoint lacks tensor {name}")
            if arrays[name].shape != t.shape:
                raise CheckpointError(f"{name}: shape {arrays[name].shape} != model shape {t.shape}")
            t.data = arrays[name].copy()
    for set_name, hyper in manifest["adam"].items():
        ps = next(p for p in state.param_sets if p.name == set_name)
        adam = AdamState(**hyper)
        for key in ps:
            adam.m[key] = arrays[f"adam.m/{set_name}.{key}"].copy()
            adam.v[key] = arrays[f"adam.v/{set_name}.{key}"].copy()
        state.adam[set_name] = adam
    state.step = int(manifest["training_step"])
    state.baseline = float(manifest["baseline"])
    return config, state


def load_checkpoint(path) -> tuple[RunConfig, TrainingState]:
    return from_bytes(Path(path).read_bytes())


def checkpoint_name(step: int) -> str:
    return f"ckpt_{step:07d}.bin"


def list_checkpoints(directory) -> list[Path]:
    return sorted(Path(directory).glob("ckpt_*.bin"))
