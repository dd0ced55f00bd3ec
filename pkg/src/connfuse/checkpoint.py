"""Checkpoint files.

A checkpoint is a numpy ``.npz`` archive. Tensor entries are named
``g/param/<name>``, ``g/m/<name>``, ``g/v/<name>`` (generator, decoders,
classifier: one optimizer group) and ``d/...`` (discriminators). The entry
``__meta__`` is a UTF-8 JSON document::

    {"format": "connfuse-checkpoint", "version": 1, "n": .., "T": ..,
     "config": {TrainConfig fields}, "epoch": .., "g_step": .., "d_step": ..,
     "rng": {numpy bit-generator state}, "history": [{epoch row}, ...]}

Moments and the RNG state make a loaded checkpoint resume bit-for-bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .training import TrainConfig, TrainState, init_state

FORMAT = "connfuse-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state: TrainState) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    model = state.model
    meta = {
        "format": FORMAT, "version": VERSION, "n": model.n, "T": model.T,
        "config": state.config.to_dict(), "epoch": state.epoch,
        "g_step": model.g_store.step, "d_step": model.d_store.step,
        "rng": state.rng.bit_generator.state, "history": state.history,
    }
    arrays = {**model.g_store.state_arrays("g/"), **model.d_store.state_arrays("d/")}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    if "__meta__" not in arrays:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unexpected format {meta.get('format')!r}")
    if meta.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {meta.get('version')}")
    config = TrainConfig.from_dict(meta["config"])
    state = init_state(config, meta["n"], meta["T"])
    state.model.g_store.load_state_arrays(arrays, "g/")
    state.model.d_store.load_state_arrays(arrays, "d/")
    state.model.g_store.step = meta["g_step"]
    state.model.d_store.step = meta["d_step"]
    state.epoch = meta["epoch"]
    state.rng.bit_generator.state = meta["rng"]
    state.history = meta["history"]
    return state
