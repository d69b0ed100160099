"""Checkpoint archives: a single .npz holding named float arrays plus a JSON header.

The header (array key ``__meta__``) carries ``format`` (a versioned tag), the config
echo, the vocabulary sizes and, for every stored array, its shape.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

ENCODER_FORMAT = "raremed-encoder/1"
MODEL_FORMAT = "raremed-model/1"
LR_FORMAT = "raremed-lr/1"


class CheckpointError(ValueError):
    pass


def save_arrays(path: str | Path, fmt: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    header = dict(meta, format=fmt, shapes={k: list(v.shape) for k, v in arrays.items()})
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    payload["__meta__"] = np.array(json.dumps(header, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_arrays(path: str | Path, expect: str | tuple[str, ...] | None = None) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as npz:
        meta = json.loads(str(npz["__meta__"]))
        arrays = {k: npz[k] for k in npz.files if k != "__meta__"}
    if expect is not None:
        allowed = (expect,) if isinstance(expect, str) else expect
        if meta.get("format") not in allowed:
            raise CheckpointError(f"{path}: format {meta.get('format')!r}, expected one of {allowed}")
    return arrays, meta


def module_arrays(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    state = module.state_dict()
    for key, ref in state.items():
        name = prefix + key
        if name not in arrays:
            raise CheckpointError(f"checkpoint missing array {name!r}")
        if tuple(arrays[name].shape) != tuple(ref.shape):
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {tuple(arrays[name].shape)} vs model {tuple(ref.shape)}"
            )
        state[key] = torch.as_tensor(arrays[name], dtype=ref.dtype)
    module.load_state_dict(state)
