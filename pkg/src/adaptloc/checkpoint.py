"""Single-file checkpoints.

One ``.npz`` archive holds every parameter array keyed by its module path
(``param/<state_dict key>``) plus a flat key-value metadata block with the
model-building configs and run bookkeeping. Loading into a model whose
architecture does not match the stored arrays (missing/extra keys, shape
mismatch) is an error, as is a metadata config that contradicts the
caller's expectation.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .config import format_kv, parse_kv_text

_PARAM_PREFIX = "param/"
_META_KEY = "__meta__"


def save_checkpoint(path, model: torch.nn.Module, meta: dict[str, str]) -> Path:
    path = Path(path)
    arrays = {
        _PARAM_PREFIX + k: v.detach().cpu().numpy() for k, v in model.state_dict().items()
    }
    np.savez(path, **{_META_KEY: np.frombuffer(format_kv(meta).encode(), dtype=np.uint8)},
             **arrays)
    # np.savez appends .npz when absent; normalize the reported path
    return path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")


def read_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path) as z:
        if _META_KEY not in z:
            raise ValueError(f"{path}: not a checkpoint archive (no metadata block)")
        meta = parse_kv_text(bytes(z[_META_KEY]).decode(), origin=str(path))
        arrays = {
            k[len(_PARAM_PREFIX):]: z[k] for k in z.files if k.startswith(_PARAM_PREFIX)
        }
    return meta, arrays


def load_into(model: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    """Copy stored arrays into ``model``; any key or shape mismatch raises."""
    state = model.state_dict()
    missing = sorted(set(state) - set(arrays))
    extra = sorted(set(arrays) - set(state))
    if missing or extra:
        raise ValueError(
            f"checkpoint does not match model: missing keys {missing[:4]}, "
            f"unexpected keys {extra[:4]}"
        )
    new_state = {}
    for k, v in arrays.items():
        if tuple(state[k].shape) != tuple(v.shape):
            raise ValueError(
                f"checkpoint shape mismatch for {k}: stored {tuple(v.shape)}, "
                f"model {tuple(state[k].shape)}"
            )
        new_state[k] = torch.from_numpy(v.copy()).to(state[k].dtype)
    model.load_state_dict(new_state)
