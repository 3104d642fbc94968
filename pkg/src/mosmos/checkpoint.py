"""Checkpoints as a flat little-endian parameter blob plus a JSON index."""

import json
from pathlib import Path

import numpy as np
import torch


class CheckpointError(IOError):
    pass


def save_checkpoint(path, state_dict, meta=None):
    """Write ``params.bin`` and ``params.json`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = {}
    offset = 0
    with open(path / "params.bin", "wb") as fh:
        for name, tensor in state_dict.items():
            arr = tensor.detach().cpu().numpy()
            arr = np.asarray(arr, dtype=arr.dtype.newbyteorder("<"), order="C")
            data = arr.tobytes()
            fh.write(data)
            index[name] = {"offset": offset, "shape": list(arr.shape), "dtype": arr.dtype.name}
            offset += len(data)
    doc = {"tensors": index, "nbytes": offset, "meta": meta or {}}
    (path / "params.json").write_text(json.dumps(doc, indent=1))


def load_checkpoint(path):
    """Return (state_dict, meta)."""
    path = Path(path)
    try:
        doc = json.loads((path / "params.json").read_text())
        blob = (path / "params.bin").read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing checkpoint file: {exc.filename}") from exc
    if len(blob) != doc["nbytes"]:
        raise CheckpointError(f"params.bin: expected {doc['nbytes']} bytes, found {len(blob)}")
    state = {}
    for name, entry in doc["tensors"].items():
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        count = int(np.prod(entry["shape"]))
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=entry["offset"])
        state[name] = torch.from_numpy(arr.astype(dtype.newbyteorder("=")).reshape(entry["shape"]))
    return state, doc["meta"]
