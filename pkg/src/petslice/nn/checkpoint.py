"""Checkpoint files: a JSON header followed by a little-endian float32 blob.

Layout::

    uint64 LE  header length in bytes
    bytes      UTF-8 JSON header
    bytes      concatenated float32 LE tensors, in the order listed in the header

Tensors are the model parameters, then batch-norm buffers, then the Adam
first and second moments, each in the module's declaration order.
"""

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = "petslice-checkpoint-v1"


def model_tensors(model, optimizer=None):
    out = [(f"param/{n}", p) for n, p, _ in model.named_parameters()]
    out += [(f"buffer/{n}", b) for n, b in model.named_buffers()]
    if optimizer is not None:
        out += [(f"adam_m/{n}", s.m) for n, s in optimizer.states.items()]
        out += [(f"adam_v/{n}", s.v) for n, s in optimizer.states.items()]
    return out


def save_checkpoint(path, tensors, header):
    """Writes ``tensors`` (list of (name, array)) with ``header`` metadata."""
    table, blobs, offset = [], [], 0
    for name, arr in tensors:
        data = np.ascontiguousarray(arr, dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += data.size
    meta = dict(header)
    meta["format"] = MAGIC
    meta["tensors"] = table
    raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)
    return path


def load_checkpoint(path):
    """Returns ``(header, {name: float32 array})``."""
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode("utf-8"))
        if header.get("format") != MAGIC:
            raise ValueError(f"{path}: not a petslice checkpoint")
        blob = np.frombuffer(fh.read(), dtype="<f4")
    tensors = {}
    for entry in header["tensors"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        tensors[entry["name"]] = blob[start : start + size].reshape(entry["shape"]).copy()
    return header, tensors


def restore(model, tensors, optimizer=None, step=None):
    """Copies loaded tensors back into ``model`` (and ``optimizer``) in place.

    ``step`` sets the optimizer's bias-correction counter, normally the
    header's ``step`` entry.
    """
    for name, p, _ in model.named_parameters():
        p[...] = tensors[f"param/{name}"]
    for name, b in model.named_buffers():
        b[...] = tensors[f"buffer/{name}"]
    if optimizer is not None:
        for name, s in optimizer.states.items():
            s.m[...] = tensors[f"adam_m/{name}"]
            s.v[...] = tensors[f"adam_v/{name}"]
            if step is not None:
                s.t = int(step)
