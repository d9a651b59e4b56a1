"""Binary checkpoint files.

Layout (all little-endian):

    8 bytes   magic b"GFMCKPT\\x01"
    u64       header length H
    H bytes   UTF-8 JSON header
    payload   raw float64 arrays, back to back

The header holds ``metadata`` (free JSON, e.g. the model config), the
optimizer ``step`` and a ``tensors`` list of ``{"name", "kind", "shape",
"offset"}`` where kind is ``param``, ``adam_m`` or ``adam_v`` and offset is
the byte offset of the array inside the payload.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .optim import AdamState

MAGIC = b"GFMCKPT\x01"


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    path: str | os.PathLike,
    params: dict[str, np.ndarray],
    state: AdamState | None = None,
    metadata: dict | None = None,
) -> None:
    entries = [("param", k, v) for k, v in params.items()]
    if state is not None:
        entries += [("adam_m", k, v) for k, v in state.m.items()]
        entries += [("adam_v", k, v) for k, v in state.v.items()]
    tensors, chunks, offset = [], [], 0
    for kind, name, arr in entries:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        tensors.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": 1,
        "metadata": metadata or {},
        "step": state.step if state is not None else 0,
        "tensors": tensors,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for c in chunks:
            f.write(c)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], AdamState, dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    base = 16 + hlen
    params: dict[str, np.ndarray] = {}
    state = AdamState(step=int(header["step"]))
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        start = base + t["offset"]
        if start + 8 * n > len(blob):
            raise CheckpointError(f"{path}: truncated tensor {t['name']}")
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=start).astype(np.float64).reshape(t["shape"])
        {"param": params, "adam_m": state.m, "adam_v": state.v}[t["kind"]][t["name"]] = arr
    return params, state, header["metadata"]
