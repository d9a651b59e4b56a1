"""Sharded on-disk graph datasets.

Layout of a dataset directory::

    shard_00000.bin ... shard_NNNNN.bin
    manifest.json          (written last, atomically)

A shard is ``MAGIC | u64 count | u64 offsets[count + 1] | records``, all
little-endian; offsets are absolute byte positions of each record and the
final entry is the file size.  See docs/formats.md for the record layout.
"""

from __future__ import annotations

import json
import mmap
import os
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import _kernels
from .graph import EDGE_DIMS, NODE_DIMS, NODE_TYPES, RELATIONS, HeteroGraph, RelationStore, has_attrs, validate_graph

FORMAT_VERSION = 1
SHARD_MAGIC = b"GFMSHRD\x01"
MANIFEST = "manifest.json"
DEFAULT_FRACTIONS = (0.9, 0.05, 0.05)

_HEADER = struct.Struct("<" + "I" * (len(NODE_TYPES) + len(RELATIONS) + 3))
FLAG_TARGET = 1
FLAG_LABEL = 2


class DatasetError(Exception):
    pass


class MissingManifestError(DatasetError, FileNotFoundError):
    pass


class ChecksumMismatchError(DatasetError):
    def __init__(self, shard: int, path: str):
        super().__init__(f"checksum mismatch in shard {shard} ({path})")
        self.shard = shard


class DatasetValidationError(DatasetError, ValueError):
    def __init__(self, ordinal: int, problems):
        super().__init__(f"graph {ordinal} is invalid: " + "; ".join(str(p) for p in problems[:5]))
        self.ordinal = ordinal


class SplitError(ValueError):
    pass


def shard_name(k: int) -> str:
    return f"shard_{k:05d}.bin"


# record codec -----------------------------------------------------------


def encode_graph(g: HeteroGraph) -> bytes:
    flags = (FLAG_TARGET if g.bus_target is not None else 0) | (FLAG_LABEL if g.graph_label is not None else 0)
    counts = [g.num_nodes(t) for t in NODE_TYPES] + [g.relations[r].num_edges for r in RELATIONS]
    label = int(g.graph_label) if g.graph_label is not None else 0
    parts = [_HEADER.pack(*counts, g.context.shape[0], flags, label)]
    for t in NODE_TYPES:
        parts.append(np.ascontiguousarray(g.node_features[t], dtype="<f4").tobytes())
    for r in RELATIONS:
        st = g.relations[r]
        parts.append(np.ascontiguousarray(st.src, dtype="<u4").tobytes())
        parts.append(np.ascontiguousarray(st.dst, dtype="<u4").tobytes())
        if has_attrs(r):
            parts.append(np.ascontiguousarray(st.edge_attr, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(g.context, dtype="<f4").tobytes())
    if g.bus_target is not None:
        parts.append(np.ascontiguousarray(g.bus_target, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_graph(buf) -> HeteroGraph:
    header = _HEADER.unpack_from(buf, 0)
    nt, nr = len(NODE_TYPES), len(RELATIONS)
    nodes, edges = header[:nt], header[nt : nt + nr]
    ctx_len, flags, label = header[nt + nr :]
    pos = _HEADER.size

    def take(dtype, count, shape):
        nonlocal pos
        a = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(shape).copy()
        pos += a.nbytes
        return a

    feats = {t: take("<f4", nodes[t] * NODE_DIMS[t], (nodes[t], NODE_DIMS[t])).astype(np.float32) for t in NODE_TYPES}
    rels = {}
    for r, m in zip(RELATIONS, edges):
        src = take("<u4", m, (m,)).astype(np.uint32)
        dst = take("<u4", m, (m,)).astype(np.uint32)
        attr = take("<f4", m * EDGE_DIMS[r], (m, EDGE_DIMS[r])).astype(np.float32) if has_attrs(r) else None
        rels[r] = RelationStore(r, src, dst, attr)
    ctx = take("<f4", ctx_len, (ctx_len,)).astype(np.float32)
    target = None
    if flags & FLAG_TARGET:
        nb = nodes[0]
        target = take("<f8", nb * 2, (nb, 2)).astype(np.float64)
    return HeteroGraph(feats, rels, ctx, target, int(label) if flags & FLAG_LABEL else None)


# writing ----------------------------------------------------------------


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def _shard_bytes(records: list[bytes]) -> bytes:
    n = len(records)
    start = len(SHARD_MAGIC) + 8 + 8 * (n + 1)
    offsets = np.empty(n + 1, dtype="<u8")
    offsets[0] = start
    if n:
        offsets[1:] = start + np.cumsum([len(r) for r in records])
    return SHARD_MAGIC + struct.pack("<Q", n) + offsets.tobytes() + b"".join(records)


def write_shards(
    graphs: Iterable[HeteroGraph],
    directory: str | os.PathLike,
    target_shard_bytes: int = 64 << 20,
    split_seed: int = 0,
    split_fractions: Sequence[float] = DEFAULT_FRACTIONS,
    metadata: dict | None = None,
) -> "ShardSet":
    """Write ``graphs`` as shards; the manifest appears only after success."""
    _check_fractions(split_fractions)
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest_path = d / MANIFEST
    if manifest_path.exists():
        manifest_path.unlink()
    for old in d.glob("shard_*.bin"):
        old.unlink()

    shards: list[dict] = []
    pending: list[bytes] = []
    size = 0

    def flush():
        nonlocal pending, size
        data = _shard_bytes(pending)
        name = shard_name(len(shards))
        _atomic_write(d / name, data)
        shards.append({"file": name, "count": len(pending), "bytes": len(data), "crc64": f"{_kernels.crc64(data):016x}"})
        pending, size = [], 0

    n = 0
    for i, g in enumerate(graphs):
        problems = validate_graph(g)
        if problems:
            raise DatasetValidationError(i, problems)
        rec = encode_graph(g)
        pending.append(rec)
        size += len(rec)
        n += 1
        if size >= target_shard_bytes:
            flush()
    if pending:
        flush()

    manifest = {
        "format_version": FORMAT_VERSION,
        "num_graphs": n,
        "num_shards": len(shards),
        "shards": shards,
        "split_seed": int(split_seed),
        "split_fractions": [float(f) for f in split_fractions],
        "metadata": metadata or {},
    }
    _atomic_write(manifest_path, json.dumps(manifest, indent=2).encode("utf-8"))
    return open_dataset(d, verify=False)


# reading ----------------------------------------------------------------


@dataclass
class ShardSet:
    directory: Path
    manifest: dict
    _starts: np.ndarray = field(repr=False, default=None)
    _maps: dict = field(repr=False, default_factory=dict)
    _verified: set = field(repr=False, default_factory=set)
    _lock: threading.Lock = field(repr=False, default_factory=threading.Lock)

    def __post_init__(self):
        counts = [s["count"] for s in self.manifest["shards"]]
        self._starts = np.concatenate([[0], np.cumsum(counts, dtype=np.int64)])

    @property
    def num_graphs(self) -> int:
        return int(self.manifest["num_graphs"])

    @property
    def num_shards(self) -> int:
        return int(self.manifest["num_shards"])

    @property
    def split_seed(self) -> int:
        return int(self.manifest["split_seed"])

    @property
    def split_fractions(self) -> tuple[float, ...]:
        return tuple(self.manifest["split_fractions"])

    @property
    def metadata(self) -> dict:
        return self.manifest.get("metadata", {})

    def __len__(self) -> int:
        return self.num_graphs

    def _shard(self, k: int):
        with self._lock:
            mm = self._maps.get(k)
            if mm is None:
                info = self.manifest["shards"][k]
                path = self.directory / info["file"]
                with open(path, "rb") as f:
                    mm = mmap.mmap(f.fileno(), 0, access=mmap.ACCESS_READ) if info["bytes"] else b""
                if len(mm) != info["bytes"] or f"{_kernels.crc64(mm):016x}" != info["crc64"]:
                    raise ChecksumMismatchError(k, str(path))
                if bytes(mm[: len(SHARD_MAGIC)]) != SHARD_MAGIC:
                    raise DatasetError(f"shard {k} has a bad magic number")
                self._maps[k] = mm
            return mm

    def verify(self) -> None:
        for k in range(self.num_shards):
            self._shard(k)

    def read(self, i: int) -> HeteroGraph:
        i = int(i)
        if not 0 <= i < self.num_graphs:
            raise IndexError(f"graph {i} out of range [0, {self.num_graphs})")
        k = int(np.searchsorted(self._starts, i, side="right") - 1)
        mm = self._shard(k)
        j = i - int(self._starts[k])
        lo, hi = struct.unpack_from("<QQ", mm, len(SHARD_MAGIC) + 8 + 8 * j)
        return decode_graph(memoryview(mm)[lo:hi])

    __getitem__ = read

    def __iter__(self) -> Iterator[HeteroGraph]:
        for i in range(self.num_graphs):
            yield self.read(i)

    def read_many(self, ordinals: Iterable[int]) -> list[HeteroGraph]:
        return [self.read(i) for i in ordinals]

    def splits(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return split_dataset(self, self.split_fractions, self.split_seed)

    def close(self) -> None:
        with self._lock:
            for mm in self._maps.values():
                if isinstance(mm, mmap.mmap):
                    mm.close()
            self._maps.clear()


def open_dataset(directory: str | os.PathLike, verify: bool = True) -> ShardSet:
    d = Path(directory)
    path = d / MANIFEST
    if not path.exists():
        raise MissingManifestError(f"no {MANIFEST} in {d}")
    manifest = json.loads(path.read_text("utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported format_version {manifest.get('format_version')}")
    counts = [s["count"] for s in manifest["shards"]]
    if sum(counts) != manifest["num_graphs"] or len(counts) != manifest["num_shards"]:
        raise DatasetError("manifest counts are inconsistent")
    s = ShardSet(d, manifest)
    if verify:
        s.verify()
    return s


# splits -----------------------------------------------------------------


def _check_fractions(fractions: Sequence[float]) -> tuple[float, float, float]:
    if len(fractions) != 3 or any(not f > 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"fractions must be three positive numbers summing to 1, got {tuple(fractions)}")
    return tuple(float(f) for f in fractions)


def split_sizes(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    f = _check_fractions(fractions)
    n_train = int(round(f[0] * n))
    n_val = min(int(round(f[1] * n)), n - n_train)
    return n_train, n_val, n - n_train - n_val


def split_dataset(s: ShardSet | int, fractions: Sequence[float] = DEFAULT_FRACTIONS, seed: int = 0):
    """Seeded permutation of all ordinals cut into (train, val, test)."""
    n = s if isinstance(s, int) else s.num_graphs
    a, b, _ = split_sizes(n, fractions)
    perm = np.random.default_rng(seed).permutation(n)
    return perm[:a], perm[a : a + b], perm[a + b :]
