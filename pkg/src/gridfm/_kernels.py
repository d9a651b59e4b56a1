"""Hot inner loops shared by the autodiff engine and the shard store.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version with identical semantics (and, for the reductions, identical
summation order, so results agree bitwise).  The numba path is used when
numba imports cleanly and ``GRIDFM_DISABLE_NUMBA`` is unset or ``0``.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("GRIDFM_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError("numba disabled by GRIDFM_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"

# CRC-64/XZ (ECMA-182 polynomial, reflected, init and xorout all ones).
_CRC64_POLY = np.uint64(0xC96C5795D7870F42)


def _make_crc64_table() -> np.ndarray:
    table = np.zeros(256, dtype=np.uint64)
    for i in range(256):
        crc = i
        for _ in range(8):
            if crc & 1:
                crc = (crc >> 1) ^ 0xC96C5795D7870F42
            else:
                crc >>= 1
        table[i] = crc
    return table


CRC64_TABLE = _make_crc64_table()


class _NumpyKernels:
    """Reference implementations; also the fallback backend."""

    @staticmethod
    def segment_sum(values, ids, num_segments):
        out = np.zeros((num_segments, values.shape[1]), dtype=np.float64)
        np.add.at(out, ids, values)
        return out

    @staticmethod
    def segment_argext(values, ids, num_segments, want_max):
        m, d = values.shape
        out = np.zeros((num_segments, d), dtype=np.float64)
        arg = np.full((num_segments, d), -1, dtype=np.int64)
        if m == 0:
            return out, arg
        fill = -np.inf if want_max else np.inf
        ext = np.full((num_segments, d), fill, dtype=np.float64)
        if want_max:
            np.maximum.at(ext, ids, values)
        else:
            np.minimum.at(ext, ids, values)
        hit = values == ext[ids]
        rows = np.broadcast_to(np.arange(m, dtype=np.int64)[:, None], (m, d))
        first = np.full((num_segments, d), m, dtype=np.int64)
        cols = np.broadcast_to(np.arange(d, dtype=np.int64)[None, :], (m, d))
        np.minimum.at(first, (np.broadcast_to(ids[:, None], (m, d))[hit], cols[hit]), rows[hit])
        nonempty = first < m
        arg[nonempty] = first[nonempty]
        out[nonempty] = ext[nonempty]
        return out, arg

    @staticmethod
    def crc64(buf, crc=0xFFFFFFFFFFFFFFFF):
        table = CRC64_TABLE.tolist()
        crc = int(crc)
        for byte in bytes(buf):
            crc = table[(crc ^ byte) & 0xFF] ^ (crc >> 8)
        return crc


numpy_kernels = _NumpyKernels()

if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_segment_sum(values, ids, num_segments):
        m, d = values.shape
        out = np.zeros((num_segments, d), dtype=np.float64)
        for i in range(m):
            s = ids[i]
            for j in range(d):
                out[s, j] += values[i, j]
        return out

    @njit(cache=True)
    def _nb_segment_argext(values, ids, num_segments, want_max):
        m, d = values.shape
        out = np.zeros((num_segments, d), dtype=np.float64)
        arg = np.full((num_segments, d), -1, dtype=np.int64)
        for i in range(m):
            s = ids[i]
            for j in range(d):
                v = values[i, j]
                a = arg[s, j]
                if a < 0 or (want_max and v > out[s, j]) or (not want_max and v < out[s, j]):
                    out[s, j] = v
                    arg[s, j] = i
        return out, arg

    @njit(cache=True)
    def _nb_crc64(buf, table, crc):
        for k in range(buf.shape[0]):
            crc = table[(crc ^ np.uint64(buf[k])) & np.uint64(0xFF)] ^ (crc >> np.uint64(8))
        return crc

    class _NumbaKernels:
        @staticmethod
        def segment_sum(values, ids, num_segments):
            return _nb_segment_sum(values, ids, num_segments)

        @staticmethod
        def segment_argext(values, ids, num_segments, want_max):
            return _nb_segment_argext(values, ids, num_segments, want_max)

        @staticmethod
        def crc64(buf, crc=0xFFFFFFFFFFFFFFFF):
            arr = np.frombuffer(buf, dtype=np.uint8)
            return int(_nb_crc64(arr, CRC64_TABLE, np.uint64(crc)))

    numba_kernels = _NumbaKernels()
    active = numba_kernels
else:  # pragma: no cover
    numba_kernels = None
    active = numpy_kernels


def segment_sum(values: np.ndarray, ids: np.ndarray, num_segments: int) -> np.ndarray:
    values = np.ascontiguousarray(values, dtype=np.float64)
    return active.segment_sum(values, np.ascontiguousarray(ids, dtype=np.int64), int(num_segments))


def segment_argext(values: np.ndarray, ids: np.ndarray, num_segments: int, want_max: bool):
    """Per-segment max (or min) with the index of the first extreme row.

    Empty segments give value 0 and index -1.
    """
    values = np.ascontiguousarray(values, dtype=np.float64)
    return active.segment_argext(values, np.ascontiguousarray(ids, dtype=np.int64), int(num_segments), bool(want_max))


def crc64(buf: bytes | bytearray | memoryview) -> int:
    """CRC-64/XZ of ``buf``."""
    return active.crc64(buf) ^ 0xFFFFFFFFFFFFFFFF
