"""Dense tensor primitives, seeded sampling streams and the STLW file format.

Tensors are plain numpy arrays (f32 by default, f64 where gradient checks
need the headroom). Randomness goes through RngStream, a thin wrapper over
numpy's counter-based Philox generator keyed by (seed, stream_id), so any
(seed, stream_id) pair replays the exact same sequence regardless of thread
schedule or platform.
"""
from __future__ import annotations

import struct
from typing import Union

import numpy as np

from .errors import ConfigError, DataError, DimensionError, NumericError

F32 = np.float32
F64 = np.float64

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def _mix64(*parts: Union[int, str]) -> int:
    """Stable FNV-1a mix of ints/strings into a 64-bit stream label."""
    h = _FNV_OFFSET
    for p in parts:
        data = p.encode("utf-8") if isinstance(p, str) else int(p & _MASK64).to_bytes(8, "little")
        for b in data:
            h ^= b
            h = (h * _FNV_PRIME) & _MASK64
    return h


class RngStream:
    """Single-consumer random stream, a pure function of (seed, stream_id).

    Parallel users must `derive` distinct sub-streams; replaying a stream
    (same seed/stream_id, same call order) is bit-identical.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream_id]))

    def derive(self, *parts: Union[int, str]) -> "RngStream":
        """Independent sub-stream labelled by the mixed parts."""
        return RngStream(self.seed, _mix64(self.stream_id, *parts))

    def replay(self) -> "RngStream":
        """Fresh copy positioned at the start of this stream."""
        return RngStream(self.seed, self.stream_id)

    def uniform(self, shape) -> np.ndarray:
        """Uniform draws in the open interval (0,1); endpoints excluded so
        the double-log Gumbel transform stays finite."""
        u = self._gen.random(shape)
        return np.clip(u, 1e-16, 1.0 - 1e-16)

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, n, size, replace=False):
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n):
        return self._gen.permutation(n)


def sample_uniform(rng: RngStream, n: int) -> np.ndarray:
    return rng.uniform(n)


def sample_std_normal(rng: RngStream, n: int) -> np.ndarray:
    return rng.normal(n)


def matvec(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """out[o] = sum_i w[i,o] * x[i]."""
    w = np.asarray(w)
    x = np.asarray(x)
    if w.ndim != 2 or x.ndim != 1 or w.shape[0] != x.shape[0]:
        raise DimensionError(f"matvec shape mismatch: W {w.shape} vs x {x.shape}")
    return x @ w


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shift-invariant softmax along `axis`."""
    z = np.asarray(z)
    if np.isnan(z).any():
        raise NumericError("softmax received NaN input")
    m = np.max(z, axis=axis, keepdims=True)
    e = np.exp(z - m)
    return e / np.sum(e, axis=axis, keepdims=True)


# --- STLW binary tensor format ------------------------------------------------
# magic "STLW", u16 version=1, u8 dtype (0=f32, 1=f64), u8 rank,
# rank x u64 little-endian dims, row-major little-endian payload.

_MAGIC = b"STLW"
_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_stlw(fh, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype == np.float32:
        code = 0
    elif arr.dtype == np.float64:
        code = 1
    else:
        raise ConfigError(f"STLW supports f32/f64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise DimensionError("STLW rank exceeds u8")
    fh.write(_MAGIC)
    fh.write(struct.pack("<HBB", _VERSION, code, arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())


def read_stlw(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != _MAGIC:
        raise DataError(f"bad STLW magic {magic!r}")
    version, code, rank = struct.unpack("<HBB", fh.read(4))
    if version != _VERSION:
        raise DataError(f"unsupported STLW version {version}")
    if code not in _DTYPE_CODES:
        raise DataError(f"unknown STLW dtype code {code}")
    dims = [struct.unpack("<Q", fh.read(8))[0] for _ in range(rank)]
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(dims)) if dims else 1
    payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise DataError("truncated STLW payload")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def save_stlw(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_stlw(fh, arr)


def load_stlw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_stlw(fh)


