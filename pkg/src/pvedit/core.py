"""Tensor substrate: video arrays, counter-based random streams and the VTEN format.

Videos are plain ``numpy.float32`` arrays of shape ``(frames, height, width,
channels)``. Random numbers come from :class:`RngStream`, a counter-based
generator built on the SplitMix64 finalizer so any language can replay a
stream bit-for-bit:

* ``key = mix(mix(seed) ^ purpose_code)``; a child stream uses
  ``mix(key ^ mix(child_id))``.
* draw ``k`` of a stream produces the 64-bit word ``mix(key ^ mix(k))``.
* a uniform in ``(0, 1]`` is ``((word >> 11) + 1) * 2**-53``.
* normal draw ``k`` is Box-Muller on uniforms ``2k`` and ``2k+1``:
  ``sqrt(-2 ln u0) * cos(2 pi u1)``, evaluated in float64 then rounded to float32.
"""

from __future__ import annotations

import enum
import os
import struct
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, InvalidShapeError, TruncationError, UnsupportedChannelsError

_MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


class Purpose(enum.IntEnum):
    INIT_NOISE = 1
    TRAINING = 2
    DATASET = 3
    SAMPLING = 4


def _mix(x: np.ndarray) -> np.ndarray:
    # SplitMix64 finalizer; uint64 arithmetic wraps mod 2**64.
    with np.errstate(over="ignore"):
        z = x + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def _mix_int(x: int) -> int:
    return int(_mix(np.array([x & _MASK64], dtype=np.uint64))[0])


class RngStream:
    """Sequential reader over a counter-based random sequence.

    ``counter`` is the number of 64-bit words consumed so far: a uniform takes
    one word, a normal takes two.
    Streams are cheap; split them instead of sharing one between threads.
    """

    def __init__(self, seed: int, purpose: Purpose | str = Purpose.SAMPLING, *, _key: int | None = None):
        if isinstance(purpose, str):
            purpose = Purpose[purpose.upper().replace("-", "_")]
        self.seed = int(seed)
        self.purpose = Purpose(purpose)
        if _key is None:
            _key = _mix_int(_mix_int(self.seed) ^ int(self.purpose))
        self.key = _key
        self.counter = 0

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, purpose={self.purpose.name}, counter={self.counter})"

    def split(self, child: int) -> "RngStream":
        """Independent child stream identified by ``child`` (does not advance self)."""
        return RngStream(self.seed, self.purpose, _key=_mix_int(self.key ^ _mix_int(int(child))))

    def _words(self, start: int, count: int) -> np.ndarray:
        idx = np.arange(start, start + count, dtype=np.uint64)
        return _mix(np.uint64(self.key) ^ _mix(idx))

    def _uniform_at(self, start: int, count: int) -> np.ndarray:
        w = self._words(start, count)
        return ((w >> np.uint64(11)).astype(np.float64) + 1.0) * (2.0 ** -53)

    def normal64(self, count: int) -> np.ndarray:
        """Next ``count`` standard normals as float64 (advances the counter)."""
        u = self._uniform_at(self.counter, 2 * count)
        self.counter += 2 * count
        u0, u1 = u[0::2], u[1::2]
        return np.sqrt(-2.0 * np.log(u0)) * np.cos(2.0 * np.pi * u1)

    def uniform(self, count: int) -> np.ndarray:
        """Next ``count`` uniforms in (0, 1], float64."""
        u = self._uniform_at(self.counter, count)
        self.counter += count
        return u

    def integers(self, high: int, count: int) -> np.ndarray:
        """Next ``count`` integers in ``[0, high)``."""
        u = self.uniform(count)
        return np.minimum((u * high).astype(np.int64), high - 1)


def check_dims(dims: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if len(dims) == 0 or any(d <= 0 for d in dims):
        raise InvalidShapeError(f"all extents must be positive, got {dims}")
    return dims


def gaussian(stream: RngStream, dims: Sequence[int]) -> np.ndarray:
    """I.i.d. standard normal float32 array of shape ``dims``."""
    dims = check_dims(dims)
    n = int(np.prod(dims))
    return stream.normal64(n).astype(np.float32).reshape(dims)


def as_video(x, *, name: str = "video") -> np.ndarray:
    """Validate a rank-4 finite float32 video array (copying only if needed)."""
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim != 4:
        raise InvalidShapeError(f"{name} must have rank 4 (F, H, W, C), got shape {arr.shape}")
    check_dims(arr.shape)
    if not np.all(np.isfinite(arr)):
        raise InvalidShapeError(f"{name} contains non-finite values")
    return arr


# ---------------------------------------------------------------- VTEN format

VTEN_MAGIC = b"VTEN"
VTEN_VERSION = 1
_VTEN_HEADER = struct.Struct("<4sHH4I")


def encode_tensor(t: np.ndarray) -> bytes:
    t = np.asarray(t, dtype=np.float32)
    if t.ndim != 4:
        raise InvalidShapeError(f"VTEN stores rank-4 tensors, got shape {t.shape}")
    header = _VTEN_HEADER.pack(VTEN_MAGIC, VTEN_VERSION, 4, *t.shape)
    return header + np.ascontiguousarray(t).astype("<f4", copy=False).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one VTEN record starting at ``offset``; return (tensor, next offset)."""
    if len(buf) - offset < _VTEN_HEADER.size:
        raise TruncationError("VTEN header truncated")
    magic, version, rank, *dims = _VTEN_HEADER.unpack_from(buf, offset)
    if magic != VTEN_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {VTEN_MAGIC!r}")
    if version != VTEN_VERSION:
        raise FormatError(f"unsupported VTEN version {version}")
    if rank != 4:
        raise FormatError(f"VTEN rank must be 4, got {rank}")
    count = int(np.prod(dims, dtype=np.int64))
    start = offset + _VTEN_HEADER.size
    end = start + 4 * count
    if len(buf) < end:
        have = (len(buf) - start) // 4
        raise TruncationError(f"header declares {count} floats but payload has {have}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=start).astype(np.float32)
    return data.reshape(dims), end


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensor(t: np.ndarray, path) -> None:
    atomic_write_bytes(path, encode_tensor(t))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    t, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after VTEN payload")
    return t


# ---------------------------------------------------------------- frame export

def quantize(x: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and map to bytes with round-half-up."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.floor(255.0 * x + 0.5).astype(np.uint8)


def export_frames(t: np.ndarray, directory) -> list[Path]:
    """One binary PPM (3 channels) or PGM (1 channel) per frame."""
    t = np.asarray(t, dtype=np.float32)
    if t.ndim != 4:
        raise InvalidShapeError(f"expected rank-4 video, got shape {t.shape}")
    frames, height, width, channels = t.shape
    if channels not in (1, 3):
        raise UnsupportedChannelsError(f"frame export needs 1 or 3 channels, got {channels}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tag = b"P6" if channels == 3 else b"P5"
    q = quantize(t)
    paths = []
    for f in range(frames):
        header = tag + b"\n%d %d\n255\n" % (width, height)
        p = directory / f"frame_{f:04d}.ppm"
        atomic_write_bytes(p, header + q[f].tobytes())
        paths.append(p)
    return paths
