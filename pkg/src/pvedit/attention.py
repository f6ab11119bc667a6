"""Attention kernels: materializing reference, online-softmax streaming, and
dual attention with on-the-fly map replacement (AMR), plus frame windows.

The streaming kernels walk the keys left to right in fixed-size blocks,
keeping per query row a running max, a running denominator and a running
weighted sum of values. The logit matrix is never built: scratch memory is
``O(n * (block + d'))`` whatever the number of keys. Every scratch buffer is
requested through an :class:`AuxMeter`, which is how the memory claims are
measured.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptyRowError, IndexRangeError, ShapeMismatchError

DEFAULT_BLOCK = 64


class AuxMeter:
    """Counts bytes of scratch buffers a kernel allocates (live and peak)."""

    def __init__(self):
        self.live = 0
        self.peak = 0
        self.total = 0
        self.allocations = 0

    def empty(self, shape, dtype=np.float64) -> np.ndarray:
        arr = np.empty(shape, dtype=dtype)
        self.live += arr.nbytes
        self.total += arr.nbytes
        self.allocations += 1
        self.peak = max(self.peak, self.live)
        return arr

    def release(self, *arrays: np.ndarray) -> None:
        for a in arrays:
            self.live -= a.nbytes

    def reset(self) -> None:
        self.live = self.peak = self.total = self.allocations = 0


@dataclass(frozen=True)
class ReplacementSpec:
    """Column pairs ``(source_col, target_col)``: target column of map 2 takes source column of map 1."""

    pairs: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple((int(a), int(b)) for a, b in self.pairs))

    @property
    def source_cols(self) -> list[int]:
        return [a for a, _ in self.pairs]

    @property
    def target_cols(self) -> list[int]:
        return [b for _, b in self.pairs]

    def validate(self, m1: int, m2: int) -> None:
        src, dst = self.source_cols, self.target_cols
        if any(a < 0 or a >= m1 for a in src):
            raise IndexRangeError(f"source column out of range [0, {m1}): {src}")
        if any(b < 0 or b >= m2 for b in dst):
            raise IndexRangeError(f"target column out of range [0, {m2}): {dst}")
        if len(set(dst)) != len(dst):
            raise IndexRangeError(f"target columns must be distinct: {dst}")

    @classmethod
    def identity(cls, cols: Sequence[int]) -> "ReplacementSpec":
        return cls(tuple((c, c) for c in cols))


def _check(q, k, v):
    q, k, v = (np.asarray(x) for x in (q, k, v))
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeMismatchError("Q, K, V must be 2-D")
    if q.shape[1] != k.shape[1]:
        raise ShapeMismatchError(f"Q width {q.shape[1]} != K width {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ShapeMismatchError(f"K has {k.shape[0]} rows, V has {v.shape[0]}")
    if min(q.shape[0], k.shape[0], q.shape[1]) < 1:
        raise ShapeMismatchError("attention needs n, m, d >= 1")
    return q, k, v


def relative_error(a: np.ndarray, ref: np.ndarray) -> float:
    """max |a - ref| / max |ref| (norm-wise relative error)."""
    a = np.asarray(a, np.float64)
    ref = np.asarray(ref, np.float64)
    scale = float(np.max(np.abs(ref))) if ref.size else 0.0
    diff = float(np.max(np.abs(a - ref))) if ref.size else 0.0
    return diff / max(scale, 1e-30)


# ---------------------------------------------------------------- reference

def attn_naive(q, k, v, meter: AuxMeter | None = None, out_dtype=np.float32) -> np.ndarray:
    """Softmax(Q K^T / sqrt(d)) V with the full logit matrix materialized."""
    q, k, v = _check(q, k, v)
    meter = meter or AuxMeter()
    logits = _logits(q, k, meter)
    _softmax_rows(logits, meter)
    return _weighted_values(logits, v, meter).astype(out_dtype)


def _upcast(x: np.ndarray, meter: AuxMeter) -> np.ndarray:
    buf = meter.empty(x.shape)
    buf[...] = x
    return buf


def _logits(q: np.ndarray, k: np.ndarray, meter: AuxMeter) -> np.ndarray:
    q64, k64 = _upcast(q, meter), _upcast(k, meter)
    logits = meter.empty((q.shape[0], k.shape[0]))
    np.matmul(q64, k64.T, out=logits)
    logits *= 1.0 / math.sqrt(q.shape[1])
    return logits


def _weighted_values(probs: np.ndarray, v: np.ndarray, meter: AuxMeter) -> np.ndarray:
    out = meter.empty((probs.shape[0], v.shape[1]))
    np.matmul(probs, _upcast(v, meter), out=out)
    return out


def _softmax_rows(logits: np.ndarray, meter: AuxMeter) -> None:
    n = logits.shape[0]
    rowmax = meter.empty((n, 1))
    np.max(logits, axis=1, keepdims=True, out=rowmax)
    logits -= rowmax
    np.exp(logits, out=logits)
    denom = meter.empty((n, 1))
    np.sum(logits, axis=1, keepdims=True, out=denom)
    logits /= denom


def attn_amr_naive(q1, k1, v1, q2, k2, v2, spec: ReplacementSpec, meter: AuxMeter | None = None,
                   out_dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Materialize both maps, overwrite the replaced columns of map 2, softmax, multiply."""
    q1, k1, v1 = _check(q1, k1, v1)
    q2, k2, v2 = _check(q2, k2, v2)
    if q1.shape[0] != q2.shape[0]:
        raise ShapeMismatchError(f"paired attention needs equal query counts, got {q1.shape[0]} and {q2.shape[0]}")
    spec.validate(k1.shape[0], k2.shape[0])
    meter = meter or AuxMeter()
    n = q1.shape[0]
    m1 = _logits(q1, k1, meter)
    m2 = _logits(q2, k2, meter)
    if spec.pairs:
        m2[:, spec.target_cols] = m1[:, spec.source_cols]
    _softmax_rows(m1, meter)
    _softmax_rows(m2, meter)
    o1 = _weighted_values(m1, v1, meter).astype(out_dtype)
    o2 = _weighted_values(m2, v2, meter).astype(out_dtype)
    return o1, o2


# ---------------------------------------------------------------- streaming

class _OnlineSoftmax:
    """Running max / denominator / weighted sum for n query rows.

    Block scores are kept transposed (block x n) so a partial last block is a
    contiguous leading slice of the scratch buffer.
    """

    def __init__(self, n: int, dv: int, block: int, meter: AuxMeter):
        self.scores = meter.empty((block, n))
        self.run_max = meter.empty(n)
        self.new_max = meter.empty(n)
        self.corr = meter.empty(n)
        self.denom = meter.empty(n)
        self.acc = meter.empty((n, dv))
        self.vblock = meter.empty((block, dv))
        self.rowsum = meter.empty(n)
        self.contrib = meter.empty((n, dv))
        self.run_max.fill(-np.inf)
        self.denom.fill(0.0)
        self.acc.fill(0.0)

    def update(self, b: int, values: np.ndarray) -> None:
        """Fold in ``b`` keys whose scaled logits sit in ``scores[:b]`` and values in ``values``."""
        s = self.scores[:b]
        np.max(s, axis=0, out=self.new_max)
        np.maximum(self.new_max, self.run_max, out=self.new_max)
        np.subtract(self.run_max, self.new_max, out=self.corr)
        np.exp(self.corr, out=self.corr)
        s -= self.new_max
        np.exp(s, out=s)
        self.denom *= self.corr
        np.sum(s, axis=0, out=self.rowsum)
        self.denom += self.rowsum
        self.acc *= self.corr[:, None]
        vb = self.vblock[:b]
        vb[...] = values
        np.matmul(s.T, vb, out=self.contrib)
        self.acc += self.contrib
        self.run_max, self.new_max = self.new_max, self.run_max

    def finish(self, out_dtype) -> np.ndarray:
        return (self.acc / self.denom[:, None]).astype(out_dtype)


def _scaled_scores(dst: np.ndarray, kb: np.ndarray, q64: np.ndarray, scale: float, kbuf: np.ndarray) -> None:
    kbuf[...] = kb
    np.matmul(kbuf, q64.T, out=dst)
    dst *= scale


def attn_streaming(q, k, v, meter: AuxMeter | None = None, block: int = DEFAULT_BLOCK,
                   out_dtype=np.float32) -> np.ndarray:
    """Single left-to-right pass over the keys with online softmax."""
    q, k, v = _check(q, k, v)
    meter = meter or AuxMeter()
    n, d = q.shape
    m, dv = v.shape
    q64 = meter.empty((n, d))
    q64[...] = q
    kbuf = meter.empty((block, d))
    state = _OnlineSoftmax(n, dv, block, meter)
    scale = 1.0 / math.sqrt(d)
    for j0 in range(0, m, block):
        b = min(block, m - j0)
        _scaled_scores(state.scores[:b], k[j0:j0 + b], q64, scale, kbuf[:b])
        state.update(b, v[j0:j0 + b])
    return state.finish(out_dtype)


def attn_amr(q1, k1, v1, q2, k2, v2, spec: ReplacementSpec, meter: AuxMeter | None = None,
             block: int = DEFAULT_BLOCK, out_dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Plain attention for branch 1 and replaced-map attention for branch 2 in one pass.

    Logits of branch 2 in a replaced column ``j`` are ``Q1_i . K1_j' / sqrt(d1)``
    for its paired source column ``j'``; the values stay those of branch 2.
    """
    q1, k1, v1 = _check(q1, k1, v1)
    q2, k2, v2 = _check(q2, k2, v2)
    n = q1.shape[0]
    if q2.shape[0] != n:
        raise ShapeMismatchError(f"paired attention needs equal query counts, got {n} and {q2.shape[0]}")
    m1, m2 = k1.shape[0], k2.shape[0]
    spec.validate(m1, m2)
    meter = meter or AuxMeter()
    d1, d2 = q1.shape[1], q2.shape[1]
    q1_64 = meter.empty((n, d1))
    q1_64[...] = q1
    q2_64 = meter.empty((n, d2))
    q2_64[...] = q2
    k1buf = meter.empty((block, d1))
    k2buf = meter.empty((block, d2))
    st1 = _OnlineSoftmax(n, v1.shape[1], block, meter)
    st2 = _OnlineSoftmax(n, v2.shape[1], block, meter)
    # replaced logits are produced block-wise with the same matmul layout as
    # branch 1, so full self-replacement reproduces branch 1 bit for bit
    alt = meter.empty((block, n))
    s1, s2 = 1.0 / math.sqrt(d1), 1.0 / math.sqrt(d2)
    source_of = np.full(m2, -1, dtype=np.int64)
    for a, b in spec.pairs:
        source_of[b] = a
    for j0 in range(0, max(m1, m2), block):
        if j0 < m1:
            b = min(block, m1 - j0)
            _scaled_scores(st1.scores[:b], k1[j0:j0 + b], q1_64, s1, k1buf[:b])
            st1.update(b, v1[j0:j0 + b])
        if j0 < m2:
            b = min(block, m2 - j0)
            _scaled_scores(st2.scores[:b], k2[j0:j0 + b], q2_64, s2, k2buf[:b])
            src = source_of[j0:j0 + b]
            hit = src >= 0
            if hit.any():
                k1buf[:b] = 0.0
                k1buf[:b][hit] = k1[src[hit]]
                np.matmul(k1buf[:b], q1_64.T, out=alt[:b])
                alt[:b] *= s1
                st2.scores[:b][hit] = alt[:b][hit]
            st2.update(b, v2[j0:j0 + b])
    return st1.finish(out_dtype), st2.finish(out_dtype)


# ---------------------------------------------------------------- windows

@dataclass(frozen=True)
class WindowSpec:
    total_frames: int
    window: int
    tokens_per_frame: int = 1
    loop: bool = False

    def __post_init__(self):
        if self.total_frames < 1 or self.window < 1 or self.tokens_per_frame < 1:
            raise ValueError(f"invalid window spec {self}")


@dataclass(frozen=True)
class FrameWindow:
    """Frame-level admissibility plus the temporal position each admitted key frame takes."""

    mask: np.ndarray        # (L, L) bool, [query frame, key frame]
    positions: np.ndarray   # (L, L) int, effective temporal position of the key frame
    tokens_per_frame: int = field(default=1)

    def token_mask(self) -> np.ndarray:
        t = self.tokens_per_frame
        return np.repeat(np.repeat(self.mask, t, axis=0), t, axis=1)


def build_window_mask(ws: WindowSpec) -> FrameWindow:
    """Query frame k sees frames ``[k - l//2, k + l//2]``.

    With ``loop`` a frame ``k < l/2`` also sees the tail frames ``j`` with
    ``L + k - l/2 < j <= L``, placed at temporal position ``j - L`` so they
    read as the frames just before frame 0.
    """
    L, l = ws.total_frames, ws.window
    half = l // 2
    k = np.arange(L)[:, None]
    j = np.arange(L)[None, :]
    mask = np.abs(j - k) <= half
    positions = np.broadcast_to(j, (L, L)).copy()
    if ws.loop:
        # 0-based frames on both sides; a tail frame already inside the
        # ordinary window keeps its ordinary position.
        for q in range(L):
            if not q < l / 2:
                continue
            for jj in range(L):
                if L + q - l / 2 < jj <= L and not mask[q, jj]:
                    mask[q, jj] = True
                    positions[q, jj] = jj - L
    return FrameWindow(mask, positions, ws.tokens_per_frame)


def attn_masked(q, k, v, mask, out_dtype=np.float32) -> np.ndarray:
    """Attention where each query row uses only its admitted keys.

    Disallowed keys are dropped from the key set rather than given a large
    negative logit, so they touch neither the max nor the denominator.
    """
    q, k, v = _check(q, k, v)
    mask = np.asarray(mask, dtype=bool)
    n, m = q.shape[0], k.shape[0]
    if mask.shape != (n, m):
        raise ShapeMismatchError(f"mask shape {mask.shape} does not match ({n}, {m})")
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise EmptyRowError(f"query rows with no admitted keys: {np.flatnonzero(counts == 0)[:8].tolist()}")
    out = np.empty((n, v.shape[1]), dtype=out_dtype)
    # rows sharing a key pattern run as one streaming call
    patterns: dict[bytes, list[int]] = {}
    for r in range(n):
        patterns.setdefault(np.packbits(mask[r]).tobytes(), []).append(r)
    for rows in patterns.values():
        cols = np.flatnonzero(mask[rows[0]])
        out[rows] = attn_streaming(q[rows], k[cols], v[cols], out_dtype=out_dtype)
    return out
