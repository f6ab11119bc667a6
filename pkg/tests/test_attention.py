import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pvedit.attention import (
    AuxMeter,
    ReplacementSpec,
    WindowSpec,
    attn_amr,
    attn_amr_naive,
    attn_masked,
    attn_naive,
    attn_streaming,
    build_window_mask,
    relative_error,
)
from pvedit.errors import EmptyRowError, IndexRangeError, ShapeMismatchError


def oracle(q, k, v, mask=None, replace=None):
    """Float64 softmax attention; ``replace`` is (logits, cols) overwriting columns."""
    q, k, v = (np.asarray(x, np.float64) for x in (q, k, v))
    s = q @ k.T / np.sqrt(q.shape[1])
    if replace is not None:
        src_logits, pairs = replace
        for a, b in pairs:
            s[:, b] = src_logits[:, a]
    out = np.zeros((q.shape[0], v.shape[1]))
    for r in range(q.shape[0]):
        cols = np.arange(k.shape[0]) if mask is None else np.flatnonzero(mask[r])
        row = s[r, cols]
        w = np.exp(row - row.max())
        out[r] = (w / w.sum()) @ v[cols]
    return out


def rand_inputs(rng, n, m, d, dv, scale=1.0):
    return (rng.standard_normal((n, d)).astype(np.float32) * scale,
            rng.standard_normal((m, d)).astype(np.float32),
            rng.standard_normal((m, dv)).astype(np.float32))


def test_single_key_returns_value():
    q, k, v = rand_inputs(np.random.default_rng(0), 1, 1, 3, 2)
    assert np.array_equal(attn_naive(q, k, v), v)
    q4 = np.random.default_rng(1).standard_normal((4, 3)).astype(np.float32)
    assert np.allclose(attn_streaming(q4, k, v), np.broadcast_to(v, (4, 2)), rtol=0, atol=0)


def test_identical_keys_average_values():
    rng = np.random.default_rng(2)
    q = rng.standard_normal((3, 4)).astype(np.float32)
    k = np.tile(rng.standard_normal((1, 4)).astype(np.float32), (5, 1))
    v = rng.standard_normal((5, 2)).astype(np.float32)
    assert np.allclose(attn_naive(q, k, v), v.astype(np.float64).mean(0), atol=1e-6)


def test_naive_vs_oracle_small():
    q, k, v = rand_inputs(np.random.default_rng(3), 7, 5, 3, 3)
    assert relative_error(attn_naive(q, k, v), oracle(q, k, v)) <= 1e-5


def test_extreme_logits_stay_finite():
    d = 1
    q = np.array([[1.0]], np.float32)
    k = np.array([[80.0], [-80.0], [79.5]], np.float32)
    v = np.array([[1.0], [2.0], [3.0]], np.float32)
    out = attn_streaming(q, k, v)
    assert np.all(np.isfinite(out))
    assert relative_error(out, oracle(q, k, v)) <= 1e-5


def test_streaming_matches_naive_random_200():
    rng = np.random.default_rng(4)
    for _ in range(200):
        n, m = rng.integers(1, 513, 2)
        d, dv = rng.integers(1, 33, 2)
        scale = rng.uniform(0.1, 80.0) * np.sqrt(d)
        q, k, v = rand_inputs(rng, n, m, d, dv)
        # rescale queries so logits reach up to about +-80
        q = (q / np.abs(q).max() * 80.0 / max(np.abs(k).max(), 1e-3) * np.sqrt(d) * min(scale, 1.0)).astype(np.float32)
        ref = attn_naive(q, k, v)
        assert relative_error(attn_streaming(q, k, v, block=int(rng.integers(1, 97))), ref) <= 1e-5


def test_amr_empty_spec_is_streaming():
    rng = np.random.default_rng(5)
    a1, a2 = rand_inputs(rng, 20, 30, 8, 4), rand_inputs(rng, 20, 25, 8, 4)
    o1, o2 = attn_amr(*a1, *a2, ReplacementSpec())
    assert np.array_equal(o2, attn_streaming(*a2))
    assert np.array_equal(o1, attn_streaming(*a1))


def test_amr_full_self_replacement():
    a = rand_inputs(np.random.default_rng(6), 16, 12, 8, 4)
    o1, o2 = attn_amr(*a, *a, ReplacementSpec.identity(range(12)))
    assert np.array_equal(o1, o2)


def test_amr_matches_oracle_random():
    rng = np.random.default_rng(7)
    for _ in range(40):
        n = int(rng.integers(1, 257))
        m1, m2 = 64, 64
        d1, d2 = int(rng.integers(1, 17)), int(rng.integers(1, 17))
        q1, k1, v1 = rand_inputs(rng, n, m1, d1, 8)
        q2, k2, v2 = rand_inputs(rng, n, m2, d2, 8)
        count = int(rng.integers(0, m2 + 1))
        dst = rng.choice(m2, count, replace=False)
        src = rng.integers(0, m1, count)
        spec = ReplacementSpec(list(zip(src.tolist(), dst.tolist())))
        logits1 = q1.astype(np.float64) @ k1.T.astype(np.float64) / np.sqrt(d1)
        ref2 = oracle(q2, k2, v2, replace=(logits1, spec.pairs))
        o1, o2 = attn_amr(q1, k1, v1, q2, k2, v2, spec, block=int(rng.integers(1, 80)))
        assert relative_error(o2, ref2) <= 1e-5
        assert relative_error(o1, oracle(q1, k1, v1)) <= 1e-5
        n1, n2 = attn_amr_naive(q1, k1, v1, q2, k2, v2, spec)
        assert relative_error(n2, ref2) <= 1e-5


def test_spec_validation():
    with pytest.raises(IndexRangeError):
        ReplacementSpec([(0, 1), (1, 1)]).validate(3, 3)
    with pytest.raises(IndexRangeError):
        ReplacementSpec([(3, 0)]).validate(3, 3)
    with pytest.raises(IndexRangeError):
        ReplacementSpec([(0, 5)]).validate(3, 3)
    a = rand_inputs(np.random.default_rng(8), 4, 3, 2, 2)
    b = rand_inputs(np.random.default_rng(9), 5, 3, 2, 2)
    with pytest.raises(ShapeMismatchError):
        attn_amr(*a, *b, ReplacementSpec())


def test_streaming_aux_memory_constant_in_m():
    rng = np.random.default_rng(10)
    peaks = []
    for m in (128, 512, 1024, 4096):
        q, k, v = rand_inputs(rng, 256, m, 64, 64)
        meter = AuxMeter()
        attn_streaming(q, k, v, meter=meter)
        peaks.append(meter.peak)
    assert len(set(peaks)) == 1


def test_amr_aux_memory_constant_in_m():
    rng = np.random.default_rng(11)
    peaks = []
    for m in (128, 1024, 4096):
        a1, a2 = rand_inputs(rng, 64, m, 16, 16), rand_inputs(rng, 64, m, 16, 16)
        meter = AuxMeter()
        attn_amr(*a1, *a2, ReplacementSpec([(j, j) for j in range(0, m, 8)]), meter=meter)
        peaks.append(meter.peak)
    assert len(set(peaks)) == 1


# ---------------------------------------------------------------- windows


def brute_window(L, l, k, loop):
    """Frames admitted by query frame k with their effective positions.

    The loop inequality L + k - l/2 < j <= L is read with 0-based frame
    indices j in [0, L); doubled to stay in integers.
    """
    h = l // 2
    got = {j: j for j in range(L) if abs(j - k) <= h}
    if loop and 2 * k < l:
        for j in range(L):
            if 2 * (L + k) - l < 2 * j and j not in got:
                got[j] = j - L
    return got


def table(fw, k):
    return {j: int(fw.positions[k, j]) for j in np.flatnonzero(fw.mask[k])}


def test_window_interval_example():
    fw = build_window_mask(WindowSpec(10, 4))
    assert sorted(np.flatnonzero(fw.mask[5])) == [3, 4, 5, 6, 7]


def test_loop_boundary_example():
    fw = build_window_mask(WindowSpec(10, 4, loop=True))
    assert table(fw, 0) == {0: 0, 1: 1, 2: 2, 9: -1}


def test_window_covering_everything():
    fw = build_window_mask(WindowSpec(6, 12))
    assert fw.mask.all()


@pytest.mark.parametrize("L,l", list(itertools.product(range(1, 9), range(1, 10))))
@pytest.mark.parametrize("loop", [False, True])
def test_window_enumeration(L, l, loop):
    fw = build_window_mask(WindowSpec(L, l, loop=loop))
    for k in range(L):
        assert table(fw, k) == brute_window(L, l, k, loop)


def test_masked_all_true_equals_streaming():
    q, k, v = rand_inputs(np.random.default_rng(12), 9, 11, 4, 3)
    assert np.array_equal(attn_masked(q, k, v, np.ones((9, 11), bool)), attn_streaming(q, k, v))


def test_masked_single_key_rows():
    q, k, v = rand_inputs(np.random.default_rng(13), 6, 6, 4, 3)
    mask = np.eye(6, dtype=bool)[::-1]
    assert np.array_equal(attn_masked(q, k, v, mask), v[::-1])


def test_masked_empty_row():
    q, k, v = rand_inputs(np.random.default_rng(14), 2, 3, 4, 3)
    mask = np.array([[True, False, False], [False, False, False]])
    with pytest.raises(EmptyRowError):
        attn_masked(q, k, v, mask)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 24), st.integers(1, 24), st.integers(0, 2**31))
def test_masked_vs_oracle(n, m, seed):
    rng = np.random.default_rng(seed)
    q, k, v = rand_inputs(rng, n, m, 5, 3, scale=4.0)
    mask = rng.random((n, m)) < 0.5
    mask[np.arange(n), rng.integers(0, m, n)] = True
    assert relative_error(attn_masked(q, k, v, mask), oracle(q, k, v, mask)) <= 1e-5


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 16), st.integers(0, 2**31))
def test_masked_permutation_equivariant(m, seed):
    rng = np.random.default_rng(seed)
    q, k, v = rand_inputs(rng, 4, m, 5, 3)
    mask = rng.random((4, m)) < 0.6
    mask[:, 0] = True
    perm = rng.permutation(m)
    a = attn_masked(q, k, v, mask)
    b = attn_masked(q, k[perm], v[perm], mask[:, perm])
    assert np.allclose(a, b, rtol=1e-5, atol=1e-6)
