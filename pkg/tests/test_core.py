import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pvedit.core import (
    Purpose,
    RngStream,
    decode_tensor,
    encode_tensor,
    export_frames,
    gaussian,
    load_tensor,
    quantize,
    save_tensor,
)
from pvedit.errors import FormatError, InvalidShapeError, TruncationError, UnsupportedChannelsError

MASK64 = (1 << 64) - 1


def splitmix_ref(x: int) -> int:
    """Plain-integer SplitMix64 finalizer, independent of the numpy version."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def test_stream_words_match_integer_reference():
    s = RngStream(12345, Purpose.SAMPLING)
    key = splitmix_ref(splitmix_ref(12345) ^ int(Purpose.SAMPLING))
    words = s._words(0, 4)
    assert [int(w) for w in words] == [splitmix_ref(key ^ splitmix_ref(k)) for k in range(4)]


def test_gaussian_deterministic_single_value():
    a = gaussian(RngStream(0, Purpose.INIT_NOISE), (1, 1, 1, 1))
    b = gaussian(RngStream(0, Purpose.INIT_NOISE), (1, 1, 1, 1))
    assert a.dtype == np.float32 and a.shape == (1, 1, 1, 1)
    assert np.array_equal(a, b)


def test_gaussian_seeds_differ_elementwise():
    a = gaussian(RngStream(0), (2, 4, 4, 1))
    b = gaussian(RngStream(1), (2, 4, 4, 1))
    assert np.all(a != b)


def test_purposes_are_separate_streams():
    a = gaussian(RngStream(3, Purpose.TRAINING), (64,))
    b = gaussian(RngStream(3, Purpose.DATASET), (64,))
    assert not np.array_equal(a, b)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.4


def test_gaussian_moments():
    # 4*8*8*3 = 768 per draw; 131 draws pooled gives > 1e5 samples
    s = RngStream(7, Purpose.SAMPLING)
    pooled = np.concatenate([gaussian(s.split(k), (4, 8, 8, 3)).ravel() for k in range(131)])
    assert pooled.size >= 100_000
    assert abs(pooled.mean()) < 0.02
    assert abs(pooled.var() - 1.0) < 0.02


def test_rng_replay_random_triples():
    meta = np.random.default_rng(0)
    for _ in range(1000):
        seed = int(meta.integers(0, 2**63))
        purpose = Purpose(int(meta.integers(1, 5)))
        idx = int(meta.integers(0, 1000))
        a = RngStream(seed, purpose)._uniform_at(idx, 1)
        b = RngStream(seed, purpose)._uniform_at(idx, 1)
        assert a[0] == b[0]


def test_uniform_open_interval():
    u = RngStream(5).uniform(10_000)
    assert u.min() > 0.0 and u.max() <= 1.0


@pytest.mark.parametrize("dims", [(0, 1, 1, 1), (1, -2, 1, 1)])
def test_gaussian_rejects_bad_extent(dims):
    with pytest.raises(InvalidShapeError):
        gaussian(RngStream(0), dims)


@settings(max_examples=40, deadline=None)
@given(st.tuples(*[st.integers(1, 4)] * 4), st.integers(0, 2**32))
def test_tensor_roundtrip_bytes(tmp_path_factory, dims, seed):
    t = gaussian(RngStream(seed), dims) * 1e3
    path = tmp_path_factory.mktemp("vten") / "t.vten"
    save_tensor(t, path)
    back = load_tensor(path)
    assert back.tobytes() == t.tobytes() and back.shape == t.shape
    assert path.read_bytes() == encode_tensor(back)


def test_vten_layout():
    t = np.arange(6, dtype=np.float32).reshape(1, 2, 3, 1)
    raw = encode_tensor(t)
    assert raw[:4] == b"VTEN"
    assert struct.unpack_from("<HH4I", raw, 4) == (1, 4, 1, 2, 3, 1)
    assert np.frombuffer(raw[24:], "<f4").tolist() == list(range(6))


def test_bad_magic(tmp_path):
    raw = bytearray(encode_tensor(np.zeros((1, 1, 1, 1), np.float32)))
    raw[:4] = b"XXXX"
    p = tmp_path / "bad.vten"
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_tensor(p)


def test_bad_rank():
    raw = bytearray(encode_tensor(np.zeros((1, 1, 1, 1), np.float32)))
    struct.pack_into("<H", raw, 6, 3)
    with pytest.raises(FormatError):
        decode_tensor(bytes(raw))


def test_truncated_payload():
    raw = encode_tensor(np.zeros((2, 3, 4, 1), np.float32))
    with pytest.raises(TruncationError):
        decode_tensor(raw[:-4])   # 23 of 24 floats


def test_export_zero_and_one(tmp_path):
    paths = export_frames(np.zeros((1, 2, 2, 3), np.float32), tmp_path / "z")
    raw = paths[0].read_bytes()
    assert raw.startswith(b"P6\n2 2\n255\n")
    assert raw[len(b"P6\n2 2\n255\n"):] == b"\x00" * 12
    paths = export_frames(np.ones((2, 2, 2, 1), np.float32), tmp_path / "o")
    assert [p.name for p in paths] == ["frame_0000.ppm", "frame_0001.ppm"]
    raw = paths[1].read_bytes()
    assert raw.startswith(b"P5") and raw.endswith(b"\xff" * 4)


def test_quantize_half_up_and_clamp():
    assert quantize(np.array([0.5, -1.0, 2.0, 1.0 / 255 * 0.5], np.float32)).tolist() == [128, 0, 255, 1]


def test_export_rejects_channels(tmp_path):
    with pytest.raises(UnsupportedChannelsError):
        export_frames(np.zeros((1, 2, 2, 2), np.float32), tmp_path)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-0.5, 1.5, width=32), min_size=1, max_size=20), st.floats(0, 0.5, width=32))
def test_quantize_monotone(xs, delta):
    x = np.array(xs, np.float32)
    y = x + np.float32(delta)
    assert np.all(quantize(x) <= quantize(y))


def test_mixed_draws_never_reuse_words():
    s = RngStream(9)
    s.normal64(3)
    assert s.counter == 6
    u = s.uniform(1)
    assert u[0] == RngStream(9)._uniform_at(6, 1)[0]
