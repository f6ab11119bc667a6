import itertools
import math
from collections import Counter

import numpy as np
import pytest

from pvedit.core import RngStream, load_tensor
from pvedit.errors import EmptyMaskError, ShapeMismatchError, SpecError
from pvedit.synth import (
    BACKGROUNDS,
    COLORS,
    SLOTS,
    PSNR_CAP,
    SceneSpec,
    decode_prompt,
    encode_prompt,
    dataset_stream,
    fulfillment_score,
    gen_video,
    make_dataset,
    psnr_masked,
    read_manifest,
    write_dataset,
)

FIXED = dict(origin=(4, 6), dot=(20, 20))


@pytest.mark.parametrize("palette", [COLORS, BACKGROUNDS])
def test_palette_pairwise_distance(palette):
    for a, b in itertools.combinations(palette.values(), 2):
        assert np.linalg.norm(np.subtract(a, b)) >= 0.5


def test_prompt_roundtrip_all_specs():
    for shape, color, bg in itertools.product(("square", "circle", "triangle"), COLORS, BACKGROUNDS):
        spec = SceneSpec(shape=shape, color=color, background=bg, extra="dot", motion="drift-down")
        assert decode_prompt(encode_prompt(spec)) == spec


def test_decode_rejects_wrong_slot():
    toks = list(encode_prompt(SceneSpec()))
    toks[0], toks[1] = toks[1], toks[0]
    with pytest.raises(SpecError):
        decode_prompt(toks)


def test_gen_video_colors_and_masks():
    lv = gen_video(SceneSpec(extra="dot", **FIXED))
    v, m = lv.video, lv.masks
    assert v.shape == (8, 32, 32, 3) and v.dtype == np.float32
    assert np.all(v[m["shape"]] == np.float32(COLORS["red"]))
    assert np.all(v[m["background"]] == np.float32(BACKGROUNDS["black"]))
    assert m["shape"][0].sum() == 100                      # 10x10 square
    assert not (m["shape"] & m["extra"]).any()
    assert not (m["background"] & (m["shape"] | m["extra"])).any()
    assert (m["background"] | m["shape"] | m["extra"]).all()


def test_drift_moves_shape():
    lv = gen_video(SceneSpec(motion="drift-right", **FIXED))
    cols = [np.flatnonzero(lv.masks["shape"][f].any(0))[0] for f in range(8)]
    assert cols == [6, 8, 10, 12, 14, 16, 18, 20]
    assert lv.masks["motion"].sum() > lv.masks["shape"].sum()


def test_geometry_deterministic_per_stream():
    a = gen_video(SceneSpec(), RngStream(3))
    b = gen_video(SceneSpec(), RngStream(3))
    assert np.array_equal(a.video, b.video)
    with pytest.raises(SpecError):
        gen_video(SceneSpec())


def test_invalid_spec():
    with pytest.raises(SpecError):
        gen_video(SceneSpec(color="pink", **FIXED))
    with pytest.raises(SpecError):
        gen_video(SceneSpec(height=8, width=8, **FIXED))


def test_psnr_identical_is_cap():
    v = gen_video(SceneSpec(**FIXED)).video
    assert psnr_masked(v, v, np.ones(v.shape[:-1], bool)) == PSNR_CAP


def test_psnr_constant_difference():
    a = np.full((2, 4, 4, 3), 0.5, np.float32)
    b = a + np.float32(0.1)
    # 0.6 - 0.5 is not exactly 0.1 in float32; 20 dB holds to float precision
    assert psnr_masked(a, b, np.ones((2, 4, 4), bool)) == pytest.approx(20.0, abs=1e-5)


def test_psnr_random_vs_float64_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.random((3, 5, 5, 3), np.float32), rng.random((3, 5, 5, 3), np.float32)
    mask = rng.random((3, 5, 5)) < 0.4
    diff = (a.astype(np.float64) - b.astype(np.float64))[mask]
    ref = 10 * math.log10(1 / np.mean(diff ** 2))
    assert abs(psnr_masked(a, b, mask) - ref) <= 1e-6


def test_psnr_errors():
    a = np.zeros((1, 2, 2, 3), np.float32)
    with pytest.raises(EmptyMaskError):
        psnr_masked(a, a, np.zeros((1, 2, 2), bool))
    with pytest.raises(ShapeMismatchError):
        psnr_masked(a, a[:, :1], np.ones((1, 2, 2), bool))


def test_fulfillment_target_render_is_one():
    tgt = SceneSpec(color="blue", **FIXED)
    lv = gen_video(tgt)
    assert fulfillment_score(lv.video, tgt, lv.masks["color"]) == 1.0


def test_fulfillment_palette_distance_oracle():
    # the two most distant shape colors
    a, b = max(itertools.combinations(COLORS, 2), key=lambda p: np.linalg.norm(np.subtract(COLORS[p[0]], COLORS[p[1]])))
    src = gen_video(SceneSpec(color=a, **FIXED))
    tgt = SceneSpec(color=b, **FIXED)
    dist = np.float32(COLORS[a]).astype(np.float64) - np.float32(COLORS[b]).astype(np.float64)
    rmse = math.sqrt(np.mean(dist ** 2))
    expect = 1 - min(rmse / 0.5, 1.0)
    assert fulfillment_score(src.video, tgt, src.masks["color"]) == pytest.approx(expect, abs=1e-12)


def test_fulfillment_empty_mask():
    lv = gen_video(SceneSpec(**FIXED))
    with pytest.raises(EmptyMaskError):
        fulfillment_score(lv.video, lv.spec, np.zeros(lv.video.shape[:-1], bool))


def test_dataset_balanced_and_deterministic():
    items = make_dataset(500, dataset_stream(0))
    for slot in SLOTS:
        counts = Counter(getattr(it.spec, slot) for it in items)
        expect = 500 / len(counts)
        assert all(abs(c - expect) <= 0.1 * expect for c in counts.values()), (slot, counts)
    again = make_dataset(5, dataset_stream(0))
    assert all(np.array_equal(x.video, y.video) for x, y in zip(items, again))
    with pytest.raises(SpecError):
        make_dataset(0, dataset_stream(0))


def test_write_dataset(tmp_path):
    items = make_dataset(3, dataset_stream(1))
    manifest = write_dataset(items, tmp_path)
    recs = read_manifest(manifest)
    assert [r["index"] for r in recs] == [0, 1, 2]
    assert np.array_equal(load_tensor(tmp_path / recs[2]["video"]), items[2].video)
    assert tuple(recs[1]["prompt"]) == items[1].prompt
