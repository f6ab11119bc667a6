import numpy as np
import pytest
import torch

from pvedit.core import Purpose, RngStream, gaussian
from pvedit.denoiser.dit import ToyDiT, ToyDiTConfig
from pvedit.denoiser.gmm import GmmDenoiser, GmmOracle, two_component
from pvedit.errors import ContractError, DenoiserError, FormatError, ShapeMismatchError, TruncationError
from pvedit.inversion import (
    LatentTrack,
    decode_track,
    encode_track,
    invert,
    load_track,
    mix_tracks,
    replay,
    save_track,
)
from pvedit.schedulers import make_linear_schedule

SCHED = make_linear_schedule()
SHAPE = (2, 2, 2, 2)   # flattened dimension 16


@pytest.fixture(scope="module")
def gmm():
    return GmmDenoiser(two_component(16), SCHED)


@pytest.fixture(scope="module")
def tiny_dit():
    torch.manual_seed(0)
    return ToyDiT(ToyDiTConfig(frames=2, height=4, width=4, patch=2, dim=16, heads=2, layers=1, max_frames=2)).eval()


@pytest.mark.parametrize("alpha", [0.25, 0.5, 0.9])
@pytest.mark.parametrize("sampler,stride", [("ddpm", 1), ("ddim", 1), ("ddim", 20)])
def test_roundtrip_gmm(gmm, alpha, sampler, stride):
    v0 = gaussian(RngStream(1, Purpose.DATASET), SHAPE)
    track = invert(v0, alpha, gmm, None, SCHED, RngStream(2, Purpose.INIT_NOISE), sampler=sampler, stride=stride)
    assert np.abs(replay(track, gmm, None, SCHED) - v0).max() <= 1e-4


def test_roundtrip_toy_model_with_guidance(tiny_dit):
    v0 = gaussian(RngStream(3, Purpose.DATASET), (2, 4, 4, 3))
    prompt = (1, 4, 8, 11, 13)
    track = invert(v0, 0.5, tiny_dit, prompt, SCHED, RngStream(4), guidance_scale=7.0)
    out = replay(track, tiny_dit, prompt, SCHED, guidance_scale=7.0)
    assert np.abs(out - v0).max() <= 1e-4


def test_other_prompt_changes_replay(tiny_dit):
    v0 = gaussian(RngStream(3, Purpose.DATASET), (2, 4, 4, 3))
    track = invert(v0, 0.25, tiny_dit, (1, 4, 8, 11, 13), SCHED, RngStream(4))
    out = replay(track, tiny_dit, (2, 4, 8, 11, 13), SCHED)
    assert np.abs(out - v0).max() > 0


def test_other_denoiser_breaks_roundtrip(gmm):
    v0 = gaussian(RngStream(5, Purpose.DATASET), SHAPE)
    track = invert(v0, 0.5, gmm, None, SCHED, RngStream(6))
    other = GmmDenoiser(two_component(16, offset=-1.0, var=0.5), SCHED)
    assert np.abs(replay(track, other, None, SCHED) - v0).max() > 1e-4


def test_alpha_zero_empty_track(gmm):
    v0 = gaussian(RngStream(7), SHAPE)
    track = invert(v0, 0.0, gmm, None, SCHED, RngStream(8))
    assert track.alpha_steps == 0 and track.noises == []
    assert np.array_equal(track.start, v0)
    assert np.array_equal(replay(track, gmm, None, SCHED), v0)


def test_invert_deterministic(gmm):
    v0 = gaussian(RngStream(9), SHAPE)
    a = invert(v0, 0.25, gmm, None, SCHED, RngStream(10))
    b = invert(v0, 0.25, gmm, None, SCHED, RngStream(10))
    assert encode_track(a) == encode_track(b)


def test_track_layout(gmm):
    v0 = gaussian(RngStream(9), SHAPE)
    t = invert(v0, 0.01, gmm, None, SCHED, RngStream(10))
    assert t.alpha_steps == 10 and len(t.noises) == 10 and t.steps[0] == 10 and t.steps[-1] == 0


def test_truncated_track_rejected(gmm):
    v0 = gaussian(RngStream(11), SHAPE)
    t = invert(v0, 0.02, gmm, None, SCHED, RngStream(12))
    short = LatentTrack(t.alpha_steps, t.start, t.noises[:-1], t.sampler)
    with pytest.raises(ContractError):
        replay(short, gmm, None, SCHED)


def test_sampler_tag_mismatch(gmm):
    v0 = gaussian(RngStream(11), SHAPE)
    t = invert(v0, 0.02, gmm, None, SCHED, RngStream(12))
    with pytest.raises(ContractError):
        replay(t, gmm, None, SCHED, sampler="ddim")


def test_noise_residuals_centered_1d():
    # 10^4 independent 1-D inversions in one batch; look at n_i at a fixed step
    oracle = GmmOracle(np.array([0.3, 0.7]), np.array([[-1.0], [1.5]]), np.array([0.2, 0.4]))
    den = GmmDenoiser(oracle, SCHED)
    v0 = oracle.sample(RngStream(13, Purpose.DATASET), 10_000).reshape(10_000, 1, 1, 1).astype(np.float32)
    track = invert(v0, 0.1, den, None, SCHED, RngStream(14))
    n = track.noise_at(50).astype(np.float64).ravel()
    assert abs(n.mean()) <= 3 * n.std(ddof=1) / np.sqrt(n.size)


class _Bad:
    null_prompt = None

    def __init__(self, out):
        self.out = out

    def predict_eps(self, v, i, prompt):
        return self.out(v)


def test_denoiser_errors():
    v0 = np.zeros((1, 1, 1, 2), np.float32)
    with pytest.raises(DenoiserError):
        invert(v0, 0.01, _Bad(lambda v: np.full_like(v, np.nan)), None, SCHED, RngStream(0))
    with pytest.raises(ShapeMismatchError):
        invert(v0, 0.01, _Bad(lambda v: np.zeros(3, np.float32)), None, SCHED, RngStream(0))


def test_mix_tracks_arithmetic():
    ones = [np.ones(SHAPE, np.float32) for _ in range(3)]
    a = LatentTrack(3, np.ones(SHAPE, np.float32), ones)
    b = LatentTrack(3, -np.ones(SHAPE, np.float32), [-x for x in ones])
    assert all(np.array_equal(x, y) for x, y in zip(mix_tracks(a, b, 1.0).noises, a.noises))
    assert all(np.array_equal(x, y) for x, y in zip(mix_tracks(a, b, 0.0).noises, b.noises))
    half = mix_tracks(a, b, 0.5)
    assert all(np.all(n == 0) for n in half.noises) and np.all(half.start == 0)
    with pytest.raises(ShapeMismatchError):
        mix_tracks(a, LatentTrack(2, a.start, ones[:2]), 0.5)


def test_vtrk_roundtrip(tmp_path, gmm):
    v0 = gaussian(RngStream(15), SHAPE)
    t = invert(v0, 0.05, gmm, None, SCHED, RngStream(16), sampler="ddim", stride=7)
    save_track(t, tmp_path / "t.vtrk")
    back = load_track(tmp_path / "t.vtrk")
    assert (back.alpha_steps, back.sampler, back.stride) == (50, "ddim", 7)
    assert encode_track(back) == encode_track(t)
    raw = (tmp_path / "t.vtrk").read_bytes()
    assert raw[:4] == b"VTRK" and raw[4] == 1
    with pytest.raises(FormatError):
        decode_track(b"XXXX" + raw[4:])
    with pytest.raises(TruncationError):
        decode_track(raw[:-8])
