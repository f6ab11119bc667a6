"""DDPM-latent extraction: per-step noises that make the reverse chain replay a video.

A track is built in three passes:

1. a stochastic forward chain ``v_0 -> v_1 -> ... -> v_a`` on the sampler's
   timeline (fresh Gaussian per transition);
2. starting from ``v_a``, each reverse step solves for the injected noise that
   lands exactly on the next forward state;
3. the solved noise is applied through the same step function used by
   :func:`replay`, so the replayed trajectory is reproduced bit for bit.

The last DDPM step has zero posterior variance. There the residual is stored
as an additive correction (``D_1(v_1) + n_1``), the convention used for
noise-free samplers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

import numpy as np

from .core import RngStream, atomic_write_bytes, decode_tensor, encode_tensor, gaussian
from .errors import ContractError, DenoiserError, DivisionGuardError, FormatError, ShapeMismatchError, TruncationError
from .schedulers import (
    SAMPLERS,
    NoiseSchedule,
    cfg_combine,
    ddim_step,
    ddpm_mean,
    ddpm_step,
    forward_step,
    round_steps,
    timeline,
)


class Denoiser(Protocol):
    null_prompt: Any

    def predict_eps(self, v: np.ndarray, i: int, prompt) -> np.ndarray: ...


def guided_eps(denoiser: Denoiser, v: np.ndarray, i: int, prompt, guidance_scale: float | None = None) -> np.ndarray:
    """Noise prediction, optionally combined with the unconditional one."""
    eps = np.asarray(denoiser.predict_eps(v, i, prompt), dtype=np.float32)
    if guidance_scale is not None:
        eps_u = np.asarray(denoiser.predict_eps(v, i, denoiser.null_prompt), dtype=np.float32)
        eps = cfg_combine(eps_u, eps, guidance_scale)
    if eps.shape != np.shape(v):
        raise ShapeMismatchError(f"denoiser returned shape {eps.shape} for input {np.shape(v)}")
    if not np.all(np.isfinite(eps)):
        raise DenoiserError(f"non-finite noise prediction at step {i}")
    return eps


def reverse_step(sampler: str, v: np.ndarray, eps: np.ndarray, i: int, i_prev: int, n, sched: NoiseSchedule,
                 stream: RngStream | None = None) -> np.ndarray:
    """One reverse step with optional injected noise.

    DDPM needs consecutive steps. At ``i = 1`` its stochastic term vanishes
    and an injected ``n`` is added to the output instead.
    """
    if sampler == "ddpm":
        if i_prev != i - 1:
            raise ContractError(f"ddpm steps must be consecutive, got {i} -> {i_prev}")
        if i == 1:
            out = ddpm_step(v, eps, 1, None, sched)
            if n is not None:
                out = (out.astype(np.float64) + np.asarray(n, dtype=np.float64)).astype(np.float32)
            return out
        return ddpm_step(v, eps, i, n, sched, stream)
    if sampler == "ddim":
        return ddim_step(v, eps, i, i_prev, n, sched)
    raise ContractError(f"unknown sampler {sampler!r}; expected one of {SAMPLERS}")


def solve_noise(sampler: str, target: np.ndarray, v: np.ndarray, eps: np.ndarray, i: int, i_prev: int,
                sched: NoiseSchedule) -> np.ndarray:
    """Noise that makes :func:`reverse_step` from ``v`` land on ``target``."""
    target = np.asarray(target, dtype=np.float64)
    if sampler == "ddpm":
        mu = ddpm_mean(v, eps, i, sched)
        if i == 1:
            # match the float32 rounding of the noise-free output in reverse_step
            return (target - mu.astype(np.float32).astype(np.float64)).astype(np.float32)
        sigma = sched.sigma(i)
        if sigma <= 0.0:
            raise DivisionGuardError(f"posterior std is zero at step {i} > 1; schedule is degenerate")
        return ((target - mu) / sigma).astype(np.float32)
    base = ddim_step(v, eps, i, i_prev, None, sched)
    return (target - base.astype(np.float64)).astype(np.float32)


@dataclass
class LatentTrack:
    """Noisy start plus the injected noises for each visited reverse step.

    ``noises[k]`` belongs to the transition ``steps[k] -> steps[k + 1]``; with
    ``stride == 1`` that is n_a, n_{a-1}, ..., n_1.
    """

    alpha_steps: int
    start: np.ndarray
    noises: list = field(default_factory=list)
    sampler: str = "ddpm"
    stride: int = 1

    @property
    def steps(self) -> list[int]:
        return timeline(self.alpha_steps, self.stride)

    def validate(self) -> None:
        if self.sampler not in SAMPLERS:
            raise ContractError(f"unknown sampler tag {self.sampler!r}")
        if self.sampler == "ddpm" and self.stride != 1:
            raise ContractError("ddpm tracks must use stride 1")
        expected = len(self.steps) - 1
        if len(self.noises) != expected:
            raise ContractError(f"track holds {len(self.noises)} noises, its timeline needs {expected}")
        for n in self.noises:
            if np.shape(n) != np.shape(self.start):
                raise ContractError(f"noise shape {np.shape(n)} differs from start {np.shape(self.start)}")
            if not np.all(np.isfinite(n)):
                raise ContractError("track contains non-finite noise")

    def noise_at(self, i: int):
        """Noise injected on the reverse step leaving ``i``."""
        return self.noises[self.steps.index(i)]


def invert(v0, alpha: float, denoiser: Denoiser, prompt, sched: NoiseSchedule, stream: RngStream, *,
           sampler: str = "ddpm", stride: int = 1, guidance_scale: float | None = None) -> LatentTrack:
    """Extract the noises that reproduce ``v0`` from its ``round(alpha T)``-step noisy version."""
    if not (0.0 <= alpha <= 1.0):
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    if sampler == "ddpm" and stride != 1:
        raise ContractError("ddpm inversion requires stride 1")
    v0 = np.asarray(v0, dtype=np.float32)
    a_steps = round_steps(alpha, sched.T)
    steps = timeline(a_steps, stride)
    if a_steps == 0:
        return LatentTrack(0, v0.copy(), [], sampler, stride)

    # forward chain in ascending step order
    ascending = steps[::-1]
    states = {0: v0}
    v = v0
    for i_prev, i in zip(ascending[:-1], ascending[1:]):
        v = forward_step(v, i_prev, i, gaussian(stream, v0.shape), sched)
        states[i] = v

    start = states[a_steps]
    noises = []
    cur = start
    for i, i_prev in zip(steps[:-1], steps[1:]):
        eps = guided_eps(denoiser, cur, i, prompt, guidance_scale)
        n = solve_noise(sampler, states[i_prev], cur, eps, i, i_prev, sched)
        noises.append(n)
        cur = reverse_step(sampler, cur, eps, i, i_prev, n, sched)
    return LatentTrack(a_steps, start.copy(), noises, sampler, stride)


def replay(track: LatentTrack, denoiser: Denoiser, prompt, sched: NoiseSchedule, *, sampler: str | None = None,
           guidance_scale: float | None = None) -> np.ndarray:
    """Run the tagged sampler from ``track.start`` injecting the stored noises."""
    track.validate()
    if sampler is not None and sampler != track.sampler:
        raise ContractError(f"track was extracted for {track.sampler!r}, replay requested {sampler!r}")
    steps = track.steps
    cur = np.asarray(track.start, dtype=np.float32)
    for k, (i, i_prev) in enumerate(zip(steps[:-1], steps[1:])):
        eps = guided_eps(denoiser, cur, i, prompt, guidance_scale)
        cur = reverse_step(track.sampler, cur, eps, i, i_prev, track.noises[k], sched)
    return cur


def mix_tracks(track_prev: LatentTrack, track_ref: LatentTrack, lam: float) -> LatentTrack:
    """Element-wise blend ``lam * prev + (1 - lam) * ref`` of starts and noises."""
    for t in (track_prev, track_ref):
        t.validate()
    if (track_prev.alpha_steps, track_prev.stride, track_prev.sampler) != (
            track_ref.alpha_steps, track_ref.stride, track_ref.sampler):
        raise ShapeMismatchError("tracks differ in length, stride or sampler")
    if np.shape(track_prev.start) != np.shape(track_ref.start):
        raise ShapeMismatchError(f"track shapes differ: {np.shape(track_prev.start)} vs {np.shape(track_ref.start)}")
    if lam == 1.0:
        return LatentTrack(track_prev.alpha_steps, track_prev.start.copy(), [n.copy() for n in track_prev.noises],
                           track_prev.sampler, track_prev.stride)
    if lam == 0.0:
        return LatentTrack(track_ref.alpha_steps, track_ref.start.copy(), [n.copy() for n in track_ref.noises],
                           track_ref.sampler, track_ref.stride)

    def blend(a, b):
        return (lam * np.asarray(a, np.float64) + (1.0 - lam) * np.asarray(b, np.float64)).astype(np.float32)

    return LatentTrack(track_prev.alpha_steps, blend(track_prev.start, track_ref.start),
                       [blend(a, b) for a, b in zip(track_prev.noises, track_ref.noises)],
                       track_prev.sampler, track_prev.stride)


# ---------------------------------------------------------------- VTRK format

VTRK_MAGIC = b"VTRK"
_TAGS = {"ddpm": 0, "ddim": 1}
_VTRK_HEADER = struct.Struct("<4sBII")


def encode_track(track: LatentTrack) -> bytes:
    track.validate()
    parts = [_VTRK_HEADER.pack(VTRK_MAGIC, _TAGS[track.sampler], track.alpha_steps, track.stride)]
    for t in [track.start, *track.noises]:
        parts.append(encode_tensor(np.asarray(t)))
    return b"".join(parts)


def decode_track(buf: bytes) -> LatentTrack:
    if len(buf) < _VTRK_HEADER.size:
        raise TruncationError("VTRK header truncated")
    magic, tag, a_steps, stride = _VTRK_HEADER.unpack_from(buf, 0)
    if magic != VTRK_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {VTRK_MAGIC!r}")
    inv = {v: k for k, v in _TAGS.items()}
    if tag not in inv:
        raise FormatError(f"unknown sampler tag byte {tag}")
    if stride < 1:
        raise FormatError("stride must be positive")
    offset = _VTRK_HEADER.size
    start, offset = decode_tensor(buf, offset)
    noises = []
    for _ in range(len(timeline(a_steps, stride)) - 1):
        n, offset = decode_tensor(buf, offset)
        noises.append(n)
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after VTRK payload")
    track = LatentTrack(a_steps, start, noises, inv[tag], stride)
    track.validate()
    return track


def save_track(track: LatentTrack, path) -> None:
    atomic_write_bytes(path, encode_track(track))


def load_track(path) -> LatentTrack:
    return decode_track(Path(path).read_bytes())

