"""Preservation-controlled dual generation and the progression controller.

One subtask runs two branches from the same noisy start: ``orig`` with the
current prompt and ``edit`` with the next one. Inside the control interval
``beta T < i <= alpha T`` the edit branch injects the stored latents and
borrows the orig branch's cross-attention maps; below it both branches
denoise freely. A progression chains subtasks that each change a few prompt
slots.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .attention import ReplacementSpec
from .core import Purpose, RngStream
from .denoiser.dit import ToyDiT, predict_eps_paired
from .errors import ConfigError, ContractError, PipelineError, ShapeMismatchError
from .inversion import LatentTrack, guided_eps, invert, mix_tracks, reverse_step
from .schedulers import SAMPLERS, NoiseSchedule, round_steps
from .synth import SLOTS

# edit order for attribute slots when decomposing a task
SLOT_PRIORITY = ("background", "shape", "color", "extra", "motion")


@dataclass(frozen=True)
class ControlConfig:
    alpha: float = 0.9
    beta: float = 0.5
    guidance_scale: float = 7.0
    lam: float = 0.5
    max_subtasks: int = 6
    sampler: str = "ddpm"
    stride: int = 1
    # attention columns the edit branch borrows; None means every prompt slot
    amr_slots: tuple | None = None

    def validate(self) -> None:
        if not (0.0 < self.alpha <= 1.0) and self.alpha != 0.0:
            raise ConfigError(f"edit.alpha must lie in (0, 1], got {self.alpha}")
        if not (0.0 <= self.beta < self.alpha) and not (self.alpha == 0.0 and self.beta == 0.0):
            raise ConfigError(f"edit.beta ({self.beta}) must satisfy 0 <= edit.beta < edit.alpha ({self.alpha})")
        if not (0.0 <= self.lam <= 1.0):
            raise ConfigError(f"edit.lambda must lie in [0, 1], got {self.lam}")
        if self.max_subtasks < 1:
            raise ConfigError(f"edit.max_subtasks must be >= 1, got {self.max_subtasks}")
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"edit.sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.stride < 1 or (self.sampler == "ddpm" and self.stride != 1):
            raise ConfigError(f"stride {self.stride} invalid for sampler {self.sampler}")

    def interval(self, T: int) -> tuple[int, int]:
        """Integer (beta T, alpha T) with ties rounded down."""
        return round_steps(self.beta, T), round_steps(self.alpha, T)

    def replacement(self, prompt_len: int) -> ReplacementSpec:
        cols = range(prompt_len) if self.amr_slots is None else self.amr_slots
        return ReplacementSpec.identity(cols)


@dataclass
class StepRecord:
    step: int
    injection: bool
    amr: bool


@dataclass
class SubtaskResult:
    index: int
    edited: np.ndarray
    orig: np.ndarray
    track: LatentTrack
    diagnostics: list = field(default_factory=list)
    output: np.ndarray | None = None      # after hooks; what the next subtask sees
    prompt_orig: tuple = ()
    prompt_edit: tuple = ()

    def active_steps(self) -> list[int]:
        return [r.step for r in self.diagnostics if r.injection and r.amr]


def _branch_eps(model, v_orig, v_edit, i, p_orig, p_edit, spec, s):
    """Both branch predictions and whether attention maps were actually replaced."""
    if isinstance(model, ToyDiT):
        eps_o, eps_e = predict_eps_paired(model, v_orig, v_edit, i, p_orig, p_edit, spec, guidance_scale=s)
        return eps_o, eps_e, bool(spec.pairs)
    # models without cross-attention cannot borrow maps; each branch runs alone
    return guided_eps(model, v_orig, i, p_orig, s), guided_eps(model, v_edit, i, p_edit, s), False


def preserve_edit(v_src, prompt_orig, prompt_edit, cfg: ControlConfig, model, sched: NoiseSchedule,
                  track_ref: LatentTrack, track_prev: LatentTrack | None = None, *,
                  stream: RngStream | None = None, index: int = 0) -> SubtaskResult:
    """One dual-branch subtask."""
    cfg.validate()
    v_src = np.asarray(v_src, dtype=np.float32)
    b_steps, a_steps = cfg.interval(sched.T)
    orig_track = track_prev if track_prev is not None else track_ref
    for t in filter(None, (track_ref, track_prev)):
        t.validate()
        if t.alpha_steps != a_steps:
            raise ContractError(f"track covers {t.alpha_steps} steps, config needs alpha T = {a_steps}")
        if t.sampler != cfg.sampler or t.stride != cfg.stride:
            raise ContractError(f"track sampler {t.sampler}/{t.stride} differs from config {cfg.sampler}/{cfg.stride}")
        if np.shape(t.start) != v_src.shape:
            raise ShapeMismatchError(f"track shape {np.shape(t.start)} does not match video {v_src.shape}")
    mixed = track_ref if track_prev is None else mix_tracks(track_prev, track_ref, cfg.lam)
    if a_steps == 0:
        return SubtaskResult(index, v_src.copy(), v_src.copy(), mixed, [], v_src.copy(), prompt_orig, prompt_edit)
    stream = stream or RngStream(0, Purpose.SAMPLING)
    # prompt-free models have nothing to replace
    spec = cfg.replacement(len(prompt_orig)) if prompt_orig is not None else ReplacementSpec()
    empty = ReplacementSpec()
    s = cfg.guidance_scale
    v_orig = np.asarray(mixed.start, dtype=np.float32).copy()
    v_edit = v_orig.copy()
    steps = mixed.steps
    diags = []
    for k, (i, i_prev) in enumerate(zip(steps[:-1], steps[1:])):
        active = b_steps < i <= a_steps
        eps_o, eps_e, amr = _branch_eps(model, v_orig, v_edit, i, prompt_orig, prompt_edit,
                                        spec if active else empty, s)
        if active:
            v_orig = reverse_step(cfg.sampler, v_orig, eps_o, i, i_prev, orig_track.noises[k], sched)
            v_edit = reverse_step(cfg.sampler, v_edit, eps_e, i, i_prev, mixed.noises[k], sched)
        else:
            v_orig = reverse_step(cfg.sampler, v_orig, eps_o, i, i_prev, None, sched, stream.split(2 * i))
            v_edit = reverse_step(cfg.sampler, v_edit, eps_e, i, i_prev, None, sched, stream.split(2 * i + 1))
        diags.append(StepRecord(i, active, amr))
    return SubtaskResult(index, v_edit, v_orig, mixed, diags, v_edit, prompt_orig, prompt_edit)


# ---------------------------------------------------------------- progression

@dataclass
class EditPlan:
    source: tuple
    target: tuple
    waypoints: list

    def __len__(self) -> int:
        return len(self.waypoints)

    @property
    def transitions(self) -> list[tuple[tuple, tuple]]:
        if len(self.waypoints) == 1:
            return [(self.waypoints[0], self.waypoints[0])]
        return list(zip(self.waypoints[:-1], self.waypoints[1:]))


def slot_order(prompt_len: int) -> list[int]:
    """Slot indices in edit priority; slots outside the named ones follow in index order."""
    named = [SLOTS.index(s) for s in SLOT_PRIORITY if SLOTS.index(s) < prompt_len]
    return named + [k for k in range(prompt_len) if k not in named]


def chunk_sizes(count: int, parts: int) -> list[int]:
    """Split ``count`` changes over ``parts`` subtasks; later subtasks take the extras."""
    base, extra = divmod(count, parts)
    return [base] * (parts - extra) + [base + 1] * extra


def plan_progression(src: Sequence[int], dst: Sequence[int], K: int) -> EditPlan:
    """Waypoints from ``src`` to ``dst`` changing slots in priority order.

    At most ``max(K, 2)`` waypoints: a single-subtask plan still needs its two
    endpoints.
    """
    src, dst = tuple(int(x) for x in src), tuple(int(x) for x in dst)
    if len(src) != len(dst):
        raise ShapeMismatchError(f"prompts differ in length: {len(src)} vs {len(dst)}")
    differing = [k for k in slot_order(len(src)) if src[k] != dst[k]]
    if not differing:
        return EditPlan(src, dst, [src])
    parts = max(1, min(len(differing), K - 1))
    waypoints = [src]
    cur = list(src)
    pos = 0
    for size in chunk_sizes(len(differing), parts):
        for k in differing[pos:pos + size]:
            cur[k] = dst[k]
        pos += size
        waypoints.append(tuple(cur))
    return EditPlan(src, dst, waypoints)


Hook = Callable[[int, np.ndarray], np.ndarray]


@dataclass
class ProgressionResult:
    final: SubtaskResult
    subtasks: list
    track_ref: LatentTrack

    @property
    def video(self) -> np.ndarray:
        return self.final.output


class _PairedView:
    """A model seen through the dual pass's batch layout.

    Inverting with the exact evaluation the orig branch later performs makes
    the orig branch's replay of its own latents bit-exact.
    """

    def __init__(self, model: ToyDiT, guidance_scale: float):
        self.model = model
        self.guidance_scale = guidance_scale

    @property
    def null_prompt(self):
        return self.model.null_prompt

    def predict_eps(self, v, i, prompt):
        return predict_eps_paired(self.model, v, v, i, prompt, prompt, ReplacementSpec(),
                                  guidance_scale=self.guidance_scale)[0]


def invert_for(v, prompt, cfg: ControlConfig, model, sched: NoiseSchedule, seed: int) -> LatentTrack:
    """Inversion with the guided prediction both branches use.

    Every inversion in a run draws its forward chain from the same stream, so
    mixing two tracks keeps the noise level of the start intact.
    """
    stream = RngStream(seed, Purpose.INIT_NOISE)
    if isinstance(model, ToyDiT):
        return invert(v, cfg.alpha, _PairedView(model, cfg.guidance_scale), prompt, sched, stream,
                      sampler=cfg.sampler, stride=cfg.stride)
    return invert(v, cfg.alpha, model, prompt, sched, stream, sampler=cfg.sampler, stride=cfg.stride,
                  guidance_scale=cfg.guidance_scale)


def run_progression(v0, plan: EditPlan, cfg: ControlConfig, model, sched: NoiseSchedule, hooks: Sequence[Hook] = (),
                    *, seed: int = 0, subtask_fn=None) -> ProgressionResult:
    """Execute the plan subtask by subtask; ``hooks`` may rewrite each subtask output."""
    cfg.validate()
    v0 = np.asarray(v0, dtype=np.float32)
    subtask_fn = subtask_fn or preserve_edit
    track_ref = invert_for(v0, plan.waypoints[0], cfg, model, sched, seed)
    results = []
    current = v0
    for t, (p_orig, p_edit) in enumerate(plan.transitions):
        track_prev = None if t == 0 else invert_for(current, p_orig, cfg, model, sched, seed)
        stream = RngStream(seed, Purpose.SAMPLING).split(t)
        res = subtask_fn(current, p_orig, p_edit, cfg, model, sched, track_ref, track_prev, stream=stream, index=t)
        out = res.edited
        for hook in hooks:
            out = np.asarray(hook(t, out), dtype=np.float32)
            if out.shape != v0.shape:
                raise PipelineError(f"hook returned shape {out.shape}, expected {v0.shape}")
        res.output = out
        results.append(res)
        current = out
    return ProgressionResult(results[-1], results, track_ref)
