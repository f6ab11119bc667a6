"""Noise-prediction training for the toy transformer, plus a finite-difference gradient check."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from ..core import Purpose, RngStream, gaussian
from ..errors import DivergenceError
from ..schedulers import NoiseSchedule
from ..synth import LabeledVideo, make_dataset
from .dit import ToyDiT, ToyDiTConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    rms_decay: float = 0.99
    rms_eps: float = 1e-8
    p_uncond: float = 0.1
    dataset_size: int = 512
    seed: int = 0
    # exponential moving average of the weights; 0 disables it
    ema_decay: float = 0.0


def make_optimizer(model: torch.nn.Module, tc: TrainConfig) -> torch.optim.Optimizer:
    # adaptive per-parameter step size, no momentum
    return torch.optim.RMSprop(model.parameters(), lr=tc.lr, alpha=tc.rms_decay, eps=tc.rms_eps, momentum=0.0)


def noised_batch(videos: np.ndarray, steps: np.ndarray, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    shape = (-1,) + (1,) * (videos.ndim - 1)
    ab = sched.alpha_bars[steps].astype(np.float64).reshape(shape)
    rest = sched.one_minus_alpha_bars[steps].astype(np.float64).reshape(shape)
    return (np.sqrt(ab) * videos + np.sqrt(rest) * eps).astype(np.float32)


def eps_loss(model: ToyDiT, noisy, steps, eps, prompts) -> torch.Tensor:
    """Mean squared error between predicted and true noise."""
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(noisy)).to(dtype)
    target = torch.as_tensor(np.asarray(eps)).to(dtype)
    t = torch.as_tensor(np.asarray(steps, dtype=np.int64))
    p = torch.as_tensor(np.asarray(prompts, dtype=np.int64))
    return torch.mean((model(x, t, p) - target) ** 2)


def draw_batch(batch: list[LabeledVideo], sched: NoiseSchedule, stream: RngStream, p_uncond: float = 0.0,
               null_prompt=None):
    """Steps uniform on [1, T], fresh noise, optional prompt dropout."""
    videos = np.stack([b.video for b in batch])
    steps = stream.integers(sched.T, len(batch)) + 1
    eps = gaussian(stream, videos.shape)
    prompts = np.array([b.prompt for b in batch], dtype=np.int64)
    if p_uncond > 0:
        drop = stream.uniform(len(batch)) <= p_uncond
        prompts[drop] = np.asarray(null_prompt)
    return noised_batch(videos, steps, eps, sched), steps, eps, prompts


def train_step(model: ToyDiT, batch: list[LabeledVideo], sched: NoiseSchedule, stream: RngStream,
               optimizer: torch.optim.Optimizer, p_uncond: float = 0.0) -> float:
    model.train()
    noisy, steps, eps, prompts = draw_batch(batch, sched, stream, p_uncond, model.null_prompt)
    optimizer.zero_grad(set_to_none=True)
    loss = eps_loss(model, noisy, steps, eps, prompts)
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss.item()} at steps {steps.tolist()}")
    loss.backward()
    optimizer.step()
    return float(loss.item())


def moving_average(values, window: int = 100) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([v.mean()]) if len(v) else v
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window


@dataclass
class TrainResult:
    model: ToyDiT            # averaged weights when ema_decay > 0
    losses: list = field(default_factory=list)
    raw: ToyDiT | None = None


@torch.no_grad()
def ema_update(avg: torch.nn.Module, model: torch.nn.Module, decay: float) -> None:
    for pa, pm in zip(avg.parameters(), model.parameters()):
        pa.mul_(decay).add_(pm, alpha=1.0 - decay)


def train(cfg: ToyDiTConfig, sched: NoiseSchedule, tc: TrainConfig = TrainConfig(), log_every: int = 200) -> TrainResult:
    """Train from scratch on a synthetic dataset; fully determined by ``tc.seed``."""
    torch.manual_seed(tc.seed)
    model = ToyDiT(cfg)
    data = make_dataset(tc.dataset_size, RngStream(tc.seed, Purpose.DATASET), cfg.frames, cfg.height, cfg.width)
    stream = RngStream(tc.seed, Purpose.TRAINING)
    opt = make_optimizer(model, tc)
    avg = copy.deepcopy(model) if tc.ema_decay > 0 else None
    losses = []
    for step in range(tc.steps):
        idx = stream.integers(len(data), tc.batch_size)
        losses.append(train_step(model, [data[k] for k in idx], sched, stream, opt, tc.p_uncond))
        if avg is not None:
            ema_update(avg, model, tc.ema_decay)
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d loss %.4f (avg100 %.4f)", step + 1, losses[-1], float(np.mean(losses[-100:])))
    model.eval()
    if avg is None:
        return TrainResult(model, losses)
    avg.eval()
    return TrainResult(avg, losses, raw=model)


# ---------------------------------------------------------------- gradient check

@dataclass
class GradProbe:
    noisy: np.ndarray
    steps: np.ndarray
    eps: np.ndarray
    prompts: np.ndarray


def make_probe(cfg: ToyDiTConfig, sched: NoiseSchedule, stream: RngStream, batch: int = 2) -> GradProbe:
    data = make_dataset(batch, stream, cfg.frames, cfg.height, cfg.width)
    noisy, steps, eps, prompts = draw_batch(data, sched, stream)
    return GradProbe(noisy, steps, eps, prompts)


def relative_gap(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(model: ToyDiT, probe: GradProbe, *, count: int = 50, h: float = 1e-3, seed: int = 0,
               frozen: tuple = (), report: list | None = None) -> float:
    """Largest relative gap between autograd and central differences on random weights.

    Both run on a float64 copy of the model. Parameters named in ``frozen``
    take no gradient; their analytic gradient is reported as exactly 0.
    """
    shadow = copy.deepcopy(model).double()
    shadow.eval()
    named = dict(shadow.named_parameters())
    for name in frozen:
        named[name].requires_grad_(False)
    loss = eps_loss(shadow, probe.noisy, probe.steps, probe.eps, probe.prompts)
    loss.backward()
    names = list(named)
    sizes = np.array([named[n].numel() for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = RngStream(seed, Purpose.SAMPLING).integers(int(offsets[-1]), count)
    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            pi = int(np.searchsorted(offsets, flat, side="right") - 1)
            name = names[pi]
            p = named[name]
            idx = int(flat - offsets[pi])
            view = p.view(-1)
            analytic = 0.0 if p.grad is None else float(p.grad.view(-1)[idx])
            orig = float(view[idx])
            view[idx] = orig + h
            up = float(eps_loss(shadow, probe.noisy, probe.steps, probe.eps, probe.prompts))
            view[idx] = orig - h
            down = float(eps_loss(shadow, probe.noisy, probe.steps, probe.eps, probe.prompts))
            view[idx] = orig
            numeric = (up - down) / (2 * h)
            gap = 0.0 if name in frozen else relative_gap(analytic, numeric)
            worst = max(worst, gap)
            if report is not None:
                report.append({"name": name, "index": idx, "analytic": analytic, "numeric": numeric, "rel": gap})
    return worst
