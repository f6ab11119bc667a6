"""Noise schedules, forward noising and the DDPM / DDIM reverse steps.

Both reverse steps accept an injected noise ``n``. DDPM scales it by the
posterior standard deviation; DDIM (eta = 0) simply adds it to its
deterministic output. Step arithmetic runs in float64 on float32 inputs and the
result is rounded back to float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import RngStream, gaussian
from .errors import InvalidScheduleError, ShapeMismatchError, StepIndexError

SAMPLERS = ("ddpm", "ddim")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray        # (T,), betas[i-1] is beta_i
    alphas: np.ndarray       # (T,)
    alpha_bars: np.ndarray   # (T+1,), alpha_bars[0] == 1
    # 1 - alpha_bar taken in float64 before rounding; subtracting the stored
    # float32 alpha_bar from 1 would lose most digits near i = 1
    one_minus_alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    def beta(self, i: int) -> float:
        return float(self.betas[i - 1])

    def alpha(self, i: int) -> float:
        return float(self.alphas[i - 1])

    def alpha_bar(self, i: int) -> float:
        return float(self.alpha_bars[i])

    def one_minus_alpha_bar(self, i: int) -> float:
        return float(self.one_minus_alpha_bars[i])

    def sigma(self, i: int) -> float:
        """Posterior std of the ancestral DDPM step (zero at i = 1)."""
        check_step(self, i)
        return math.sqrt(self.beta(i) * self.one_minus_alpha_bar(i - 1) / self.one_minus_alpha_bar(i))

    def steps(self, alpha: float) -> int:
        return round_steps(alpha, self.T)


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise InvalidScheduleError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}")
    betas64 = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alphas64 = 1.0 - betas64
    log_bars = np.concatenate([[0.0], np.cumsum(np.log1p(-betas64))])
    bars64 = np.exp(log_bars)
    sched = NoiseSchedule(betas64.astype(np.float32), alphas64.astype(np.float32), bars64.astype(np.float32),
                          (-np.expm1(log_bars)).astype(np.float32))
    if np.any(np.diff(sched.alpha_bars) >= 0):
        raise InvalidScheduleError("alpha_bar must be strictly decreasing (schedule underflows in float32)")
    return sched


def round_steps(fraction: float, T: int) -> int:
    """Nearest integer step for ``fraction * T``; exact ties round down."""
    x = fraction * T
    return int(math.ceil(x - 0.5))


def check_step(sched: NoiseSchedule, i: int, *, allow_zero: bool = False) -> None:
    lo = 0 if allow_zero else 1
    if not (lo <= i <= sched.T):
        raise StepIndexError(f"step index {i} outside [{lo}, {sched.T}]")


def timeline(start: int, stride: int = 1) -> list[int]:
    """Descending visited steps ``[start, ..., 0]`` on a grid of ``stride``."""
    if stride < 1:
        raise StepIndexError(f"stride must be >= 1, got {stride}")
    if start <= 0:
        return [0]
    below = list(range(((start - 1) // stride) * stride, -1, -stride))
    return [start] + below


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what}: shape {b.shape} does not match {a.shape}")


def add_noise(v0: np.ndarray, i: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form forward marginal ``sqrt(ab_i) v0 + sqrt(1 - ab_i) eps``."""
    check_step(sched, i, allow_zero=True)
    v0 = np.asarray(v0, dtype=np.float32)
    eps = np.asarray(eps, dtype=np.float32)
    _same_shape(v0, eps, "add_noise eps")
    if i == 0:
        return v0.copy()
    ab, rest = sched.alpha_bar(i), sched.one_minus_alpha_bar(i)
    out = math.sqrt(ab) * v0.astype(np.float64) + math.sqrt(rest) * eps.astype(np.float64)
    return out.astype(np.float32)


def forward_step(v_prev: np.ndarray, i_prev: int, i: int, z: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """One stochastic forward transition ``v_{i_prev} -> v_i`` with fresh noise ``z``.

    For consecutive steps this is ``sqrt(alpha_i) v_{i-1} + sqrt(beta_i) z``.
    """
    if not (0 <= i_prev < i <= sched.T):
        raise StepIndexError(f"forward step needs 0 <= i_prev < i <= T, got {i_prev}, {i}")
    if i == i_prev + 1:
        a = sched.alpha(i)
        keep, fresh = math.sqrt(a), math.sqrt(sched.beta(i))
    else:
        ab_prev = sched.alpha_bar(i_prev)
        keep = math.sqrt(sched.alpha_bar(i) / ab_prev)
        fresh = math.sqrt((sched.one_minus_alpha_bar(i) - sched.one_minus_alpha_bar(i_prev)) / ab_prev)
    out = keep * np.asarray(v_prev, dtype=np.float64) + fresh * np.asarray(z, dtype=np.float64)
    return out.astype(np.float32)


def ddpm_mean(v_i: np.ndarray, eps: np.ndarray, i: int, sched: NoiseSchedule) -> np.ndarray:
    """Posterior mean ``(v_i - beta_i / sqrt(1 - ab_i) * eps) / sqrt(alpha_i)`` in float64."""
    beta, rest, a = sched.beta(i), sched.one_minus_alpha_bar(i), sched.alpha(i)
    return (np.asarray(v_i, dtype=np.float64) - (beta / math.sqrt(rest)) * np.asarray(eps, dtype=np.float64)) / math.sqrt(a)


def ddpm_step(v_i, eps, i: int, n_i, sched: NoiseSchedule, stream: RngStream | None = None) -> np.ndarray:
    """Ancestral DDPM step ``mu_i + sigma_i z`` with ``z = n_i`` when supplied.

    Without ``n_i`` a fresh draw from ``stream`` is used. ``sigma_1 = 0`` so
    the noise never matters at ``i = 1``.
    """
    check_step(sched, i)
    v_i = np.asarray(v_i, dtype=np.float32)
    eps = np.asarray(eps, dtype=np.float32)
    _same_shape(v_i, eps, "ddpm_step eps")
    mu = ddpm_mean(v_i, eps, i, sched)
    sigma = sched.sigma(i)
    if sigma == 0.0:
        return mu.astype(np.float32)
    if n_i is None:
        if stream is None:
            raise ValueError("ddpm_step needs either n_i or a random stream")
        z = gaussian(stream, v_i.shape).astype(np.float64)
    else:
        n_i = np.asarray(n_i, dtype=np.float32)
        _same_shape(v_i, n_i, "ddpm_step n_i")
        z = n_i.astype(np.float64)
    return (mu + sigma * z).astype(np.float32)


def ddim_deterministic(v_i, eps, i: int, i_prev: int, sched: NoiseSchedule) -> np.ndarray:
    ab, ab_prev = sched.alpha_bar(i), sched.alpha_bar(i_prev)
    v = np.asarray(v_i, dtype=np.float64)
    e = np.asarray(eps, dtype=np.float64)
    x0 = (v - math.sqrt(sched.one_minus_alpha_bar(i)) * e) / math.sqrt(ab)
    return math.sqrt(ab_prev) * x0 + math.sqrt(sched.one_minus_alpha_bar(i_prev)) * e


def ddim_step(v_i, eps, i: int, i_prev: int, n_i, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic DDIM update (eta = 0) plus the injected ``n_i`` if given."""
    if not (0 <= i_prev < i <= sched.T):
        raise StepIndexError(f"ddim_step needs 0 <= i_prev < i <= T, got i={i}, i_prev={i_prev}")
    v_i = np.asarray(v_i, dtype=np.float32)
    eps = np.asarray(eps, dtype=np.float32)
    _same_shape(v_i, eps, "ddim_step eps")
    out = ddim_deterministic(v_i, eps, i, i_prev, sched)
    if n_i is not None:
        n_i = np.asarray(n_i, dtype=np.float32)
        _same_shape(v_i, n_i, "ddim_step n_i")
        out = out + n_i.astype(np.float64)
    return out.astype(np.float32)


def cfg_combine(eps_uncond, eps_cond, s: float) -> np.ndarray:
    """Classifier-free guidance ``eps_u + s (eps_c - eps_u)``.

    Evaluated as ``(1 - s) eps_u + s eps_c`` so s = 0 and s = 1 return the
    inputs exactly.
    """
    eu = np.asarray(eps_uncond, dtype=np.float32)
    ec = np.asarray(eps_cond, dtype=np.float32)
    _same_shape(eu, ec, "cfg_combine")
    if not math.isfinite(s):
        raise ValueError(f"guidance scale must be finite, got {s}")
    out = (1.0 - s) * eu.astype(np.float64) + s * ec.astype(np.float64)
    return out.astype(np.float32)
