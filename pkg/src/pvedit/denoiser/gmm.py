"""Closed-form noise predictor for a Gaussian-mixture data distribution.

Under the forward process the marginal at step i is again a mixture,
``sum_k w_k N(sqrt(ab_i) mu_k, (ab_i s_k^2 + 1 - ab_i) I)``, so the optimal
noise prediction ``-sqrt(1 - ab_i) grad log p_i`` has a closed form built from
the component responsibilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..core import RngStream
from ..schedulers import NoiseSchedule


@dataclass(frozen=True, eq=False)
class GmmOracle:
    weights: np.ndarray     # (K,)
    means: np.ndarray       # (K, D)
    variances: np.ndarray   # (K,) isotropic per component

    def __post_init__(self):
        w = np.asarray(self.weights, np.float64)
        mu = np.atleast_2d(np.asarray(self.means, np.float64))
        var = np.asarray(self.variances, np.float64)
        if w.ndim != 1 or mu.shape[0] != w.shape[0] or var.shape != w.shape:
            raise ValueError("weights, means and variances disagree on the component count")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be positive and sum to one")
        if np.any(var < 0):
            raise ValueError("variances must be non-negative")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def variance(self) -> np.ndarray:
        """Per-coordinate variance of the mixture."""
        second = self.weights @ (self.variances[:, None] + self.means ** 2)
        return second - self.mean() ** 2

    def fourth_central_moment(self) -> np.ndarray:
        m = self.mean()
        delta = self.means - m
        var = self.variances[:, None]
        return self.weights @ (delta ** 4 + 6 * delta ** 2 * var + 3 * var ** 2)

    def sample(self, stream: RngStream, count: int) -> np.ndarray:
        comp = np.searchsorted(np.cumsum(self.weights), stream.uniform(count) * self.weights.sum(), side="left")
        comp = np.minimum(comp, len(self.weights) - 1)
        z = stream.normal64(count * self.dim).reshape(count, self.dim)
        return (self.means[comp] + np.sqrt(self.variances[comp])[:, None] * z).astype(np.float32)

    def log_density(self, x: np.ndarray, i: int, sched: NoiseSchedule) -> np.ndarray:
        """log p_i(x) for rows of ``x`` (float64)."""
        logits, _, _ = self._component_terms(np.asarray(x, np.float64).reshape(-1, self.dim), i, sched)
        mx = logits.max(axis=1, keepdims=True)
        return (mx + np.log(np.exp(logits - mx).sum(axis=1, keepdims=True)))[:, 0]

    def _component_terms(self, x: np.ndarray, i: int, sched: NoiseSchedule):
        ab = sched.alpha_bar(i) if i > 0 else 1.0
        rest = sched.one_minus_alpha_bar(i) if i > 0 else 0.0
        centers = math.sqrt(ab) * self.means                  # (K, D)
        s2 = ab * self.variances + rest                 # (K,)
        diff = x[:, None, :] - centers[None, :, :]            # (N, K, D)
        sq = np.einsum("nkd,nkd->nk", diff, diff)
        logits = np.log(self.weights)[None, :] - 0.5 * self.dim * np.log(2 * np.pi * s2)[None, :] - 0.5 * sq / s2[None, :]
        return logits, diff, s2


def analytic_eps(oracle: GmmOracle, x, i: int, sched: NoiseSchedule) -> np.ndarray:
    """Exact score-based noise prediction; ``x`` may hold any number of D-vectors."""
    x = np.asarray(x)
    flat = x.astype(np.float64).reshape(-1, oracle.dim)
    ab = sched.alpha_bar(i)
    logits, diff, s2 = oracle._component_terms(flat, i, sched)
    logits -= logits.max(axis=1, keepdims=True)
    resp = np.exp(logits)
    resp /= resp.sum(axis=1, keepdims=True)
    # -grad log p = sum_k r_k (x - c_k) / s_k^2
    neg_score = np.einsum("nk,nkd->nd", resp / s2[None, :], diff)
    return (math.sqrt(sched.one_minus_alpha_bar(i)) * neg_score).reshape(x.shape).astype(np.float32)


class GmmDenoiser:
    """Adapter giving :class:`GmmOracle` the denoiser interface; prompts are ignored.

    Inputs are flattened into rows of length D, so a video of exactly D
    entries or a batch of them both work.
    """

    null_prompt = None

    def __init__(self, oracle: GmmOracle, sched: NoiseSchedule):
        self.oracle = oracle
        self.sched = sched

    def predict_eps(self, v, i, prompt=None):
        return analytic_eps(self.oracle, v, i, self.sched)


def two_component(dim: int, offset: float = 2.0, var: float = 0.25, weight: float = 0.5) -> GmmOracle:
    mu = np.full((2, dim), offset)
    mu[1] *= -1
    return GmmOracle(np.array([weight, 1.0 - weight]), mu, np.array([var, var]))
