"""Weighted multi-label focal loss and the Ranger optimizer (rectified Adam
wrapped by Lookahead).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as F
from .tensor import ShapeError, Tensor

__all__ = [
    "FocalLossConfig",
    "RangerConfig",
    "focal_loss",
    "inverse_frequency_weights",
    "RAdam",
    "Lookahead",
    "ranger",
]

SCORE_EPS = 1e-7


@dataclass
class FocalLossConfig:
    gamma: float = 2.0
    label_weights: np.ndarray | None = None  # per-label positive-class weight

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.label_weights is not None:
            self.label_weights = np.asarray(self.label_weights, dtype=np.float64)
            if np.any(self.label_weights <= 0):
                raise ValueError("label weights must be > 0")


def inverse_frequency_weights(
    targets: np.ndarray, clip: tuple[float, float] = (0.5, 10.0)
) -> np.ndarray:
    """w_l = N / (L * max(1, positives_l)), clipped; favors rare labels."""
    targets = np.asarray(targets)
    n, num_labels = targets.shape
    pos = np.maximum(1, targets.sum(axis=0))
    w = n / (num_labels * pos)
    return np.clip(w, clip[0], clip[1])


def focal_loss(scores: Tensor, targets: np.ndarray, cfg: FocalLossConfig) -> Tensor:
    """Mean focal term over all batch x label entries.

    Per entry: -w * (1 - p_t)^gamma * log(p_t) with p_t = p for positive
    targets and 1 - p otherwise; w applies to positive entries only. Scores
    are clamped to [1e-7, 1 - 1e-7] before the log.
    """
    y = np.asarray(targets, dtype=scores.dtype)
    if y.shape != scores.shape:
        raise ShapeError("focal_loss", "targets", scores.shape, y.shape)
    num_labels = y.shape[1]
    if cfg.label_weights is None:
        w_pos = np.ones(num_labels, dtype=scores.dtype)
    else:
        if cfg.label_weights.shape != (num_labels,):
            raise ShapeError(
                "focal_loss", "label_weights", (num_labels,), cfg.label_weights.shape
            )
        w_pos = cfg.label_weights.astype(scores.dtype)

    p = F.clip(scores, SCORE_EPS, 1.0 - SCORE_EPS)
    pt = p * y + (1.0 - p) * (1.0 - y)
    weights = y * w_pos + (1.0 - y)  # constant array, broadcast over batch
    terms = weights * F.power(1.0 - pt, cfg.gamma) * -F.log(pt)
    return F.tmean(terms)


@dataclass
class RangerConfig:
    lr: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    lookahead_k: int = 6
    lookahead_alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.lookahead_alpha <= 1.0:
            raise ValueError(f"lookahead alpha must be in (0, 1], got {self.lookahead_alpha}")
        if self.lookahead_k < 1:
            raise ValueError(f"lookahead k must be >= 1, got {self.lookahead_k}")


class RAdam:
    """Rectified Adam. Early steps (rectification term rho_t <= 4) apply the
    plain momentum update lr * m_hat; afterwards the variance-rectified
    adaptive update is used."""

    def __init__(self, params: list[Tensor], cfg: RangerConfig):
        self.params = list(params)
        self.cfg = cfg
        self.t = 0
        self.exp_avg = [np.zeros_like(p.data) for p in self.params]
        self.exp_avg_sq = [np.zeros_like(p.data) for p in self.params]
        self.rho_inf = 2.0 / (1.0 - cfg.betas[1]) - 1.0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.cfg.betas
        t = self.t
        bias1 = 1.0 - b1**t
        bias2 = 1.0 - b2**t
        rho_t = self.rho_inf - 2.0 * t * b2**t / bias2
        if rho_t > 4.0:
            rect = np.sqrt(
                ((rho_t - 4.0) * (rho_t - 2.0) * self.rho_inf)
                / ((self.rho_inf - 4.0) * (self.rho_inf - 2.0) * rho_t)
            )
        else:
            rect = None
        lr = self.cfg.lr
        wd = self.cfg.weight_decay
        for p, m, v in zip(self.params, self.exp_avg, self.exp_avg_sq):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            m_hat = m / bias1
            if rect is not None:
                v_hat = np.sqrt(v / bias2)
                update = lr * rect * m_hat / (v_hat + self.cfg.eps)
            else:
                update = lr * m_hat
            if wd:
                update = update + lr * wd * p.data
            p.data = p.data - update

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    # checkpoint support -------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"radam.t": np.array([self.t], dtype=np.float64)}
        for i, (m, v) in enumerate(zip(self.exp_avg, self.exp_avg_sq)):
            out[f"radam.m.{i}"] = m
            out[f"radam.v.{i}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["radam.t"][0])
        for i, p in enumerate(self.params):
            self.exp_avg[i] = arrays[f"radam.m.{i}"].astype(p.dtype).reshape(p.shape)
            self.exp_avg_sq[i] = arrays[f"radam.v.{i}"].astype(p.dtype).reshape(p.shape)


class Lookahead:
    """Every k inner steps: slow += alpha * (fast - slow); fast = slow."""

    def __init__(self, inner: RAdam, k: int, alpha: float):
        self.inner = inner
        self.k = k
        self.alpha = alpha
        self.counter = 0
        self.slow = [p.data.copy() for p in inner.params]

    @property
    def params(self):
        return self.inner.params

    def step(self) -> None:
        self.inner.step()
        self.counter += 1
        if self.counter % self.k == 0:
            for p, s in zip(self.inner.params, self.slow):
                s += self.alpha * (p.data - s)
                p.data = s.copy()

    def zero_grad(self) -> None:
        self.inner.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = self.inner.state_arrays()
        out["lookahead.counter"] = np.array([self.counter], dtype=np.float64)
        for i, s in enumerate(self.slow):
            out[f"lookahead.slow.{i}"] = s
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.inner.load_state_arrays(arrays)
        self.counter = int(arrays["lookahead.counter"][0])
        for i, p in enumerate(self.inner.params):
            self.slow[i] = arrays[f"lookahead.slow.{i}"].astype(p.dtype).reshape(p.shape)


def ranger(params: list[Tensor], cfg: RangerConfig) -> Lookahead:
    """Ranger = Lookahead(RAdam)."""
    return Lookahead(RAdam(params, cfg), cfg.lookahead_k, cfg.lookahead_alpha)
