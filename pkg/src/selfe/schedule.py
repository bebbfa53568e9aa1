"""Rectified noise schedule, training-time samplers for (t, s), and inference grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Anchor points of the length-dependent shift: mu(512) = 0.5, mu(4096) = 1.15.
_MU_ANCHORS = ((512.0, 0.5), (4096.0, 1.15))


@dataclass(frozen=True)
class ScheduleSpec:
    t_min: float = 1e-3
    warp_len: int = 1
    tau_anneal_iters: int = 6000
    p_equal: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.t_min < 0.5:
            raise ValueError(f"t_min must lie in (0, 0.5), got {self.t_min}")
        if self.warp_len < 1:
            raise ValueError(f"warp_len must be >= 1, got {self.warp_len}")
        if self.tau_anneal_iters < 1:
            raise ValueError(f"tau_anneal_iters must be >= 1, got {self.tau_anneal_iters}")
        if not 0.0 <= self.p_equal <= 1.0:
            raise ValueError(f"p_equal must lie in [0, 1], got {self.p_equal}")

    @property
    def mu(self) -> float:
        return shift_for_length(self.warp_len)


@dataclass(frozen=True)
class TimePair:
    t: float
    s: float

    def __post_init__(self):
        if not (np.isfinite(self.t) and np.isfinite(self.s)):
            raise ValueError("time pair must be finite")
        if not 0.0 < self.t <= 1.0:
            raise ValueError(f"t must lie in (0, 1], got {self.t}")
        if not 0.0 <= self.s <= self.t:
            raise ValueError(f"s must lie in [0, t], got s={self.s}, t={self.t}")


def shift_for_length(length: int) -> float:
    """Warp shift as an affine function of sequence length.

    A length of 1 means the data has no token structure and the warp is
    disabled (mu = 0).
    """
    if length <= 1:
        return 0.0
    (l0, m0), (l1, m1) = _MU_ANCHORS
    return m0 + (length - l0) * (m1 - m0) / (l1 - l0)


def alpha_sigma(t):
    """Return ``(alpha_t, sigma_t) = (1 - t, t)``."""
    arr = np.asarray(t, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return 1.0 - t, t


def warp(t_raw, mu: float):
    """Shift a time in (0, 1) towards 1 by ``exp(mu)`` in odds space."""
    arr = np.asarray(t_raw, dtype=float)
    if np.any(~(arr > 0.0)) or np.any(~(arr < 1.0)):
        raise ValueError(f"t_raw must lie in the open interval (0, 1), got {t_raw}")
    e = np.exp(mu)
    out = e / (e + 1.0 / arr - 1.0)
    return float(out) if np.ndim(out) == 0 else out


def _sigmoid(z):
    # float64 logistic without overflow warnings for large |z|
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def sample_t(rng: np.random.Generator, spec: ScheduleSpec, size=None):
    """Logit-normal primary time, warped and clamped to ``[t_min, 1]``."""
    z = rng.standard_normal(size)
    t_raw = np.clip(_sigmoid(z), np.finfo(float).tiny, 1.0 - np.finfo(float).eps)
    t = np.clip(warp(t_raw, spec.mu), spec.t_min, 1.0)
    return float(t) if size is None else t


def tau_at(iteration: int, spec: ScheduleSpec) -> float:
    return min(max(iteration, 0) / spec.tau_anneal_iters, 1.0)


def sample_s(rng: np.random.Generator, t, iteration: int, spec: ScheduleSpec):
    """Secondary time: ``s = t`` with probability ``p_equal``, else uniform on ``[(1-tau) t, t]``.

    ``t`` may be a scalar or an array; the output has the same shape.
    """
    t_arr = np.asarray(t, dtype=float)
    tau = tau_at(iteration, spec)
    equal = rng.random(t_arr.shape) < spec.p_equal
    u = rng.random(t_arr.shape)
    lo = (1.0 - tau) * t_arr
    s = lo + u * (t_arr - lo)
    s = np.where(equal, t_arr, np.minimum(s, t_arr))
    return float(s) if s.ndim == 0 else s


def inference_grid(n_steps: int, mu: float = 0.0) -> np.ndarray:
    """Decreasing time grid with ``n_steps + 1`` points, pinned to 1 and 0."""
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    grid = np.linspace(1.0, 0.0, n_steps + 1)
    if n_steps > 1:
        grid[1:-1] = warp(grid[1:-1], mu)
    grid[0], grid[-1] = 1.0, 0.0
    return grid


def pair_weight(t, t_min: float = 1e-3):
    """Per-pair loss weight ``1 / t^2`` with ``t`` floored at ``t_min``."""
    w = 1.0 / np.maximum(t, t_min) ** 2
    return float(w) if np.ndim(w) == 0 else w
