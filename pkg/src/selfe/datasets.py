"""Procedural 2-D class-conditional datasets.

Every dataset exposes ``n_classes``, ``dim``, ``priors``, ``sample(rng, n, cond)``
and ``sample_labeled(rng, n)``. Only Gaussian mixtures carry exact scores.
"""

from __future__ import annotations

import numpy as np

from .oracle import GmmCond

PRESETS = ("gmm-4class", "checkerboard", "two-spirals", "custom")


def gmm_4class(radius: float = 1.0, std: float = 0.15) -> GmmCond:
    """Eight modes on a circle; class ``c`` owns the two opposite modes at ``c*45`` and ``c*45+180`` degrees.

    Every class mean sits at the origin, which no class occupies, so a
    mean-regressing one-step sampler lands between modes.
    """
    weights, means, variances = [], [], []
    for c in range(4):
        ang = np.deg2rad([45.0 * c, 45.0 * c + 180.0])
        means.append(radius * np.stack([np.cos(ang), np.sin(ang)], axis=1))
        weights.append(np.full(2, 0.5))
        variances.append(np.full(2, std ** 2))
    return GmmCond(weights, means, variances, np.full(4, 0.25))


class Checkerboard:
    """Uniform on the dark squares of a 4x4 board over [-2, 2]^2; dark squares dealt round-robin to classes."""

    def __init__(self, n_classes: int = 4, size: float = 4.0):
        self.n_classes = n_classes
        self.dim = 2
        self.priors = np.full(n_classes, 1.0 / n_classes)
        cell = size / 4.0
        corners = [(i * cell - size / 2, j * cell - size / 2) for i in range(4) for j in range(4) if (i + j) % 2 == 0]
        self.cell = cell
        self.cells = [np.array(corners[k::n_classes]) for k in range(n_classes)]

    def sample(self, rng: np.random.Generator, n: int, cond=None) -> np.ndarray:
        if cond is None:
            x, _ = self.sample_labeled(rng, n)
            return x
        cells = self.cells[cond]
        pick = cells[rng.integers(len(cells), size=n)]
        return pick + self.cell * rng.random((n, 2))

    def sample_labeled(self, rng: np.random.Generator, n: int):
        labels = rng.choice(self.n_classes, size=n, p=self.priors)
        x = np.empty((n, 2))
        for c in range(self.n_classes):
            idx = np.flatnonzero(labels == c)
            if idx.size:
                x[idx] = self.sample(rng, idx.size, c)
        return x, labels


class TwoSpirals:
    """Two interleaved Archimedean spirals, one class each, with Gaussian jitter."""

    def __init__(self, turns: float = 1.5, noise: float = 0.08, scale: float = 2.0):
        self.n_classes = 2
        self.dim = 2
        self.priors = np.full(2, 0.5)
        self.turns, self.noise, self.scale = turns, noise, scale

    def sample(self, rng: np.random.Generator, n: int, cond=None) -> np.ndarray:
        if cond is None:
            x, _ = self.sample_labeled(rng, n)
            return x
        u = np.sqrt(rng.random(n))
        theta = u * self.turns * 2 * np.pi + np.pi * cond
        r = self.scale * u
        pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        return pts + self.noise * rng.standard_normal((n, 2))

    def sample_labeled(self, rng: np.random.Generator, n: int):
        labels = rng.choice(2, size=n, p=self.priors)
        x = np.empty((n, 2))
        for c in range(2):
            idx = np.flatnonzero(labels == c)
            if idx.size:
                x[idx] = self.sample(rng, idx.size, c)
        return x, labels


def make_dataset(preset: str, mixture: dict | None = None):
    if preset == "gmm-4class":
        return gmm_4class()
    if preset == "checkerboard":
        return Checkerboard()
    if preset == "two-spirals":
        return TwoSpirals()
    if preset == "custom":
        if not mixture:
            raise ValueError("custom dataset needs mixture parameters")
        return GmmCond(mixture["weights"], mixture["means"], mixture["variances"], mixture["priors"])
    raise ValueError(f"unknown dataset preset {preset!r}; expected one of {PRESETS}")
