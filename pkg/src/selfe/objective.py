"""Self-evaluation training objective.

``G`` callables below have the signature ``G(x, t, s, cond) -> x0_hat`` (the
clean-sample head of a network, or an oracle stand-in). Condition tensors
hold embedding rows as laid out in :mod:`selfe.backbone`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import Tensor

from .backbone import fake_rows, null_rows
from .schedule import pair_weight

Denoiser = Callable[..., Tensor]

RENORM_EPS = 1e-8
LAMBDA_T_MAX = 1.0 - 1e-6


@dataclass(frozen=True)
class ObjectiveConfig:
    omega_train: float = 10.0
    k_mix: float | None = None
    aux_enabled: bool = True
    renorm_enabled: bool = True
    lambda_cap: float = 20.0

    def __post_init__(self):
        if self.omega_train < 1.0:
            raise ValueError("omega_train must be >= 1")
        if self.k_mix is not None and not 0.0 <= self.k_mix <= 1.0:
            raise ValueError("k_mix must lie in [0, 1]")
        if not (np.isfinite(self.lambda_cap) and self.lambda_cap > 0):
            raise ValueError("lambda_cap must be finite and positive")

    @property
    def k(self) -> float:
        """Classifier/auxiliary mixing weight; ``(omega - 1) / omega`` unless set explicitly."""
        if self.k_mix is not None:
            return self.k_mix
        return (self.omega_train - 1.0) / self.omega_train


@dataclass
class PseudoTarget:
    x_self: Tensor
    x_s: Tensor  # re-noised sample the target was evaluated at
    detached: bool = True


@dataclass
class TrainingBatch:
    x0: Tensor
    eps: Tensor
    t: Tensor
    s: Tensor
    cond: Tensor  # embedding rows after null dropout
    eps_renoise: Tensor

    @property
    def x_t(self) -> Tensor:
        t = self.t[:, None]
        return (1.0 - t) * self.x0 + t * self.eps

    def __len__(self):
        return self.x0.shape[0]


def data_loss(x0_hat: Tensor, x0: Tensor) -> Tensor:
    """Squared Euclidean distance per row."""
    return ((x0_hat - x0) ** 2).sum(-1)


def lambda_weight(s, t, cap: float = 20.0):
    """``t/(1-t) - s/(1-s)``, capped; ``t`` near 1 returns ``cap`` and ``s >= t`` returns 0."""
    if isinstance(t, Tensor) or isinstance(s, Tensor):
        t = torch.as_tensor(t)
        s = torch.as_tensor(s, dtype=t.dtype)
        tc = torch.clamp(t, max=LAMBDA_T_MAX)
        sc = torch.clamp(s, max=LAMBDA_T_MAX)
        lam = tc / (1.0 - tc) - sc / (1.0 - sc)
        lam = torch.where(t >= LAMBDA_T_MAX, torch.full_like(lam, cap), lam)
        lam = torch.where(s >= t, torch.zeros_like(lam), lam)
        return torch.clamp(lam, min=0.0, max=cap)
    if s >= t:
        return 0.0
    if t >= LAMBDA_T_MAX:
        return float(cap)
    return float(min(max(t / (1.0 - t) - s / (1.0 - s), 0.0), cap))


def _renoise(x0_hat: Tensor, s, eps: Tensor | None, rng: np.random.Generator | None):
    s_t = torch.as_tensor(s, dtype=x0_hat.dtype)
    if torch.any(s_t < 0) or torch.any(s_t > 1) or torch.isnan(s_t).any():
        raise ValueError("s must lie in [0, 1]")
    if eps is None:
        if rng is None:
            raise ValueError("need either eps or rng")
        eps = torch.as_tensor(rng.standard_normal(tuple(x0_hat.shape)), dtype=x0_hat.dtype)
    s_vec = s_t.expand(x0_hat.shape[0]) if s_t.ndim == 0 else s_t
    x0d = x0_hat.detach()
    x_s = (1.0 - s_vec[:, None]) * x0d + s_vec[:, None] * eps
    return x0d, x_s, s_vec


@torch.no_grad()
def pseudo_target_classifier(g_cond: Denoiser, g_uncond: Denoiser, x0_hat: Tensor, s, cond: Tensor,
                             n_classes: int, rng: np.random.Generator | None = None,
                             eps: Tensor | None = None) -> PseudoTarget:
    """``sg[x0_hat - (G(x_s, s, s, null) - G(x_s, s, s, c))]`` at a fresh re-noising of ``x0_hat``."""
    x0d, x_s, s_vec = _renoise(x0_hat, s, eps, rng)
    diff = g_uncond(x_s, s_vec, s_vec, null_rows(cond, n_classes)) - g_cond(x_s, s_vec, s_vec, cond)
    return PseudoTarget(x_self=(x0d - diff).detach(), x_s=x_s)


@torch.no_grad()
def pseudo_target_aux(g_cond: Denoiser, g_uncond: Denoiser, g_fake: Denoiser, x0_hat: Tensor, s,
                      cond: Tensor, n_classes: int, k_mix: float = 0.9,
                      rng: np.random.Generator | None = None, eps: Tensor | None = None) -> PseudoTarget:
    """Pseudo-target mixing the classifier difference with the fake-branch difference."""
    x0d, x_s, s_vec = _renoise(x0_hat, s, eps, rng)
    g_c = g_cond(x_s, s_vec, s_vec, cond)
    delta = k_mix * (g_uncond(x_s, s_vec, s_vec, null_rows(cond, n_classes)) - g_c)
    if k_mix < 1.0:
        delta = delta + (1.0 - k_mix) * (g_fake(x_s, s_vec, s_vec, fake_rows(cond, n_classes)) - g_c)
    return PseudoTarget(x_self=(x0d - delta).detach(), x_s=x_s)


def renorm_target(x0: Tensor, x_self: Tensor, lam) -> Tensor:
    """Mix ``x0 + lam x_self`` and rescale it to the norm of ``x0`` (per row)."""
    lam = torch.as_tensor(lam, dtype=x0.dtype)
    lam_col = lam[..., None] if lam.ndim > 0 else lam
    mixed = x0 + lam_col * x_self
    den = torch.linalg.vector_norm(mixed, dim=-1, keepdim=True)
    num = torch.linalg.vector_norm(x0, dim=-1, keepdim=True)
    safe = torch.where(den < RENORM_EPS, torch.ones_like(den), den)
    keep = (den < RENORM_EPS) | (lam_col == 0)
    return torch.where(keep, x0, mixed * num / safe)


def pair_loss(x0_hat: Tensor, x0: Tensor, x_self: Tensor, lam, renorm_enabled: bool) -> Tensor:
    if renorm_enabled:
        return data_loss(x0_hat, renorm_target(x0, x_self, lam))
    return data_loss(x0_hat, x0) + torch.as_tensor(lam, dtype=x0.dtype) * data_loss(x0_hat, x_self)


def fake_branch_loss(net, x0_samples: Tensor, s, cond: Tensor, n_classes: int,
                     rng: np.random.Generator | None = None, eps: Tensor | None = None) -> Tensor:
    """Flow-matching regression of the fake branch onto detached model samples."""
    x0d, x_s, s_vec = _renoise(x0_samples, s, eps, rng)
    pred = net.predict_x0(x_s.detach(), s_vec, s_vec, fake_rows(cond, n_classes))
    return data_loss(pred, x0d).mean()


def build_targets(batch: TrainingBatch, x0_hat: Tensor, net, cond_net, cfg: ObjectiveConfig,
                  n_classes: int, aux_active: bool) -> PseudoTarget:
    """Pseudo-targets for a batch (conditional branch from ``cond_net``)."""
    if aux_active:
        tgt = pseudo_target_aux(cond_net.predict_x0, net.predict_x0, net.predict_x0, x0_hat, batch.s,
                                batch.cond, n_classes, k_mix=cfg.k, eps=batch.eps_renoise)
    else:
        tgt = pseudo_target_classifier(cond_net.predict_x0, net.predict_x0, x0_hat, batch.s,
                                       batch.cond, n_classes, eps=batch.eps_renoise)
    return tgt


def pair_lambdas(batch: TrainingBatch, cfg: ObjectiveConfig, n_classes: int) -> Tensor:
    """Per-pair self-evaluation weights; zero for null-conditioned pairs."""
    lam = lambda_weight(batch.s, batch.t, cfg.lambda_cap)
    return torch.where(batch.cond == n_classes, torch.zeros_like(lam), lam)


def assemble_loss(x0_hat: Tensor, batch: TrainingBatch, x_self: Tensor | None, lam: Tensor,
                  cfg: ObjectiveConfig, t_min: float = 1e-3) -> Tensor:
    """Pair-weighted mean of per-pair losses for fixed (already detached) targets."""
    w = torch.as_tensor(pair_weight(batch.t.detach().cpu().numpy(), t_min), dtype=x0_hat.dtype)
    if x_self is None:
        per_pair = data_loss(x0_hat, batch.x0)
    else:
        per_pair = pair_loss(x0_hat, batch.x0, x_self, lam, cfg.renorm_enabled)
    return (w * per_pair).mean()


def total_loss(batch: TrainingBatch, net, cond_net, cfg: ObjectiveConfig, n_classes: int, *,
               self_eval: bool = True, aux_active: bool = False, t_min: float = 1e-3):
    """Self-evaluation loss over a batch.

    ``cond_net`` serves the conditional branch of the pseudo-target (the EMA
    copy during training); the unconditional and fake branches use ``net``.
    Returns ``(loss, info)`` where ``info`` carries detached diagnostics and
    the pseudo-target used.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    x0_hat = net.predict_x0(batch.x_t, batch.t, batch.s, batch.cond)
    lam = pair_lambdas(batch, cfg, n_classes)
    tgt = None
    # A non-finite estimate cannot be renoised; the caller sees the non-finite loss instead.
    if self_eval and bool(torch.any(lam > 0)) and bool(torch.isfinite(x0_hat).all()):
        tgt = build_targets(batch, x0_hat, net, cond_net, cfg, n_classes, aux_active)
    loss = assemble_loss(x0_hat, batch, None if tgt is None else tgt.x_self, lam, cfg, t_min)
    info = {
        "x0_hat": x0_hat.detach(),
        "target": tgt,
        "lambda": lam.detach(),
        "data_loss": float(data_loss(x0_hat.detach(), batch.x0).mean()),
        "self_loss": 0.0 if tgt is None else float(data_loss(x0_hat.detach(), tgt.x_self).mean()),
    }
    return loss, info
