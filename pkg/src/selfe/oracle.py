"""Closed-form ground truth for class-conditional isotropic Gaussian mixtures.

Under ``x_t = (1 - t) x0 + t eps`` a component ``N(mu, v I)`` becomes
``N((1 - t) mu, ((1 - t)^2 v + t^2) I)``, so every noisy density, score and
posterior mean below is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import logsumexp

from .schedule import alpha_sigma


@dataclass
class GmmCond:
    """Per-class isotropic mixtures.

    ``weights[c]`` has shape (M_c,), ``means[c]`` (M_c, d), ``variances[c]``
    (M_c,). ``priors`` has shape (K,).
    """

    weights: list
    means: list
    variances: list
    priors: np.ndarray

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.means = [np.atleast_2d(np.asarray(m, dtype=float)) for m in self.means]
        self.variances = [np.asarray(v, dtype=float) for v in self.variances]
        self.priors = np.asarray(self.priors, dtype=float)
        k = len(self.weights)
        if not (len(self.means) == len(self.variances) == self.priors.size == k):
            raise ValueError("weights, means, variances and priors disagree on the class count")
        if abs(self.priors.sum() - 1.0) > 1e-9 or np.any(self.priors < 0):
            raise ValueError("class priors must form a distribution")
        for w, m, v in zip(self.weights, self.means, self.variances):
            if abs(w.sum() - 1.0) > 1e-9 or np.any(w < 0):
                raise ValueError("component weights must form a distribution")
            if np.any(v <= 0):
                raise ValueError("component variances must be positive")
            if not (w.shape[0] == m.shape[0] == v.shape[0]) or m.shape[1] != self.dim:
                raise ValueError("inconsistent component shapes")

    @property
    def n_classes(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means[0].shape[1]

    def components(self, cond: int | None):
        """Flattened ``(log_weights, means, variances)``; ``cond=None`` is the null condition."""
        if cond is None:
            lw = np.concatenate([np.log(p) + np.log(w) for p, w in zip(self.priors, self.weights) if p > 0])
            mu = np.concatenate([m for p, m in zip(self.priors, self.means) if p > 0])
            var = np.concatenate([v for p, v in zip(self.priors, self.variances) if p > 0])
            return lw, mu, var
        if not 0 <= cond < self.n_classes:
            raise ValueError(f"condition {cond} out of range")
        return np.log(self.weights[cond]), self.means[cond], self.variances[cond]

    def mean(self, cond: int | None = None) -> np.ndarray:
        lw, mu, _ = self.components(cond)
        return np.exp(lw) @ mu

    def sample(self, rng: np.random.Generator, n: int, cond: int | None = None) -> np.ndarray:
        return sample_ground_truth(self, rng, n, cond)

    def sample_labeled(self, rng: np.random.Generator, n: int):
        labels = rng.choice(self.n_classes, size=n, p=self.priors)
        x = np.empty((n, self.dim))
        for c in range(self.n_classes):
            idx = np.flatnonzero(labels == c)
            if idx.size:
                x[idx] = sample_ground_truth(self, rng, idx.size, c)
        return x, labels


def _noisy_terms(gmm: GmmCond, x, t: float, cond):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    a, s = alpha_sigma(t)
    lw, mu, var = gmm.components(cond)
    tot = a * a * var + s * s  # (M,)
    diff = x[:, None, :] - a * mu[None, :, :]  # (n, M, d)
    d = x.shape[1]
    logn = -0.5 * (diff ** 2).sum(-1) / tot - 0.5 * d * np.log(2 * np.pi * tot)
    logj = lw[None, :] + logn
    return x, a, s, mu, var, tot, diff, logj


def noisy_density(gmm: GmmCond, x, t: float, cond=None):
    """Log-density and score of the noisy marginal ``q(x_t | cond)``.

    ``cond=None`` selects the null condition (classes mixed by prior).
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    x, a, s, mu, var, tot, diff, logj = _noisy_terms(gmm, x, t, cond)
    logp = logsumexp(logj, axis=1)
    resp = np.exp(logj - logp[:, None])
    score = -(resp[:, :, None] * diff / tot[None, :, None]).sum(1)
    return logp, score


def score(gmm: GmmCond, x, t: float, cond=None) -> np.ndarray:
    return noisy_density(gmm, x, t, cond)[1]


def posterior_mean(gmm: GmmCond, x, t: float, cond=None) -> np.ndarray:
    """Tweedie: ``E[x0 | x_t] = (x_t + sigma_t^2 score) / alpha_t``."""
    a, s = alpha_sigma(t)
    if a < 1e-6:
        raise ValueError("posterior mean is ill-conditioned for alpha_t < 1e-6")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return (x + s * s * score(gmm, x, t, cond)) / a


def posterior_mean_direct(gmm: GmmCond, x, t: float, cond=None) -> np.ndarray:
    """Posterior mean from per-component Gaussian posteriors (no score involved)."""
    x, a, s, mu, var, tot, diff, logj = _noisy_terms(gmm, x, t, cond)
    resp = np.exp(logj - logsumexp(logj, axis=1, keepdims=True))
    gain = (a * var / tot)[None, :, None]
    comp_means = mu[None, :, :] + gain * diff
    return (resp[:, :, None] * comp_means).sum(1)


def score_from_mean(mean, x, t: float) -> np.ndarray:
    a, s = alpha_sigma(t)
    return (a * np.asarray(mean) - np.asarray(x)) / (s * s)


def classifier_score(gmm: GmmCond, x, t: float, cond: int) -> np.ndarray:
    """``grad log q(x|null) - grad log q(x|cond)``."""
    return score(gmm, x, t, None) - score(gmm, x, t, cond)


def sample_ground_truth(gmm: GmmCond, rng: np.random.Generator, n: int, cond=None) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    lw, mu, var = gmm.components(cond)
    w = np.exp(lw)
    comp = rng.choice(w.size, size=n, p=w / w.sum())
    return mu[comp] + np.sqrt(var[comp])[:, None] * rng.standard_normal((n, gmm.dim))


class OracleDenoiser:
    """Network stand-in whose clean-sample head is an exact posterior mean.

    Condition rows follow the backbone layout: class rows map to the data
    mixture, the null row to the prior-mixed data marginal, fake rows to
    ``model`` (a second mixture playing the generator's distribution).
    ``cond_bias`` is added to class-row predictions only.
    """

    def __init__(self, gmm: GmmCond, model: GmmCond | None = None, cond_bias: float = 0.0):
        self.gmm = gmm
        self.model = model
        self.cond_bias = cond_bias

    def _mean(self, x: np.ndarray, t: float, row: int) -> np.ndarray:
        k = self.gmm.n_classes
        if row < k:
            return posterior_mean_direct(self.gmm, x, t, row) + self.cond_bias
        if row == k:
            return posterior_mean_direct(self.gmm, x, t, None)
        if self.model is None:
            raise ValueError("fake condition requested but no model mixture given")
        return posterior_mean_direct(self.model, x, t, row - k - 1)

    def predict_x0(self, x: torch.Tensor, t, s, cond) -> torch.Tensor:
        n = x.shape[0]
        xn = x.detach().cpu().numpy().astype(float)
        tn = np.broadcast_to(np.asarray(torch.as_tensor(t).detach().cpu(), dtype=float), (n,))
        cn = np.broadcast_to(np.asarray(torch.as_tensor(cond).cpu(), dtype=int), (n,))
        out = np.empty_like(xn)
        for tv, cv in {(float(a), int(b)) for a, b in zip(tn, cn)}:
            idx = np.flatnonzero((tn == tv) & (cn == cv))
            if tv == 0.0:
                out[idx] = xn[idx]
            else:
                out[idx] = self._mean(xn[idx], tv, cv)
        return torch.as_tensor(out, dtype=x.dtype)

    def predict_velocity(self, x: torch.Tensor, t, s, cond) -> torch.Tensor:
        t_b = torch.as_tensor(t, dtype=x.dtype).expand(x.shape[0])
        return (x - self.predict_x0(x, t, s, cond)) / t_b[:, None]


def _rel_err(lhs: np.ndarray, rhs: np.ndarray, floor_frac: float = 1e-6) -> float:
    """Max per-probe relative error.

    Probes where the reference field is negligible (below ``floor_frac`` of
    its largest magnitude, e.g. far outside every class's support) are
    measured against that floor instead, since a relative error of a
    vanishing quantity only reports float cancellation.
    """
    num = np.linalg.norm(lhs - rhs, axis=-1)
    mag = np.linalg.norm(rhs, axis=-1)
    den = np.maximum(mag, max(floor_frac * mag.max(), 1e-12))
    # Both sides vanish (e.g. single-class data): exact agreement.
    both_zero = (mag < 1e-14) & (num < 1e-14)
    return float(np.max(np.where(both_zero, 0.0, num / den)))


def _self_eval_grad(target_fn, probes: np.ndarray, s: float, eps: np.ndarray) -> np.ndarray:
    """Autograd of ``||x0_hat - x_self||^2`` w.r.t. the re-noised point.

    ``x0_hat = (x_s - sigma_s eps) / alpha_s`` is the differentiable preimage
    of each probe; ``target_fn`` builds the (detached) pseudo-target.
    """
    a, sg = alpha_sigma(s)
    x_s = torch.tensor(probes, dtype=torch.float64, requires_grad=True)
    eps_t = torch.as_tensor(eps, dtype=torch.float64)
    x0_hat = (x_s - sg * eps_t) / a
    target = target_fn(x0_hat, eps_t)
    loss = ((x0_hat - target.x_self) ** 2).sum()
    (grad,) = torch.autograd.grad(loss, x_s)
    return grad.numpy()


def verify_classifier_identity(gmm: GmmCond, probes, t: float, s: float, cond: int = 0,
                   rng: np.random.Generator | None = None, cond_bias: float = 0.0) -> float:
    """Max relative error between the self-evaluation gradient and the scaled classifier score.

    The network is replaced by exact posterior means; the gradient is taken
    by autograd through the classifier pseudo-target, and compared with
    ``(2 sigma_s^2 / alpha_s^2) * classifier_score`` evaluated from scores.
    """
    from .objective import pseudo_target_classifier

    if not (0.0 < s < 1.0 and s <= t <= 1.0):
        raise ValueError("need 0 < s <= t <= 1 and s < 1")
    rng = rng or np.random.default_rng(0)
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    eps = rng.standard_normal(probes.shape)
    view = OracleDenoiser(gmm, cond_bias=cond_bias)
    cond_t = torch.full((probes.shape[0],), cond, dtype=torch.long)

    def target(x0_hat, eps_t):
        return pseudo_target_classifier(view.predict_x0, view.predict_x0, x0_hat, s, cond_t,
                                        gmm.n_classes, eps=eps_t)

    lhs = _self_eval_grad(target, probes, s, eps)
    a, sg = alpha_sigma(s)
    rhs = 2 * sg ** 2 / a ** 2 * classifier_score(gmm, probes, s, cond)
    return _rel_err(lhs, rhs)


def verify_aux_identity(gmm: GmmCond, model: GmmCond, probes, t: float, s: float, k: float,
                   cond: int = 0, rng: np.random.Generator | None = None) -> float:
    """As :func:`verify_classifier_identity` with the auxiliary (fake-branch) mixing."""
    from .objective import pseudo_target_aux

    if not (0.0 < s < 1.0 and s <= t <= 1.0):
        raise ValueError("need 0 < s <= t <= 1 and s < 1")
    rng = rng or np.random.default_rng(0)
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    eps = rng.standard_normal(probes.shape)
    view = OracleDenoiser(gmm, model=model)
    cond_t = torch.full((probes.shape[0],), cond, dtype=torch.long)

    def target(x0_hat, eps_t):
        return pseudo_target_aux(view.predict_x0, view.predict_x0, view.predict_x0, x0_hat, s, cond_t,
                                 gmm.n_classes, k_mix=k, eps=eps_t)

    lhs = _self_eval_grad(target, probes, s, eps)
    a, sg = alpha_sigma(s)
    sc = score(gmm, probes, s, cond)
    rhs = 2 * sg ** 2 / a ** 2 * (
        k * (score(gmm, probes, s, None) - sc) + (1 - k) * (score(model, probes, s, cond) - sc)
    )
    return _rel_err(lhs, rhs)
