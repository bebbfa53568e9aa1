"""Self-contained property suite behind ``selfe verify``.

Each property reports a measured error and the threshold it must stay under.
Objective functions are looked up through the module at call time so a
patched implementation is the one being checked.
"""

from __future__ import annotations

import copy
import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import evalsuite
from . import objective as obj
from . import oracle
from . import sampler as smp
from . import schedule as sch
from .backbone import NetSpec, build_network
from .trainer import TrainPlan, draw_batch, training_step_loss


@dataclass
class PropertyResult:
    name: str
    measured: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.measured) and self.measured <= self.threshold)

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} {self.name:<32} measured={self.measured:.3e} threshold={self.threshold:.1e}"


def random_mixture(rng: np.random.Generator, n_classes: int = 3, n_comp: int = 3, dim: int = 2) -> oracle.GmmCond:
    weights = rng.dirichlet(np.ones(n_comp), size=n_classes)
    means = rng.normal(0.0, 1.5, size=(n_classes, n_comp, dim))
    variances = rng.uniform(0.05, 0.5, size=(n_classes, n_comp))
    priors = rng.dirichlet(np.ones(n_classes))
    return oracle.GmmCond(weights, means, variances, priors)


def _max_rel(a, b, floor: float = 1e-12) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


# -- oracle identities ------------------------------------------------------

def _tweedie_cases(seed: int):
    rng = np.random.default_rng(seed)
    for _ in range(5):
        gmm = random_mixture(rng)
        x = rng.normal(0.0, 2.0, size=(200, 2))
        for t in (0.05, 0.3, 0.7, 0.95):
            for cond in (None, 0, 2):
                yield gmm, x, t, cond


def tweedie_roundtrip(seed: int = 0) -> float:
    """Score -> posterior mean -> score and mean -> score -> mean inversions."""
    err = 0.0
    for gmm, x, t, cond in _tweedie_cases(seed):
        a, s = sch.alpha_sigma(t)
        sc = oracle.score(gmm, x, t, cond)
        err = max(err, _max_rel(oracle.score_from_mean(oracle.posterior_mean(gmm, x, t, cond), x, t), sc, 1e-3))
        direct = oracle.posterior_mean_direct(gmm, x, t, cond)
        err = max(err, _max_rel((x + s * s * oracle.score_from_mean(direct, x, t)) / a, direct, 1e-3))
    return err


def tweedie_matches_direct_mean(seed: int = 0) -> float:
    """Tweedie posterior mean against the component-posterior mean (no score involved)."""
    err = 0.0
    for gmm, x, t, cond in _tweedie_cases(seed):
        err = max(err, _max_rel(oracle.posterior_mean(gmm, x, t, cond),
                                oracle.posterior_mean_direct(gmm, x, t, cond), 1e-3))
    return err


def score_finite_difference(seed: int = 0, h: float = 1e-5) -> float:
    rng = np.random.default_rng(seed)
    gmm = random_mixture(rng)
    x = rng.normal(0.0, 1.5, size=(50, 2))
    err = 0.0
    for t in (0.2, 0.6):
        fd = np.empty_like(x)
        for d in range(2):
            e = np.zeros(2)
            e[d] = h
            lp = oracle.noisy_density(gmm, x + e, t, 1)[0]
            lm = oracle.noisy_density(gmm, x - e, t, 1)[0]
            fd[:, d] = (lp - lm) / (2 * h)
        err = max(err, _max_rel(oracle.score(gmm, x, t, 1), fd, 1e-2))
    return err


def null_score_total_probability(seed: int = 0) -> float:
    """Null-condition score as the posterior-responsibility mixture of class scores."""
    rng = np.random.default_rng(seed)
    err = 0.0
    for _ in range(5):
        gmm = random_mixture(rng)
        x = rng.normal(0.0, 2.0, size=(100, 2))
        for t in (0.1, 0.5, 0.9):
            logp = np.stack([oracle.noisy_density(gmm, x, t, c)[0] for c in range(gmm.n_classes)], axis=1)
            logw = np.log(gmm.priors)[None, :] + logp
            resp = np.exp(logw - np.logaddexp.reduce(logw, axis=1, keepdims=True))
            mix = sum(resp[:, [c]] * oracle.score(gmm, x, t, c) for c in range(gmm.n_classes))
            err = max(err, _max_rel(oracle.score(gmm, x, t, None), mix, 1e-3))
    return err


TS_GRID = ((0.9, 0.5), (0.9, 0.1), (0.5, 0.5), (0.5, 0.1))


def classifier_identity(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    gmm = random_mixture(rng)
    probes = rng.normal(0.0, 1.5, size=(64, 2))
    return max(oracle.verify_classifier_identity(gmm, probes, t, s, cond=1, rng=np.random.default_rng([seed, i]))
               for i, (t, s) in enumerate(TS_GRID))


def aux_identity(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    gmm = random_mixture(rng)
    model = random_mixture(rng)
    probes = rng.normal(0.0, 1.5, size=(64, 2))
    return max(oracle.verify_aux_identity(gmm, model, probes, t, s, k, cond=1, rng=np.random.default_rng([seed, i]))
               for i, (t, s) in enumerate(TS_GRID) for k in (0.0, 0.9, 1.0))


# -- objective --------------------------------------------------------------

def renorm_norm_preservation(seed: int = 0, n: int = 10_000) -> float:
    rng = np.random.default_rng(seed)
    x0 = torch.as_tensor(rng.normal(size=(n, 2)))
    x_self = torch.as_tensor(rng.normal(size=(n, 2)))
    lam = torch.as_tensor(rng.uniform(0.0, 20.0, size=n))
    out = obj.renorm_target(x0, x_self, lam)
    return _max_rel(torch.linalg.vector_norm(out, dim=-1).numpy(), torch.linalg.vector_norm(x0, dim=-1).numpy())


LAMBDA_TABLE = (
    # (s, t, expected)
    (0.3, 0.3, 0.0),
    (0.25, 0.5, 2.0 / 3.0),
    (0.0, 0.5, 1.0),
    (0.1, 0.9, 9.0 - 1.0 / 9.0),
    (0.5, 1.0, 20.0),
    (0.0, 0.99, 20.0),
)


def lambda_edge_cases() -> float:
    err = 0.0
    for s, t, want in LAMBDA_TABLE:
        err = max(err, abs(obj.lambda_weight(s, t, 20.0) - want))
        got = obj.lambda_weight(torch.tensor([s], dtype=torch.float64), torch.tensor([t], dtype=torch.float64), 20.0)
        err = max(err, abs(float(got[0]) - want))
    return err


def equal_times_reduce_to_data_loss(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    t = torch.as_tensor(rng.uniform(0.01, 0.99, size=256))
    lam = obj.lambda_weight(t, t, 20.0)
    x0_hat, x0, x_self = (torch.as_tensor(rng.normal(size=(256, 2))) for _ in range(3))
    err = 0.0
    for renorm in (True, False):
        err = max(err, float((obj.pair_loss(x0_hat, x0, x_self, lam, renorm) - obj.data_loss(x0_hat, x0)).abs().max()))
    return err


def _check_net(seed: int, head_std: float = 0.3) -> torch.nn.Module:
    net = build_network(NetSpec(width=32, depth=3, cond_dim=8), seed=seed, dtype=torch.float64)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        net.head.weight.copy_(head_std * torch.randn(net.head.weight.shape, generator=g, dtype=torch.float64))
        net.head.bias.copy_(head_std * torch.randn(net.head.bias.shape, generator=g, dtype=torch.float64))
    return net


def gradient_check(aux: bool, seed: int = 0, batch_size: int = 12, h: float = 1e-4,
                   floor: float = 1e-6) -> float:
    """Max per-coordinate relative error of autograd vs central differences, in float64.

    The analytic gradient comes from the full training loss. The finite
    differences perturb parameters with the pseudo-targets held fixed, which
    is what the stop-gradient makes the analytic gradient see.
    """
    from .datasets import gmm_4class

    ds = gmm_4class()
    net = _check_net(seed)
    ema = copy.deepcopy(net)
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in ema.parameters():
            p.add_(0.01 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    ema.requires_grad_(False)

    plan = TrainPlan(total_iters=10, warmup_iters=0, aux_start_frac=0.0 if aux else 1.0, batch_size=batch_size,
                     null_prob=0.2)
    spec = sch.ScheduleSpec(tau_anneal_iters=1)
    cfg = obj.ObjectiveConfig()
    rng = np.random.default_rng(seed)
    batch = draw_batch(rng, ds, plan, spec, iteration=5, dtype=torch.float64)
    # Ensure both a null pair and several s < t pairs are present.
    batch.cond[0] = ds.n_classes
    batch.s[1:4] = batch.t[1:4] * 0.5

    loss, info = training_step_loss(batch, net, ema, cfg, plan, spec, ds.n_classes, iteration=5)
    params = list(net.parameters())
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    analytic = torch.cat([(torch.zeros_like(p) if a is None else a).reshape(-1) for p, a in zip(params, analytic)])

    x_self = info["target"].x_self
    lam = info["lambda"]
    mask = lam > 0

    @torch.no_grad()
    def fixed_loss() -> float:
        x0_hat = net.predict_x0(batch.x_t, batch.t, batch.s, batch.cond)
        val = obj.assemble_loss(x0_hat, batch, x_self, lam, cfg, spec.t_min)
        if aux and bool(mask.any()):
            val = val + obj.fake_branch_loss(net, info["x0_hat"][mask], batch.s[mask], batch.cond[mask],
                                             ds.n_classes, eps=batch.eps_renoise[mask])
        return float(val)

    numeric = torch.empty_like(analytic)
    i = 0
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for j in range(flat.numel()):
                orig = float(flat[j])
                flat[j] = orig + h
                up = fixed_loss()
                flat[j] = orig - h
                down = fixed_loss()
                flat[j] = orig
                numeric[i] = (up - down) / (2 * h)
                i += 1
    return _max_rel(analytic.numpy(), numeric.numpy(), floor)


def stop_gradient_blocks_targets(seed: int = 0) -> float:
    """Gradient reaching the conditional-branch network through the targets."""
    from .datasets import gmm_4class

    ds = gmm_4class()
    net = _check_net(seed)
    ema = copy.deepcopy(net)
    ema.requires_grad_(True)
    plan = TrainPlan(total_iters=10, warmup_iters=0, aux_start_frac=0.0, batch_size=16)
    spec = sch.ScheduleSpec(tau_anneal_iters=1)
    batch = draw_batch(np.random.default_rng(seed), ds, plan, spec, 5, torch.float64)
    loss, _ = training_step_loss(batch, net, ema, obj.ObjectiveConfig(), plan, spec, ds.n_classes, 5)
    grads = torch.autograd.grad(loss, list(ema.parameters()), allow_unused=True)
    return max((float(gr.abs().max()) for gr in grads if gr is not None), default=0.0)


def clean_head_parametrization(seed: int = 0) -> float:
    net = _check_net(seed)
    rng = np.random.default_rng(seed)
    x = torch.as_tensor(rng.normal(size=(64, 2)))
    t = torch.as_tensor(rng.uniform(0.0, 1.0, 64))
    s = t * torch.as_tensor(rng.uniform(0.0, 1.0, 64))
    c = torch.as_tensor(rng.integers(0, 9, 64))
    with torch.no_grad():
        g = net.predict_x0(x, t, s, c)
        v = net.predict_velocity(x, t, s, c)
    return float((g - (x - t[:, None] * v)).abs().max())


# -- schedule and sampler ---------------------------------------------------

def warp_identity(seed: int = 0) -> float:
    x = np.random.default_rng(seed).uniform(1e-6, 1 - 1e-6, 1000)
    err = float(np.max(np.abs(sch.warp(x, 0.0) - x)))
    for mu in (0.5, 1.15):
        w = sch.warp(np.sort(x), mu)
        if np.any(np.diff(w) < 0):
            return math.inf
    grid = sch.inference_grid(7, 0.8)
    return max(err, abs(grid[0] - 1.0), abs(grid[-1]))


def ddim_euler_equivalence(seed: int = 0, n: int = 1000) -> float:
    rng = np.random.default_rng(seed)
    err = 0.0
    for _ in range(n):
        t = rng.uniform(0.05, 1.0)
        t_next = rng.uniform(0.0, t * 0.999)
        x = torch.as_tensor(rng.normal(size=(1, 2)))
        v = torch.as_tensor(rng.normal(size=(1, 2)))
        x0_hat = x - t * v
        ddim = smp.ddim_step(x, x0_hat, t, t_next, eta=0.0)
        euler = x + (t_next - t) * v
        err = max(err, float((ddim - euler).abs().max()))
    return err


def ddim_terminal_step(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    x = torch.as_tensor(rng.normal(size=(32, 2)))
    x0_hat = torch.as_tensor(rng.normal(size=(32, 2)))
    err = 0.0
    for eta in (0.0, 0.5, 1.0):
        out = smp.ddim_step(x, x0_hat, 0.7, 0.0, eta, rng)
        err = max(err, float((out - x0_hat).abs().max()))
    return err


def ddim_vp_reduction(seed: int = 0) -> float:
    """Generic noise level against the textbook variance-preserving DDIM formula."""
    rng = np.random.default_rng(seed)
    err = 0.0
    for _ in range(200):
        ab_prev, ab = np.sort(rng.uniform(0.01, 0.99, 2))[::-1]
        eta = rng.uniform()
        want = eta * np.sqrt((1 - ab_prev) / (1 - ab)) * np.sqrt(1 - ab / ab_prev)
        got = smp.ddim_noise_level(np.sqrt(ab), np.sqrt(1 - ab), np.sqrt(ab_prev), np.sqrt(1 - ab_prev), eta)
        err = max(err, abs(got - want))
    return err


def guidance_unit_scale(seed: int = 0) -> float:
    net = _check_net(seed)
    x = torch.as_tensor(np.random.default_rng(seed).normal(size=(32, 2)))
    cond = torch.full((32,), 2, dtype=torch.long)
    err = 0.0
    with torch.no_grad():
        base = net.predict_velocity(x, 0.6, 0.3, cond)
        for mode in ("standard", "energy_preserving"):
            cfg = smp.SamplerConfig(omega=1.0, guidance_mode=mode)
            err = max(err, float((smp.guided_velocity(net, x, 0.6, 0.3, cond, cfg, 4) - base).abs().max()))
    return err


# -- metrics ----------------------------------------------------------------

def w2_bruteforce(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
    cost = ((a[:, None] - b[None]) ** 2).sum(-1)
    best = min(cost[np.arange(8), list(p)].mean() for p in itertools.permutations(range(8)))
    return abs(evalsuite.wasserstein2(a, b) - math.sqrt(best))


def energy_double_loop(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(20, 2)), rng.normal(1.0, 1.0, size=(15, 2))

    def mean_dist(p, q):
        return sum(np.linalg.norm(u - v) for u in p for v in q) / (len(p) * len(q))

    want = 2 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b)
    return abs(evalsuite.energy_distance(a, b) - want)


PROPERTIES: tuple[tuple[str, Callable[[], float], float], ...] = (
    ("tweedie_roundtrip", tweedie_roundtrip, 1e-10),
    ("tweedie_matches_direct_mean", tweedie_matches_direct_mean, 1e-8),
    ("score_finite_difference", score_finite_difference, 1e-6),
    ("null_score_total_probability", null_score_total_probability, 1e-8),
    ("classifier_target_identity", classifier_identity, 1e-6),
    ("aux_target_identity", aux_identity, 1e-6),
    ("renorm_norm_preservation", renorm_norm_preservation, 1e-6),
    ("lambda_edge_cases", lambda_edge_cases, 1e-12),
    ("equal_times_give_data_loss", equal_times_reduce_to_data_loss, 0.0),
    ("clean_head_parametrization", clean_head_parametrization, 1e-12),
    ("gradient_check_classifier", lambda: gradient_check(aux=False), 1e-4),
    ("gradient_check_aux", lambda: gradient_check(aux=True), 1e-4),
    ("stop_gradient_targets", stop_gradient_blocks_targets, 0.0),
    ("warp_identity_and_grid", warp_identity, 1e-12),
    ("ddim_eta0_euler", ddim_euler_equivalence, 1e-10),
    ("ddim_terminal_returns_x0", ddim_terminal_step, 0.0),
    ("ddim_vp_reduction", ddim_vp_reduction, 1e-12),
    ("guidance_unit_scale", guidance_unit_scale, 1e-12),
    ("w2_bruteforce", w2_bruteforce, 1e-10),
    ("energy_distance_double_loop", energy_double_loop, 1e-12),
)


def run_properties(names=None) -> list[PropertyResult]:
    if names is not None:
        unknown = sorted(set(names) - {name for name, _, _ in PROPERTIES})
        if unknown:
            raise ValueError(f"unknown properties: {', '.join(unknown)}")
    results = []
    for name, fn, threshold in PROPERTIES:
        if names is not None and name not in names:
            continue
        try:
            measured = float(fn())
        except Exception:  # a crashing property is a failing one
            measured = math.inf
        results.append(PropertyResult(name, measured, threshold))
    return results
