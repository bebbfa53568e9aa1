"""Sample-quality metrics against exact ground-truth samplers."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

EXACT_LIMIT = 1024
SINKHORN_REG = 0.01

# (condition, n_steps, n, rng) -> (n, d) array
SampleFn = Callable[[int, int, int, np.random.Generator], np.ndarray]


def _as_points(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def w2_method(n: int, d: int) -> str:
    if d == 1 or n <= EXACT_LIMIT:
        return "exact"
    return f"sinkhorn(reg={SINKHORN_REG})"


def _sinkhorn_w2(a: np.ndarray, b: np.ndarray, reg: float, iters: int = 2000, tol: float = 1e-7) -> float:
    # Log-domain Sinkhorn on uniform marginals; reg is relative to the mean cost.
    # Stops once the transport cost changes by less than tol (relative) over 10 sweeps.
    cost = cdist(a, b, "sqeuclidean")
    eps = reg * cost.mean()
    n, m = cost.shape
    log_mu, log_nu = -np.log(n) * np.ones(n), -np.log(m) * np.ones(m)
    f, g = np.zeros(n), np.zeros(m)

    def transport_cost():
        return float((np.exp((f[:, None] + g[None, :] - cost) / eps) * cost).sum())

    prev = np.inf
    for it in range(iters):
        f = eps * (log_mu - logsumexp((g[None, :] - cost) / eps, axis=1))
        g = eps * (log_nu - logsumexp((f[:, None] - cost) / eps, axis=0))
        if it % 10 == 9:
            cur = transport_cost()
            if abs(cur - prev) <= tol * cur:
                break
            prev = cur
    return float(np.sqrt(max(transport_cost(), 0.0)))


def wasserstein2(a, b) -> float:
    """Wasserstein-2 distance between two equally weighted point sets."""
    a, b = _as_points(a), _as_points(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("empty point set")
    if a.shape[1] != b.shape[1]:
        raise ValueError("point sets differ in dimension")
    if a.shape[1] == 1 and a.shape[0] == b.shape[0]:
        return float(np.sqrt(np.mean((np.sort(a[:, 0]) - np.sort(b[:, 0])) ** 2)))
    if a.shape[0] != b.shape[0]:
        raise ValueError("exact W2 needs equal sample sizes")
    if a.shape[0] > EXACT_LIMIT:
        return _sinkhorn_w2(a, b, SINKHORN_REG)
    cost = cdist(a, b, "sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def energy_distance(a, b) -> float:
    """V-statistic ``2 E|A-B| - E|A-A'| - E|B-B'|``."""
    a, b = _as_points(a), _as_points(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("empty point set")
    val = 2 * cdist(a, b).mean() - cdist(a, a).mean() - cdist(b, b).mean()
    return float(max(val, 0.0))


def bootstrap_w2_std(model: np.ndarray, truth: np.ndarray, rng: np.random.Generator, n_boot: int = 200) -> float:
    """Bootstrap std of W2 under resampling of the model samples."""
    n = model.shape[0]
    vals = [wasserstein2(model[rng.integers(n, size=n)], truth) for _ in range(n_boot)]
    return float(np.std(vals, ddof=1)) if n_boot > 1 else 0.0


@dataclass
class MetricReport:
    model: str
    condition: int
    n_steps: int
    w2: float
    w2_std: float
    energy: float
    n: int
    seed: int
    w2_method: str
    wall_clock_s: float

    def as_row(self) -> dict:
        return asdict(self)


def _cell_seed(seed: int, *parts: int) -> np.random.Generator:
    return np.random.default_rng([seed, *parts])


def step_sweep(sample_fn: SampleFn, truth_fn, conditions: Sequence[int], steps: Sequence[int], n: int,
               seed: int, model: str = "model", n_boot: int = 200) -> list[MetricReport]:
    """Metrics for every (condition, step count) cell.

    ``truth_fn(cond, n, rng)`` draws exact samples. Ground truth per
    condition and the sampler's random stream are shared across step counts,
    so differences between step counts are not blurred by resampling noise.
    """
    reports = []
    for c in conditions:
        truth = truth_fn(c, n, _cell_seed(seed, 0, c))
        for k in steps:
            t0 = time.perf_counter()
            x = np.asarray(sample_fn(c, k, n, _cell_seed(seed, 1, c)), dtype=float)
            w2 = wasserstein2(x, truth)
            sd = bootstrap_w2_std(x, truth, _cell_seed(seed, 2, c, k), n_boot)
            reports.append(MetricReport(model, c, k, w2, sd, energy_distance(x, truth), n, seed,
                                        w2_method(n, x.shape[1]), time.perf_counter() - t0))
    return reports


def aggregate(reports: Sequence[MetricReport]) -> dict[int, tuple[float, float]]:
    """Per step count: mean W2 over conditions and the std of that mean."""
    out = {}
    for k in sorted({r.n_steps for r in reports}):
        cell = [r for r in reports if r.n_steps == k]
        out[k] = (float(np.mean([r.w2 for r in cell])),
                  float(np.sqrt(np.sum([r.w2_std ** 2 for r in cell])) / len(cell)))
    return out


def monotonicity_check(reports: Sequence[MetricReport], tolerance: float = 3.0) -> dict[int, bool]:
    """Per condition: W2 never rises above an earlier step count's by more than ``tolerance`` noise floors."""
    verdicts = {}
    for c in sorted({r.condition for r in reports}):
        series = sorted((r for r in reports if r.condition == c), key=lambda r: r.n_steps)
        if len(series) < 3:
            raise ValueError("monotonicity needs at least three step counts")
        ok = True
        for j, later in enumerate(series):
            for earlier in series[:j]:
                floor = np.hypot(earlier.w2_std, later.w2_std)
                if later.w2 > earlier.w2 + tolerance * floor:
                    ok = False
        verdicts[c] = ok
    return verdicts


def write_reports_csv(path, reports: Sequence[MetricReport], header: str = "") -> None:
    # wall-clock stays out of the CSV so reruns are byte-identical
    cols = [c for c in MetricReport.__dataclass_fields__ if c != "wall_clock_s"]
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header + "\n")
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in reports:
            row = r.as_row()
            for key in ("w2", "w2_std", "energy"):
                row[key] = f"{row[key]:.9e}"
            del row["wall_clock_s"]
            w.writerow(row)
