import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from selfe.datasets import gmm_4class
from selfe.evalsuite import (
    SINKHORN_REG,
    MetricReport,
    _sinkhorn_w2,
    aggregate,
    bootstrap_w2_std,
    energy_distance,
    monotonicity_check,
    step_sweep,
    w2_method,
    wasserstein2,
    write_reports_csv,
)


def brute_w2(a, b):
    n = len(a)
    cost = ((a[:, None] - b[None]) ** 2).sum(-1)
    return math.sqrt(min(cost[np.arange(n), list(p)].mean() for p in itertools.permutations(range(n))))


def test_w2_identity_and_translation():
    a = np.random.default_rng(0).normal(size=(50, 2))
    assert wasserstein2(a, a) == 0.0
    v = np.array([0.3, -1.2])
    assert wasserstein2(a, a + v) == pytest.approx(np.linalg.norm(v), abs=1e-12)
    assert wasserstein2(np.zeros((4, 2)), np.tile(v, (4, 1))) == pytest.approx(np.linalg.norm(v), abs=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_w2_matches_exhaustive_assignment(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
    assert wasserstein2(a, b) == pytest.approx(brute_w2(a, b), abs=1e-10)


def test_w2_one_dimensional_sorted():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=7), rng.normal(size=7)
    assert wasserstein2(a, b) == pytest.approx(brute_w2(a[:, None], b[:, None]), abs=1e-12)


def test_w2_symmetry_and_triangle():
    rng = np.random.default_rng(4)
    for _ in range(20):
        a, b, c = (rng.normal(size=(30, 2)) + rng.normal(size=2) for _ in range(3))
        assert abs(wasserstein2(a, b) - wasserstein2(b, a)) <= 1e-10
        assert wasserstein2(a, c) <= wasserstein2(a, b) + wasserstein2(b, c) + 1e-10


def test_w2_permutation_invariant_and_errors():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(20, 2))
    assert wasserstein2(a, a[rng.permutation(20)]) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        wasserstein2(a, a[:10])
    with pytest.raises(ValueError):
        wasserstein2(np.empty((0, 2)), a)


def test_w2_dispatch():
    assert w2_method(512, 2) == "exact"
    assert w2_method(1024, 2) == "exact"
    assert w2_method(2048, 2).startswith("sinkhorn")
    assert w2_method(5000, 1) == "exact"


def test_sinkhorn_close_to_exact():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(200, 2)), rng.normal(0.5, 1.2, size=(200, 2))
    exact = wasserstein2(a, b)
    assert _sinkhorn_w2(a, b, SINKHORN_REG) == pytest.approx(exact, rel=0.03)
    assert _sinkhorn_w2(a, a + np.array([1.0, 0.0]), SINKHORN_REG) == pytest.approx(1.0, rel=0.03)


def test_energy_distance_examples():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(12, 2))
    assert energy_distance(a, a) == pytest.approx(0.0, abs=1e-12)
    assert energy_distance(a, a[::-1]) == pytest.approx(0.0, abs=1e-12)
    b = rng.normal(1.0, size=(9, 2))

    def md(p, q):
        return sum(np.linalg.norm(u - v) for u in p for v in q) / (len(p) * len(q))

    assert energy_distance(a, b) == pytest.approx(2 * md(a, b) - md(a, a) - md(b, b), abs=1e-12)


def test_energy_distance_nonnegative():
    rng = np.random.default_rng(8)
    for _ in range(1000):
        n, m = rng.integers(1, 8, 2)
        assert energy_distance(rng.normal(size=(n, 2)), rng.normal(size=(m, 2))) >= 0.0


@given(arrays(np.int64, (5, 2), elements=st.integers(-3, 3)), arrays(np.int64, (5, 2), elements=st.integers(-3, 3)))
@settings(max_examples=60)
def test_energy_zero_iff_same_multiset(a, b):
    same = sorted(map(tuple, a)) == sorted(map(tuple, b))
    e = energy_distance(a, b)
    if same:
        assert e == pytest.approx(0.0, abs=1e-12)
    else:
        assert e > 1e-9


def test_bootstrap_std_reproducible():
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(64, 2)), rng.normal(size=(64, 2))
    s1 = bootstrap_w2_std(a, b, np.random.default_rng(1), 50)
    s2 = bootstrap_w2_std(a, b, np.random.default_rng(1), 50)
    assert s1 == s2 > 0


def oracle_sample_fn(ds):
    return lambda c, k, n, rng: ds.sample(rng, n, c)


def test_step_sweep_oracle_within_floor():
    ds = gmm_4class()
    n = 128
    reports = step_sweep(oracle_sample_fn(ds), lambda c, n, rng: ds.sample(rng, n, c), range(4), [1, 2, 4], n,
                         seed=0, n_boot=30)
    assert len(reports) == 12
    for c in range(4):
        # Null distribution of W2 between two independent exact draws.
        null = [wasserstein2(ds.sample(np.random.default_rng([50, c, i]), n, c),
                             ds.sample(np.random.default_rng([51, c, i]), n, c)) for i in range(40)]
        mu, sd = np.mean(null), np.std(null, ddof=1)
        for r in (r for r in reports if r.condition == c):
            assert abs(r.w2 - mu) <= 4 * sd


def test_step_sweep_pure_function():
    ds = gmm_4class()
    args = (oracle_sample_fn(ds), lambda c, n, rng: ds.sample(rng, n, c), [0, 1], [1, 2], 64, 3)
    a = step_sweep(*args, n_boot=10)
    b = step_sweep(*args, n_boot=10)
    strip = lambda rs: [{k: v for k, v in r.as_row().items() if k != "wall_clock_s"} for r in rs]  # noqa: E731
    assert strip(a) == strip(b)


def report(c, k, w2, sd=0.01):
    return MetricReport("m", c, k, w2, sd, 0.0, 100, 0, "exact", 0.0)


def test_monotonicity_examples():
    dec = [report(0, k, w) for k, w in zip([1, 2, 4, 8, 32], [1.0, 0.8, 0.5, 0.3, 0.2])]
    flat = [report(0, k, 0.5 + 0.005 * i) for i, k in enumerate([1, 2, 4, 8, 32])]
    jump = [report(0, k, w) for k, w in zip([1, 2, 4, 8, 32], [0.5, 0.5, 0.5 + 5 * np.hypot(0.01, 0.01), 0.5, 0.5])]
    assert monotonicity_check(dec) == {0: True}
    assert monotonicity_check(flat) == {0: True}
    assert monotonicity_check(jump) == {0: False}
    with pytest.raises(ValueError):
        monotonicity_check(dec[:2])


def test_aggregate():
    rs = [report(0, 1, 1.0, 0.3), report(1, 1, 3.0, 0.4)]
    mean, sd = aggregate(rs)[1]
    assert mean == 2.0
    assert sd == pytest.approx(0.25)


def test_reports_csv_is_stable(tmp_path):
    rs = [report(0, 1, 0.123456789), report(1, 1, 0.5)]
    rs[1].wall_clock_s = 99.0
    write_reports_csv(tmp_path / "a.csv", rs, "# config_hash=abc seed=1")
    rs[1].wall_clock_s = 3.0
    write_reports_csv(tmp_path / "b.csv", rs, "# config_hash=abc seed=1")
    a = (tmp_path / "a.csv").read_bytes()
    assert a == (tmp_path / "b.csv").read_bytes()
    assert a.startswith(b"# config_hash=abc seed=1\n")
    assert b"wall_clock" not in a
