"""Acceptance suite: one PASS/FAIL line per criterion.

Criteria 7-11 train four 20k-iteration runs on one core (about 18 minutes in
total). Deselect with ``-m "not acceptance"`` for a quick run.
"""

import csv
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from selfe import evalsuite
from selfe.cli import cmd_eval, main
from selfe.config import load
from selfe.verify import gradient_check

pytestmark = pytest.mark.acceptance

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
STEPS = [1, 2, 4, 8, 32]
FLOOR_MULT = 3.0  # few-step margin, in units of the combined noise floor


@pytest.fixture
def report(pytestconfig, capsys):
    """Record one PASS/FAIL line; it prints inline and again in the terminal summary."""

    def emit(number, title, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:>2}: {title} | {detail}"
        pytestconfig.stash[ACCEPTANCE_LINES].append((number, line))
        with capsys.disabled():
            print("\n" + line, flush=True)
        return passed

    return emit


def combined_floor(a, b):
    return float(np.hypot(a[1], b[1]))


@pytest.fixture(scope="session")
def root(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


def _train(root, name):
    run = root / name
    t0 = time.perf_counter()
    assert main(["train", "--config", str(CONFIGS / f"{name}.toml"), "--out", str(run)]) == 0
    return run, time.perf_counter() - t0


def _eval(run, steps):
    reports = cmd_eval(run, steps=steps)
    return reports, evalsuite.aggregate(reports)


@pytest.fixture(scope="session")
def self_e(root):
    run, secs = _train(root, "desk")
    reports, agg = _eval(run, STEPS)
    return {"run": run, "train_s": secs, "reports": reports, "agg": agg}


@pytest.fixture(scope="session")
def baseline(root):
    run, secs = _train(root, "desk-fm")
    reports, agg = _eval(run, STEPS)
    return {"run": run, "train_s": secs, "reports": reports, "agg": agg}


@pytest.fixture(scope="session")
def verify_output():
    proc = subprocess.run([sys.executable, "-m", "selfe", "verify"], capture_output=True, text=True)
    measured = {}
    for line in proc.stdout.splitlines():
        parts = line.split()
        if parts and parts[0] in ("PASS", "FAIL"):
            measured[parts[1]] = (parts[0] == "PASS", float(parts[2].split("=")[1]))
    return proc.returncode, measured


def _props(verify_output, names):
    _, measured = verify_output
    return all(measured[n][0] for n in names), ", ".join(f"{n}={measured[n][1]:.2e}" for n in names)


def test_c01_gradient_correctness(report):
    t0 = time.perf_counter()
    errs = [gradient_check(aux=False), gradient_check(aux=True)]
    secs = time.perf_counter() - t0
    ok = max(errs) <= 1e-4 and secs <= 60.0
    assert report(1, "gradient check vs central differences", ok,
                  f"classifier={errs[0]:.2e} aux={errs[1]:.2e} (<= 1e-4), runtime={secs:.1f}s (<= 60s)")


def test_c02_classifier_identity(verify_output, report):
    ok, detail = _props(verify_output, ["classifier_target_identity"])
    assert report(2, "classifier-score identity with oracle denoisers", ok, detail + " (<= 1e-6)")


def test_c03_aux_identity(verify_output, report):
    ok, detail = _props(verify_output, ["aux_target_identity"])
    assert report(3, "mixed classifier/aux identity, k in {0, 0.9, 1}", ok, detail + " (<= 1e-6)")


def test_c04_tweedie(verify_output, report):
    ok, detail = _props(verify_output, ["tweedie_roundtrip", "tweedie_matches_direct_mean"])
    assert report(4, "score <-> posterior mean round trip", ok, detail + " (<= 1e-10, <= 1e-8)")


def test_c05_renorm(verify_output, report):
    ok, detail = _props(verify_output, ["renorm_norm_preservation", "equal_times_give_data_loss"])
    assert report(5, "renormalized target keeps the norm; s = t gives data loss", ok, detail + " (<= 1e-6, == 0)")


def test_c06_sampler_identity(verify_output, report):
    ok, detail = _props(verify_output, ["ddim_eta0_euler", "ddim_terminal_returns_x0"])
    assert report(6, "eta=0 step equals Euler; final step returns x0", ok, detail + " (<= 1e-10, == 0)")


def test_c07_few_step_superiority(self_e, baseline, report):
    parts, ok = [], True
    for k in (1, 2):
        se, fm = self_e["agg"][k], baseline["agg"][k]
        floor = combined_floor(se, fm)
        margin = fm[0] - se[0]
        ok &= margin > FLOOR_MULT * floor
        parts.append(f"{k}-step SE={se[0]:.4f} FM={fm[0]:.4f} margin={margin:.4f} vs 3x floor={FLOOR_MULT * floor:.4f}")
    runtime = self_e["train_s"] + baseline["train_s"]
    ok &= runtime <= 30 * 60
    assert report(7, "Self-E beats flow matching at 1 and 2 steps", ok,
                  "; ".join(parts) + f"; training {runtime / 60:.1f} min (<= 30)")


def test_c08_monotonicity(self_e, report):
    verdicts = evalsuite.monotonicity_check(self_e["reports"], tolerance=3.0)
    n_ok = sum(verdicts.values())
    curve = " ".join(f"{k}:{self_e['agg'][k][0]:.3f}" for k in STEPS)
    assert report(8, "W2 non-increasing in steps within tolerance", n_ok >= 3,
                  f"{n_ok}/4 conditions monotone (>= 3); mean W2 {curve}")


def test_c09_many_step_parity(self_e, baseline, report):
    se, fm = self_e["agg"][32], baseline["agg"][32]
    floor = combined_floor(se, fm)
    ok = se[0] <= fm[0] + floor
    assert report(9, "32-step Self-E within the noise floor of flow matching", ok,
                  f"SE={se[0]:.4f} FM={fm[0]:.4f} gap={se[0] - fm[0]:.4f} vs floor={floor:.4f}")


def test_c10_aux_from_start_ablation(root, self_e, report):
    run, _ = _train(root, "desk-aux0")
    _, agg = _eval(run, [4])
    se, ab = self_e["agg"][4], agg[4]
    floor = combined_floor(se, ab)
    gap = ab[0] - se[0]
    out = root / "ablation_aux_start.csv"
    with open(out, "w", newline="") as fh:
        fh.write(load(run / "config.toml").csv_header() + "\n")
        w = csv.writer(fh)
        w.writerow(["n_steps", "aux_start=0.77", "aux_start=0.77_std", "aux_start=0", "aux_start=0_std"])
        w.writerow([4, f"{se[0]:.9e}", f"{se[1]:.9e}", f"{ab[0]:.9e}", f"{ab[1]:.9e}"])
    assert report(10, "aux term from iteration 0 is worse at 4 steps", gap > floor,
                  f"aux0={ab[0]:.4f} default={se[0]:.4f} gap={gap:.4f} vs floor={floor:.4f}; {out.name}")


def test_c11_determinism(root, self_e, verify_output, report):
    again = root / "desk-rerun"
    assert main(["train", "--config", str(CONFIGS / "desk.toml"), "--out", str(again)]) == 0
    same = (again / "metrics.csv").read_bytes() == (self_e["run"] / "metrics.csv").read_bytes()
    code, measured = verify_output
    n_pass = sum(p for p, _ in measured.values())
    assert report(11, "byte-identical metrics.csv on rerun; verify exits 0", same and code == 0,
                  f"metrics identical={same}; verify exit={code} ({n_pass}/{len(measured)} properties)")
