import math

import pytest
import torch

import selfe.objective
import selfe.sampler
from selfe.cli import main
from selfe.verify import PROPERTIES, PropertyResult, run_properties


@pytest.fixture(scope="module")
def full_run():
    return run_properties()


def test_suite_size_and_all_pass(full_run):
    assert len(full_run) >= 12
    assert len({r.name for r in full_run}) == len(full_run)
    failed = [r.line() for r in full_run if not r.passed]
    assert not failed, failed


def test_lines_report_measured_and_threshold(full_run):
    for r in full_run:
        line = r.line()
        assert line.startswith("PASS " + r.name)
        assert "measured=" in line and "threshold=" in line


def test_result_verdicts():
    assert PropertyResult("a", 0.0, 0.0).passed
    assert not PropertyResult("a", 2e-6, 1e-6).passed
    assert not PropertyResult("a", math.nan, 1.0).passed
    assert not PropertyResult("a", math.inf, 1.0).line().startswith("PASS")


def test_sign_flipped_lambda_fails(monkeypatch):
    real = selfe.objective.lambda_weight
    monkeypatch.setattr(selfe.objective, "lambda_weight", lambda s, t, cap=20.0: -real(s, t, cap))
    (r,) = run_properties(["lambda_edge_cases"])
    assert not r.passed
    assert r.measured >= 1.0


def test_broken_renorm_fails(monkeypatch):
    real = selfe.objective.renorm_target
    monkeypatch.setattr(selfe.objective, "renorm_target", lambda x0, xs, lam: 1.01 * real(x0, xs, lam))
    (r,) = run_properties(["renorm_norm_preservation"])
    assert not r.passed


def test_broken_ddim_fails(monkeypatch):
    real = selfe.sampler.ddim_step

    def shifted(x_t, x0_hat, t, t_next, eta, rng=None):
        return real(x_t, x0_hat, t, t_next, eta, rng) + 1e-6

    monkeypatch.setattr(selfe.sampler, "ddim_step", shifted)
    results = {r.name: r for r in run_properties(["ddim_eta0_euler", "ddim_terminal_returns_x0"])}
    assert not results["ddim_eta0_euler"].passed
    assert not results["ddim_terminal_returns_x0"].passed


def test_crashing_property_fails(monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("broken")

    monkeypatch.setattr(selfe.objective, "lambda_weight", boom)
    (r,) = run_properties(["lambda_edge_cases"])
    assert r.measured == math.inf and not r.passed


def test_cli_exit_codes(monkeypatch, capsys):
    assert main(["verify", "--only", "lambda_edge_cases"]) == 0
    assert "1/1 properties passed" in capsys.readouterr().out
    assert main(["verify", "--only", "no_such_property"]) == 2
    monkeypatch.setattr(selfe.objective, "lambda_weight", lambda s, t, cap=20.0: torch.zeros(()) if
                        isinstance(s, torch.Tensor) else 0.0)
    assert main(["verify", "--only", "lambda_edge_cases,ddim_eta0_euler"]) == 1
    out = capsys.readouterr().out
    assert "FAIL lambda_edge_cases" in out and "PASS ddim_eta0_euler" in out
    assert "1/2 properties passed" in out


def test_property_names_cover_required_checks():
    names = {n for n, _, _ in PROPERTIES}
    for required in ("tweedie_roundtrip", "classifier_target_identity", "aux_target_identity",
                     "gradient_check_classifier", "gradient_check_aux", "ddim_eta0_euler",
                     "renorm_norm_preservation", "lambda_edge_cases"):
        assert required in names
