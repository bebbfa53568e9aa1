"""Command-line harness: ``selfe {train,eval,verify,sweep}``.

Exit codes: 0 success, 1 verify failure, 2 invalid config or arguments,
3 training diverged, 4 missing checkpoint, 5 run directory locked.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock, Timeout

from . import config as cfgmod
from . import evalsuite
from .backbone import load_checkpoint
from .sampler import SamplerConfig, sample
from .trainer import train

log = logging.getLogger("selfe")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DIVERGED, EXIT_NO_CKPT, EXIT_LOCKED = 0, 1, 2, 3, 4, 5
SNAPSHOT = "config.toml"
SWEEP_AXES = {"s_strategy": "rho", "eta": "eta", "omega": "omega", "steps": "n_steps"}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@contextmanager
def run_lock(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(run_dir / ".lock"), timeout=0)
    try:
        lock.acquire()
    except Timeout:
        raise CliError(EXIT_LOCKED, f"{run_dir} is in use by another command") from None
    try:
        yield
    finally:
        lock.release()


def _load_config(path) -> cfgmod.RunConfig:
    try:
        return cfgmod.load(path)
    except FileNotFoundError:
        raise CliError(EXIT_CONFIG, f"config not found: {path}") from None
    except cfgmod.ConfigError as exc:
        raise CliError(EXIT_CONFIG, "invalid config:\n  " + "\n  ".join(exc.problems)) from None


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("step counts must be positive")
    return vals


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# -- train ------------------------------------------------------------------

def cmd_train(config_path, seed: int | None = None, out=None):
    cfg = _load_config(config_path)
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    run_dir = Path(out) if out is not None else cfg.resolved_output_dir()
    if out is not None:
        cfg = cfg.replace(output_dir=str(run_dir))
    with run_lock(run_dir):
        (run_dir / SNAPSHOT).write_text(cfg.dumps())
        dataset = cfg.dataset.build()
        record = train(cfg.train, cfg.objective, cfg.schedule_spec(), cfg.net_spec(dataset), dataset, cfg.seed,
                       run_dir=run_dir, config=cfg.to_dict(), csv_header=cfg.csv_header())
    if record.status != "completed":
        raise CliError(EXIT_DIVERGED, f"training aborted: {record.reason} (last checkpoint kept in {run_dir})")
    print(f"completed {record.last_iter} iterations; {len(record.checkpoints)} checkpoints in {run_dir}")
    return record


# -- eval / sweep -----------------------------------------------------------

def latest_checkpoint(run_dir: Path, ema: bool = True) -> Path:
    pattern = re.compile(r"ckpt_(\d+)_ema\.bin$" if ema else r"ckpt_(\d+)\.bin$")
    found = [(int(m.group(1)), p) for p in (run_dir / "checkpoints").glob("ckpt_*.bin")
             if (m := pattern.search(p.name))]
    if not found:
        raise CliError(EXIT_NO_CKPT, f"no checkpoint under {run_dir / 'checkpoints'}")
    return max(found)[1]


def _run_config(run_dir: Path) -> cfgmod.RunConfig:
    snap = run_dir / SNAPSHOT
    if not snap.exists():
        raise CliError(EXIT_NO_CKPT, f"{run_dir} has no {SNAPSHOT}; not a run directory")
    return _load_config(snap)


def make_sample_fn(cfg: cfgmod.RunConfig, dataset, net, sampler_cfg: SamplerConfig, oracle: bool = False):
    """``(cond, n_steps, n, rng) -> samples``; the oracle variant ignores the step count."""
    if oracle:
        return lambda c, k, n, rng: dataset.sample(rng, n, c)

    def fn(c, k, n, rng):
        sc = SamplerConfig(**{**sampler_cfg.__dict__, "n_steps": k})
        x = sample(net, sc, c, n, rng, dim=dataset.dim, n_classes=dataset.n_classes)
        return x.double().numpy()

    return fn


def _truth_fn(dataset):
    return lambda c, n, rng: dataset.sample(rng, n, c)


def _write_samples(out: Path, sample_fn, conditions, steps, n, seed, header: str) -> None:
    sdir = out / "samples"
    sdir.mkdir(parents=True, exist_ok=True)
    for c in conditions:
        for k in steps:
            x = sample_fn(c, k, n, np.random.default_rng([seed, 1, c]))
            with open(sdir / f"steps{k:03d}_cond{c}.csv", "w", newline="") as fh:
                fh.write(header + "\n")
                w = csv.writer(fh)
                w.writerow([f"x{i}" for i in range(x.shape[1])])
                w.writerows([[f"{v:.9e}" for v in row] for row in x])


def _write_plot_data(path: Path, columns: list[str], rows: list[list], header: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([f"{v:.9e}" if isinstance(v, float) else v for v in row])


def cmd_eval(run_dir, steps=None, n: int | None = None, seed: int | None = None, out=None,
             oracle: bool = False, noise_seed: int | None = None) -> list[evalsuite.MetricReport]:
    run_dir = Path(run_dir)
    cfg = _run_config(run_dir)
    steps = steps or cfg.eval.steps
    n = n or cfg.eval.n
    seed = cfg.eval.seed if seed is None else seed
    out = Path(out) if out is not None else run_dir / ("eval_oracle" if oracle else "eval")
    dataset = cfg.dataset.build()
    net = None
    if not oracle:
        net, _ = load_checkpoint(latest_checkpoint(run_dir))
    header = cfg.csv_header(seed)
    with run_lock(run_dir):
        out.mkdir(parents=True, exist_ok=True)
        sc = cfg.sampler if noise_seed is None else SamplerConfig(**{**cfg.sampler.__dict__, "seed": noise_seed})
        sample_fn = make_sample_fn(cfg, dataset, net, sc, oracle)
        conditions = list(range(dataset.n_classes))
        reports = evalsuite.step_sweep(sample_fn, _truth_fn(dataset), conditions, steps, n, seed,
                                       model="oracle" if oracle else "ema", n_boot=cfg.eval.n_boot)
        evalsuite.write_reports_csv(out / "reports.csv", reports, header)
        _write_samples(out, sample_fn, conditions, steps, n, seed, header)
        agg = evalsuite.aggregate(reports)
        cols = ["n_steps"] + [f"w2_cond{c}" for c in conditions] + ["w2_mean", "w2_mean_std"]
        rows = [[k] + [r.w2 for c in conditions for r in reports if r.n_steps == k and r.condition == c]
                + [agg[k][0], agg[k][1]] for k in steps]
        _write_plot_data(out / "plot_w2_vs_steps.csv", cols, rows, header)
        summary = {
            "config_hash": cfg.hash(), "seed": seed, "n": n, "steps": list(steps), "model": reports[0].model,
            "aggregate": {str(k): {"w2_mean": v[0], "w2_mean_std": v[1]} for k, v in agg.items()},
        }
        if len(steps) >= 3:
            summary["monotone"] = {str(c): v for c, v in
                                   evalsuite.monotonicity_check(reports, cfg.eval.tolerance).items()}
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for k in steps:
        print(f"steps={k:<3d} W2={agg[k][0]:.4f} +/- {agg[k][1]:.4f}")
    return reports


def cmd_sweep(axis: str, values, run_dir=None, config_path=None, steps=None, n: int | None = None,
              seed: int | None = None, out=None, noise_seed: int | None = None) -> dict:
    if axis not in SWEEP_AXES:
        raise CliError(EXIT_CONFIG, f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    if run_dir is None:
        if config_path is None:
            raise CliError(EXIT_CONFIG, "sweep needs --run-dir or --config")
        run_dir = _load_config(config_path).resolved_output_dir()
    run_dir = Path(run_dir)
    cfg = _run_config(run_dir)
    n = n or cfg.eval.n
    seed = cfg.eval.seed if seed is None else seed
    out = Path(out) if out is not None else run_dir / f"sweep_{axis}"
    dataset = cfg.dataset.build()
    net, _ = load_checkpoint(latest_checkpoint(run_dir))
    conditions = list(range(dataset.n_classes))
    header = cfg.csv_header(seed)

    if axis == "steps":
        steps = [int(v) for v in values] if values else (steps or cfg.eval.steps)
        values = [None]
    else:
        steps = steps or cfg.eval.steps
        if not values:
            raise CliError(EXIT_CONFIG, f"sweep over {axis} needs --values")
    field_name = SWEEP_AXES[axis]
    samplers = []
    for v in values:
        overrides = {} if v is None else {field_name: float(v)}
        if noise_seed is not None:
            overrides["seed"] = noise_seed
        if axis == "omega" and cfg.sampler.guidance_mode == "off":
            overrides["guidance_mode"] = "energy_preserving"
        try:
            samplers.append(SamplerConfig(**{**cfg.sampler.__dict__, **overrides}))
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, f"bad {axis} value {v}: {exc}") from None
    all_reports, agg_by_value = [], {}
    with run_lock(run_dir):
        out.mkdir(parents=True, exist_ok=True)
        for v, sc in zip(values, samplers):
            reports = evalsuite.step_sweep(make_sample_fn(cfg, dataset, net, sc), _truth_fn(dataset), conditions,
                                           steps, n, seed, model=f"{axis}={v}" if v is not None else "ema",
                                           n_boot=cfg.eval.n_boot)
            all_reports += reports
            agg_by_value[v] = evalsuite.aggregate(reports)
        evalsuite.write_reports_csv(out / "reports.csv", all_reports, header)
        labels = [f"{axis}={v:g}" if v is not None else "w2_mean" for v in values]
        cols = ["n_steps"] + [c for lab in labels for c in (lab, lab + "_std")]
        rows = [[k] + [x for v in values for x in agg_by_value[v][k]] for k in steps]
        _write_plot_data(out / "comparison.csv", cols, rows, header)
        summary = {"axis": axis, "values": [v for v in values if v is not None], "steps": list(steps),
                   "config_hash": cfg.hash(), "seed": seed, "n": n,
                   "aggregate": {lab: {str(k): agg_by_value[v][k][0] for k in steps}
                                 for lab, v in zip(labels, values)}}
        if axis == "steps" and len(steps) >= 3:
            summary["monotone"] = {str(c): ok for c, ok in
                                   evalsuite.monotonicity_check(all_reports, cfg.eval.tolerance).items()}
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for k, row in zip(steps, rows):
        print(f"steps={k:<3d} " + " ".join(f"{lab}={row[1 + 2 * i]:.4f}" for i, lab in enumerate(labels)))
    return summary


def cmd_verify(only=None) -> int:
    from .verify import run_properties

    try:
        results = run_properties(only)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    for r in results:
        print(r.line(), flush=True)
    n_pass = sum(r.passed for r in results)
    print(f"{n_pass}/{len(results)} properties passed")
    return EXIT_OK if n_pass == len(results) else EXIT_VERIFY


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="selfe", description="Self-evaluating generative model on 2-D toy data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    t = sub.add_parser("train", help="train a model from a TOML config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="run directory (default: output_dir from the config)")

    e = sub.add_parser("eval", help="W2 / energy distance per step count and condition")
    e.add_argument("--run-dir", required=True)
    e.add_argument("--steps", type=_int_list)
    e.add_argument("--n", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.add_argument("--oracle", action="store_true", help="score exact samples instead of the checkpoint")
    e.add_argument("--noise-seed", type=int, help="seed of the noise injected by eta > 0 (default: sampler.seed)")

    v = sub.add_parser("verify", help="run the property suite")
    v.add_argument("--only", type=lambda s: s.split(","), help="comma-separated property names")

    s = sub.add_parser("sweep", help="compare sampler settings along one axis")
    s.add_argument("--axis", required=True)
    s.add_argument("--values", type=_float_list, default=None)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--run-dir")
    g.add_argument("--config")
    s.add_argument("--steps", type=_int_list)
    s.add_argument("--n", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--noise-seed", type=int, help="seed of the noise injected by eta > 0 (default: sampler.seed)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        if args.verb == "train":
            cmd_train(args.config, args.seed, args.out)
        elif args.verb == "eval":
            cmd_eval(args.run_dir, args.steps, args.n, args.seed, args.out, args.oracle, args.noise_seed)
        elif args.verb == "sweep":
            cmd_sweep(args.axis, args.values, args.run_dir, args.config, args.steps, args.n, args.seed, args.out,
                      args.noise_seed)
        else:
            return cmd_verify(args.only)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
