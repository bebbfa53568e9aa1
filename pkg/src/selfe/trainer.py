"""Training loop for the self-evaluating model and its flow-matching baseline."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import EmaShadow, NetSpec, build_network, ema_update, save_checkpoint
from .objective import ObjectiveConfig, TrainingBatch, fake_branch_loss, total_loss
from .schedule import ScheduleSpec, sample_s, sample_t

log = logging.getLogger(__name__)

MODES = ("self_e", "flow_matching_baseline")
METRIC_COLUMNS = ("iter", "loss", "data_loss", "self_loss", "fake_loss", "lambda_mean", "lambda_max", "lr")


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainPlan:
    total_iters: int = 20000
    warmup_iters: int = 500
    lr_start: float = 3e-4
    lr_end: float = 1e-5
    aux_start_frac: float = 0.77
    batch_size: int = 256
    mode: str = "self_e"
    ema_decay: float = 0.999
    ema_split: bool = True
    null_prob: float = 0.1
    grad_clip: float = 0.0
    adam_betas: tuple = (0.9, 0.95)
    adam_eps: float = 1e-8
    checkpoint_every: int = 2000
    log_every: int = 100

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0 <= self.warmup_iters < self.total_iters:
            raise ValueError("need 0 <= warmup_iters < total_iters")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if not 0.0 <= self.aux_start_frac <= 1.0:
            raise ValueError("aux_start_frac must lie in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.null_prob < 1.0:
            raise ValueError("null_prob must lie in [0, 1)")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ValueError("checkpoint_every and log_every must be >= 1")

    @property
    def aux_start_iter(self) -> int:
        return int(round(self.aux_start_frac * self.total_iters))


@dataclass
class RunRecord:
    config: dict
    run_dir: str | None = None
    checkpoints: list = field(default_factory=list)
    metrics_path: str | None = None
    status: str = "running"
    reason: str = ""
    last_iter: int = 0
    net: object = field(default=None, repr=False)
    ema_net: object = field(default=None, repr=False)
    metrics: list = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "checkpoints": self.checkpoints,
            "metrics_path": self.metrics_path,
            "status": self.status,
            "reason": self.reason,
            "last_iter": self.last_iter,
        }


def lr_at(iteration: int, plan: TrainPlan) -> float:
    """Linear warmup from 0 to ``lr_start``, then linear decay to ``lr_end`` at ``total_iters``."""
    if iteration < plan.warmup_iters:
        return plan.lr_start * iteration / plan.warmup_iters
    frac = (iteration - plan.warmup_iters) / (plan.total_iters - plan.warmup_iters)
    return plan.lr_start + (plan.lr_end - plan.lr_start) * min(frac, 1.0)


def make_optimizer(params, plan: TrainPlan) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=plan.lr_start, betas=tuple(plan.adam_betas), eps=plan.adam_eps)


def adam_step(optimizer: torch.optim.Adam, lr: float) -> None:
    """One bias-corrected Adam update at learning rate ``lr`` using the stored ``.grad``s."""
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()


def gradients(loss: torch.Tensor, params) -> list[torch.Tensor]:
    """Reverse-mode gradients of a scalar loss; parameters it does not touch get zeros."""
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss {float(loss.detach())}")
    params = list(params)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def draw_batch(rng: np.random.Generator, dataset, plan: TrainPlan, schedule: ScheduleSpec, iteration: int,
               dtype=torch.float32) -> TrainingBatch:
    n, k = plan.batch_size, dataset.n_classes
    x0, labels = dataset.sample_labeled(rng, n)
    eps = rng.standard_normal(x0.shape)
    t = sample_t(rng, schedule, size=n)
    s = t.copy() if plan.mode == "flow_matching_baseline" else sample_s(rng, t, iteration, schedule)
    cond = np.where(rng.random(n) < plan.null_prob, k, labels)
    eps_renoise = rng.standard_normal(x0.shape)
    as_t = lambda a: torch.as_tensor(a, dtype=dtype)  # noqa: E731
    return TrainingBatch(as_t(x0), as_t(eps), as_t(t), as_t(s), torch.as_tensor(cond, dtype=torch.long),
                         as_t(eps_renoise))


def training_step_loss(batch: TrainingBatch, net, ema_net, objective: ObjectiveConfig, plan: TrainPlan,
                       schedule: ScheduleSpec, n_classes: int, iteration: int):
    """Full per-iteration loss (self-evaluation plus, once active, the fake-branch term)."""
    self_e = plan.mode == "self_e"
    aux_active = self_e and objective.aux_enabled and iteration >= plan.aux_start_iter
    cond_net = ema_net if plan.ema_split else net
    loss, info = total_loss(batch, net, cond_net, objective, n_classes, self_eval=self_e,
                            aux_active=aux_active, t_min=schedule.t_min)
    info["fake_loss"] = 0.0
    if aux_active and torch.isfinite(loss):
        mask = info["lambda"] > 0
        if bool(mask.any()):
            fl = fake_branch_loss(net, info["x0_hat"][mask], batch.s[mask], batch.cond[mask], n_classes,
                                  eps=batch.eps_renoise[mask])
            loss = loss + fl
            info["fake_loss"] = float(fl.detach())
    return loss, info


def _fmt(v) -> str:
    return str(int(v)) if isinstance(v, (int, np.integer)) else f"{float(v):.9e}"


def train(plan: TrainPlan, objective: ObjectiveConfig, schedule: ScheduleSpec, net_spec: NetSpec, dataset,
          seed: int, run_dir=None, config: dict | None = None, csv_header: str = "",
          dtype=torch.float32) -> RunRecord:
    """Run ``plan.total_iters`` iterations; write metrics and checkpoints under ``run_dir`` if given."""
    rng = np.random.default_rng(seed)
    net = build_network(net_spec, seed=seed, dtype=dtype)
    ema = EmaShadow(net, plan.ema_decay)
    opt = make_optimizer(net.parameters(), plan)
    record = RunRecord(config=config or {}, net=net, ema_net=ema.net)

    run_dir = Path(run_dir) if run_dir is not None else None
    metrics_fh = timing_fh = None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        record.run_dir = str(run_dir)
        record.metrics_path = "metrics.csv"
        metrics_fh = open(run_dir / "metrics.csv", "w", newline="")
        timing_fh = open(run_dir / "timing.csv", "w", newline="")
        for fh, cols in ((metrics_fh, METRIC_COLUMNS), (timing_fh, ("iter", "wall_clock_s"))):
            if csv_header:
                fh.write(csv_header + "\n")
            csv.writer(fh).writerow(cols)
    metrics_w = csv.writer(metrics_fh) if metrics_fh else None
    timing_w = csv.writer(timing_fh) if timing_fh else None

    def checkpoint(it: int) -> None:
        if run_dir is None:
            return
        base = run_dir / "checkpoints" / f"ckpt_{it:07d}"
        save_checkpoint(base.with_suffix(".bin"), net, it, ema=False)
        save_checkpoint(base.with_name(base.name + "_ema.bin"), ema.net, it, ema=True)
        record.checkpoints.append(f"checkpoints/{base.name}.bin")

    start = time.perf_counter()
    it = 0
    try:
        for it in range(plan.total_iters):
            batch = draw_batch(rng, dataset, plan, schedule, it, dtype)
            loss, info = training_step_loss(batch, net, ema.net, objective, plan, schedule,
                                            dataset.n_classes, it)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at iteration {it}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if plan.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(net.parameters(), plan.grad_clip)
            lr = lr_at(it + 1, plan)
            adam_step(opt, lr)
            ema_update(ema, net)

            done = it + 1
            if done % plan.log_every == 0 or done == plan.total_iters:
                lam = info["lambda"]
                row = (done, float(loss.detach()), info["data_loss"], info["self_loss"], info["fake_loss"],
                       float(lam.mean()), float(lam.max()), lr)
                record.metrics.append(dict(zip(METRIC_COLUMNS, row)))
                if metrics_w:
                    metrics_w.writerow([_fmt(v) for v in row])
                    timing_w.writerow([done, f"{time.perf_counter() - start:.3f}"])
                log.debug("iter %d loss %.5f lr %.2e", done, row[1], lr)
            if done % plan.checkpoint_every == 0 or done == plan.total_iters:
                checkpoint(done)
        record.status, record.last_iter = "completed", plan.total_iters
    except DivergenceError as exc:
        # Parameters still hold the last finite update.
        record.status, record.reason, record.last_iter = "aborted", str(exc), it
        checkpoint(it)
        log.error("training diverged: %s", exc)
    finally:
        for fh in (metrics_fh, timing_fh):
            if fh:
                fh.close()
    if run_dir is not None:
        (run_dir / "record.json").write_text(json.dumps(record.to_json(), indent=2, sort_keys=True) + "\n")
    return record
