"""Run configuration: TOML with one table per section, strict key checking."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli
import tomli_w

from .backbone import NetSpec
from .datasets import PRESETS, make_dataset
from .objective import ObjectiveConfig
from .sampler import SamplerConfig
from .schedule import ScheduleSpec
from .trainer import TrainPlan

OUTPUT_ROOT_ENV = "SELFE_OUTPUT_ROOT"


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass(frozen=True)
class DatasetSpec:
    preset: str = "gmm-4class"
    priors: list | None = None
    weights: list | None = None
    means: list | None = None
    variances: list | None = None

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; expected one of {PRESETS}")
        custom = [self.priors, self.weights, self.means, self.variances]
        if self.preset == "custom" and any(v is None for v in custom):
            raise ValueError("custom preset needs priors, weights, means and variances")
        if self.preset != "custom" and any(v is not None for v in custom):
            raise ValueError("mixture parameters are only allowed with preset = 'custom'")

    def build(self):
        mixture = None
        if self.preset == "custom":
            mixture = dict(priors=self.priors, weights=self.weights, means=self.means, variances=self.variances)
        return make_dataset(self.preset, mixture)


@dataclass(frozen=True)
class ScheduleSection:
    t_min: float = 1e-3
    warp_len: int = 1
    tau_anneal_iters: int | None = None  # defaults to 30% of train.total_iters
    p_equal: float = 0.5


@dataclass(frozen=True)
class EvalSpec:
    steps: list = field(default_factory=lambda: [1, 2, 4, 8, 32])
    n: int = 512
    n_boot: int = 200
    tolerance: float = 3.0
    seed: int = 1234

    def __post_init__(self):
        if not self.steps or any(not isinstance(k, int) or k < 1 for k in self.steps):
            raise ValueError("steps must be a nonempty list of positive integers")
        if self.n < 2 or self.n_boot < 2:
            raise ValueError("n and n_boot must be >= 2")


@dataclass(frozen=True)
class ModelSection:
    width: int = 128
    depth: int = 3
    cond_dim: int = 32
    n_freqs: int = 16
    max_freq: float = 1e4


SECTIONS = {
    "dataset": DatasetSpec,
    "model": ModelSection,
    "train": TrainPlan,
    "objective": ObjectiveConfig,
    "schedule": ScheduleSection,
    "sampler": SamplerConfig,
    "eval": EvalSpec,
}
TOP_LEVEL = {"seed": int, "output_dir": str}


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainPlan = field(default_factory=TrainPlan)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)
    seed: int = 0
    output_dir: str = "runs/default"

    # -- derived objects ---------------------------------------------------
    def schedule_spec(self) -> ScheduleSpec:
        tau = self.schedule.tau_anneal_iters
        if tau is None:
            tau = max(1, int(round(0.3 * self.train.total_iters)))
        return ScheduleSpec(t_min=self.schedule.t_min, warp_len=self.schedule.warp_len,
                            tau_anneal_iters=tau, p_equal=self.schedule.p_equal)

    def net_spec(self, dataset) -> NetSpec:
        return NetSpec(dim=dataset.dim, n_classes=dataset.n_classes, **dataclasses.asdict(self.model))

    def to_dict(self) -> dict:
        out: dict = {"seed": self.seed, "output_dir": self.output_dir}
        for name in SECTIONS:
            section = {}
            for f in fields(getattr(self, name)):
                v = getattr(getattr(self, name), f.name)
                if v is None:
                    continue
                section[f.name] = list(v) if isinstance(v, tuple) else v
            out[name] = section
        return out

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def hash(self) -> str:
        """Short digest of everything except ``output_dir``, so reruns elsewhere share a hash."""
        d = self.to_dict()
        del d["output_dir"]
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def csv_header(self, seed: int | None = None) -> str:
        return f"# config_hash={self.hash()} seed={self.seed if seed is None else seed}"

    def resolved_output_dir(self) -> Path:
        p = Path(self.output_dir)
        if p.is_absolute():
            return p
        return Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / p

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _coerce(value, default, path: str, problems: list[str]):
    """Check a TOML value against the type of the field default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            problems.append(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{path}: expected a number, got {value!r}")
            return value
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            problems.append(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, (tuple, list)):
        if not isinstance(value, list):
            problems.append(f"{path}: expected a list, got {value!r}")
            return value
        return tuple(value) if isinstance(default, tuple) else value
    return value


def _field_default(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
        return f.default_factory()  # type: ignore[misc]
    return None


# Fields whose default is None but which take numbers when given.
_OPTIONAL_NUMERIC = {("objective", "k_mix"): 0.0, ("schedule", "tau_anneal_iters"): 0}


def from_dict(data: dict) -> RunConfig:
    problems: list[str] = []
    kwargs: dict = {}
    for key, value in data.items():
        if key in TOP_LEVEL:
            if not isinstance(value, TOP_LEVEL[key]) or isinstance(value, bool):
                problems.append(f"{key}: expected {TOP_LEVEL[key].__name__}, got {value!r}")
            kwargs[key] = value
        elif key in SECTIONS:
            if not isinstance(value, dict):
                problems.append(f"{key}: expected a table")
                continue
            cls = SECTIONS[key]
            known = {f.name: f for f in fields(cls)}
            sec_kwargs = {}
            for k, v in value.items():
                path = f"{key}.{k}"
                if k not in known:
                    problems.append(f"{path}: unknown key")
                    continue
                default = _field_default(known[k])
                if default is None:
                    default = _OPTIONAL_NUMERIC.get((key, k))
                sec_kwargs[k] = _coerce(v, default, path, problems)
            if problems:
                continue
            try:
                kwargs[key] = cls(**sec_kwargs)
            except (ValueError, TypeError) as exc:
                problems.append(f"{key}: {exc}")
        else:
            problems.append(f"{key}: unknown key")
    if problems:
        raise ConfigError(problems)
    cfg = RunConfig(**kwargs)
    if cfg.train.mode not in ("self_e", "flow_matching_baseline"):
        raise ConfigError([f"train.mode: unknown mode {cfg.train.mode!r}"])
    return cfg


def loads(text: str) -> RunConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError([f"parse error: {exc}"]) from exc
    return from_dict(data)


def load(path) -> RunConfig:
    return loads(Path(path).read_text())
