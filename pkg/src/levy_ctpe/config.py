"""Run configuration: one YAML file with dynamics/dataset/fit/pide/study/reproduce sections.

Every field has a default, so an empty file is a valid configuration with the
reference settings (40000 Adam steps, batch 100, CT 8, TRT 20, ...).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .registry import REGISTRY

DATASET_KINDS = ("unbiased", "filtered", "mcmc")
REWARDS = ("cos3_2x",)


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class DynamicsConfig:
    truth: str | None = "const_543"
    alpha: float = 0.6
    theta_file: str | None = None


@dataclass
class DatasetConfig:
    kind: str = "unbiased"
    num_traj: int = 10000
    steps: int = 40
    dt: float = 0.025
    seed: int = 0
    substeps: int = 10
    trt: float = 20.0
    ct: float = 8.0
    drop_fraction: float = 0.5
    burn_in: int = 5000
    path: str | None = None


@dataclass
class FitSection:
    n_modes: int = 0
    ct: float = 8.0
    trt: float | None = field(default=20.0, metadata={"nullable": True})  # null keeps every pair
    seed: int = 0
    no_tcf: bool = False
    eta: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_limit: int = 40000
    batch: int = 100
    tcf_warmup: int = 4000
    ma_window: int = 20000
    fd_mix: float = 0.0
    history_thin: int = 10


@dataclass
class PideConfig:
    beta: float = 0.1
    m: int = 128
    reward: str = "cos3_2x"  # or "constant:<c>"
    coefficients: str = "truth"  # or "theta"


@dataclass
class StudyConfig:
    truth: str = "study422"
    alpha: float = 0.3
    beta: float = 0.1
    m: int = 128
    epsilons: list = field(default_factory=lambda: [1e-3, 3e-3, 1e-2, 3e-2, 1e-1])
    trials: int = 10000
    seed: int = 0
    shape: str = "constant"


@dataclass
class ReproduceConfig:
    repeats: int = 12
    scale: float = 1.0
    seed: int = 0
    counts: list | None = None  # trajectory counts before scaling; None = example default
    alphas: list | None = None


@dataclass
class RunConfig:
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    fit: FitSection = field(default_factory=FitSection)
    pide: PideConfig = field(default_factory=PideConfig)
    study: StudyConfig = field(default_factory=StudyConfig)
    reproduce: ReproduceConfig = field(default_factory=ReproduceConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self, base_dir: Path | None = None) -> "RunConfig":
        d, ds, f, p, s = self.dynamics, self.dataset, self.fit, self.pide, self.study
        if d.truth is not None and d.truth not in REGISTRY:
            raise ConfigError("dynamics.truth", f"unknown ground truth {d.truth!r}")
        if not 0 < d.alpha < 1:
            raise ConfigError("dynamics.alpha", "must lie in (0, 1)")
        if d.theta_file is not None and not _resolve(d.theta_file, base_dir).exists():
            raise ConfigError("dynamics.theta_file", f"file not found: {d.theta_file}")
        if ds.kind not in DATASET_KINDS:
            raise ConfigError("dataset.kind", f"must be one of {DATASET_KINDS}")
        for name in ("num_traj", "steps", "substeps", "burn_in"):
            if getattr(ds, name) < 1:
                raise ConfigError(f"dataset.{name}", "must be >= 1")
        if ds.dt <= 0:
            raise ConfigError("dataset.dt", "must be positive")
        if not 0 < ds.ct < ds.trt:
            raise ConfigError("dataset.ct", "need 0 < ct < trt")
        if not 0 <= ds.drop_fraction <= 1:
            raise ConfigError("dataset.drop_fraction", "must lie in [0, 1]")
        if ds.path is not None and not _resolve(ds.path, base_dir).exists():
            raise ConfigError("dataset.path", f"file not found: {ds.path}")
        if not 0 < f.ct < (math.inf if f.trt is None else f.trt):
            raise ConfigError("fit.ct", "need 0 < ct < trt")
        if f.n_modes < 0:
            raise ConfigError("fit.n_modes", "must be >= 0")
        for name in ("eta", "eps", "step_limit", "batch", "ma_window", "history_thin"):
            if getattr(f, name) <= 0:
                raise ConfigError(f"fit.{name}", "must be positive")
        if f.ma_window > f.step_limit:
            raise ConfigError("fit.ma_window", "must not exceed fit.step_limit")
        if not (0 < f.beta1 < 1 and 0 < f.beta2 < 1):
            raise ConfigError("fit.beta1", "beta1 and beta2 must lie in (0, 1)")
        if not 0 <= f.fd_mix <= 1:
            raise ConfigError("fit.fd_mix", "must lie in [0, 1]")
        if p.beta <= 0:
            raise ConfigError("pide.beta", "must be positive")
        if p.m < 2 or p.m % 2:
            raise ConfigError("pide.m", "must be an even integer >= 2")
        if p.reward not in REWARDS and not p.reward.startswith("constant:"):
            raise ConfigError("pide.reward", f"must be one of {REWARDS} or 'constant:<value>'")
        if p.reward.startswith("constant:"):
            try:
                float(p.reward.split(":", 1)[1])
            except ValueError:
                raise ConfigError("pide.reward", "constant reward needs a number") from None
        if p.coefficients not in ("truth", "theta"):
            raise ConfigError("pide.coefficients", "must be 'truth' or 'theta'")
        if s.truth not in REGISTRY:
            raise ConfigError("study.truth", f"unknown ground truth {s.truth!r}")
        if not 0 < s.alpha < 1:
            raise ConfigError("study.alpha", "must lie in (0, 1)")
        if s.trials < 1:
            raise ConfigError("study.trials", "must be >= 1")
        if not s.epsilons or any(e < 0 for e in s.epsilons):
            raise ConfigError("study.epsilons", "need a nonempty list of nonnegative values")
        if s.shape not in ("constant", "bump"):
            raise ConfigError("study.shape", "must be 'constant' or 'bump'")
        if self.reproduce.repeats < 1:
            raise ConfigError("reproduce.repeats", "must be >= 1")
        if self.reproduce.scale <= 0:
            raise ConfigError("reproduce.scale", "must be positive")
        return self


def _resolve(path: str, base_dir: Path | None) -> Path:
    p = Path(path)
    return p if p.is_absolute() or base_dir is None else base_dir / p


def _build(cls, data, path: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(path, "expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown field")
        default = getattr(cls(), key)
        if value is None and fields[key].metadata.get("nullable"):
            pass
        elif dataclasses.is_dataclass(default):
            value = _build(type(default), value, f"{path}.{key}" if path else key)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{path}.{key}", "expected true/false")
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{path}.{key}", "expected an integer")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{path}.{key}", "expected a number")
            value = float(value)
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data or {}, "")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError("--config", f"file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError("--config", f"not valid YAML: {exc}") from None
    return config_from_dict(data).validate(path.parent)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
