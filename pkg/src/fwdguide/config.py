"""Run configuration: an INI file with one section per concern.

Every field has a default; :func:`write_config` always materialises all of
them so a written file fully describes a run.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field, fields

from .diffusion import STEP_KINDS
from .guidance import COUPLINGS, GUESSES, STRATEGIES, GuidanceConfig, Objective
from .numerics import ContractError


class ConfigError(ValueError):
    """Config file missing, unparsable or holding an invalid value."""


@dataclass(frozen=True)
class ScheduleSection:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class ModelSection:
    hidden: int = 64
    freqs: int = 8


@dataclass(frozen=True)
class TrainSection:
    steps: int = 4000
    batch: int = 128
    lr: float = 1e-3
    seed: int = 7


@dataclass(frozen=True)
class DataSection:
    n: int = 5000
    noise_sigma: float = 0.05
    seed: int = 0


@dataclass(frozen=True)
class GuidanceSection:
    strategy: str = "titan"
    guess: str = "random"
    lam: float = 0.1
    stride: int = 1
    sampler: str = "ancestral-ddpm"
    frames: int = 2
    coupling: str = "sample"


@dataclass(frozen=True)
class ObjectiveSection:
    kind: str = "circle"
    c: float = 0.3
    mask: tuple[float, ...] = (1.0, 0.0)
    target: tuple[float, ...] = (0.7, 0.0)


@dataclass(frozen=True)
class MetricsSection:
    tol: float = 0.1


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    n: int = 256
    out_dir: str = "out"
    checkpoint: str = "model.ckpt"
    depths: tuple[int, ...] = (5, 10, 20)


@dataclass(frozen=True)
class RunConfig:
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    objective: ObjectiveSection = field(default_factory=ObjectiveSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    run: RunSection = field(default_factory=RunSection)

    def __post_init__(self) -> None:
        g = self.guidance
        if g.strategy not in STRATEGIES:
            raise ConfigError(f"guidance.strategy must be one of {STRATEGIES}, got {g.strategy!r}")
        if g.guess not in GUESSES:
            raise ConfigError(f"guidance.guess must be one of {GUESSES}, got {g.guess!r}")
        if g.sampler not in STEP_KINDS:
            raise ConfigError(f"guidance.sampler must be one of {STEP_KINDS}, got {g.sampler!r}")
        if g.coupling not in COUPLINGS:
            raise ConfigError(f"guidance.coupling must be one of {COUPLINGS}, got {g.coupling!r}")
        positive = {
            "schedule.T": self.schedule.T, "model.hidden": self.model.hidden, "model.freqs": self.model.freqs,
            "train.steps": self.train.steps, "train.batch": self.train.batch, "data.n": self.data.n,
            "guidance.stride": g.stride, "guidance.frames": g.frames, "run.n": self.run.n,
        }
        for key, val in positive.items():
            if val < 1:
                raise ConfigError(f"{key} must be positive, got {val}")
        if self.metrics.tol <= 0:
            raise ConfigError(f"metrics.tol must be positive, got {self.metrics.tol}")
        if any(d < 1 or d > self.schedule.T for d in self.run.depths):
            raise ConfigError(f"run.depths must lie in 1..{self.schedule.T}")

    def guidance_config(self, **changes) -> GuidanceConfig:
        g = self.guidance
        try:
            cfg = GuidanceConfig(g.strategy, g.guess, g.lam, g.stride, g.sampler, g.frames, g.coupling, self.run.seed)
            return cfg.with_(**changes) if changes else cfg
        except ContractError as exc:
            raise ConfigError(str(exc)) from exc

    def objective_fn(self) -> Objective:
        o = self.objective
        try:
            return Objective(o.kind, o.c, o.mask, o.target)
        except ContractError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, section: str, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, default, key: str):
    try:
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(tok) for tok in text.split(",") if tok.strip())
        if isinstance(default, bool):
            return configparser.ConfigParser.BOOLEAN_STATES[text.lower()]
        return type(default)(text)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from exc


def dumps_config(cfg: RunConfig) -> str:
    lines = []
    for sec in fields(RunConfig):
        lines.append(f"[{sec.name}]")
        section = getattr(cfg, sec.name)
        for f in fields(section):
            lines.append(f"{f.name} = {_format(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def loads_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep "T" upper case
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparsable config: {exc}") from exc
    known = {sec.name: sec for sec in fields(RunConfig)}
    for name in parser.sections():
        if name not in known:
            raise ConfigError(f"unknown section [{name}]")
    built = {}
    for name, sec in known.items():
        cls = sec.default_factory
        defaults = cls()
        names = {f.name for f in fields(cls)}
        values = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in names:
                    raise ConfigError(f"unknown key {name}.{key}")
                values[key] = _parse(raw.strip(), getattr(defaults, key), f"{name}.{key}")
        built[name] = cls(**values)
    return RunConfig(**built)


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return loads_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {os.fspath(path)!r}: {exc.strerror}") from exc


def write_config(cfg: RunConfig, path) -> None:
    _atomic_write(os.fspath(path), dumps_config(cfg))
