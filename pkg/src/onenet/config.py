"""Experiment configuration: an INI file with fixed sections and keys.

Unknown sections or keys are rejected. Every key has a default except the
paths in ``[paths]``, which are only required by the commands that use them.

Example::

    [task]
    kind = cs
    ratio = 0.3

    [prior]
    kind = projector

    [seeds]
    data = 0
    operator = 0
    training = 0

    [paths]
    model = runs/mnist.prxa
    dataset = data/mnist
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields

TASKS = ("cs", "pixelwise_inpaint", "scattered_inpaint", "block_inpaint", "superres", "denoise")
PRIORS = ("l1_wavelet", "projector")


class ConfigError(ValueError):
    pass


@dataclass
class TaskSection:
    kind: str = "cs"
    ratio: float = 0.3
    drop_rate: float = 0.5
    n_blocks: int = 10
    block_fraction: float = 0.3
    factor: int = 2
    sigma: float = 0.0  # measurement noise std on the [-1, 1] image scale


@dataclass
class PriorSection:
    kind: str = "l1_wavelet"
    lam: float = 0.05
    levels: int = 0  # 0 selects the default depth for the image size


@dataclass
class AdmmSection:
    rho: float = 0.0  # 0 selects the task preset
    max_iters: int = 300
    stop_tol: float = 1e-4
    cg_tol: float = 1e-10
    cg_max_iters: int = 200
    early_stop_at: int = 0  # 0 disables


@dataclass
class SeedSection:
    data: int = 0
    operator: int = 0
    training: int = 0


@dataclass
class TrainSection:
    iterations: int = 1000
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    c_clip: float = 0.05
    eval_every: int = 100
    refresh_every: int = 10
    patience: int = 5
    val_fraction: float = 0.1
    n_images: int = 0  # 0 uses the whole training split
    float32: bool = True


@dataclass
class DataSection:
    split: str = "test"
    index: int = 0
    n_images: int = 10
    # geometry of the unknown image when solving from a measurement file
    height: int = 28
    width: int = 28
    channels: int = 1


@dataclass
class BenchSection:
    tasks: tuple = ("cs", "pixelwise_inpaint", "block_inpaint", "superres")
    priors: tuple = ("l1_wavelet", "projector")
    # per-task noise overrides, e.g. "pixelwise_inpaint:0.1"; other tasks use task.sigma
    sigma: tuple = ()

    def sigma_for(self, task: str, default: float) -> float:
        for item in self.sigma:
            name, _, value = item.partition(":")
            if name.strip() == task:
                return float(value)
        return default


@dataclass
class PathSection:
    model: str | None = None
    dataset: str | None = None
    image: str | None = None
    measurement: str | None = None


@dataclass
class ExperimentConfig:
    task: TaskSection = field(default_factory=TaskSection)
    prior: PriorSection = field(default_factory=PriorSection)
    admm: AdmmSection = field(default_factory=AdmmSection)
    seeds: SeedSection = field(default_factory=SeedSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    bench: BenchSection = field(default_factory=BenchSection)
    paths: PathSection = field(default_factory=PathSection)

    def validate(self) -> "ExperimentConfig":
        if self.task.kind not in TASKS:
            raise ConfigError(f"task.kind must be one of {TASKS}, got {self.task.kind!r}")
        if self.prior.kind not in PRIORS:
            raise ConfigError(f"prior.kind must be one of {PRIORS}, got {self.prior.kind!r}")
        for t in self.bench.tasks:
            if t not in TASKS:
                raise ConfigError(f"bench.tasks: unknown task {t!r}")
        for p in self.bench.priors:
            if p not in PRIORS:
                raise ConfigError(f"bench.priors: unknown prior {p!r}")
        for item in self.bench.sigma:
            name, sep, value = item.partition(":")
            if not sep or name.strip() not in TASKS:
                raise ConfigError(f"bench.sigma: expected task:value, got {item!r}")
            try:
                if float(value) < 0:
                    raise ValueError
            except ValueError:
                raise ConfigError(f"bench.sigma: bad value in {item!r}") from None
        if self.data.split not in ("train", "test"):
            raise ConfigError("data.split must be train or test")
        if self.task.sigma < 0 or self.admm.rho < 0 or self.prior.lam < 0:
            raise ConfigError("sigma, rho and lam must be non-negative")
        return self

    def to_text(self) -> str:
        """Canonical INI rendering; parsing it back yields an equal config."""
        lines = []
        for sec in fields(self):
            lines.append(f"[{sec.name}]")
            obj = getattr(self, sec.name)
            for f in fields(obj):
                val = getattr(obj, f.name)
                if val is None:
                    continue
                if isinstance(val, tuple):
                    val = ", ".join(val)
                lines.append(f"{f.name} = {val}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]


def _convert(value: str, default, key: str):
    kind = type(default)
    try:
        if isinstance(default, bool):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, tuple):
            return tuple(v.strip() for v in value.split(",") if v.strip())
        if default is None:
            return value.strip()
        return kind(value.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind.__name__}") from None


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = ExperimentConfig()
    sections = {f.name for f in fields(cfg)}
    for name in parser.sections():
        if name not in sections:
            raise ConfigError(f"unknown section [{name}]")
        obj = getattr(cfg, name)
        known = {f.name: f for f in fields(obj)}
        for key, value in parser.items(name):
            if key not in known:
                raise ConfigError(f"unknown key {name}.{key}")
            setattr(obj, key, _convert(value, getattr(obj, key), f"{name}.{key}"))
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
