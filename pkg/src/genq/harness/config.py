"""Experiment configuration: strict JSON with a top-level ``version``."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_args, get_origin, get_type_hints

from genq.errors import ConfigError
from genq.nnkit.layers import ARCHS

CONFIG_VERSION = 1
SUPPORTED_BITS = (2, 3, 4, 8)


@dataclass
class TrainConfig:
    per_class: int = 500
    test_per_class: int = 100
    epochs: int = 8
    lr: float = 0.05
    seed: int | None = None          # fixed baseline seed shared by all experiment seeds


@dataclass
class PoolConfig:
    source: str = "synth"            # synth | external
    fallback: str | None = "synth"   # used when the external service fails
    n_gen: int = 1024
    clean_fraction: float = 0.5
    severity: int = 5


@dataclass
class FilterConfig:
    r1: float = 0.5
    r2: float = 0.5
    alpha: float = 1.0
    energy_form: str = "sum"
    batch_size: int = 64


@dataclass
class QuantConfig:
    recon_iters: int = 1000
    calib_sizes: list[int] | None = None


@dataclass
class QatConfig:
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 64


@dataclass
class AblateConfig:
    ratios: list[float] = field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7, 0.9])
    quantize: bool = True


@dataclass
class GenConfig:
    endpoint: str | None = None
    parallel: int = 4
    guidance_scale: float = 3.5
    steps: int = 50
    style_token: str | None = None
    timeout: float = 60.0


@dataclass
class PathsConfig:
    model: str | None = None
    model_b: str | None = None
    pool: str | None = None


@dataclass
class ExperimentConfig:
    version: int = CONFIG_VERSION
    name: str = "experiment"
    arch: str = "tiny-cnn"
    arch_b: str = "tiny-vit"
    bits: list[int] = field(default_factory=lambda: [4, 4])
    mode: str = "ptq"
    n_keep: int = 256
    seeds: list[int] = field(default_factory=lambda: [0])
    budget_seconds: float = 600.0
    train: TrainConfig = field(default_factory=TrainConfig)
    train_b: TrainConfig = field(default_factory=lambda: TrainConfig(per_class=200, epochs=6))
    pool: PoolConfig = field(default_factory=PoolConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    quant: QuantConfig = field(default_factory=QuantConfig)
    qat: QatConfig = field(default_factory=QatConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        validate(self)

    @property
    def w_bits(self) -> int:
        return self.bits[0]

    @property
    def a_bits(self) -> int:
        return self.bits[1]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seeds=[seed])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def validate(cfg: ExperimentConfig) -> None:
    _check(cfg.version == CONFIG_VERSION, f"unsupported config version {cfg.version}")
    for arch in (cfg.arch, cfg.arch_b):
        _check(arch in ARCHS, f"unknown arch {arch!r}; expected one of {ARCHS}")
    _check(len(cfg.bits) == 2 and all(b in SUPPORTED_BITS for b in cfg.bits),
           f"bits must be [w, a] with each in {SUPPORTED_BITS}, got {cfg.bits}")
    _check(cfg.mode in ("ptq", "qat"), f"mode must be ptq or qat, got {cfg.mode!r}")
    _check(len(cfg.seeds) >= 1, "at least one seed is required")
    _check(all(0 <= s < 2 ** 32 for s in cfg.seeds), "seeds must be u32")
    _check(cfg.budget_seconds > 0, "budget_seconds must be positive")
    f, p = cfg.filter, cfg.pool
    for name in ("r1", "r2"):
        r = getattr(f, name)
        _check(0 <= r < 1, f"filter.{name} must lie in [0, 1), got {r}")
    _check(f.alpha > 0, "filter.alpha must be positive")
    _check(f.energy_form in ("sum", "logsumexp"), f"unknown energy form {f.energy_form!r}")
    _check(f.batch_size >= 2, "filter.batch_size must be at least 2")
    _check(p.source in ("synth", "external"), f"unknown pool source {p.source!r}")
    _check(p.fallback in (None, "synth"), f"unknown pool fallback {p.fallback!r}")
    _check(p.n_gen >= 10, "pool.n_gen must be at least 10")
    _check(0 < p.clean_fraction <= 1, "pool.clean_fraction must lie in (0, 1]")
    _check(p.severity in (1, 2, 3, 4, 5), "pool.severity must be in 1..5")
    _check(cfg.n_keep >= 1, "n_keep must be positive")
    _check(cfg.n_keep <= p.n_gen * (1 - f.r1) * (1 - f.r2) + 1,
           f"n_keep={cfg.n_keep} exceeds what a pool of {p.n_gen} survives at r1={f.r1}, r2={f.r2}")
    for label, t in (("train", cfg.train), ("train_b", cfg.train_b)):
        _check(t.per_class >= 1 and t.test_per_class >= 1, f"{label} sizes must be positive")
        _check(t.epochs >= 0 and t.lr > 0, f"{label}.epochs >= 0 and {label}.lr > 0 required")
    q = cfg.quant
    _check(q.recon_iters >= 0, "quant.recon_iters must be non-negative")
    _check(q.calib_sizes is None or (len(q.calib_sizes) > 0 and all(n >= 1 for n in q.calib_sizes)),
           "quant.calib_sizes must list positive sizes")
    biggest = max(q.calib_sizes or [cfg.n_keep])
    _check(biggest <= p.n_gen * (1 - f.r1) * (1 - f.r2) + 1,
           f"calibration size {biggest} exceeds what a pool of {p.n_gen} survives filtering")
    _check(cfg.qat.epochs >= 0 and cfg.qat.lr > 0, "qat.epochs >= 0 and qat.lr > 0 required")
    _check(all(0 <= r < 1 for r in cfg.ablate.ratios) and cfg.ablate.ratios,
           "ablate.ratios must lie in [0, 1)")
    _check(cfg.gen.guidance_scale > 0 and cfg.gen.steps >= 1 and cfg.gen.parallel >= 1,
           "gen.guidance_scale > 0, gen.steps >= 1, gen.parallel >= 1 required")


def _coerce(tp: Any, value: Any, where: str) -> Any:
    origin = get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    if origin is list:
        _check(isinstance(value, list), f"{where}: expected a list")
        (inner,) = get_args(tp)
        return [_coerce(inner, v, f"{where}[{i}]") for i, v in enumerate(value)]
    args = get_args(tp)
    if args and type(None) in args:
        if value is None:
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _coerce(inner, value, where)
    if tp is bool:
        _check(isinstance(value, bool), f"{where}: expected true/false")
    elif tp is int:
        _check(isinstance(value, int) and not isinstance(value, bool), f"{where}: expected an integer")
    elif tp is float:
        _check(isinstance(value, (int, float)) and not isinstance(value, bool),
               f"{where}: expected a number")
        value = float(value)
    elif tp is str:
        _check(isinstance(value, str), f"{where}: expected a string")
    return value


def _build(cls, data: Any, where: str):
    _check(isinstance(data, dict), f"{where or 'config'}: expected an object")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    _check(not unknown, f"unknown key(s) {', '.join((where + '.' if where else '') + k for k in unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}" if where else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def from_dict(data: dict) -> ExperimentConfig:
    _check(isinstance(data, dict) and "version" in data, "config needs a top-level 'version'")
    return _build(ExperimentConfig, data, "")


def loads(text: str) -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return from_dict(data)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)
