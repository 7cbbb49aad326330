"""Run configuration: dataclasses plus a flat `key = value` file format.

Nested sections use dotted keys, e.g. ``density.tau = 1e-4`` or
``bmm.t_r = 0.7``. Values are Python literals (numbers, booleans, quoted
strings); bare words are read as strings.
"""
from __future__ import annotations

import ast
import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .bmm import BMMConfig
from .density import DensityControlConfig
from .errors import ConfigError
from .losses import LossWeights


@dataclass
class LearningRates:
    position_init: float = 1.6e-4   # times scene radius
    position_final: float = 1.6e-6
    rotation: float = 1e-3
    scale: float = 5e-3
    opacity: float = 0.05
    sh_dc: float = 2.5e-3
    sh_rest: float = 2.5e-3 / 20
    mlp: float = 1e-3


@dataclass
class TrainConfig:
    iterations: int = 15000
    warmup_iters: int = 1000
    seed: int = 0
    threads: int = 0                # 0: numba default
    sh_degree: int = 3
    sh_degree_interval: int = 1000
    dtype: str = "float32"
    init_opacity: float = 0.1
    lr: LearningRates = field(default_factory=LearningRates)
    loss: LossWeights = field(default_factory=LossWeights)
    density: DensityControlConfig = field(default_factory=DensityControlConfig)
    bmm: BMMConfig = field(default_factory=BMMConfig)
    dynamic: bool = False
    gray_world: bool = True
    black_background: bool = False
    disable_medium: bool = False      # V1
    disable_physics_dc: bool = False  # V2
    disable_depth_loss: bool = False  # V3
    log_every: int = 1

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.iterations and not self.warmup_iters < self.iterations:
            raise ConfigError("warmup_iters must be smaller than iterations")
        rates = asdict(self.lr)
        if any(v <= 0 for v in rates.values()):
            raise ConfigError("learning rates must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    def effective_density(self) -> DensityControlConfig:
        if not self.disable_physics_dc:
            return self.density
        return replace(self.density, enable_physics_comp=False, enable_pixel_weighting=False,
                       enable_z_damp=False)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _set_path(obj, path, value):
    head, *rest = path
    names = {f.name: f for f in fields(obj)}
    if head not in names:
        raise ConfigError(f"unknown config key {head!r}")
    current = getattr(obj, head)
    if rest:
        if not is_dataclass(current):
            raise ConfigError(f"{head!r} has no sub-keys")
        return _set_path(current, rest, value)
    if is_dataclass(current):
        raise ConfigError(f"{head!r} is a section; set one of its keys")
    if isinstance(current, bool) and not isinstance(value, bool):
        raise ConfigError(f"{head!r} expects true/false")
    if isinstance(current, (int, float)) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{head!r} expects a number, got {value!r}")
        if isinstance(current, int) and not isinstance(value, int):
            if float(value).is_integer():
                value = int(value)
            else:
                raise ConfigError(f"{head!r} expects an integer")
    setattr(obj, head, value)
    return obj


def _revalidate(obj):
    """Rebuild nested dataclasses so every __post_init__ check runs on final values."""
    kwargs = {f.name: _revalidate(getattr(obj, f.name)) if is_dataclass(getattr(obj, f.name))
              else getattr(obj, f.name) for f in fields(obj)}
    return type(obj)(**kwargs)


def apply_overrides(cfg: TrainConfig, pairs: dict) -> TrainConfig:
    """Apply dotted-key overrides; validation runs once all values are in place."""
    cfg = copy.deepcopy(cfg)
    for key, value in pairs.items():
        _set_path(cfg, key.split("."), value)
    try:
        return _revalidate(cfg)
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None


def parse_config_text(text: str) -> dict:
    pairs = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {no}: expected key = value")
        key, value = line.split("=", 1)
        pairs[key.strip()] = _parse_value(value)
    return pairs


def load_config(path=None, base: TrainConfig | None = None) -> TrainConfig:
    cfg = base if base is not None else TrainConfig()
    if path is None:
        return cfg
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return apply_overrides(cfg, parse_config_text(text))


def dump_config(cfg: TrainConfig) -> str:
    lines = []

    def walk(obj, prefix):
        for f in fields(obj):
            v = getattr(obj, f.name)
            if is_dataclass(v):
                walk(v, prefix + f.name + ".")
            else:
                lines.append(f"{prefix}{f.name} = {v!r}")

    walk(cfg, "")
    return "\n".join(lines) + "\n"
