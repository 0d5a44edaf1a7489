"""Run configuration: every threshold and seed in one JSON-serializable place."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Optional

PROVIDERS = ("oracle", "fixed", "http")
PIVOT_METHODS = ("kabsch", "static")
SEGMENTERS = ("oracle", "http")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DeformSection:
    epochs: int = 1500
    lr: float = 5e-3
    latent_dim: int = 8
    optimizer: str = "adam"


@dataclass(frozen=True)
class RefinerSection:
    max_depth: int = 4
    s_min: float = 1e-4
    ellipse_sigma: float = 1.0
    occlusion_margin: float = 0.01
    enabled: bool = True


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    tau_mot: float = 0.05
    tau_vis: float = 2.0
    tau_rank: float = 0.05
    theta_min_deg: float = 1.0
    pivot_method: str = "kabsch"
    n_pairs: int = 5
    provider: str = "oracle"
    fixed_parts: Optional[int] = None
    segmenter: str = "oracle"
    state_a: int = 0
    state_b: int = -1  # negative counts from the last state
    threads: int = 1
    deform: DeformSection = field(default_factory=DeformSection)
    refiner: RefinerSection = field(default_factory=RefinerSection)

    def validate(self) -> "RunConfig":
        checks = [
            (0.0 <= self.tau_mot <= 1.0, "tau_mot must lie in [0, 1]"),
            (self.tau_vis >= 1.0, "tau_vis must be at least 1"),
            (0.0 < self.tau_rank < 1.0, "tau_rank must lie in (0, 1)"),
            (0.0 < self.theta_min_deg < 180.0, "theta_min_deg must lie in (0, 180)"),
            (self.pivot_method in PIVOT_METHODS, f"pivot_method must be one of {PIVOT_METHODS}"),
            (self.n_pairs >= 1, "n_pairs must be at least 1"),
            (self.provider in PROVIDERS, f"provider must be one of {PROVIDERS}"),
            (self.segmenter in SEGMENTERS, f"segmenter must be one of {SEGMENTERS}"),
            (self.provider != "fixed" or (self.fixed_parts or 0) >= 1,
             "provider 'fixed' needs fixed_parts >= 1"),
            (self.threads >= 1, "threads must be at least 1"),
            (self.deform.epochs >= 1 and self.deform.lr > 0, "deform.epochs >= 1, deform.lr > 0"),
            (self.deform.latent_dim >= 1, "deform.latent_dim must be at least 1"),
            (self.deform.optimizer in ("adam", "gd"), "deform.optimizer must be adam or gd"),
            (self.refiner.max_depth >= 0, "refiner.max_depth must be >= 0"),
            (self.refiner.s_min > 0 and self.refiner.ellipse_sigma > 0,
             "refiner.s_min and refiner.ellipse_sigma must be positive"),
            (self.refiner.occlusion_margin >= 0, "refiner.occlusion_margin must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    @property
    def theta_min(self) -> float:
        return math.radians(self.theta_min_deg)

    def state_pair(self, K: int):
        a = self.state_a % K if self.state_a < 0 else self.state_a
        b = self.state_b % K if self.state_b < 0 else self.state_b
        if not (0 <= a < K and 0 <= b < K) or a == b:
            raise ConfigError(f"state pair ({self.state_a}, {self.state_b}) invalid for K={K}")
        return a, b

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc) -> "RunConfig":
        return _build(cls, doc, "").validate()

    def with_overrides(self, pairs) -> "RunConfig":
        """Apply ``key=value`` strings; nested keys use dots (``deform.epochs=200``)."""
        doc = self.to_dict()
        for item in pairs:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            parts = key.strip().split(".")
            node = doc
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                node[parts[-1]] = json.loads(raw)
            except json.JSONDecodeError:
                node[parts[-1]] = raw
        return RunConfig.from_dict(doc)


def _build(cls, doc, prefix):
    if not isinstance(doc, dict):
        raise ConfigError(f"config section {prefix or '<root>'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key {prefix + unknown[0]!r}")
    kwargs = {}
    defaults = cls()
    for name, value in doc.items():
        default = getattr(defaults, name)
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, prefix + name + ".")
            continue
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{prefix + name} must be true or false")
        elif isinstance(default, int) or name == "fixed_parts":
            if value is None and default is None:
                pass
            elif not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{prefix + name} must be an integer")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{prefix + name} must be a number")
            value = float(value)
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"{prefix + name} must be a string")
        kwargs[name] = value
    return replace(defaults, **kwargs)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return RunConfig.from_dict(doc)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def describe_defaults() -> str:
    """One ``key = default`` line per config key, nested keys dotted."""
    lines = []

    def walk(obj, prefix):
        for f in fields(obj):
            v = getattr(obj, f.name)
            if is_dataclass(v):
                walk(v, prefix + f.name + ".")
            else:
                lines.append(f"  {prefix + f.name} = {json.dumps(v)}")

    walk(RunConfig(), "")
    return "\n".join(lines)
