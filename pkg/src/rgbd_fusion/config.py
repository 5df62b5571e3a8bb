"""Run configuration: one YAML document, validated in full before any work.

Top-level keys::

    seed: 0
    precision: f64            # or f32
    out: runs/example
    network: {...}            # NetworkSpec fields
    train: {...}              # TrainPlan fields (its seed comes from the top level)
    data:
      synthetic: {...}        # or  raw: <dir>  or  prepared: <dir>
      eval: {synthetic: {...}}  # optional held-out split, same three forms
    ablation: {...}           # cells, seeds, orderings, pretrain
    gradcheck: {seeds: 20}

Unknown keys anywhere are errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .ablation import Suite
from .data.synthetic import SyntheticTaskSpec
from .networks import NetworkSpec
from .train import TrainPlan

PRECISIONS = {"f32": np.float32, "f64": np.float64}
TOP_KEYS = {"seed", "precision", "out", "network", "train", "data", "ablation", "gradcheck"}
SOURCES = ("synthetic", "raw", "prepared")


class ConfigError(ValueError):
    pass


@dataclass
class DataSource:
    synthetic: SyntheticTaskSpec | None = None
    raw: str | None = None
    prepared: str | None = None

    @classmethod
    def from_dict(cls, d: dict, where: str) -> "DataSource":
        if not isinstance(d, dict):
            raise ConfigError(f"{where} must be a mapping")
        unknown = set(d) - set(SOURCES)
        if unknown:
            raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
        given = [k for k in SOURCES if d.get(k) is not None]
        if len(given) != 1:
            raise ConfigError(f"{where} needs exactly one of {SOURCES}, got {given}")
        if "synthetic" in given:
            return cls(synthetic=SyntheticTaskSpec.from_dict(d["synthetic"] or {}))
        return cls(**{given[0]: str(d[given[0]])})

    def describe(self) -> dict:
        if self.synthetic is not None:
            return {"synthetic": self.synthetic.to_dict()}
        return {"raw": self.raw} if self.raw is not None else {"prepared": self.prepared}


@dataclass
class DataConfig:
    train: DataSource
    eval: DataSource | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        d = dict(d or {})
        ev = d.pop("eval", None)
        return cls(DataSource.from_dict(d, "data"),
                   None if ev is None else DataSource.from_dict(ev, "data.eval"))


@dataclass
class RunConfig:
    network: NetworkSpec
    train: TrainPlan
    data: DataConfig | None
    out: str | None = None
    seed: int = 0
    precision: str = "f64"
    ablation: dict | None = None
    gradcheck: dict = field(default_factory=lambda: {"seeds": 20})

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def suite(self) -> Suite:
        if not self.ablation:
            raise ConfigError("config has no ablation section (or it is empty)")
        body = dict(self.ablation)
        for key in ("base_spec", "plan"):
            if key in body:
                raise ConfigError(f"ablation.{key} comes from the network/train sections")
        plan = self.train.to_dict()
        plan.pop("stage")
        plan.pop("init_from")
        plan.pop("seed")
        try:
            return Suite.from_dict({**body, "base_spec": self.network.to_dict(), "plan": plan})
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"ablation: {exc}") from exc


def parse_config(raw: dict | None, overrides: dict | None = None) -> RunConfig:
    """Build and validate a RunConfig; ``overrides`` carries command-line flags."""
    raw = dict(raw or {})
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = v
    precision = raw.get("precision", "f64")
    if precision not in PRECISIONS:
        raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {precision!r}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    try:
        network = NetworkSpec.from_dict(raw.get("network") or {})
        train_d = dict(raw.get("train") or {})
        if "seed" in train_d:
            raise ConfigError("train.seed is set by the top-level seed")
        plan = TrainPlan.from_dict({**train_d, "seed": seed})
        data = DataConfig.from_dict(raw["data"]) if raw.get("data") is not None else None
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    gradcheck = dict(raw.get("gradcheck") or {"seeds": 20})
    if set(gradcheck) - {"seeds"}:
        raise ConfigError(f"unknown gradcheck keys: {sorted(set(gradcheck) - {'seeds'})}")
    if not isinstance(gradcheck.get("seeds", 20), int) or gradcheck.get("seeds", 20) < 1:
        raise ConfigError("gradcheck.seeds must be a positive integer")
    ablation = raw.get("ablation")
    if ablation is not None and not isinstance(ablation, dict):
        raise ConfigError("ablation must be a mapping")
    out = raw.get("out")
    return RunConfig(network, plan, data, None if out is None else str(out), seed, precision,
                     ablation, gradcheck)


def load_config(path, overrides: dict | None = None) -> RunConfig:
    if path is None:
        return parse_config({}, overrides)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"config {path} must hold a mapping at the top level")
    return parse_config(raw, overrides)
