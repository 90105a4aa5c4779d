"""Scenario configuration: YAML sections mapped onto validated dataclasses.

Unknown keys are rejected at every level.  The canonical form is the nested
dict of all fields (defaults filled in); its hash is the SHA-256 of the JSON
dump with sorted keys, so key order in the file does not matter.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from ..exceptions import ConfigurationError

__all__ = [
    "MarketConfig",
    "FrictionConfig",
    "LedgerConfig",
    "FeasibleConfig",
    "RiskConfig",
    "PolicyConfig",
    "ExperimentConfig",
    "ScenarioConfig",
    "load_config",
    "parse_config",
    "canonical_dict",
    "canonical_yaml",
    "config_hash",
]

INF = math.inf


def _num(x, name):
    try:
        return float(x)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{name} must be a number, got {x!r}") from None


@dataclass
class MarketConfig:
    model: str = "abm"
    drift: float = 0.05
    vol: float = 0.2
    kappa: float = 1.0
    mean: float = 0.0
    y0: float = 100.0
    horizon: float = 1.0
    n_steps: int = 100

    def validate(self):
        if self.model not in ("abm", "gbm", "ou"):
            raise ConfigurationError("market.model must be abm, gbm or ou")
        if not self.vol > 0 or not self.horizon > 0:
            raise ConfigurationError("market.vol and market.horizon must be > 0")
        if self.n_steps < 1:
            raise ConfigurationError("market.n_steps must be >= 1")
        if self.model == "ou" and not self.kappa > 0:
            raise ConfigurationError("market.kappa must be > 0")


@dataclass
class FrictionConfig:
    half_spread: float = 0.0
    temp_impact: float = 1e-2
    l1_cost: float = 0.0
    tau_fill: float = 0.0
    kernel_rate: float = 1.0
    kernel_scale: float = 0.0
    adv: float = INF
    discount_coef: float = 0.0

    def validate(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigurationError(f"frictions.{f.name} must be >= 0")
        if not self.temp_impact > 0:
            raise ConfigurationError("frictions.temp_impact must be > 0")
        if not self.adv > 0:
            raise ConfigurationError("frictions.adv must be > 0")


@dataclass
class LedgerConfig:
    credit: float = 0.0
    funding: float = 0.0
    tax: float = 0.0
    lend: float = 0.0
    hold: float = 0.0
    quad: float = 0.0

    def validate(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigurationError(f"ledger.{f.name} must be >= 0")


@dataclass
class FeasibleConfig:
    position_low: float = -INF
    position_high: float = INF
    speed_cap: float = INF

    def validate(self):
        if self.position_low > self.position_high:
            raise ConfigurationError("feasible.position_low must not exceed position_high")
        if not self.speed_cap > 0:
            raise ConfigurationError("feasible.speed_cap must be > 0")


@dataclass
class RiskConfig:
    kind: str = "cvar"
    level: float = 0.95
    aversion: float = 0.0

    def validate(self):
        if self.kind not in ("cvar", "entropic", "expectile"):
            raise ConfigurationError("risk.kind must be cvar, entropic or expectile")
        if self.kind != "entropic" and not 0 < self.level < 1:
            raise ConfigurationError("risk.level must lie in (0, 1)")
        if self.aversion < 0:
            raise ConfigurationError("risk.aversion must be >= 0")


@dataclass
class PolicyConfig:
    kind: str = "mo"
    signal: float = 0.05
    inventory_penalty: float = 0.1
    step: float = 0.1
    max_iter: int = 200
    batch_size: int = 1
    floor: float = 0.1

    def validate(self):
        if self.kind not in ("mo", "rl", "perturbed-mo"):
            raise ConfigurationError("policy.kind must be mo, rl or perturbed-mo")
        if self.inventory_penalty < 0 or not self.step > 0 or self.max_iter < 0 or self.batch_size < 1:
            raise ConfigurationError("policy parameters out of range")
        if self.floor < 0:
            raise ConfigurationError("policy.floor must be >= 0")


@dataclass
class ExperimentConfig:
    kind: str = "simulate"
    n_paths: int = 1000
    seed: int = 0
    params: dict = field(default_factory=dict)

    def validate(self):
        if self.n_paths < 1:
            raise ConfigurationError("experiment.n_paths must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError("experiment.seed must be an unsigned 64-bit integer")
        if not isinstance(self.params, dict):
            raise ConfigurationError("experiment.params must be a mapping")


@dataclass
class ScenarioConfig:
    market: MarketConfig = field(default_factory=MarketConfig)
    frictions: FrictionConfig = field(default_factory=FrictionConfig)
    ledger: LedgerConfig = field(default_factory=LedgerConfig)
    feasible: FeasibleConfig = field(default_factory=FeasibleConfig)
    risk: RiskConfig = field(default_factory=RiskConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    output_dir: str = "out"

    def validate(self) -> "ScenarioConfig":
        for f in fields(self):
            v = getattr(self, f.name)
            if hasattr(v, "validate"):
                v.validate()
        return self


SECTIONS = {f.name: f.type for f in fields(ScenarioConfig)}
_SECTION_TYPES = {
    "market": MarketConfig, "frictions": FrictionConfig, "ledger": LedgerConfig, "feasible": FeasibleConfig,
    "risk": RiskConfig, "policy": PolicyConfig, "experiment": ExperimentConfig,
}


def _build(cls, data, section: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"section {section!r} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {section!r}: {', '.join(map(str, unknown))}")
    kw = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        if isinstance(default, bool) or isinstance(default, (str, dict)):
            kw[name] = value
        elif isinstance(default, int):
            if isinstance(value, bool) or not float(_num(value, f"{section}.{name}")).is_integer():
                raise ConfigurationError(f"{section}.{name} must be an integer")
            kw[name] = int(value)
        else:
            kw[name] = _num(value, f"{section}.{name}")
    return cls(**kw)


def parse_config(data: dict) -> ScenarioConfig:
    """Validate a nested mapping into a :class:`ScenarioConfig`."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError("config root must be a mapping")
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigurationError(f"unknown top-level key(s): {', '.join(map(str, unknown))}")
    kw = {name: _build(cls, data.get(name), name) for name, cls in _SECTION_TYPES.items()}
    out = data.get("output_dir", "out")
    if not isinstance(out, str):
        raise ConfigurationError("output_dir must be a string")
    return ScenarioConfig(**kw, output_dir=out).validate()


def load_config(path) -> ScenarioConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse {p}: {exc}") from None
    return parse_config(data)


def canonical_dict(cfg: ScenarioConfig) -> dict:
    return asdict(cfg)


def canonical_yaml(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(canonical_dict(cfg), sort_keys=True, default_flow_style=False)


def config_hash(cfg: ScenarioConfig) -> str:
    blob = json.dumps(canonical_dict(cfg), sort_keys=True, separators=(",", ":"), allow_nan=True)
    return hashlib.sha256(blob.encode()).hexdigest()
