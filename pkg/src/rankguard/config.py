"""Run configuration loaded from TOML.

Defaults mirror the frozen production values (theta 0.2, cap 85th percentile
at 0.70, halflife 30, embargo 90, 10 bps). The shipped ``configs/*.toml``
files shrink the fold plan to desk scale.
"""
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .conformal import NORMALIZERS
from .errors import ConfigError
from .gate import GateConfig
from .gbt import GbtConfig
from .policies import PRESETS, PolicySpec
from .synthetic import RegimeScript

POLICY_OVERRIDE_KEYS = {"K", "theta", "cap_p", "cap_kappa", "ua_sign", "epsilon"}


@dataclass
class InputConfig:
    kind: str = "synthetic"
    path: str = None
    script: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("synthetic", "csv"):
            raise ConfigError(f"input.kind must be 'synthetic' or 'csv', got {self.kind!r}")
        if self.kind == "csv" and not self.path:
            raise ConfigError("input.path is required for csv input")
        if self.kind == "synthetic" and not self.script.get("segments"):
            raise ConfigError("input.script.segments is required for synthetic input")


@dataclass
class FoldConfig:
    n_folds: int = 109
    embargo_days: int = 90
    min_train_folds: int = 20


@dataclass
class AleatoricSettings:
    window: int = 60
    quantile_level: float = 0.10
    tier0: bool = True
    tier2: bool = False


@dataclass
class ConformalSettings:
    normalizers: tuple = NORMALIZERS
    nominal: float = 0.90
    calib_window_days: int = 60
    min_scores: int = 30

    def __post_init__(self):
        self.normalizers = tuple(self.normalizers)
        bad = [n for n in self.normalizers if n not in NORMALIZERS]
        if bad:
            raise ConfigError(f"unknown conformal normalizers {bad}")


@dataclass
class RunConfig:
    input: InputConfig
    seed: int = 0
    horizons: tuple = (20,)
    dev_end: str = None
    cost_bps: float = 10.0
    crisis: tuple = None
    policies: tuple = tuple(PRESETS)
    policy: dict = field(default_factory=dict)
    folds: FoldConfig = field(default_factory=FoldConfig)
    gbt: GbtConfig = field(default_factory=GbtConfig)
    aleatoric: AleatoricSettings = field(default_factory=AleatoricSettings)
    gate: GateConfig = field(default_factory=GateConfig)
    conformal: ConformalSettings = field(default_factory=ConformalSettings)
    out: str = "runs/default"

    def __post_init__(self):
        self.horizons = tuple(int(h) for h in self.horizons)
        self.policies = tuple(self.policies)
        if not self.horizons or any(h not in (20, 60, 90) for h in self.horizons):
            raise ConfigError(f"horizons must be drawn from 20, 60, 90; got {self.horizons}")
        unknown = [p for p in self.policies if p not in PRESETS]
        if unknown:
            raise ConfigError(f"undefined policy presets {unknown}")
        for name, over in self.policy.items():
            if name not in PRESETS:
                raise ConfigError(f"override for undefined policy {name!r}")
            extra = set(over) - POLICY_OVERRIDE_KEYS
            if extra:
                raise ConfigError(f"policy.{name}: unsupported keys {sorted(extra)}")
        if self.crisis is not None:
            self.crisis = tuple(self.crisis)
            if len(self.crisis) != 2 or self.crisis[0] > self.crisis[1]:
                raise ConfigError("crisis must be an ordered [start, end] pair")
        if self.cost_bps < 0:
            raise ConfigError("cost_bps must be non-negative")

    @property
    def primary_horizon(self):
        return self.horizons[0]

    def policy_specs(self):
        out = []
        for name in self.policies:
            over = self.policy.get(name, {})
            out.append(dataclasses.replace(PRESETS[name], **over) if over else PRESETS[name])
        return out

    def script(self):
        if self.input.kind != "synthetic":
            return None
        d = dict(self.input.script)
        d["seed"] = self.seed
        return RegimeScript.from_dict(d)

    def to_dict(self):
        return _plain(dataclasses.asdict(self))

    def digest(self):
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a table")
    names = {f.name for f in dataclasses.fields(cls)}
    extra = set(data) - names
    if extra:
        raise ConfigError(f"[{where}] unknown keys {sorted(extra)}")
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}")


def from_dict(data):
    data = dict(data)
    nested = {
        "input": InputConfig, "folds": FoldConfig, "gbt": GbtConfig,
        "aleatoric": AleatoricSettings, "gate": GateConfig, "conformal": ConformalSettings,
    }
    if "input" not in data:
        raise ConfigError("missing [input] table")
    kwargs = {}
    for key, value in data.items():
        if key in nested:
            kwargs[key] = _build(nested[key], value, key)
        else:
            kwargs[key] = value
    return _build(RunConfig, kwargs, "top level")


def load_config(path, overrides=None):
    """Parse a TOML file into a RunConfig; ``overrides`` are top-level keys."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}")
    for k, v in (overrides or {}).items():
        if v is not None:
            data[k] = v
    cfg = from_dict(data)
    if cfg.input.kind == "synthetic":
        cfg.script()  # validates the script early
    return cfg


def spec_echo(spec):
    return {k: v for k, v in dataclasses.asdict(spec).items()}


__all__ = ["RunConfig", "load_config", "from_dict", "PolicySpec", "spec_echo"]
