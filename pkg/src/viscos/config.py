"""JSON run configuration with strict keys and a fully resolved echo."""
import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional

from .conditioning import ConditionConfig
from .errors import ViscosError
from .training import TrainConfig

__all__ = ["ConfigError", "RunConfig", "load_config", "resolve", "to_jsonable"]


class ConfigError(ViscosError, ValueError):
    """Malformed configuration; ``key`` names the offending entry when known."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


@dataclass
class DatasetSection:
    kind: str = "two_moons"
    n: int = 10_000
    d: Optional[int] = None
    seed: int = 0
    params: dict = field(default_factory=dict)
    csv: Optional[str] = None


@dataclass
class FlowSection:
    init: str = "random"
    n_layers: int = 8
    width: int = 64
    lipschitz: float = 0.9
    init_seed: int = 0
    weight_scale: float = 0.1
    bias_scale: float = 0.1


@dataclass
class NetworkSection:
    hidden: list = field(default_factory=lambda: [64])
    init_seed: int = 0


@dataclass
class ObservationSection:
    csv: Optional[str] = None
    mask: Optional[list] = None
    amortized: bool = False
    network: Optional[str] = None


@dataclass
class SampleSection:
    n: int = 100
    posterior: Optional[str] = None


@dataclass
class CheckSection:
    suite: str = "all"
    n_problems: int = 10
    n_points: int = 5


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "out"
    checkpoint: Optional[str] = None
    dataset: DatasetSection = field(default_factory=DatasetSection)
    flow: FlowSection = field(default_factory=FlowSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    condition: ConditionConfig = field(default_factory=ConditionConfig)
    observation: ObservationSection = field(default_factory=ObservationSection)
    sample: SampleSection = field(default_factory=SampleSection)
    check: CheckSection = field(default_factory=CheckSection)


# fields that cannot come from JSON
_SKIP = {"preconditioner"}


def _build(cls, doc, path):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or 'config'} must be an object", path)
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls) if f.name not in _SKIP}
    for key in doc:
        if key not in names:
            full = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key {full!r}", full)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in _SKIP or f.name not in doc:
            continue
        full = f"{path}.{f.name}" if path else f.name
        current = getattr(defaults, f.name)
        if dataclasses.is_dataclass(current):
            kwargs[f.name] = _build(type(current), doc[f.name], full)
        else:
            kwargs[f.name] = doc[f.name]
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value in {path or 'config'}: {exc}", path) from exc


def resolve(doc, seed=None):
    """Build a :class:`RunConfig` from a dict; the top-level seed is pushed into every section."""
    cfg = _build(RunConfig, doc, "")
    if seed is not None:
        cfg.seed = int(seed)
    cfg.train.seed = cfg.seed
    cfg.condition.seed = cfg.seed
    return cfg


def load_config(path, seed=None):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return resolve(doc, seed)


def to_jsonable(cfg):
    """Nested dict of a config, dropping non-serialisable fields."""
    out = {}
    for f in dataclasses.fields(cfg):
        if f.name in _SKIP:
            continue
        value = getattr(cfg, f.name)
        out[f.name] = to_jsonable(value) if dataclasses.is_dataclass(value) else value
    return out
