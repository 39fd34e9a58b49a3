"""
YAML run configuration with strict key checking.

Layout (every section optional)::

    schema_version: 1
    seed: 0
    data:          # SyntheticSpec fields
      n_nodes: 30
    train:         # TrainConfig fields
      epochs: 50
    loss:          # LossWeights fields
      lambda1: 0.1
    intervention:
      targets: [0]        # node ids, or {node: [unit vector]}
      value: flip         # "flip" (negated mean latent direction) or "e0"
      outcome: null       # readout node, default the last node
      horizon: 5
      n_samples: 100
      mode: sustained
      entropy: gaussian
    eval:
      k_bins: 15
      top_k: 10
"""

from dataclasses import asdict, dataclass, field, fields

import yaml

from .data import SyntheticSpec
from .exceptions import ConfigError
from .model import LossWeights
from .training import TrainConfig

__all__ = ["RunConfig", "InterventionConfig", "EvalConfig", "load_config", "SCHEMA_VERSION"]

SCHEMA_VERSION = 1


@dataclass
class InterventionConfig:
    targets: object = field(default_factory=lambda: [0])
    value: str = "flip"
    outcome: int = None
    horizon: int = 5
    n_samples: int = 100
    mode: str = "sustained"
    entropy: str = "gaussian"

    def __post_init__(self):
        if self.value not in ("flip", "e0"):
            raise ConfigError(f"intervention.value must be 'flip' or 'e0', got {self.value!r}")
        if self.entropy not in ("gaussian", "histogram"):
            raise ConfigError(f"intervention.entropy must be 'gaussian' or 'histogram'")
        if self.horizon < 1 or self.n_samples < 2:
            raise ConfigError("intervention.horizon must be >= 1 and n_samples >= 2")
        if self.mode not in ("sustained", "pulse"):
            raise ConfigError(f"unknown intervention.mode {self.mode!r}")


@dataclass
class EvalConfig:
    k_bins: int = 15
    top_k: int = 10
    kappa_bins: int = 20


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    intervention: InterventionConfig = field(default_factory=InterventionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def as_dict(self):
        return asdict(self)


_SECTIONS = {"data": SyntheticSpec, "train": TrainConfig, "loss": LossWeights,
             "intervention": InterventionConfig, "eval": EvalConfig}


def _build(cls, section, values):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    for k in values:
        if k not in known:
            raise ConfigError(f"unknown key {section}.{k}")
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} settings: {exc}") from exc


def load_config(path=None, overrides=None):
    """Parse a YAML config (or defaults when ``path`` is None).

    ``overrides`` is a flat mapping of top-level keys (e.g. ``seed``)
    applied after parsing.

    Raises
    ------
    ConfigError
        On unknown keys, a wrong schema version or invalid values.
    """
    raw = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    top = {"schema_version", "seed"} | set(_SECTIONS)
    for k in raw:
        if k not in top:
            raise ConfigError(f"unknown key {k}")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r}")
    cfg = RunConfig(schema_version=version, seed=int(raw.get("seed", 0)),
                    **{s: _build(c, s, raw.get(s)) for s, c in _SECTIONS.items()})
    for k, v in (overrides or {}).items():
        if v is not None:
            setattr(cfg, k, v)
    return cfg
