"""Run configuration: defaults <- key-value config file <- command-line flags.

The file format is flat ``section.key = value`` lines, ``#`` comments allowed,
with sections ``synth``, ``split``, ``lmem``, ``rf`` and ``ann``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .core import SplitSpec, read_kv
from .forest import ForestHyperparams
from .net import MlpArchitecture, TrainSpec
from .synth import SynthEmnsConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LmemSettings:
    max_degree: int = 3
    current_cap: float = 5.0
    reference_radius: float = 0.2


def _parse_value(typ, raw: str):
    if typ is bool:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if typ == "int|None":
        return None if raw.strip().lower() in ("none", "") else int(raw)
    if typ is tuple:
        return tuple(int(t) for t in raw.split(","))
    return typ(raw)


_FIELD_TYPES = {
    "split": {"seed": int, "test_fraction": float},
    "lmem": {"max_degree": int, "current_cap": float, "reference_radius": float},
    "rf": {"n_trees": int, "max_depth": "int|None", "min_samples_split": int, "max_features": int,
           "min_samples_leaf": int, "bootstrap": bool, "seed": int},
    "ann": {"batch_size": int, "max_epochs": int, "validation_fraction": float, "patience": int,
            "learning_rate": float, "seed": int, "widths": tuple},
}


@dataclass(frozen=True)
class CliConfig:
    synth: SynthEmnsConfig = field(default_factory=SynthEmnsConfig)
    split: SplitSpec = SplitSpec()
    lmem: LmemSettings = LmemSettings()
    rf: ForestHyperparams = ForestHyperparams()
    ann: TrainSpec = TrainSpec()
    arch: MlpArchitecture = MlpArchitecture()

    def with_overrides(self, section: str, **values) -> "CliConfig":
        """Apply flag values; ``None`` means 'not given'."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        if section == "synth":
            return dataclasses.replace(self, synth=self.synth.replace(**values))
        if section == "arch":
            return dataclasses.replace(self, arch=MlpArchitecture(**values))
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **values)})

    def as_dict(self) -> dict:
        return {
            "synth": self.synth.to_kv(),
            "split": dataclasses.asdict(self.split),
            "lmem": dataclasses.asdict(self.lmem),
            "rf": dataclasses.asdict(self.rf),
            "ann": dataclasses.asdict(self.ann),
            "arch": {"widths": list(self.arch.widths)},
        }

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.as_dict(), sort_keys=True).encode()).hexdigest()


def load_config(path=None) -> CliConfig:
    cfg = CliConfig()
    if path is None:
        return cfg
    kv = read_kv(path)
    sections: dict[str, dict[str, str]] = {}
    for key, val in kv.items():
        if "." not in key:
            raise ConfigError(f"config key {key!r} lacks a section prefix")
        sec, rest = key.split(".", 1)
        if sec not in ("synth", *_FIELD_TYPES):
            raise ConfigError(f"unknown config section {sec!r} in {key!r}")
        sections.setdefault(sec, {})[rest] = val
    try:
        if "synth" in sections:
            cfg = dataclasses.replace(cfg, synth=SynthEmnsConfig.from_kv(sections["synth"]))
        for sec, items in sections.items():
            if sec == "synth":
                continue
            types = _FIELD_TYPES[sec]
            values = {}
            for k, raw in items.items():
                if k not in types:
                    raise ConfigError(f"unknown config key '{sec}.{k}'")
                values[k] = _parse_value(types[k], raw)
            if sec == "ann" and "widths" in values:
                cfg = cfg.with_overrides("arch", widths=values.pop("widths"))
            # file values are explicit, so None (e.g. rf.max_depth = none) is kept
            cfg = dataclasses.replace(cfg, **{sec: dataclasses.replace(getattr(cfg, sec), **values)})
    except (KeyError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg
