"""Pipeline configuration: one section per component, loaded from YAML or JSON."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from viewacq.diagnostics import DiagTrainConfig, EncoderConfig
from viewacq.errors import ConfigError
from viewacq.metrics import config_hash
from viewacq.selector import PPOConfig
from viewacq.synthstudy import GeneratorConfig

DEFAULT_LAMBDAS = (0.001, 0.01, 0.05, 0.1, 0.2, 0.5)


@dataclass(frozen=True)
class SplitConfig:
    ratios: tuple = (0.70, 0.15, 0.15)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios) or abs(sum(self.ratios) - 1) > 1e-9:
            raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {self.ratios}")


@dataclass(frozen=True)
class EvalConfig:
    n_runs: int = 5
    k_values: tuple = (1, 2, 3, 4)
    lambdas: tuple = DEFAULT_LAMBDAS
    seeds: tuple = (0, 1, 2, 3, 4)
    cost_lambda: float = 0.05
    stochastic: bool = False

    def __post_init__(self):
        for name in ("k_values", "lambdas", "seeds"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.n_runs < 1:
            raise ConfigError("n_runs must be positive")
        if any(lam < 0 for lam in self.lambdas) or self.cost_lambda < 0:
            raise ConfigError("cost lambdas must be non-negative")


_SECTIONS = {
    "data": GeneratorConfig,
    "split": SplitConfig,
    "encoder": EncoderConfig,
    "diag_train": DiagTrainConfig,
    "ppo": PPOConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class PipelineConfig:
    data: GeneratorConfig = field(default_factory=GeneratorConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    diag_train: DiagTrainConfig = field(default_factory=DiagTrainConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        out = {}
        for name in _SECTIONS:
            sec = getattr(self, name)
            d = sec.to_dict() if hasattr(sec, "to_dict") else dataclasses.asdict(sec)
            out[name] = json.loads(json.dumps(d))  # tuples -> lists
        return out

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict | None) -> "PipelineConfig":
        doc = doc or {}
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a mapping")
        unknown = set(doc) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kw = {}
        for name, typ in _SECTIONS.items():
            sec = doc.get(name) or {}
            if not isinstance(sec, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            known = {f.name for f in dataclasses.fields(typ)}
            bad = set(sec) - known
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            try:
                kw[name] = typ(**sec)
            except TypeError as exc:
                raise ConfigError(f"bad value in {name!r}: {exc}") from exc
        return cls(**kw)

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Apply one global seed to every seeded section."""
        return PipelineConfig(
            data=self.data.replace(seed=seed),
            split=dataclasses.replace(self.split, seed=seed),
            encoder=dataclasses.replace(self.encoder, seed=seed),
            diag_train=dataclasses.replace(self.diag_train, seed=seed),
            ppo=dataclasses.replace(self.ppo, seed=seed),
            eval=self.eval,
        )


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (ValueError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return PipelineConfig.from_dict(doc)


def dump_config(cfg: PipelineConfig, path) -> None:
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    else:
        path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
