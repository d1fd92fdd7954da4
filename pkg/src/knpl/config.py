"""Pipeline configuration: an INI file with a canonical, hashable form."""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .corpus import PromptCondition
from .errors import ConfigError
from .kn import AttributionConfig
from .model import ModelConfig
from .probe import TAU_GRID
from .train import TrainConfig


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 7
    n_entities: int = 100
    n_relations: int = 8
    n_two_hop: int = 240
    n_demo: int = 300
    few_shot_k: int = 4


@dataclass(frozen=True)
class ArchConfig:
    n_layers: int = 2
    d_model: int = 64
    d_ff: int = 128
    n_heads: int = 4
    max_seq_len: int = 128


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 110
    lr: float = 3e-3
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "adam"
    eval_every: int = 10


@dataclass(frozen=True)
class ProbeConfig:
    conditions: tuple = ("no_cot", "zero_shot", "few_shot")
    targets: tuple = ("w1", "w2", "w12", "wr")
    enhance_factor: float = 2.0
    positions: str = "steps"
    tau: float = 0.7
    tau_grid: tuple = TAU_GRID
    random_seed: int = 0
    overlap_pairs: int = 2000
    overlap_seed: int = 0


@dataclass(frozen=True)
class ConflictConfig:
    condition: str = "no_cot"
    seed: int = 0
    alpha: float = 0.05
    enabled: bool = True


@dataclass(frozen=True)
class PipelineConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ArchConfig = field(default_factory=ArchConfig)
    train: TrainSection = field(default_factory=TrainSection)
    attribution: AttributionConfig = field(default_factory=AttributionConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    conflict: ConflictConfig = field(default_factory=ConflictConfig)

    # --- derived objects ----------------------------------------------------------------
    def model_config(self, vocab_size: int) -> ModelConfig:
        m = self.model
        return ModelConfig(vocab_size, m.n_layers, m.d_model, m.d_ff, m.n_heads, m.max_seq_len)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            epochs=t.epochs, lr=t.lr, batch_size=t.batch_size, seed=t.seed,
            optimizer=t.optimizer, few_shot_k=self.world.few_shot_k, eval_every=t.eval_every,
        )

    def conditions(self) -> list[PromptCondition]:
        return [PromptCondition.parse(c, self.world.few_shot_k) for c in self.probe.conditions]

    def with_seed(self, seed: int) -> "PipelineConfig":
        return replace(
            self,
            world=replace(self.world, seed=seed),
            train=replace(self.train, seed=seed),
        )

    # --- serialization --------------------------------------------------------------
    def sections(self) -> dict[str, dict[str, str]]:
        return {name: {f.name: _fmt(getattr(getattr(self, name), f.name)) for f in fields(getattr(self, name))} for name in SECTIONS}

    def canonical(self, names=None) -> str:
        secs = self.sections()
        lines = []
        for name in sorted(names if names is not None else secs):
            lines.append(f"[{name}]")
            lines += [f"{k} = {v}" for k, v in sorted(secs[name].items())]
            lines.append("")
        return "\n".join(lines)

    def digest(self, names=None) -> str:
        return hashlib.sha256(self.canonical(names).encode()).hexdigest()[:16]

    def write(self, path) -> None:
        Path(path).write_text(self.canonical(), encoding="utf-8")

    @classmethod
    def from_text(cls, text: str) -> "PipelineConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"cannot parse config: {e}") from e
        parts = {}
        for name, typ in SECTIONS.items():
            default = typ()
            values = {}
            if parser.has_section(name):
                known = {f.name: f for f in fields(typ)}
                for key, raw in parser.items(name):
                    if key not in known:
                        raise ConfigError(f"unknown key {name}.{key}")
                    values[key] = _parse(raw, getattr(default, key), f"{name}.{key}")
            parts[name] = typ(**values)
        unknown = set(parser.sections()) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls(**parts)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_text(text)

    def validate(self) -> None:
        for c in self.probe.conditions:
            PromptCondition.parse(c, self.world.few_shot_k)
        PromptCondition.parse(self.conflict.condition, self.world.few_shot_k)
        for t in self.probe.targets:
            if t not in ("w1", "w2", "w12", "wr"):
                raise ConfigError(f"unknown intervention target {t!r}")
        if not self.probe.enhance_factor > 1.0:
            raise ConfigError("enhance_factor must exceed 1")
        if self.probe.positions not in ("steps", "last_prompt"):
            raise ConfigError("positions must be 'steps' or 'last_prompt'")
        for t in (self.probe.tau, *self.probe.tau_grid):
            if not 0.0 < t < 1.0:
                raise ConfigError("tau values must lie in (0, 1)")
        if self.model.d_model % self.model.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")


SECTIONS = {
    "world": WorldConfig,
    "model": ArchConfig,
    "train": TrainSection,
    "attribution": AttributionConfig,
    "probe": ProbeConfig,
    "conflict": ConflictConfig,
}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "yes", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if default and isinstance(default[0], float):
                return tuple(float(x) for x in items)
            return tuple(items)
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {raw!r}") from e
    return raw
