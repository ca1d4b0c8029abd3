"""Run configuration: defaults, TOML loading, canonical hashing."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .augment import AugmentConfig
from .errors import ConfigError
from .losses import LossConfig
from .model import ModelConfig
from .synth import GeneratorConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class ModelDims:
    """Architecture knobs; vocabulary sizes are bound in at runtime."""

    feat_dim: int = 64
    entity_dim: int = 32
    rel_dim: int = 64
    word_dim: int = 32
    hidden_dim: int = 64
    fusion: str = "gated"
    gamma_init: float = 0.1

    def bind(self, n_entities: int, n_p: int, feat_aug_mlp: bool = False) -> ModelConfig:
        return ModelConfig(n_entities=n_entities, n_p=n_p, feat_aug_mlp=feat_aug_mlp,
                           **asdict(self))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    pretrain_epochs: int = 12
    ra_epochs: int = 26
    train_frac: float = 0.8
    eval_ks: tuple = (50, 100)
    head_frac: float = 0.5
    tail_frac: float = 0.1
    cold_start: bool = False

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("learning rate must be positive and batch size >= 1")
        object.__setattr__(self, "eval_ks", tuple(int(k) for k in self.eval_ks))


@dataclass(frozen=True)
class RunConfig:
    seed: int = 7
    out: Path = Path("runs/default")
    gen: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelDims = field(default_factory=ModelDims)
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bank_cap: int = 10

    def __post_init__(self):
        object.__setattr__(self, "out", Path(self.out))
        if self.bank_cap < 1:
            raise ConfigError("bank cap must be >= 1")

    # artifact locations, all under the output directory
    @property
    def dataset_path(self) -> Path:
        return self.out / "dataset.jsonl"

    @property
    def eval_dataset_path(self) -> Path:
        return self.out / "eval.jsonl"

    @property
    def vocab_path(self) -> Path:
        return self.out / "vocab.json"

    @property
    def oracle_path(self) -> Path:
        return self.out / "oracle.json"

    @property
    def pretrain_ckpt_path(self) -> Path:
        return self.out / "pretrain.ckpt"

    @property
    def ra_ckpt_path(self) -> Path:
        return self.out / "ra.ckpt"

    @property
    def bank_path(self) -> Path:
        return self.out / "bank.bin"

    @property
    def reports_dir(self) -> Path:
        return self.out / "reports"

    def hash(self) -> str:
        """Hash of everything that defines the run, excluding file locations."""
        d = asdict(self)
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, default=str).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def _build(cls, section: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {sorted(unknown)}")
    try:
        return cls(**section)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


_SECTIONS = {
    "gen": GeneratorConfig,
    "model": ModelDims,
    "aug": AugmentConfig,
    "loss": LossConfig,
    "train": TrainConfig,
}


def load_config(path=None, seed=None, out=None) -> RunConfig:
    """RunConfig from an optional TOML file plus CLI overrides."""
    raw: dict = {}
    if path is not None:
        with open(path, "rb") as fh:
            try:
                raw = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = raw.pop(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a table")
        kwargs[name] = _build(cls, section, name)
    bank = raw.pop("bank", {})
    if not isinstance(bank, dict) or set(bank) - {"cap"}:
        raise ConfigError("[bank] accepts only 'cap'")
    kwargs["bank_cap"] = int(bank.get("cap", 10))
    kwargs["seed"] = int(raw.pop("seed", 7))
    kwargs["out"] = Path(raw.pop("out", "runs/default"))
    if raw:
        raise ConfigError(f"unknown top-level key(s): {sorted(raw)}")
    cfg = RunConfig(**kwargs)
    if seed is not None:
        cfg = replace(cfg, seed=int(seed))
    if out is not None:
        cfg = replace(cfg, out=Path(out))
    return cfg
