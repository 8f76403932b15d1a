"""Run configuration: one flat, JSON-serializable record of everything a run depends on."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .interactions import BehaviorSchema
from .model import AblationFlags, HyperParams
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration; ``errors`` lists every problem."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass(frozen=True)
class RunConfig:
    data: str | None = None
    out: str = "runs/default"
    seed: int = 0
    # schema
    behavior_names: tuple[str, ...] | None = None
    target: str | None = None
    like_min: float = 4.0
    dislike_max: float = 2.0
    # model
    dim: int = 16
    mem_dims: int = 8
    heads: int = 2
    gate_hidden: int = 16
    layers: int = 2
    norm: str = "sum"
    residual: str = "single"
    score: str = "layer-sum"
    init: str = "autoencoder"
    init_scale: float = 0.01
    pretrain_epochs: int = 100
    # ablation
    behaviors_use: str = "all"
    ablate_be: bool = False
    ablate_ma: bool = False
    # training
    epochs: int = 500
    batch: int = 32
    pairs: int = 4
    lr: float = 1e-3
    decay: float = 0.96
    decay_every: int = 20
    reg: float = 1e-2
    mode: str = "full"
    cap: int | None = 64
    validation: bool = False
    patience: int | None = None
    exclude_auxiliary_negatives: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.behavior_names is not None:
            d["behavior_names"] = list(self.behavior_names)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"unknown config key(s): {', '.join(unknown)}"])
        d = dict(d)
        if d.get("behavior_names") is not None:
            d["behavior_names"] = tuple(d["behavior_names"])
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError([f"cannot read config {path}: {err}"]) from err
        if "run_config" in raw:
            raw = raw["run_config"]
        return cls.from_dict(raw)

    def merged(self, overrides: dict) -> "RunConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def schema(self) -> BehaviorSchema:
        if self.behavior_names is None:
            raise ConfigError(["behavior names are unknown; pass --behavior-names or use a synth manifest"])
        names = self.behavior_names
        target = self.target or names[-1]
        if target not in names:
            raise ConfigError([f"target behavior {target!r} is not one of {list(names)}"])
        return BehaviorSchema(names, names.index(target), self.dislike_max, self.like_min)

    def hyper(self, n_behaviors: int) -> HyperParams:
        return HyperParams(n_behaviors, self.dim, self.mem_dims, self.heads, self.gate_hidden,
                           self.layers, self.norm, self.residual, self.score)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch, self.pairs, self.lr, self.decay,
                           self.decay_every, self.reg, self.seed, self.mode, self.cap, self.patience)

    def flags(self, schema: BehaviorSchema) -> AblationFlags:
        use = self.behaviors_use.strip()
        if use == "all":
            mask = None
        elif use == "target":
            mask = (schema.target_index,)
        else:
            names = [n.strip() for n in use.split(",") if n.strip()]
            unknown = [n for n in names if n not in schema.names]
            if unknown:
                raise ConfigError([f"--behaviors-use names unknown behavior(s): {unknown}"])
            mask = tuple(sorted(schema.index(n) for n in names))
        return AblationFlags(self.ablate_be, self.ablate_ma, mask)

    def problems(self) -> list[str]:
        """Every validation failure, collected rather than stopping at the first."""
        errs: list[str] = []
        if self.behavior_names is not None:
            try:
                schema = self.schema()
            except (ConfigError, ValueError) as err:
                errs.append(str(err))
            else:
                errs.extend(self.hyper(schema.K).problems())
                try:
                    self.flags(schema).active(schema.K, schema.target_index)
                except (ConfigError, ValueError) as err:
                    errs.append(str(err))
        else:
            errs.extend(self.hyper(1).problems())
        errs.extend(self.train_config().problems())
        if self.init not in ("autoencoder", "random"):
            errs.append(f"init must be 'autoencoder' or 'random', got {self.init!r}")
        if self.init_scale <= 0:
            errs.append("init_scale must be positive")
        if self.pretrain_epochs < 1:
            errs.append("pretrain_epochs must be at least 1")
        return errs

    def validate(self) -> None:
        errs = self.problems()
        if errs:
            raise ConfigError(errs)
