"""Flat ``key = value`` run configuration shared by the train/eval/ablate commands."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from typing import Any, Mapping

from .layers import ACTIVATIONS, POOLING, BackboneConfig, parse_widths
from .simpaux import AUX_LOSSES, VARIANTS, ModelConfig
from .train import OptimizerConfig, TrainConfig

SEED_ENV = "BRIDGELAB_SEED"


class ConfigError(ValueError):
    """One or more configuration problems; ``problems`` lists each of them."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


@dataclass
class RunConfig:
    variant: str = "baseline"
    dataset: str = ""
    out_dir: str = "runs"
    checkpoint: str = ""
    # classifier / auxiliary backbones
    widths: str = "32,64"
    convs_per_block: int = 2
    activation: str = "silu"
    pooling: str = ""
    embedding_dim: int = 0
    aux_widths: str = "32,64"
    aux_convs_per_block: int = 2
    # bridge and multi-task loss
    bridge_hidden: int = 256
    bridge_depth: int = 2
    bridge_activation: str = "silu"
    lambda_aux: float = 0.3
    aux_loss: str = "auto"
    stop_gradient: bool = False
    distance: str = "sqeuclidean"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    # optimizer
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 5e-4
    # episodes and schedule
    way: int = 5
    shot: int = 5
    query: int = 15
    steps: int = 300
    val_every: int = 50
    val_episodes: int = 20
    fixed_episodes: int = 0
    seed: int = -1
    seeds: str = "0,1,2,3,4"
    eval_split: str = "test"
    eval_episodes: int = 200
    eval_seed: int = 1234
    workers: int = 1
    variants: str = "baseline,simpaux,ablation"
    include_oracle: bool = False

    # ------------------------------------------------------------ parsing

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any], base: "RunConfig | None" = None) -> "RunConfig":
        cfg = dataclasses.replace(base) if base else cls()
        types = {f.name: f.type for f in fields(cls)}
        problems = []
        for key, raw in values.items():
            name = key.replace("-", "_")
            if name not in types:
                problems.append(f"unknown key {key!r}")
                continue
            try:
                setattr(cfg, name, _coerce(raw, types[name]))
            except ValueError as exc:
                problems.append(f"{key}: {exc}")
        if problems:
            raise ConfigError(problems)
        return cfg

    @classmethod
    def from_file(cls, path: str, base: "RunConfig | None" = None) -> "RunConfig":
        return cls.from_mapping(parse_text(open(path, encoding="utf-8").read()), base)

    def resolved(self) -> "RunConfig":
        """Copy with the seed filled from ``$BRIDGELAB_SEED`` (or 0) when unset."""
        cfg = dataclasses.replace(self)
        if cfg.seed < 0:
            env = os.environ.get(SEED_ENV, "")
            try:
                cfg.seed = int(env) if env else 0
            except ValueError as exc:
                raise ConfigError([f"{SEED_ENV} must be an integer, got {env!r}"]) from exc
        return cfg

    def to_text(self) -> str:
        lines = ["# bridgelab resolved run configuration"]
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    # ------------------------------------------------------------ validation

    def validate(self, need_dataset: bool = True):
        problems = []
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS}")
        if need_dataset and not self.dataset:
            problems.append("dataset path is required")
        if need_dataset and self.dataset and not os.path.exists(self.dataset):
            problems.append(f"dataset file {self.dataset!r} does not exist")
        for name in ("way", "shot", "query", "convs_per_block", "aux_convs_per_block", "bridge_hidden", "workers"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        for name in ("steps", "val_every", "val_episodes", "fixed_episodes", "bridge_depth", "embedding_dim"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if self.eval_episodes < 1:
            problems.append("eval_episodes must be >= 1")
        if self.activation not in ACTIVATIONS or self.bridge_activation not in ACTIVATIONS:
            problems.append(f"activations must be one of {ACTIVATIONS}")
        if self.aux_loss not in AUX_LOSSES:
            problems.append(f"aux_loss must be one of {AUX_LOSSES}")
        if self.optimizer not in ("adam", "sgd"):
            problems.append("optimizer must be 'adam' or 'sgd'")
        if self.lr < 0 or self.weight_decay < 0 or self.lambda_aux < 0:
            problems.append("lr, weight_decay and lambda_aux must be >= 0")
        if self.eval_split not in ("train", "val", "test"):
            problems.append("eval_split must be train, val or test")
        for name in ("widths", "aux_widths", "seeds"):
            try:
                vals = parse_widths(getattr(self, name))
                if not vals or (name != "seeds" and min(vals) < 1):
                    raise ValueError
            except ValueError:
                problems.append(f"{name} must be a comma-separated list of integers")
        if self.pooling:
            pools = [p.strip() for p in self.pooling.split(",")]
            if any(p not in POOLING for p in pools):
                problems.append(f"pooling entries must be one of {POOLING}")
        bad = [v for v in self.variant_list() if v not in VARIANTS]
        if bad:
            problems.append(f"unknown variants {bad}")
        if problems:
            raise ConfigError(problems)
        try:
            self.model_config(num_attributes=1, caption_dim=1)
        except ValueError as exc:
            raise ConfigError([str(exc)]) from exc

    # ------------------------------------------------------------ derived objects

    def seed_list(self) -> list[int]:
        return list(parse_widths(self.seeds))

    def variant_list(self) -> list[str]:
        names = [v.strip() for v in self.variants.split(",") if v.strip()]
        if "ablation" not in names:
            names.append("ablation")
        if self.include_oracle and "oracle" not in names:
            names.append("oracle")
        return names

    def backbone(self, widths: str, convs: int) -> BackboneConfig:
        pooling = tuple(p.strip() for p in self.pooling.split(",")) if self.pooling else None
        ws = parse_widths(widths)
        if pooling is not None and len(pooling) != len(ws):
            pooling = (pooling + ("max",) * len(ws))[: len(ws)]
        return BackboneConfig(
            widths=ws,
            convs_per_block=convs,
            activation=self.activation,
            pooling=pooling,
            embedding_dim=self.embedding_dim or None,
        )

    def model_config(self, num_attributes: int, caption_dim: int) -> ModelConfig:
        return ModelConfig(
            classifier=self.backbone(self.widths, self.convs_per_block),
            aux=dataclasses.replace(self.backbone(self.aux_widths, self.aux_convs_per_block), embedding_dim=None),
            num_attributes=num_attributes,
            caption_dim=caption_dim,
            bridge_hidden=self.bridge_hidden,
            bridge_depth=self.bridge_depth,
            bridge_activation=self.bridge_activation,
            lambda_aux=self.lambda_aux,
            aux_loss=self.aux_loss,
            stop_gradient=self.stop_gradient,
            distance=self.distance,
            bn_eps=self.bn_eps,
            bn_momentum=self.bn_momentum,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            way=self.way,
            shot=self.shot,
            query=self.query,
            steps=self.steps,
            val_every=self.val_every,
            val_episodes=self.val_episodes,
            fixed_episodes=self.fixed_episodes,
            optimizer=OptimizerConfig(
                kind=self.optimizer,
                lr=self.lr,
                momentum=self.momentum,
                beta1=self.beta1,
                beta2=self.beta2,
                weight_decay=self.weight_decay,
            ),
        )


def parse_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError([f"line {lineno}: expected 'key = value'"])
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError([f"line {lineno}: empty key"])
        out[key] = value
    return out


def _coerce(raw: Any, typ) -> Any:
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if typ == "int":
        if isinstance(raw, bool):
            raise ValueError("expected an integer")
        try:
            return int(str(raw).strip())
        except ValueError:
            raise ValueError(f"expected an integer, got {raw!r}") from None
    if typ == "float":
        try:
            return float(str(raw).strip())
        except ValueError:
            raise ValueError(f"expected a number, got {raw!r}") from None
    return str(raw).strip()
