"""Auxiliary network, conditioning bridge, multi-task losses and the model variants.

Variants share one parameter layout and differ only in the forward path:

* ``baseline``: classifier backbone with plain batch norm (ProtoNet++).
* ``simpaux``: auxiliary backbone embedding -> bridge -> conditional BN deltas.
* ``ablation``: a learned constant vector replaces the auxiliary embedding.
* ``oracle``: ground-truth attributes, linearly embedded, feed the bridge.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import fewshot
from .autodiff import Tensor
from .layers import ACTIVATIONS, Backbone, BackboneConfig, Dense, Module, ModulationDeltas, activation
from .tensor import SeededRng

VARIANTS = ("baseline", "simpaux", "ablation", "oracle")
AUX_LOSSES = ("auto", "attributes", "captions")


class BridgeSource(str, enum.Enum):
    AUXILIARY = "auxiliary"
    CONSTANT = "constant"
    ORACLE = "oracle-attributes"


VARIANT_SOURCE = {
    "baseline": None,
    "simpaux": BridgeSource.AUXILIARY,
    "ablation": BridgeSource.CONSTANT,
    "oracle": BridgeSource.ORACLE,
}


@dataclass
class ModelConfig:
    classifier: BackboneConfig = field(default_factory=BackboneConfig)
    aux: BackboneConfig = field(default_factory=BackboneConfig)
    num_attributes: int = 12
    caption_dim: int = 16
    bridge_hidden: int = 256
    bridge_depth: int = 2
    bridge_activation: str = "silu"
    lambda_aux: float = 0.3
    aux_loss: str = "auto"
    stop_gradient: bool = False
    distance: str = "sqeuclidean"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.lambda_aux < 0:
            raise ValueError("lambda_aux must be >= 0")
        if self.aux_loss not in AUX_LOSSES:
            raise ValueError(f"aux_loss must be one of {AUX_LOSSES}")
        if self.bridge_activation not in ACTIVATIONS:
            raise ValueError(f"bridge_activation must be one of {ACTIVATIONS}")
        if self.bridge_depth < 0 or self.bridge_hidden < 1:
            raise ValueError("bridge_depth must be >= 0 and bridge_hidden >= 1")
        if self.distance not in fewshot.DISTANCES:
            raise ValueError(f"distance must be one of {fewshot.DISTANCES}")


# ---------------------------------------------------------------- losses


def multilabel_soft_margin_loss(logits: Tensor, targets) -> Tensor:
    """Mean over batch and attributes of -[y log s(x) + (1-y) log(1-s(x))].

    Evaluated as softplus(x) - y*x, which is exact and never takes log(0).
    """
    targets = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ValueError(f"targets {targets.shape} do not match logits {logits.shape}")
    if np.any(targets < 0) or np.any(targets > 1):
        raise ValueError("targets must lie in [0, 1]")
    return ad.mean(ad.softplus(logits) - logits * targets)


def cosine_embedding_loss(pred: Tensor, target) -> Tensor:
    """Mean over rows of 1 - cos(pred_b, target_b); range [0, 2]."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape or pred.ndim != 2:
        raise ValueError(f"pred {pred.shape} and target {target.shape} must be equal 2-D shapes")
    if np.any(np.linalg.norm(target.data, axis=1) == 0):
        raise ValueError("cosine loss target has a zero-norm row")
    floor = 1e-24  # squared norm floor, i.e. norms floored at 1e-12
    pn = ad.sqrt(ad.maximum(ad.sum_(pred * pred, axis=1), floor))
    tn = ad.sqrt(ad.maximum(ad.sum_(target * target, axis=1), floor))
    cos = ad.sum_(pred * target, axis=1) / (pn * tn)
    return ad.mean(1.0 - cos)


def combined_loss(proto_loss: Tensor, aux_loss: Tensor | None, lambda_aux: float) -> Tensor:
    if lambda_aux < 0:
        raise ValueError("lambda_aux must be >= 0")
    if aux_loss is None or lambda_aux == 0:
        return proto_loss
    return proto_loss + lambda_aux * aux_loss


# ---------------------------------------------------------------- components


class AuxiliaryNetwork(Module):
    """Second visual backbone with attribute and caption-embedding heads."""

    def __init__(self, config: BackboneConfig, num_attributes: int, caption_dim: int, rng: SeededRng, **bn):
        super().__init__()
        self.backbone = self.add_child("backbone", Backbone(config, rng.child("backbone"), **bn))
        d = config.output_dim
        self.attr_head = self.add_child("attr_head", Dense(d, max(num_attributes, 1), rng.child("attr")))
        self.caption_head = self.add_child("caption_head", Dense(d, max(caption_dim, 1), rng.child("caption")))

    @property
    def embedding_dim(self) -> int:
        return self.backbone.config.output_dim

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        emb = self.backbone(x)
        return emb, self.attr_head(emb), self.caption_head(emb)


@dataclass(frozen=True)
class ModulationPlan:
    """Column ranges of the bridge output assigned to each BN layer: [dgamma | dbeta]."""

    layers: tuple[tuple[str, int, int], ...]  # (name, offset, channels)

    @classmethod
    def from_layers(cls, bn_layers) -> "ModulationPlan":
        """Plan for ``(name, channels)`` pairs listed in forward order."""
        layers, offset = [], 0
        for name, c in bn_layers:
            layers.append((name, offset, c))
            offset += 2 * c
        return cls(tuple(layers))

    @classmethod
    def from_config(cls, config: BackboneConfig) -> "ModulationPlan":
        return cls.from_layers(config.bn_layers())

    @property
    def output_dim(self) -> int:
        return sum(2 * c for _, _, c in self.layers)

    def coverage(self) -> np.ndarray:
        """How many times each output column is used (all ones for a valid plan)."""
        hits = np.zeros(self.output_dim, dtype=np.int64)
        for _, off, c in self.layers:
            hits[off : off + 2 * c] += 1
        return hits


class BridgeMLP(Module):
    """MLP from a source vector to per-layer (dgamma, dbeta); output layer starts at zero."""

    def __init__(
        self,
        input_dim: int,
        target: BackboneConfig,
        rng: SeededRng,
        hidden: int = 256,
        depth: int = 2,
        act: str = "silu",
        zero_init: bool = True,
    ):
        super().__init__()
        self.input_dim, self.act = input_dim, act
        self.target = target
        self.plan = ModulationPlan.from_config(target)
        self.hidden = []
        width = input_dim
        for i in range(depth):
            self.hidden.append(self.add_child(f"fc{i}", Dense(width, hidden, rng.child("fc", i))))
            width = hidden
        self.out = self.add_child("out", Dense(width, self.plan.output_dim, rng.child("out"), zero_init=zero_init))
        if self.out.n_out != 2 * sum(c for _, c in target.bn_layers()):
            raise AssertionError("bridge output does not cover the classifier BN layers")

    @property
    def output_dim(self) -> int:
        return self.plan.output_dim

    def __call__(self, v: Tensor) -> ModulationDeltas:
        if v.ndim != 2 or v.shape[1] != self.input_dim:
            raise ValueError(f"bridge expects (B, {self.input_dim}) input, got {v.shape}")
        h = v
        for layer in self.hidden:
            h = activation(layer(h), self.act)
        flat = self.out(h)
        return ModulationDeltas([(flat[:, off : off + c], flat[:, off + c : off + 2 * c]) for _, off, c in self.plan.layers])


def bridge_forward(bridge: BridgeMLP, source_vector: Tensor) -> ModulationDeltas:
    return bridge(source_vector)


def aux_forward(aux: AuxiliaryNetwork, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    return aux(x)


@dataclass
class ForwardResult:
    embeddings: Tensor
    attribute_logits: Tensor | None = None
    caption_pred: Tensor | None = None
    deltas: ModulationDeltas | None = None


class SimpAuxModel(Module):
    """Classifier backbone + auxiliary network + bridge + constant/oracle sources.

    All components exist for every variant so checkpoints share one layout;
    the variant only picks the forward path.
    """

    def __init__(self, config: ModelConfig, variant: str, rng: SeededRng):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
        self.config, self.variant = config, variant
        bn = dict(bn_eps=config.bn_eps, bn_momentum=config.bn_momentum)
        self.classifier = self.add_child("classifier", Backbone(config.classifier, rng.child("classifier"), **bn))
        self.aux = self.add_child(
            "aux", AuxiliaryNetwork(config.aux, config.num_attributes, config.caption_dim, rng.child("aux"), **bn)
        )
        d = self.aux.embedding_dim
        self.bridge = self.add_child(
            "bridge",
            BridgeMLP(
                d, config.classifier, rng.child("bridge"), config.bridge_hidden, config.bridge_depth,
                config.bridge_activation,
            ),
        )
        self.constant = self.add_param("constant", rng.child("constant").randn(d))
        self.oracle_embed = self.add_child("oracle_embed", Dense(max(config.num_attributes, 1), d, rng.child("oracle")))

    @property
    def source(self) -> BridgeSource | None:
        return VARIANT_SOURCE[self.variant]

    def source_vector(self, x: Tensor, source: BridgeSource, attributes=None) -> tuple[Tensor, tuple | None]:
        """Bridge input for ``source`` plus auxiliary head outputs when computed."""
        batch = x.shape[0]
        if source is BridgeSource.AUXILIARY:
            emb, attr_logits, caption = self.aux(x)
            v = emb.detach() if self.config.stop_gradient else emb
            return v, (attr_logits, caption)
        if source is BridgeSource.CONSTANT:
            return ad.broadcast_to(ad.reshape(self.constant, (1, -1)), (batch, self.constant.shape[0])), None
        if source is BridgeSource.ORACLE:
            if attributes is None:
                raise ValueError("oracle source needs ground-truth attribute vectors")
            attributes = np.asarray(attributes, dtype=np.float64)
            if attributes.shape != (batch, self.oracle_embed.n_in):
                raise ValueError(f"oracle attributes must be ({batch}, {self.oracle_embed.n_in}), got {attributes.shape}")
            return self.oracle_embed(Tensor(attributes)), None
        raise ValueError(f"unknown bridge source {source!r}")

    def forward(self, x, attributes=None, source: BridgeSource | str | None = "variant") -> ForwardResult:
        """Classifier embeddings for ``x`` using ``source`` (default: the variant's)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if source == "variant":
            source = self.source
        if source is None:
            return ForwardResult(self.classifier(x))
        source = BridgeSource(source)
        v, heads = self.source_vector(x, source, attributes)
        deltas = self.bridge(v)
        emb = self.classifier(x, deltas)
        if heads is None:
            return ForwardResult(emb, deltas=deltas)
        return ForwardResult(emb, heads[0], heads[1], deltas)

    __call__ = forward

    def aux_target(self, has_attributes: bool) -> str:
        if self.config.aux_loss == "auto":
            return "attributes" if has_attributes else "captions"
        return self.config.aux_loss

    def episode_loss(self, images, support_labels, query_labels, way: int, attributes=None, captions=None):
        """Forward one episode (support rows first) and return (loss, query probabilities).

        The auxiliary loss only enters for the ``simpaux`` variant, weighted
        by ``lambda_aux``.
        """
        n_support = len(support_labels)
        out = self.forward(images, attributes=attributes)
        protos = fewshot.compute_prototypes(out.embeddings[:n_support], support_labels, way, self.config.distance)
        probs = fewshot.classify(out.embeddings[n_support:], protos)
        loss = fewshot.protonet_loss(probs, query_labels)
        aux_loss = None
        if out.attribute_logits is not None and self.config.lambda_aux > 0:
            target = self.aux_target(attributes is not None and self.config.num_attributes > 0)
            if target == "attributes":
                aux_loss = multilabel_soft_margin_loss(out.attribute_logits, attributes)
            else:
                if captions is None:
                    raise ValueError("caption loss selected but no caption embeddings given")
                aux_loss = cosine_embedding_loss(out.caption_pred, captions)
        return combined_loss(loss, aux_loss, self.config.lambda_aux), probs


def simpaux_forward(model: SimpAuxModel, x, source: BridgeSource | None, attributes=None) -> Tensor:
    return model.forward(x, attributes=attributes, source=source).embeddings
