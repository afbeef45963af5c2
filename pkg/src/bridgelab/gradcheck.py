"""Finite-difference checks for every differentiable component at tiny sizes."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import fewshot, simpaux
from .autodiff import Tensor, grad_check
from .layers import Backbone, BackboneConfig, BatchNorm2d, Conv2d, Dense, activation
from .tensor import SeededRng

EPSILON = 1e-5
TOLERANCE = 1e-4


def _leaf(rng: SeededRng, *shape, scale: float = 1.0) -> Tensor:
    return Tensor(rng.randn(*shape, scale=scale), requires_grad=True)


def _projection(out: Tensor, rng: SeededRng) -> Tensor:
    # a fixed random linear readout keeps every output entry in play
    return ad.sum_(out * Tensor(rng.randn(*out.shape)))


def check_dense(rng: SeededRng) -> float:
    layer = Dense(4, 3, rng)
    x = _leaf(rng, 5, 4)
    r = rng.child("readout")
    params = {"x": x, **layer.named_parameters()}
    return grad_check(lambda: _projection(layer(x), SeededRng(r.seed)), params, EPSILON)


def check_conv(rng: SeededRng) -> float:
    worst = 0.0
    for stride, padding in ((1, 1), (2, 0)):
        conv = Conv2d(2, 3, 3, rng, stride=stride, padding=padding)
        x = _leaf(rng, 2, 2, 5, 5)
        r = rng.child("readout", stride)
        params = {"x": x, **conv.named_parameters()}
        worst = max(worst, grad_check(lambda: _projection(conv(x), SeededRng(r.seed)), params, EPSILON))
    return worst


def _bn_setup(rng: SeededRng):
    bn = BatchNorm2d(3)
    bn.gamma.data[...] = 1.0 + rng.randn(3, scale=0.3)
    bn.beta.data[...] = rng.randn(3, scale=0.3)
    x = _leaf(rng, 4, 3, 3, 3)
    return bn, x


def check_batch_norm(rng: SeededRng) -> float:
    bn, x = _bn_setup(rng)
    r = rng.child("readout")
    return grad_check(lambda: _projection(bn(x), SeededRng(r.seed)), {"x": x, **bn.named_parameters()}, EPSILON)


def check_conditional_batch_norm(rng: SeededRng) -> float:
    bn, x = _bn_setup(rng)
    dg, db = _leaf(rng, 4, 3, scale=0.5), _leaf(rng, 4, 3, scale=0.5)
    r = rng.child("readout")
    params = {"x": x, "dgamma": dg, "dbeta": db, **bn.named_parameters()}
    return grad_check(lambda: _projection(bn(x, dg, db), SeededRng(r.seed)), params, EPSILON)


def check_activations(rng: SeededRng) -> float:
    worst = 0.0
    for kind in ("relu", "selu", "silu"):
        raw = rng.randn(6, 5)
        raw = np.where(np.abs(raw) < 0.05, 0.05 * np.sign(raw) + 0.05 * (raw == 0), raw)  # stay clear of kinks
        x = Tensor(raw, requires_grad=True)
        r = rng.child("readout", kind)
        worst = max(worst, grad_check(lambda: _projection(activation(x, kind), SeededRng(r.seed)), {"x": x}, EPSILON))
    return worst


def check_pooling(rng: SeededRng) -> float:
    worst = 0.0
    for pool in (ad.max_pool2d, ad.avg_pool2d):
        x = _leaf(rng, 2, 2, 4, 5)
        r = rng.child("readout", pool.__name__)
        worst = max(worst, grad_check(lambda: _projection(pool(x, 2), SeededRng(r.seed)), {"x": x}, EPSILON))
    return worst


def _tiny_backbone(widths=(4, 8), convs=2) -> BackboneConfig:
    return BackboneConfig(widths=widths, convs_per_block=convs, activation="silu")


def check_backbone(rng: SeededRng) -> float:
    config = _tiny_backbone()
    net = Backbone(config, rng.child("net"))
    x = Tensor(rng.uniform(size=(4, 3, 8, 8)))
    r = rng.child("readout")
    return grad_check(lambda: _projection(net(x), SeededRng(r.seed)), net.named_parameters(), EPSILON)


def check_bridge(rng: SeededRng) -> float:
    target = _tiny_backbone(widths=(2, 3), convs=1)
    bridge = simpaux.BridgeMLP(5, target, rng.child("bridge"), hidden=6, depth=2, zero_init=False)
    v = _leaf(rng, 3, 5)
    r = rng.child("readout")

    def loss():
        deltas = bridge(v)
        rr = SeededRng(r.seed)
        return sum((_projection(dg, rr) + _projection(db, rr) for dg, db in deltas.layers), Tensor(0.0))

    return grad_check(loss, {"v": v, **bridge.named_parameters()}, EPSILON)


def check_aux_heads(rng: SeededRng) -> float:
    aux = simpaux.AuxiliaryNetwork(_tiny_backbone(widths=(3, 4), convs=1), 5, 6, rng.child("aux"))
    x = Tensor(rng.uniform(size=(4, 3, 8, 8)))
    attrs = (rng.uniform(size=(4, 5)) > 0.5).astype(float)
    caps = rng.randn(4, 6)

    def loss():
        _, logits, cap = aux(x)
        return simpaux.multilabel_soft_margin_loss(logits, attrs) + simpaux.cosine_embedding_loss(cap, caps)

    return grad_check(loss, aux.named_parameters(), EPSILON)


def check_prototype_loss(rng: SeededRng) -> float:
    worst = 0.0
    for distance in fewshot.DISTANCES:
        support = _leaf(rng, 6, 4)
        query = _leaf(rng, 9, 4)
        s_labels, q_labels = np.repeat(np.arange(3), 2), np.repeat(np.arange(3), 3)

        def loss():
            protos = fewshot.compute_prototypes(support, s_labels, 3, distance)
            return fewshot.protonet_loss(fewshot.classify(query, protos), q_labels)

        worst = max(worst, grad_check(loss, {"support": support, "query": query}, EPSILON))
    return worst


def check_multilabel_loss(rng: SeededRng) -> float:
    logits = _leaf(rng, 4, 6, scale=2.0)
    targets = rng.uniform(size=(4, 6))
    return grad_check(lambda: simpaux.multilabel_soft_margin_loss(logits, targets), {"logits": logits}, EPSILON)


def check_cosine_loss(rng: SeededRng) -> float:
    pred = _leaf(rng, 4, 5)
    target = rng.randn(4, 5)
    return grad_check(lambda: simpaux.cosine_embedding_loss(pred, target), {"pred": pred}, EPSILON)


def tiny_model_config(**overrides) -> simpaux.ModelConfig:
    kw = dict(
        classifier=_tiny_backbone(widths=(3, 4), convs=1),
        aux=_tiny_backbone(widths=(3, 4), convs=1),
        num_attributes=5,
        caption_dim=4,
        bridge_hidden=6,
        bridge_depth=1,
        lambda_aux=0.5,
    )
    kw.update(overrides)
    return simpaux.ModelConfig(**kw)


def check_combined(rng: SeededRng) -> float:
    """Classifier + bridge + auxiliary network under the combined episode loss."""
    model = simpaux.SimpAuxModel(tiny_model_config(), "simpaux", rng.child("model"))
    out = model.bridge.out
    out.weight.data[...] = rng.randn(*out.weight.shape, scale=0.3)
    out.bias.data[...] = rng.randn(*out.bias.shape, scale=0.3)
    way, shot, query = 2, 2, 2
    images = rng.uniform(size=(way * (shot + query), 3, 8, 8))
    attrs = (rng.uniform(size=(len(images), 5)) > 0.5).astype(float)
    s_labels, q_labels = np.repeat(np.arange(way), shot), np.repeat(np.arange(way), query)

    def loss():
        total, _ = model.episode_loss(images, s_labels, q_labels, way, attrs)
        return total

    params = {k: v for k, v in model.named_parameters().items() if not k.startswith(("constant", "oracle_embed"))}
    return grad_check(loss, params, EPSILON)


COMPONENTS: dict[str, Callable[[SeededRng], float]] = {
    "dense": check_dense,
    "conv2d": check_conv,
    "batch_norm": check_batch_norm,
    "conditional_batch_norm": check_conditional_batch_norm,
    "activations": check_activations,
    "pooling": check_pooling,
    "backbone": check_backbone,
    "bridge": check_bridge,
    "aux_heads": check_aux_heads,
    "prototype_loss": check_prototype_loss,
    "multilabel_soft_margin": check_multilabel_loss,
    "cosine_embedding": check_cosine_loss,
    "combined_simpaux": check_combined,
}


def run_suite(seed: int = 0, components=None, report: Callable[[str, float, float], None] | None = None) -> dict[str, float]:
    """Worst relative error per component; ``report(name, error, seconds)`` is called as each finishes."""
    results = {}
    root = SeededRng(seed)
    for name, check in COMPONENTS.items():
        if components and name not in components:
            continue
        t0 = time.perf_counter()
        results[name] = check(root.child(name))
        if report:
            report(name, results[name], time.perf_counter() - t0)
    return results
