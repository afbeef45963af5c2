"""Episode sampling, prototypes, distance-softmax classification and the episode loss.

Notation follows common usage: ``way`` (N) classes per episode, ``shot`` (K)
support instances per class, ``query`` (Q) query instances per class.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tensor import SeededRng

DISTANCES = ("sqeuclidean", "cosine")
LOG_FLOOR = 1e-30


class EpisodeSource(Protocol):
    def split_classes(self, split: str) -> np.ndarray: ...

    def class_indices(self, cls: int) -> np.ndarray: ...


class InsufficientDataError(ValueError):
    """The requested episode shape cannot be drawn from a split."""


@dataclass(frozen=True)
class Episode:
    """One N-way K-shot task, as instance identifiers into a dataset.

    Support and query are class-major: the first ``shot`` support entries
    belong to episode class 0, and so on. Labels are remapped to 0..way-1.
    """

    classes: np.ndarray
    support: np.ndarray
    support_labels: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray
    way: int
    shot: int
    n_query: int

    @property
    def instances(self) -> np.ndarray:
        return np.concatenate([self.support, self.query])


def check_episode_shape(dataset: EpisodeSource, split: str, way: int, shot: int, query: int):
    """Raise :class:`InsufficientDataError` unless every episode of this shape can be drawn."""
    if way < 1 or shot < 1 or query < 1:
        raise ValueError("way, shot and query must all be >= 1")
    classes = np.asarray(dataset.split_classes(split))
    if len(classes) < way:
        raise InsufficientDataError(f"split {split!r} has {len(classes)} classes, episode needs {way}")
    small = [int(c) for c in classes if len(dataset.class_indices(int(c))) < shot + query]
    if small:
        raise InsufficientDataError(f"classes {small} in split {split!r} have fewer than {shot + query} instances")


def sample_episode(dataset: EpisodeSource, split: str, way: int, shot: int, query: int, rng: SeededRng) -> Episode:
    classes = np.asarray(dataset.split_classes(split))
    if way < 1 or shot < 1 or query < 1:
        raise ValueError("way, shot and query must all be >= 1")
    if len(classes) < way:
        raise InsufficientDataError(f"split {split!r} has {len(classes)} classes, episode needs {way}")
    chosen = np.sort(classes)[rng.choice(len(classes), way, replace=False)]
    support, query_ids = [], []
    for cls in chosen:
        pool = np.asarray(dataset.class_indices(int(cls)))
        if len(pool) < shot + query:
            raise InsufficientDataError(f"class {cls} has {len(pool)} instances, episode needs {shot + query}")
        picked = pool[rng.choice(len(pool), shot + query, replace=False)]
        support.append(picked[:shot])
        query_ids.append(picked[shot:])
    return Episode(
        classes=chosen.astype(np.int64),
        support=np.concatenate(support).astype(np.int64),
        support_labels=np.repeat(np.arange(way), shot),
        query=np.concatenate(query_ids).astype(np.int64),
        query_labels=np.repeat(np.arange(way), query),
        way=way,
        shot=shot,
        n_query=query,
    )


@dataclass
class PrototypeSet:
    prototypes: Tensor
    distance: str = "sqeuclidean"

    @property
    def way(self) -> int:
        return self.prototypes.shape[0]


def compute_prototypes(embeddings: Tensor, labels, way: int | None = None, distance: str = "sqeuclidean") -> PrototypeSet:
    """Row k of the result is the mean of the support embeddings labelled k."""
    labels = np.asarray(labels)
    if embeddings.ndim != 2 or len(labels) != embeddings.shape[0]:
        raise ValueError(f"embeddings {embeddings.shape} and labels {labels.shape} disagree")
    way = int(labels.max()) + 1 if way is None else way
    rows = []
    for k in range(way):
        idx = np.flatnonzero(labels == k)
        if idx.size == 0:
            raise ValueError(f"class {k} has no support embeddings")
        rows.append(ad.mean(embeddings[idx], axis=0))
    return PrototypeSet(ad.stack(rows), distance)


def distances(query: Tensor, protos: PrototypeSet) -> Tensor:
    """(Bq, N) matrix of d(query_b, c_k)."""
    c = protos.prototypes
    if query.ndim != 2 or query.shape[1] != c.shape[1]:
        raise ValueError(f"query embeddings {query.shape} do not match prototypes {c.shape}")
    if protos.distance == "sqeuclidean":
        diff = ad.reshape(query, (query.shape[0], 1, -1)) - ad.reshape(c, (1, c.shape[0], -1))
        return ad.sum_(diff * diff, axis=2)
    if protos.distance == "cosine":
        qn = query / ad.sqrt(ad.maximum(ad.sum_(query * query, axis=1, keepdims=True), 1e-24))
        cn = c / ad.sqrt(ad.maximum(ad.sum_(c * c, axis=1, keepdims=True), 1e-24))
        return 1.0 - ad.matmul(qn, cn.T)
    raise ValueError(f"unknown distance {protos.distance!r}")


def classify(query: Tensor, protos: PrototypeSet) -> Tensor:
    """p(y=k|x) = softmax_k(-d(f(x), c_k)); rows sum to 1."""
    return ad.softmax(-distances(query, protos), axis=1)


def protonet_loss(probabilities: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true class (log floored at 1e-30)."""
    labels = np.asarray(labels)
    p_true = probabilities[np.arange(len(labels)), labels]
    return -ad.mean(ad.log(p_true, floor=LOG_FLOOR))


def episode_accuracy(probabilities, labels) -> float:
    p = probabilities.data if isinstance(probabilities, Tensor) else np.asarray(probabilities)
    labels = np.asarray(labels)
    return float(np.mean(np.argmax(p, axis=1) == labels))
