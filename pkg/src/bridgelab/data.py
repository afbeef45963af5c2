"""Multimodal few-shot dataset container and a procedural synthetic generator.

Each synthetic class has a base binary attribute vector. Instances flip a few
attributes, then render an image in which every *visible* attribute draws a
fixed pattern (colour channel x pattern kind) in its own grid cell. A fraction
``ambiguity`` of the attributes is never rendered: those bits reach the
attribute vector and the caption embedding but leave no trace in the pixels.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from .tensor import SeededRng

SPLITS = ("train", "val", "test")
PATTERNS = ("band", "hstripes", "vstripes", "blob")
BACKGROUND = 0.2
AMPLITUDE = 0.6


@dataclass(frozen=True)
class SyntheticGenConfig:
    classes: int = 20
    per_class: int = 40
    image_size: int = 16
    attributes: int = 12
    embed_dim: int = 16
    ambiguity: float = 0.0
    flip_prob: float = 0.05
    pixel_noise: float = 0.05
    caption_noise: float = 0.1
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        errors = []
        if self.classes < 3:
            errors.append("classes must be >= 3 (one per split)")
        if self.per_class < 1:
            errors.append("per_class must be >= 1")
        if self.attributes < 1:
            errors.append("attributes must be >= 1")
        if self.embed_dim < 1:
            errors.append("embed_dim must be >= 1")
        if not 0.0 <= self.ambiguity <= 1.0:
            errors.append(f"ambiguity must lie in [0, 1], got {self.ambiguity}")
        if not 0.0 <= self.flip_prob <= 0.5:
            errors.append("flip_prob must lie in [0, 0.5]")
        if self.pixel_noise < 0 or self.caption_noise < 0:
            errors.append("noise scales must be >= 0")
        if len(self.split_fractions) != 3 or any(f <= 0 for f in self.split_fractions):
            errors.append("split_fractions must be three positive numbers")
        grid = math.ceil(math.sqrt(self.attributes))
        if self.attributes >= 1 and self.image_size // grid < 3:
            errors.append(f"image_size {self.image_size} too small for a {grid}x{grid} attribute grid (cells need >= 3 px)")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def num_invisible(self) -> int:
        return int(round(self.ambiguity * self.attributes))


@dataclass
class MultimodalDataset:
    images: np.ndarray  # (n, 3, H, W) in [0, 1]
    labels: np.ndarray  # (n,) int64 class ids
    attributes: np.ndarray  # (n, A) in [0, 1]
    captions: np.ndarray  # (n, E)
    splits: dict[str, np.ndarray]  # split -> class ids
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = {k: np.asarray(v, dtype=np.int64) for k, v in self.splits.items()}
        self._by_class = {int(c): np.flatnonzero(self.labels == c) for c in np.unique(self.labels)}
        self.validate()

    def __len__(self):
        return len(self.labels)

    @property
    def num_attributes(self) -> int:
        return self.attributes.shape[1]

    @property
    def num_classes(self) -> int:
        return len(self._by_class)

    def validate(self):
        n = len(self.labels)
        if not (len(self.images) == len(self.attributes) == len(self.captions) == n):
            raise ValueError("every instance must carry an image, attributes and a caption embedding")
        if set(self.splits) != set(SPLITS):
            raise ValueError(f"splits must be exactly {SPLITS}")
        sets = [set(self.splits[s].tolist()) for s in SPLITS]
        if any(a & b for i, a in enumerate(sets) for b in sets[i + 1 :]):
            raise ValueError("class splits overlap")
        if set().union(*sets) != set(self._by_class):
            raise ValueError("class splits must cover exactly the classes present")

    def split_classes(self, split: str) -> np.ndarray:
        if split not in self.splits:
            raise KeyError(f"unknown split {split!r}")
        return self.splits[split]

    def class_indices(self, cls: int) -> np.ndarray:
        return self._by_class[cls]

    def equals(self, other: "MultimodalDataset") -> bool:
        arrays = ("images", "labels", "attributes", "captions")
        return (
            all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
            and all(getattr(self, a).dtype == getattr(other, a).dtype for a in arrays)
            and all(np.array_equal(self.splits[s], other.splits[s]) for s in SPLITS)
            and self.metadata == other.metadata
        )


def attribute_layout(num_attributes: int, image_size: int) -> list[tuple[int, int, int, str]]:
    """(row0, col0, channel, pattern) per attribute; cells tile a square grid."""
    grid = math.ceil(math.sqrt(num_attributes))
    cell = image_size // grid
    return [
        ((i // grid) * cell, (i % grid) * cell, i % 3, PATTERNS[(i // 3) % len(PATTERNS)])
        for i in range(num_attributes)
    ]


def _pattern_mask(pattern: str, cell: int) -> np.ndarray:
    m = np.zeros((cell, cell))
    if pattern == "band":
        m[: max(cell // 2, 1), :] = 1.0
    elif pattern == "hstripes":
        m[::2, :] = 1.0
    elif pattern == "vstripes":
        m[:, ::2] = 1.0
    elif pattern == "blob":
        lo = cell // 4
        m[lo : cell - lo, lo : cell - lo] = 1.0
    return m


def base_pattern(image_size: int) -> np.ndarray:
    """Shared background carried by every image."""
    ramp = np.linspace(0.0, 0.1, image_size)
    return np.broadcast_to(BACKGROUND + ramp[None, None, :], (3, image_size, image_size)).copy()


def render_images(attributes: np.ndarray, visible: np.ndarray, image_size: int, pixel_noise: float, rng: SeededRng) -> np.ndarray:
    """Render (n, 3, S, S) images from attribute rows; invisible bits are ignored.

    Noise draws do not depend on attribute values, so images are a function of
    the visible bits and the noise stream only.
    """
    attributes = np.asarray(attributes, dtype=np.float64)
    n, a = attributes.shape
    grid = math.ceil(math.sqrt(a))
    cell = image_size // grid
    images = np.broadcast_to(base_pattern(image_size), (n, 3, image_size, image_size)).copy()
    for i, (r0, c0, ch, pattern) in enumerate(attribute_layout(a, image_size)):
        if not visible[i]:
            continue
        stamp = AMPLITUDE * _pattern_mask(pattern, cell)
        images[:, ch, r0 : r0 + cell, c0 : c0 + cell] += attributes[:, i, None, None] * stamp
    noise = rng.randn(n, 3, image_size, image_size, scale=pixel_noise)
    return np.clip(images + noise, 0.0, 1.0)


def visible_mask(config: SyntheticGenConfig) -> np.ndarray:
    order = SeededRng(config.seed).child("visibility").permutation(config.attributes)
    mask = np.ones(config.attributes, dtype=bool)
    mask[order[: config.num_invisible]] = False
    return mask


def assign_splits(num_classes: int, fractions, rng: SeededRng) -> dict[str, np.ndarray]:
    total = sum(fractions)
    n_train = max(1, int(round(num_classes * fractions[0] / total)))
    n_val = max(1, int(round(num_classes * fractions[1] / total)))
    n_train = min(n_train, num_classes - 2)
    n_val = min(n_val, num_classes - n_train - 1)
    perm = rng.permutation(num_classes)
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train : n_train + n_val]),
        "test": np.sort(perm[n_train + n_val :]),
    }


def generate_synthetic(config: SyntheticGenConfig, rng: SeededRng | None = None) -> MultimodalDataset:
    rng = rng or SeededRng(config.seed)
    c, p, a = config.classes, config.per_class, config.attributes
    class_attrs = rng.child("class_attributes").bernoulli(0.5, (c, a))
    labels = np.repeat(np.arange(c, dtype=np.int64), p)
    flips = rng.child("flips").bernoulli(config.flip_prob, (c * p, a))
    attributes = np.logical_xor(class_attrs[labels], flips).astype(np.float64)
    visible = visible_mask(config)
    images = render_images(attributes, visible, config.image_size, config.pixel_noise, rng.child("pixels"))
    caption_map = rng.child("caption_map").randn(config.embed_dim, a, scale=1.0 / math.sqrt(a))
    captions = attributes @ caption_map.T
    captions = captions + rng.child("caption_noise").randn(c * p, config.embed_dim, scale=config.caption_noise)
    splits = assign_splits(c, config.split_fractions, rng.child("splits"))
    meta = asdict(config)
    meta["split_fractions"] = list(config.split_fractions)
    meta.update(
        height=config.image_size,
        width=config.image_size,
        visible=[int(v) for v in visible],
        generator="synthetic-v1",
    )
    return MultimodalDataset(images, labels, attributes, captions, splits, meta)


def save(dataset: MultimodalDataset, path: str | os.PathLike):
    sections = {
        "images": dataset.images,
        "labels": dataset.labels,
        "attributes": dataset.attributes,
        "captions": dataset.captions,
    }
    for s in SPLITS:
        sections[f"split.{s}"] = dataset.splits[s]
    sections["metadata"] = container.text_section(json.dumps(dataset.metadata, sort_keys=True))
    container.save(path, sections)


def load(path: str | os.PathLike) -> MultimodalDataset:
    sections = container.load(path)
    required = {"images", "labels", "attributes", "captions", "metadata"} | {f"split.{s}" for s in SPLITS}
    missing = required - set(sections)
    if missing:
        raise container.FormatError(f"dataset file lacks sections {sorted(missing)}")
    return MultimodalDataset(
        images=sections["images"],
        labels=sections["labels"],
        attributes=sections["attributes"],
        captions=sections["captions"],
        splits={s: sections[f"split.{s}"] for s in SPLITS},
        metadata=json.loads(container.section_text(sections["metadata"])),
    )
