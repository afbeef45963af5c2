"""Neural building blocks: dense, conv, (conditional) batch norm, residual backbones."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tensor import SeededRng

ACTIVATIONS = ("relu", "selu", "silu")
POOLING = ("max", "avg", "none")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return ad.relu(x)
    if kind == "silu":
        return ad.silu(x)
    if kind == "selu":
        return ad.selu(x)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


class Module:
    """Minimal parameter container with named parameters, buffers and children."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}
        self.training = True

    def add_param(self, name: str, data: np.ndarray) -> Tensor:
        p = Tensor(data, requires_grad=True, name=name)
        self._params[name] = p
        return p

    def add_buffer(self, name: str, data: np.ndarray) -> np.ndarray:
        self._buffers[name] = np.array(data, dtype=np.float64)
        return self._buffers[name]

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for cname, child in self._children.items():
            out.update(child.named_parameters(f"{prefix}{cname}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + k: v for k, v in self._buffers.items()}
        for cname, child in self._children.items():
            out.update(child.named_buffers(f"{prefix}{cname}."))
        return out

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data.copy() for k, p in self.named_parameters().items()}
        state.update({k: b.copy() for k, b in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params, buffers = self.named_parameters(), self.named_buffers()
        expected = set(params) | set(buffers)
        missing, unexpected = expected - set(state), set(state) - expected
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in params.items():
            if state[k].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.data.shape}")
            p.data[...] = state[k]
        for k, b in buffers.items():
            b[...] = state[k]


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: SeededRng | None, bias: bool = True, zero_init: bool = False):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        if zero_init or rng is None:
            w = np.zeros((n_in, n_out))
        else:
            w = rng.randn(n_in, n_out, scale=np.sqrt(2.0 / n_in))
        self.weight = self.add_param("weight", w)
        self.bias = self.add_param("bias", np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"Dense expects (B, {self.n_in}) input, got {x.shape}")
        out = ad.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class Conv2d(Module):
    """Bias-free convolution; a following batch norm supplies the shift."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: SeededRng, stride: int = 1, padding: int = 0):
        super().__init__()
        self.stride, self.padding = stride, padding
        fan_in = c_in * kernel * kernel
        self.weight = self.add_param("weight", rng.randn(c_out, c_in, kernel, kernel, scale=np.sqrt(2.0 / fan_in)))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.stride, self.padding)


def _batch_norm_backward(g: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray) -> np.ndarray:
    """Full derivative of (x - mean(x)) / sqrt(var(x) + eps) over batch+spatial axes."""
    axes = (0, 2, 3)
    return inv_std * (g - g.mean(axis=axes, keepdims=True) - xhat * (g * xhat).mean(axis=axes, keepdims=True))


def _normalize(x: Tensor, mean: np.ndarray, var: np.ndarray, eps: float, batch_stats: bool) -> Tensor:
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    if batch_stats:
        return ad.make(xhat, (x,), lambda g: (_batch_norm_backward(g, xhat, inv_std),), "batch_norm")
    return ad.make(xhat, (x,), lambda g: (g * inv_std,), "batch_norm_eval")


class BatchNorm2d(Module):
    """Channel-wise batch normalization with optional per-sample affine deltas.

    The effective affine for sample ``b`` is ``(gamma + dgamma[b], beta + dbeta[b])``.
    Deltas never touch the statistics; running mean/var (biased estimator) are
    shared between conditioned and unconditioned passes.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        if eps <= 0:
            raise ValueError("epsilon must be positive")
        if not 0 < momentum <= 1:
            raise ValueError("momentum must lie in (0, 1]")
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.gamma = self.add_param("gamma", np.ones(channels))
        self.beta = self.add_param("beta", np.zeros(channels))
        self.running_mean = self.add_buffer("running_mean", np.zeros(channels))
        self.running_var = self.add_buffer("running_var", np.ones(channels))

    def __call__(self, x: Tensor, dgamma: Tensor | None = None, dbeta: Tensor | None = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(f"BatchNorm2d({self.channels}) got input of shape {x.shape}")
        b, c = x.shape[0], self.channels
        if self.training:
            if b * x.shape[2] * x.shape[3] < 2:
                raise ValueError("batch norm in training mode needs at least 2 values per channel")
            mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
            var = ((x.data - mean) ** 2).mean(axis=(0, 2, 3), keepdims=True)
            m = self.momentum
            self.running_mean[...] = (1 - m) * self.running_mean + m * mean.reshape(c)
            self.running_var[...] = (1 - m) * self.running_var + m * var.reshape(c)
        else:
            mean = self.running_mean.reshape(1, c, 1, 1)
            var = self.running_var.reshape(1, c, 1, 1)
        xhat = _normalize(x, mean, var, self.eps, self.training)

        scale = ad.reshape(self.gamma, (1, c, 1, 1))
        shift = ad.reshape(self.beta, (1, c, 1, 1))
        if (dgamma is None) != (dbeta is None):
            raise ValueError("dgamma and dbeta must be given together")
        if dgamma is not None:
            if dgamma.shape != (b, c) or dbeta.shape != (b, c):
                raise ValueError(f"deltas must be shaped ({b}, {c}), got {dgamma.shape} and {dbeta.shape}")
            scale = scale + ad.reshape(dgamma, (b, c, 1, 1))
            shift = shift + ad.reshape(dbeta, (b, c, 1, 1))
        return xhat * scale + shift


def batch_norm(x: Tensor, state: BatchNorm2d) -> Tensor:
    return state(x)


def conditional_batch_norm(x: Tensor, state: BatchNorm2d, dgamma: Tensor, dbeta: Tensor) -> Tensor:
    return state(x, dgamma, dbeta)


@dataclass(frozen=True)
class BackboneConfig:
    """Residual backbone layout.

    Each block is ``convs_per_block`` 3x3 conv -> BN -> activation stages (the
    last activation applied after the residual add) plus a 1x1 conv -> BN
    shortcut, followed by the block's pooling. ``embedding_dim=None`` means the
    output is the globally pooled last-block features.
    """

    widths: tuple[int, ...] = (32, 64)
    convs_per_block: int = 2
    activation: str = "silu"
    pooling: tuple[str, ...] | None = None
    pool_size: int = 2
    embedding_dim: int | None = None
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValueError("widths must be a non-empty list of positive ints")
        if self.convs_per_block < 1:
            raise ValueError("convs_per_block must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        pooling = tuple(self.pooling) if self.pooling is not None else ("max",) * len(self.widths)
        if len(pooling) != len(self.widths) or any(p not in POOLING for p in pooling):
            raise ValueError(f"pooling must list one of {POOLING} per block")
        object.__setattr__(self, "pooling", pooling)
        if self.embedding_dim is not None and self.embedding_dim < 1:
            raise ValueError("embedding_dim must be positive")

    @classmethod
    def resnet12(cls, activation: str = "silu") -> "BackboneConfig":
        return cls(widths=(64, 128, 256, 512), convs_per_block=3, activation=activation)

    @property
    def output_dim(self) -> int:
        return self.embedding_dim if self.embedding_dim is not None else self.widths[-1]

    def bn_layers(self) -> list[tuple[str, int]]:
        """(name, channels) of every BN layer, in forward order."""
        layers = []
        for b, w in enumerate(self.widths):
            layers += [(f"block{b}.bn{j}", w) for j in range(self.convs_per_block)]
            layers.append((f"block{b}.shortcut_bn", w))
        return layers

    def spatial_sizes(self, h: int, w: int) -> list[tuple[int, int]]:
        sizes = []
        for pool in self.pooling:
            if pool != "none":
                if h < self.pool_size or w < self.pool_size:
                    raise ValueError(f"spatial size underflow: {h}x{w} cannot be pooled by {self.pool_size}")
                h, w = h // self.pool_size, w // self.pool_size
            sizes.append((h, w))
        return sizes


@dataclass
class ModulationDeltas:
    """Per-BN-layer, per-sample (dgamma, dbeta) pairs, each shaped (B, C)."""

    layers: list[tuple[Tensor, Tensor]] = field(default_factory=list)

    @classmethod
    def zeros(cls, config: BackboneConfig, batch: int) -> "ModulationDeltas":
        return cls([(Tensor(np.zeros((batch, c))), Tensor(np.zeros((batch, c)))) for _, c in config.bn_layers()])

    def validate(self, config: BackboneConfig, batch: int):
        expected = config.bn_layers()
        if len(self.layers) != len(expected):
            raise ValueError(f"expected deltas for {len(expected)} BN layers, got {len(self.layers)}")
        for (name, c), (dg, db) in zip(expected, self.layers):
            if dg.shape != (batch, c) or db.shape != (batch, c):
                raise ValueError(f"deltas for {name} must be ({batch}, {c}), got {dg.shape}/{db.shape}")


class ResidualBlock(Module):
    def __init__(self, c_in: int, c_out: int, convs: int, act: str, pool: str, pool_size: int, rng: SeededRng, **bn):
        super().__init__()
        self.act, self.pool, self.pool_size = act, pool, pool_size
        self.convs, self.bns = [], []
        for j in range(convs):
            self.convs.append(self.add_child(f"conv{j}", Conv2d(c_in if j == 0 else c_out, c_out, 3, rng, padding=1)))
            self.bns.append(self.add_child(f"bn{j}", BatchNorm2d(c_out, **bn)))
        self.shortcut = self.add_child("shortcut", Conv2d(c_in, c_out, 1, rng))
        self.shortcut_bn = self.add_child("shortcut_bn", BatchNorm2d(c_out, **bn))

    def __call__(self, x: Tensor, deltas: list[tuple[Tensor, Tensor]] | None) -> Tensor:
        h = x
        last = len(self.convs) - 1
        for j, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            h = bn(conv(h), *(deltas[j] if deltas else (None, None)))
            if j < last:
                h = activation(h, self.act)
        s = self.shortcut_bn(self.shortcut(x), *(deltas[-1] if deltas else (None, None)))
        out = activation(h + s, self.act)
        if self.pool == "max":
            out = ad.max_pool2d(out, self.pool_size)
        elif self.pool == "avg":
            out = ad.avg_pool2d(out, self.pool_size)
        return out


class Backbone(Module):
    """Residual conv feature extractor mapping (B, C, H, W) images to (B, M) embeddings."""

    def __init__(self, config: BackboneConfig, rng: SeededRng, bn_eps: float = 1e-5, bn_momentum: float = 0.1):
        super().__init__()
        self.config = config
        self.blocks: list[ResidualBlock] = []
        c_in = config.in_channels
        for b, (w, pool) in enumerate(zip(config.widths, config.pooling)):
            block = ResidualBlock(
                c_in, w, config.convs_per_block, config.activation, pool, config.pool_size, rng,
                eps=bn_eps, momentum=bn_momentum,
            )
            self.blocks.append(self.add_child(f"block{b}", block))
            c_in = w
        self.head = None
        if config.embedding_dim is not None and config.embedding_dim != config.widths[-1]:
            self.head = self.add_child("head", Dense(config.widths[-1], config.embedding_dim, rng))

    def bn_modules(self) -> list[BatchNorm2d]:
        out = []
        for block in self.blocks:
            out += block.bns + [block.shortcut_bn]
        return out

    def __call__(self, x: Tensor, deltas: ModulationDeltas | None = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"backbone expects (B, {self.config.in_channels}, H, W), got {x.shape}")
        self.config.spatial_sizes(x.shape[2], x.shape[3])
        per_block = None
        if deltas is not None:
            deltas.validate(self.config, x.shape[0])
            step = self.config.convs_per_block + 1
            per_block = [deltas.layers[i * step : (i + 1) * step] for i in range(len(self.blocks))]
        h = x
        for b, block in enumerate(self.blocks):
            h = block(h, per_block[b] if per_block else None)
        h = ad.mean(h, axis=(2, 3))
        if self.head is not None:
            h = self.head(h)
        return h


def backbone_forward(x: Tensor, backbone: Backbone, deltas: ModulationDeltas | None = None) -> Tensor:
    return backbone(x, deltas)


def bn_widths(config: BackboneConfig) -> list[int]:
    return [c for _, c in config.bn_layers()]


def parse_widths(text: str | Sequence[int]) -> tuple[int, ...]:
    if isinstance(text, str):
        return tuple(int(t) for t in text.replace(" ", "").split(",") if t)
    return tuple(int(t) for t in text)
