"""Episodic training, optimizers with weight-decay exclusion, evaluation and seed sweeps."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import container, fewshot
from .data import MultimodalDataset
from .layers import BackboneConfig
from .simpaux import ModelConfig, SimpAuxModel
from .tensor import NonFiniteError, SeededRng

logger = logging.getLogger(__name__)

Z_95 = 1.96
DECAY_EXCLUDED_ROLES = ("bias", "gamma", "beta")


def excluded_from_decay(name: str) -> bool:
    """Biases and batch-norm affine terms never receive weight decay."""
    return name.rsplit(".", 1)[-1] in DECAY_EXCLUDED_ROLES


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    decay_exclusions: Callable[[str], bool] = excluded_from_decay

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError("optimizer kind must be 'sgd' or 'adam'")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be >= 0")


def apply_update(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray | None],
    state: dict,
    config: OptimizerConfig,
) -> Mapping[str, np.ndarray]:
    """One in-place optimizer step with decoupled weight decay.

    ``p <- p - lr * step(g) - lr * wd * p``; the decay term is dropped for
    parameters matched by ``config.decay_exclusions``. ``state`` holds the
    momentum / moment buffers and the step counter between calls.
    """
    state["t"] = state.get("t", 0) + 1
    t = state["t"]
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        decay = 0.0 if config.decay_exclusions(name) else config.weight_decay
        if config.kind == "sgd":
            if config.momentum:
                buf = state.setdefault(("v", name), np.zeros_like(p))
                buf *= config.momentum
                buf += g
                step = buf
            else:
                step = g
        else:
            m = state.setdefault(("m", name), np.zeros_like(p))
            v = state.setdefault(("v", name), np.zeros_like(p))
            m *= config.beta1
            m += (1 - config.beta1) * g
            v *= config.beta2
            v += (1 - config.beta2) * g * g
            m_hat = m / (1 - config.beta1**t)
            v_hat = v / (1 - config.beta2**t)
            step = m_hat / (np.sqrt(v_hat) + config.eps)
        update = config.lr * step
        if decay:
            update = update + config.lr * decay * p
        p -= update
    return params


class Optimizer:
    def __init__(self, params: Mapping[str, ad.Tensor], config: OptimizerConfig):
        self.params, self.config, self.state = dict(params), config, {}

    def step(self):
        apply_update(
            {k: p.data for k, p in self.params.items()},
            {k: p.grad for k, p in self.params.items()},
            self.state,
            self.config,
        )


# ---------------------------------------------------------------- checkpoints


def model_config_to_dict(config: ModelConfig) -> dict:
    return asdict(config)


def model_config_from_dict(d: Mapping) -> ModelConfig:
    d = dict(d)
    for key in ("classifier", "aux"):
        bb = dict(d[key])
        bb["widths"] = tuple(bb["widths"])
        bb["pooling"] = tuple(bb["pooling"]) if bb.get("pooling") is not None else None
        d[key] = BackboneConfig(**bb)
    return ModelConfig(**d)


def save_checkpoint(path, model: SimpAuxModel, extra: Mapping | None = None):
    """Parameters, BN running statistics and a JSON header with the variant tag."""
    meta = {"variant": model.variant, "model": model_config_to_dict(model.config), **(extra or {})}
    sections = {"meta": container.text_section(json.dumps(meta, sort_keys=True))}
    for name, p in model.named_parameters().items():
        sections[f"param/{name}"] = p.data
    for name, b in model.named_buffers().items():
        sections[f"buffer/{name}"] = b
    container.save(path, sections)


def load_checkpoint(path) -> tuple[SimpAuxModel, dict]:
    sections = container.load(path)
    if "meta" not in sections:
        raise container.FormatError("checkpoint lacks a meta section")
    meta = json.loads(container.section_text(sections.pop("meta")))
    model = SimpAuxModel(model_config_from_dict(meta["model"]), meta["variant"], SeededRng(0))
    state = {k.split("/", 1)[1]: v for k, v in sections.items()}
    model.load_state_dict(state)
    return model, meta


# ---------------------------------------------------------------- evaluation


def ci_half_width(accuracies: Sequence[float]) -> float:
    """1.96 * unbiased sample std / sqrt(n); NaN for fewer than two values."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size < 2:
        return float("nan")
    return float(Z_95 * acc.std(ddof=1) / math.sqrt(acc.size))


@dataclass
class EvalReport:
    accuracies: np.ndarray
    mean: float
    ci: float
    count: int
    seed: int
    variant: str = ""

    @classmethod
    def from_accuracies(cls, accuracies, seed: int, variant: str = "") -> "EvalReport":
        acc = np.asarray(accuracies, dtype=np.float64)
        if acc.size == 0:
            raise ValueError("no accuracies to report")
        return cls(acc, float(acc.mean()), ci_half_width(acc), int(acc.size), seed, variant)


def eval_episodes(dataset: MultimodalDataset, split: str, episodes: int, way: int, shot: int, query: int, seed: int):
    """The evaluation episode stream; depends only on the data, shape and seed."""
    rng = SeededRng(seed).child("eval", split)
    return [fewshot.sample_episode(dataset, split, way, shot, query, rng) for _ in range(episodes)]


def episode_inputs(dataset: MultimodalDataset, episode: fewshot.Episode):
    idx = episode.instances
    return dataset.images[idx], dataset.attributes[idx], dataset.captions[idx]


def score_episode(model: SimpAuxModel, dataset: MultimodalDataset, episode: fewshot.Episode) -> float:
    images, attrs, _ = episode_inputs(dataset, episode)
    with ad.no_grad():
        out = model.forward(images, attributes=attrs)
        n = len(episode.support)
        protos = fewshot.compute_prototypes(out.embeddings[:n], episode.support_labels, episode.way, model.config.distance)
        probs = fewshot.classify(out.embeddings[n:], protos)
    return fewshot.episode_accuracy(probs, episode.query_labels)


def evaluate(
    model: SimpAuxModel,
    dataset: MultimodalDataset,
    split: str,
    episodes: int,
    way: int,
    shot: int,
    query: int,
    seed: int,
    workers: int = 1,
) -> EvalReport:
    """Mean accuracy and 95% CI over ``episodes`` episodes sampled from ``seed``.

    The model runs in evaluation mode (running BN statistics, no mutation), so
    episodes may be scored on worker threads; results keep the sampler order.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    stream = eval_episodes(dataset, split, episodes, way, shot, query, seed)
    was_training = model.training
    model.eval()
    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                accs = list(pool.map(lambda ep: score_episode(model, dataset, ep), stream))
        else:
            accs = [score_episode(model, dataset, ep) for ep in stream]
    finally:
        model.train(was_training)
    return EvalReport.from_accuracies(accs, seed, model.variant)


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    way: int = 5
    shot: int = 5
    query: int = 15
    steps: int = 300
    val_every: int = 50
    val_episodes: int = 20
    fixed_episodes: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if self.steps < 0 or self.val_every < 0 or self.val_episodes < 0 or self.fixed_episodes < 0:
            raise ValueError("step and episode counts must be >= 0")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; ``record`` holds the diagnostic."""

    def __init__(self, record: dict, log: list[str]):
        super().__init__(f"non-finite loss at step {record['step']}: {record['error']}")
        self.record, self.log = record, log


@dataclass
class TrainResult:
    model: SimpAuxModel
    log: list[str]
    best_val: float
    best_step: int
    losses: list[float]
    fixed_episodes: list = field(default_factory=list)


def _format_log(step: int, loss: float, val_acc: float | None) -> str:
    val = "nan" if val_acc is None else repr(float(val_acc))
    return f"{step}\t{loss!r}\t{val}"


def train(
    variant: str,
    dataset: MultimodalDataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    seed: int,
    on_log: Callable[[str], None] | None = None,
) -> TrainResult:
    """Episodic training from ``seed``; returns the best-by-validation model.

    Without validation (``val_every == 0`` or no val episodes) the final
    parameters are kept.
    """
    root = SeededRng(seed)
    model = SimpAuxModel(model_config, variant, root.child("init"))
    params = model.named_parameters()
    opt = Optimizer(params, train_config.optimizer)
    ep_rng = root.child("episodes")
    tc = train_config
    fixed = [fewshot.sample_episode(dataset, "train", tc.way, tc.shot, tc.query, ep_rng) for _ in range(tc.fixed_episodes)]
    validate = tc.val_every > 0 and tc.val_episodes > 0
    val_seed = root.child("val").spawn_seed()

    log: list[str] = []
    losses: list[float] = []
    best_val, best_step, best_state = -1.0, 0, model.state_dict()

    def emit(line: str):
        log.append(line)
        if on_log:
            on_log(line)

    for step in range(1, tc.steps + 1):
        episode = fixed[(step - 1) % len(fixed)] if fixed else fewshot.sample_episode(
            dataset, "train", tc.way, tc.shot, tc.query, ep_rng
        )
        images, attrs, caps = episode_inputs(dataset, episode)
        model.train()
        model.zero_grad()
        try:
            loss, _ = model.episode_loss(images, episode.support_labels, episode.query_labels, tc.way, attrs, caps)
            loss.backward()
            for name, p in params.items():
                if not np.all(np.isfinite(p.grad)):
                    raise NonFiniteError(f"gradient of {name} is non-finite")
        except NonFiniteError as exc:
            record = {"step": step, "error": str(exc), "variant": variant, "seed": seed}
            logger.error("training diverged: %s", record)
            raise DivergenceError(record, log) from exc
        opt.step()
        losses.append(loss.item())
        val_acc = None
        if validate and (step % tc.val_every == 0 or step == tc.steps):
            val_acc = evaluate(model, dataset, "val", tc.val_episodes, tc.way, tc.shot, tc.query, val_seed).mean
            if val_acc > best_val:
                best_val, best_step, best_state = val_acc, step, model.state_dict()
        emit(_format_log(step, loss.item(), val_acc))

    if validate and tc.steps > 0:
        model.load_state_dict(best_state)
    else:
        best_step = tc.steps
    model.eval()
    return TrainResult(model, log, best_val, best_step, losses, fixed)


# ---------------------------------------------------------------- seed sweeps


@dataclass
class SweepReport:
    seeds: list[int]
    reports: dict[int, EvalReport]
    errors: dict[int, str]
    mean: float
    std: float
    min: float
    max: float
    outliers: list[int]

    @property
    def seed_means(self) -> dict[int, float]:
        return {s: r.mean for s, r in self.reports.items()}


def flag_outliers(values: Mapping[int, float], k: float = 2.0) -> list[int]:
    """Keys whose value lies more than ``k`` std from the mean of the *other* values.

    Leave-one-out statistics: with the value itself included, a single
    outlier among five can never exceed 1.79 standard deviations. A spread
    estimated from fewer than three other values is too noisy to judge by,
    so fewer than four seeds never flag anything.
    """
    keys = list(values)
    out = []
    for key in keys:
        rest = np.array([values[o] for o in keys if o != key], dtype=np.float64)
        if rest.size < 3:
            continue
        mu, sd = rest.mean(), rest.std(ddof=1)
        if abs(values[key] - mu) > k * sd:
            out.append(key)
    return out


def seed_sweep(run_seed: Callable[[int], EvalReport], seeds: Sequence[int]) -> SweepReport:
    """Run ``run_seed`` per seed; failures are recorded and the sweep continues."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValueError("a seed sweep needs at least two seeds")
    reports, errors = {}, {}
    for s in seeds:
        try:
            reports[s] = run_seed(s)
        except Exception as exc:  # noqa: BLE001 - recorded per seed by design
            logger.warning("seed %s failed: %s", s, exc)
            errors[s] = f"{type(exc).__name__}: {exc}"
    means = np.array([r.mean for r in reports.values()], dtype=np.float64)
    if means.size:
        mean, std = float(means.mean()), float(means.std(ddof=1)) if means.size > 1 else 0.0
        lo, hi = float(means.min()), float(means.max())
    else:
        mean = std = lo = hi = float("nan")
    return SweepReport(seeds, reports, errors, mean, std, lo, hi, flag_outliers({s: r.mean for s, r in reports.items()}))
