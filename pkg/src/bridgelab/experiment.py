"""Paired variant comparison: train every variant per seed, score all of them
on one shared evaluation episode stream, and render the comparison tables.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import MultimodalDataset
from .simpaux import ModelConfig
from .train import TrainConfig, ci_half_width, evaluate, flag_outliers, seed_sweep, train

VARIANT_LABELS = {
    "baseline": "ProtoNet++",
    "simpaux": "SimpAux",
    "ablation": "SimpAux (constant bridge)",
    "oracle": "SimpAux (oracle attributes)",
}
MISSING = "n/a"
EPISODE_FIELDS = ("variant", "seed", "episode", "accuracy")


def label(variant: str) -> str:
    return VARIANT_LABELS.get(variant, variant)


def format_cell(mean: float, ci: float) -> str:
    """Percent accuracy as ``88.5 ± 0.5``; NaN entries print as ``n/a``."""
    if not math.isfinite(mean):
        return MISSING
    ci_text = f"{100 * ci:.1f}" if math.isfinite(ci) else MISSING
    return f"{100 * mean:.1f} ± {ci_text}"


@dataclass
class Comparison:
    """Per-episode accuracies for every (variant, seed) cell that completed.

    Variant rows report the mean over all pooled (seed, episode) accuracies
    with the CI of that pooled sample. With equal episode counts per seed the
    pooled mean equals the mean of the per-seed means.
    """

    variants: list[str]
    seeds: list[int]
    accuracies: dict[str, dict[int, np.ndarray]] = field(default_factory=dict)
    errors: dict[str, dict[int, str]] = field(default_factory=dict)

    def cell(self, variant: str, seed: int) -> np.ndarray | None:
        return self.accuracies.get(variant, {}).get(seed)

    def pooled(self, variant: str) -> np.ndarray:
        cells = [self.cell(variant, s) for s in self.seeds]
        cells = [c for c in cells if c is not None]
        return np.concatenate(cells) if cells else np.zeros(0)

    def summary(self, variant: str) -> tuple[float, float]:
        acc = self.pooled(variant)
        if acc.size == 0:
            return float("nan"), float("nan")
        return float(acc.mean()), ci_half_width(acc)

    def seed_means(self, variant: str) -> dict[int, float]:
        return {s: float(a.mean()) for s, a in self.accuracies.get(variant, {}).items()}

    def cross_seed_mean(self, variant: str) -> float:
        means = list(self.seed_means(variant).values())
        return float(np.mean(means)) if means else float("nan")

    def paired_delta(self, a: str, b: str) -> tuple[float, float, int]:
        """Mean and CI of per-episode accuracy(a) - accuracy(b) over seeds both completed."""
        diffs = []
        for s in self.seeds:
            x, y = self.cell(a, s), self.cell(b, s)
            if x is not None and y is not None and len(x) == len(y):
                diffs.append(x - y)
        if not diffs:
            return float("nan"), float("nan"), 0
        d = np.concatenate(diffs)
        return float(d.mean()), ci_half_width(d), int(d.size)

    # ------------------------------------------------------------ rendering

    def comparison_table(self) -> str:
        rows = [(label(v), format_cell(*self.summary(v))) for v in self.variants]
        return _table(("Model", "Accuracy (%)"), rows, align=("<", ">"))

    def per_seed_table(self) -> str:
        header = ("Model",) + tuple(f"seed {s}" for s in self.seeds) + ("outliers",)
        rows = []
        for v in self.variants:
            cells = []
            for s in self.seeds:
                acc = self.cell(v, s)
                cells.append(MISSING if acc is None else format_cell(float(acc.mean()), ci_half_width(acc)))
            outliers = flag_outliers(self.seed_means(v))
            rows.append((label(v), *cells, ",".join(map(str, outliers)) or "-"))
        return _table(header, rows, align=("<",) + (">",) * (len(header) - 1))

    def render(self) -> str:
        parts = [self.comparison_table(), "", "Per-seed accuracy (%)", self.per_seed_table()]
        if "simpaux" in self.variants and "ablation" in self.variants:
            mean, ci, n = self.paired_delta("simpaux", "ablation")
            parts += ["", f"Paired delta SimpAux - SimpAux (constant bridge): {format_cell(mean, ci)} points over {n} episodes"]
        if "oracle" in self.variants and "ablation" in self.variants:
            mean, ci, n = self.paired_delta("oracle", "ablation")
            parts += [f"Paired delta SimpAux (oracle attributes) - SimpAux (constant bridge): {format_cell(mean, ci)} points over {n} episodes"]
        failures = [(v, s, msg) for v in self.variants for s, msg in sorted(self.errors.get(v, {}).items())]
        if failures:
            parts += ["", "Failed runs"] + [f"  {label(v)} seed {s}: {msg}" for v, s, msg in failures]
        return "\n".join(parts) + "\n"

    def comparison_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("variant", "model", "mean_pct", "ci_pct", "seeds", "episodes"))
        for v in self.variants:
            mean, ci = self.summary(v)
            w.writerow((v, label(v), _pct(mean), _pct(ci), len(self.accuracies.get(v, {})), self.pooled(v).size))
        return buf.getvalue()

    def per_seed_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("variant", "seed", "mean_pct", "ci_pct", "episodes", "error"))
        for v in self.variants:
            for s in self.seeds:
                acc = self.cell(v, s)
                if acc is None:
                    w.writerow((v, s, MISSING, MISSING, 0, self.errors.get(v, {}).get(s, "")))
                else:
                    w.writerow((v, s, _pct(float(acc.mean())), _pct(ci_half_width(acc)), acc.size, ""))
        return buf.getvalue()

    def episodes_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(EPISODE_FIELDS)
        for v in self.variants:
            for s in self.seeds:
                acc = self.cell(v, s)
                for i, a in enumerate(acc if acc is not None else ()):
                    w.writerow((v, s, i, repr(float(a))))
        return buf.getvalue()

    @classmethod
    def from_episodes_csv(cls, text: str, variants: Sequence[str] | None = None, seeds: Sequence[int] | None = None) -> "Comparison":
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames is None or tuple(reader.fieldnames) != EPISODE_FIELDS:
            raise ValueError(f"episodes file must have header {','.join(EPISODE_FIELDS)}")
        cells: dict[str, dict[int, list[tuple[int, float]]]] = {}
        for row in reader:
            cells.setdefault(row["variant"], {}).setdefault(int(row["seed"]), []).append((int(row["episode"]), float(row["accuracy"])))
        found_seeds = sorted({s for per in cells.values() for s in per})
        comp = cls(list(variants or cells), list(seeds or found_seeds))
        for v, per in cells.items():
            comp.accuracies[v] = {s: np.array([a for _, a in sorted(rows)]) for s, rows in per.items()}
        return comp

    @classmethod
    def load(cls, out_dir: str | os.PathLike) -> "Comparison":
        """Rebuild from ``episodes.csv``; ``per_seed.csv``, when present, restores the grid and failures."""
        with open(os.path.join(out_dir, "episodes.csv"), encoding="utf-8", newline="") as fh:
            episodes = fh.read()
        per_seed = os.path.join(out_dir, "per_seed.csv")
        if not os.path.exists(per_seed):
            return cls.from_episodes_csv(episodes)
        with open(per_seed, encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
        variants = list(dict.fromkeys(r["variant"] for r in rows))
        seeds = list(dict.fromkeys(int(r["seed"]) for r in rows))
        comp = cls.from_episodes_csv(episodes, variants, seeds)
        for r in rows:
            if r["error"]:
                comp.errors.setdefault(r["variant"], {})[int(r["seed"])] = r["error"]
        return comp

    def write(self, out_dir: str | os.PathLike) -> dict[str, str]:
        os.makedirs(out_dir, exist_ok=True)
        files = {
            "comparison.txt": self.render(),
            "comparison.csv": self.comparison_csv(),
            "per_seed.csv": self.per_seed_csv(),
            "episodes.csv": self.episodes_csv(),
        }
        paths = {}
        for name, text in files.items():
            paths[name] = os.path.join(out_dir, name)
            with open(paths[name], "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return paths


def _pct(x: float) -> str:
    return f"{100 * x:.4f}" if math.isfinite(x) else MISSING


def _table(header: Sequence[str], rows: Sequence[Sequence[str]], align: Sequence[str]) -> str:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]

    def line(cells):
        return "  ".join(f"{str(c):{a}{w}}" for c, a, w in zip(cells, align, widths)).rstrip()

    rule = "-" * len(line(header))
    return "\n".join([line(header), rule, *(line(r) for r in rows)])


def run_comparison(
    dataset: MultimodalDataset,
    variants: Sequence[str],
    seeds: Sequence[int],
    model_config: ModelConfig,
    train_config: TrainConfig,
    eval_split: str = "test",
    eval_episodes: int = 200,
    eval_seed: int = 1234,
    workers: int = 1,
    progress: Callable[[str], None] | None = None,
) -> Comparison:
    """Train and evaluate each variant for each seed on the shared episode stream.

    A failing run is recorded and leaves its cell empty; the remaining runs continue.
    """
    comp = Comparison(list(variants), list(seeds))
    for variant in comp.variants:

        def run_seed(seed: int, variant=variant):
            result = train(variant, dataset, model_config, train_config, seed)
            report = evaluate(
                result.model, dataset, eval_split, eval_episodes,
                train_config.way, train_config.shot, train_config.query, eval_seed, workers,
            )
            if progress:
                progress(f"{variant} seed {seed}: {100 * report.mean:.1f}%")
            return report

        sweep = seed_sweep(run_seed, comp.seeds)
        comp.accuracies[variant] = {s: r.accuracies for s, r in sweep.reports.items()}
        comp.errors[variant] = dict(sweep.errors)
        for s, msg in sweep.errors.items():
            if progress:
                progress(f"{variant} seed {s}: failed ({msg})")
    return comp

