"""``bridgelab`` command-line entry point.

Commands: gen-data, train, eval, ablate, report, gradcheck. Run commands
accept ``--config PATH`` (flat ``key = value`` file) and one flag per config
key; flags override the file.

Exit codes: 0 success, 1 failed check or diverged run, 2 invalid
configuration, 3 unmet data precondition or unreadable input.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time

from . import container, data, experiment, gradcheck
from .config import SEED_ENV, ConfigError, RunConfig, parse_text
from .fewshot import InsufficientDataError, check_episode_shape
from .train import DivergenceError, evaluate, load_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3

GEN_FLAGS = {
    "classes": int,
    "per_class": int,
    "image_size": int,
    "attributes": int,
    "embed_dim": int,
    "ambiguity": float,
    "flip_prob": float,
    "pixel_noise": float,
    "caption_noise": float,
    "seed": int,
}


class DataError(RuntimeError):
    """An input file is missing, unreadable or too small for the request."""


def _say(*lines: str):
    for line in lines:
        print(line, flush=True)


def _write_text(path: str, text: str):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _env_seed() -> int:
    env = os.environ.get(SEED_ENV, "")
    try:
        return int(env) if env else 0
    except ValueError as exc:
        raise ConfigError([f"{SEED_ENV} must be an integer, got {env!r}"]) from exc


# ---------------------------------------------------------------- gen-data


def cmd_gen_data(args) -> int:
    values = parse_text(open(args.config, encoding="utf-8").read()) if args.config else {}
    values = {k.replace("-", "_"): v for k, v in values.items()}
    unknown = sorted(set(values) - set(GEN_FLAGS) - {"out"})
    if unknown:
        raise ConfigError([f"unknown key {k!r}" for k in unknown])
    for key in GEN_FLAGS:
        flag = getattr(args, key)
        if flag is not None:
            values[key] = flag
    file_out = values.pop("out", None)
    out = args.out or file_out
    if not out:
        raise ConfigError(["--out is required"])
    try:
        kwargs = {k: GEN_FLAGS[k](v) for k, v in values.items()}
    except ValueError as exc:
        raise ConfigError([str(exc)]) from exc
    kwargs.setdefault("seed", _env_seed())
    try:
        config = data.SyntheticGenConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc).split("; ")) from exc
    dataset = data.generate_synthetic(config)
    try:
        os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
        data.save(dataset, out)
    except OSError as exc:
        raise DataError(f"cannot write {out}: {exc}") from exc
    sizes = {s: len(dataset.splits[s]) for s in data.SPLITS}
    _say(
        f"wrote {out}",
        f"classes: {config.classes} ({config.per_class} instances each, {len(dataset)} total)",
        "splits: " + ", ".join(f"{s}={n}" for s, n in sizes.items()),
        f"ambiguity rho: {config.ambiguity} ({config.num_invisible} of {config.attributes} attributes invisible)",
        f"image: 3x{config.image_size}x{config.image_size}, caption dim {config.embed_dim}, seed {config.seed}",
    )
    return EXIT_OK


# ---------------------------------------------------------------- run commands


def run_config(args) -> RunConfig:
    base = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {k: v for k, v in vars(args).items() if k in RunConfig.keys() and v is not None}
    return RunConfig.from_mapping(overrides, base).resolved()


def load_dataset(path: str) -> data.MultimodalDataset:
    try:
        return data.load(path)
    except (OSError, container.FormatError, container.ChecksumError, ValueError) as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc


def cmd_train(args) -> int:
    cfg = run_config(args)
    cfg.validate()
    dataset = load_dataset(cfg.dataset)
    tc = cfg.train_config()
    check_episode_shape(dataset, "train", tc.way, tc.shot, tc.query)
    if tc.val_every and tc.val_episodes:
        check_episode_shape(dataset, "val", tc.way, tc.shot, tc.query)
    model_config = cfg.model_config(dataset.num_attributes, dataset.captions.shape[1])
    os.makedirs(cfg.out_dir, exist_ok=True)
    _write_text(os.path.join(cfg.out_dir, "resolved_config.txt"), cfg.to_text())
    log_path = os.path.join(cfg.out_dir, "train_log.tsv")
    _write_text(log_path, "")
    with open(log_path, "a", encoding="utf-8") as log:

        def on_log(line: str):
            log.write(line + "\n")
            log.flush()

        t0 = time.perf_counter()
        result = train(cfg.variant, dataset, model_config, tc, cfg.seed, on_log=on_log)
    ckpt = cfg.checkpoint or os.path.join(cfg.out_dir, "checkpoint.smpx")
    save_checkpoint(ckpt, result.model, {"seed": cfg.seed, "best_step": result.best_step, "best_val": result.best_val})
    _say(
        f"trained {cfg.variant} for {tc.steps} steps in {time.perf_counter() - t0:.1f}s",
        f"best validation accuracy {100 * result.best_val:.1f}% at step {result.best_step}"
        if result.best_val >= 0
        else "no validation run; kept final parameters",
        f"checkpoint: {ckpt}",
    )
    return EXIT_OK


def render_eval_report(report, cfg: RunConfig, variant: str) -> str:
    lines = [
        f"variant: {variant}",
        f"model: {experiment.label(variant)}",
        f"split: {cfg.eval_split}",
        f"episodes: {report.count}",
        f"way: {cfg.way}",
        f"shot: {cfg.shot}",
        f"query: {cfg.query}",
        f"eval_seed: {report.seed}",
        f"mean_accuracy: {report.mean!r}",
        f"ci95: {report.ci!r}",
        f"accuracy_pct: {experiment.format_cell(report.mean, report.ci)}",
    ]
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    cfg = run_config(args)
    cfg.validate()
    dataset = load_dataset(cfg.dataset)
    check_episode_shape(dataset, cfg.eval_split, cfg.way, cfg.shot, cfg.query)
    ckpt = cfg.checkpoint or os.path.join(cfg.out_dir, "checkpoint.smpx")
    try:
        model, meta = load_checkpoint(ckpt)
    except (OSError, container.FormatError, container.ChecksumError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {ckpt}: {exc}") from exc
    report = evaluate(model, dataset, cfg.eval_split, cfg.eval_episodes, cfg.way, cfg.shot, cfg.query, cfg.eval_seed, cfg.workers)
    text = render_eval_report(report, cfg, meta["variant"])
    episodes = "episode,accuracy\n" + "".join(f"{i},{float(a)!r}\n" for i, a in enumerate(report.accuracies))
    _write_text(os.path.join(cfg.out_dir, "eval_config.txt"), cfg.to_text())
    _write_text(os.path.join(cfg.out_dir, "eval_report.txt"), text)
    _write_text(os.path.join(cfg.out_dir, "eval_episodes.csv"), episodes)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = run_config(args)
    cfg.validate()
    seeds = cfg.seed_list()
    if len(seeds) < 2:
        raise ConfigError(["seeds must list at least two seeds"])
    dataset = load_dataset(cfg.dataset)
    tc = cfg.train_config()
    check_episode_shape(dataset, "train", tc.way, tc.shot, tc.query)
    check_episode_shape(dataset, cfg.eval_split, tc.way, tc.shot, tc.query)
    if tc.val_every and tc.val_episodes:
        check_episode_shape(dataset, "val", tc.way, tc.shot, tc.query)
    os.makedirs(cfg.out_dir, exist_ok=True)
    _write_text(os.path.join(cfg.out_dir, "resolved_config.txt"), cfg.to_text())
    comp = experiment.run_comparison(
        dataset,
        cfg.variant_list(),
        seeds,
        cfg.model_config(dataset.num_attributes, dataset.captions.shape[1]),
        tc,
        eval_split=cfg.eval_split,
        eval_episodes=cfg.eval_episodes,
        eval_seed=cfg.eval_seed,
        workers=cfg.workers,
        progress=lambda line: print(line, file=sys.stderr, flush=True),
    )
    comp.write(cfg.out_dir)
    sys.stdout.write(comp.render())
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        comp = experiment.Comparison.load(args.dir)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read results in {args.dir}: {exc}") from exc
    text = comp.render()
    if args.out:
        _write_text(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    failed = []

    def report(name: str, err: float, seconds: float):
        ok = err <= args.tolerance
        if not ok:
            failed.append(name)
        _say(f"{name:<26} {err:.3e}  {'PASS' if ok else 'FAIL'}  ({seconds:.1f}s)")

    unknown = sorted(set(args.only or ()) - set(gradcheck.COMPONENTS))
    if unknown:
        raise ConfigError([f"unknown component {u!r}" for u in unknown])
    t0 = time.perf_counter()
    results = gradcheck.run_suite(args.seed, args.only, report)
    worst = max(results.values())
    _say(f"{len(results)} components, worst relative error {worst:.3e}, tolerance {args.tolerance:g}, {time.perf_counter() - t0:.1f}s")
    if failed:
        _say("FAILED: " + ", ".join(failed))
        return EXIT_FAILED
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key = value configuration file")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            p.add_argument(flag, dest=f.name, nargs="?", const="true", default=None, metavar="BOOL")
        else:
            p.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bridgelab", description="Conditioned prototypical networks on synthetic multimodal data.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic multimodal dataset")
    g.add_argument("--config", help="key = value file with generator settings")
    for key, typ in GEN_FLAGS.items():
        g.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None)
    g.add_argument("--out", help="output dataset file (.smpx)")
    g.set_defaults(func=cmd_gen_data)

    for name, func, text in (
        ("train", cmd_train, "train one variant and write a checkpoint"),
        ("eval", cmd_eval, "evaluate a checkpoint on held-out episodes"),
        ("ablate", cmd_ablate, "paired comparison of all variants over several seeds"),
    ):
        p = sub.add_parser(name, help=text)
        _add_run_flags(p)
        p.set_defaults(func=func)

    r = sub.add_parser("report", help="re-render the comparison table from an ablate output directory")
    r.add_argument("--dir", required=True, help="directory holding episodes.csv")
    r.add_argument("--out", help="also write the table to this file")
    r.set_defaults(func=cmd_report)

    c = sub.add_parser("gradcheck", help="finite-difference gradient check of every component")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tolerance", type=float, default=gradcheck.TOLERANCE)
    c.add_argument("--only", nargs="+", metavar="COMPONENT", help=f"subset of {', '.join(gradcheck.COMPONENTS)}")
    c.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (InsufficientDataError, DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
