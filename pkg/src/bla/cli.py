"""Command-line interface: ``bla train|eval|explain|faithfulness|report``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import pnm
from .attention import explanation_record, write_records
from .config import ConfigError, load_config, parse_config_text, save_config
from .data import Dataset, IdxError, mnist_pair, synthetic_pair
from .metrics import localization_hit_rate, mann_whitney_u, mean_stderr
from .nn import Pooling, forward, load_checkpoint, save_checkpoint
from .saliency import cam_scores, lime_scores, random_saliency, spearman, SaliencyMap
from .training import (
    MODES,
    ExperimentConfig,
    build_model,
    evaluate,
    explanation_sizes,
    read_run_records,
    train,
)

logger = logging.getLogger("bla")

EXIT_OK, EXIT_USAGE, EXIT_IO = 0, 1, 2
RECORDS = "runs.jsonl"


class UsageError(Exception):
    pass


# data ----------------------------------------------------------------------


def load_data(source: str, data_seed: int = 0) -> tuple[Dataset, Dataset]:
    """``mnist38`` (under ``$BLA_DATA_DIR``), ``synthetic`` or an MNIST directory."""
    if source == "synthetic":
        return synthetic_pair(seed=data_seed)
    if source == "mnist38":
        root = os.environ.get("BLA_DATA_DIR")
        if not root:
            raise UsageError("--data mnist38 needs BLA_DATA_DIR to point at the MNIST files")
        return mnist_pair(root)
    if not Path(source).exists():
        raise FileNotFoundError(f"data path {source} does not exist")
    return mnist_pair(source)


# checkpoints and records ---------------------------------------------------


def run_stem(config: ExperimentConfig) -> str:
    stem = config.mode
    if config.mode == "bla" and config.uses_thresholding:
        stem += "-t"
    if config.variant != "bla":
        stem += f"-{config.variant}"
    return f"{stem}-seed{config.seed}"


def sidecar(checkpoint) -> Path:
    return Path(checkpoint).with_suffix(".cfg")


def load_model(checkpoint):
    path = Path(checkpoint)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    cfg_path = sidecar(path)
    if not cfg_path.exists():
        raise FileNotFoundError(f"checkpoint config {cfg_path} does not exist")
    values = parse_config_text(cfg_path.read_text(encoding="utf-8"), str(cfg_path))
    config = ExperimentConfig(**values)
    model = build_model(config)
    model.load_state(load_checkpoint(path))
    return config, model


def merge_records(path: Path, results) -> None:
    """Add run records to ``path``, replacing any earlier record of the same
    configuration and seed so that re-running is idempotent."""
    records = read_run_records(path) if path.exists() else []
    new = [r.record() for r in results]
    keys = {(r["config_hash"], r["seed"]) for r in new}
    kept = [r for r in records if (r["config_hash"], r["seed"]) not in keys]
    with open(path, "w", encoding="utf-8") as fh:
        for r in kept + new:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


# commands --------------------------------------------------------------------

_OVERRIDES = ("mode", "epochs", "lr", "batch_size", "theta", "gamma", "thresholding", "variant", "k", "tau", "init_checkpoint")


def cmd_train(args) -> int:
    overrides = {key: getattr(args, key) for key in _OVERRIDES}
    overrides["freeze_extractor"] = True if args.freeze_extractor else None
    overrides["freeze_head"] = True if args.freeze_head else None
    base = load_config(args.config, dict(overrides, seed=args.seed))
    init_state = load_checkpoint(base.init_checkpoint) if base.init_checkpoint else None
    train_ds, val_ds = load_data(args.data, args.data_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    seeds = [base.seed] if args.runs is None else list(range(args.runs))
    results = []
    for seed in seeds:
        config = ExperimentConfig(**dict(base.to_dict(), seed=seed))
        model, result = train(config, train_ds, val_ds, init_state=init_state)
        ckpt = out / f"{run_stem(config)}.ckpt"
        save_checkpoint(model, ckpt)
        save_config(config, sidecar(ckpt))
        results.append(result)
        size = "" if result.size_mean is None else f" size {result.size_mean:.2f}±{result.size_std:.2f}"
        print(f"{config.label()} seed {seed}: accuracy {result.accuracy:.4f} loss {result.loss:.4f}{size} -> {ckpt}")
    merge_records(out / RECORDS, results)
    return EXIT_OK


def cmd_eval(args) -> int:
    config, model = load_model(args.checkpoint)
    _, val_ds = load_data(args.data, args.data_seed)
    pooling = Pooling(args.pooling) if args.pooling else model.eval_pooling
    acc, loss = evaluate(model, val_ds, pooling)
    line = f"{config.label()} seed {config.seed} [{pooling.value}]: accuracy {acc:.4f} loss {loss:.4f}"
    if model.explainer is not None and pooling == model.eval_pooling:
        sizes = explanation_sizes(model, val_ds)
        line += f" size {sizes.mean():.2f}±{sizes.std(ddof=1):.2f} ({len(np.unique(sizes))} distinct)"
    if val_ds.masks is not None and model.explainer is not None:
        out = forward(model, val_ds.images, model.eval_pooling)
        line += f" hit rate {localization_hit_rate(out.q.data, val_ds.masks):.4f}"
    print(line)
    return EXIT_OK


def _indices(text: str, count: int) -> list[int]:
    idx = [int(t) for t in text.split(",") if t.strip()]
    for i in idx:
        if not 0 <= i < count:
            raise UsageError(f"index {i} is out of range for {count} validation images")
    return idx


def cmd_explain(args) -> int:
    config, model = load_model(args.checkpoint)
    if model.explainer is None:
        raise UsageError("the baseline has no explanation module")
    _, val_ds = load_data(args.data, args.data_seed)
    idx = _indices(args.indices, len(val_ds))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    out = forward(model, val_ds.images[idx], model.eval_pooling)
    grid = out.fmap.grid
    records = []
    for row, i in enumerate(idx):
        q, delta = out.q.data[row], out.delta[row]
        stem = out_dir / f"{run_stem(config)}-{i}"
        pnm.write_pgm(f"{stem}-q.pgm", pnm.qmap_gray(q, grid))
        pnm.write_pgm(f"{stem}-delta.pgm", pnm.delta_gray(delta, grid))
        pnm.write_ppm(f"{stem}-overlay.ppm", pnm.overlay(val_ds.images[i], q, grid))
        records.append(
            explanation_record(i, float(out.prediction[row]), int(val_ds.labels[i]), grid, q, delta)
        )
        print(f"image {i}: label {int(val_ds.labels[i])} prediction {out.prediction[row]:.4f} size {int(delta.sum())}")
    write_records(out_dir / f"{run_stem(config)}-explanations.jsonl", records)
    return EXIT_OK


def cmd_faithfulness(args) -> int:
    config, model = load_model(args.checkpoint)
    if model.explainer is None:
        raise UsageError("faithfulness needs a model with an explanation module")
    _, val_ds = load_data(args.data, args.data_seed)
    rng = np.random.default_rng(args.seed)
    idx = np.arange(len(val_ds))
    if args.subset is not None and args.subset < len(idx):
        idx = np.sort(rng.choice(idx, size=args.subset, replace=False))
    scores = faithfulness_scores(model, val_ds.images[idx], args.num_samples, rng)
    for name, values in scores.items():
        print(f"spearman LIME/{name}: {np.mean(values):+.4f} over {len(values)} images")
    return EXIT_OK


def faithfulness_scores(model, images, num_samples: int = 1000, rng=None) -> dict:
    """Per-image Spearman correlations of LIME with BLA-soft, CAM and the random control.

    LIME and CAM both explain the predicted class.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    out = forward(model, images, model.eval_pooling)
    grid = out.fmap.grid
    soft = [SaliencyMap(q, grid, "BLA-SOFT") for q in out.q.data]
    head = model.params["head.W"].data
    scores = defaultdict(list)
    for i, x in enumerate(images):
        sign = 1 if out.prediction[i] > 0.5 else -1

        def target(batch, sign=sign):
            p = forward(model, batch, model.eval_pooling).prediction
            return p if sign > 0 else 1.0 - p

        lime = lime_scores(target, x, grid, num_samples, rng)
        cam = cam_scores(out.fmap.features.data[i], head, sign)
        scores["BLA"].append(spearman(lime, soft[i]))
        scores["CAM"].append(spearman(lime, cam))
        scores["random"].append(spearman(lime, random_saliency(soft[i], soft, rng)))
    return dict(scores)


def report_table(records: list[dict], baseline: str = "BL") -> str:
    if not records:
        raise UsageError("no run records to report")
    groups = defaultdict(list)
    for r in records:
        groups[r["label"]].append(r)
    lines = [f"{'model':<16}{'runs':>5}{'accuracy':>18}{'loss':>18}{'size':>14}{'p vs ' + baseline:>12}"]
    base = [r["accuracy"] for r in groups.get(baseline, [])]
    for label in sorted(groups):
        rows = groups[label]
        acc = [r["accuracy"] for r in rows]
        loss = [r["loss"] for r in rows]
        cells = [f"{label:<16}", f"{len(rows):>5}"]
        for xs in (acc, loss):
            if len(xs) >= 2:
                m, se = mean_stderr(xs)
                cells.append(f"{m:>10.4f} ± {100 * se:<5.3f}")
            else:
                cells.append(f"{xs[0]:>10.4f}{'':8}")
        sizes = [r["size_mean"] for r in rows if r.get("size_mean") is not None]
        cells.append(f"{np.mean(sizes):>14.2f}" if sizes else f"{'-':>14}")
        if len(base) >= 2 and len(acc) >= 2:
            cells.append(f"{mann_whitney_u(acc, base).pvalue:>12.4f}")
        else:
            cells.append(f"{'-':>12}")
        lines.append("".join(cells))
    lines.append("± is the standard error multiplied by 100; p is the two-sided Mann-Whitney U test.")
    return "\n".join(lines)


def cmd_report(args) -> int:
    paths = [Path(p) for p in args.records] or [Path(args.out) / RECORDS]
    records = []
    for path in paths:
        if path.is_dir():
            path = path / RECORDS
        if not path.exists():
            raise FileNotFoundError(f"run records {path} do not exist")
        records.extend(read_run_records(path))
    print(report_table(records, args.baseline))
    return EXIT_OK


# parser ----------------------------------------------------------------------


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int, help="run seed (default 0)")
    p.add_argument("--data", default="mnist38", help="mnist38, synthetic or an MNIST directory")
    p.add_argument("--data-seed", type=int, default=0, help="seed of the synthetic dataset")
    p.add_argument("--out", default="runs", help="output directory")


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bla", description="Bounded logit attention experiments on MNIST.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress per epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one or more models")
    _shared(p)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--theta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--thresholding", type=_bool, help="true/false; default depends on the mode")
    p.add_argument("--variant", choices=("bla", "concept", "pointwise"))
    p.add_argument("--k", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--freeze-extractor", action="store_true")
    p.add_argument("--freeze-head", action="store_true")
    p.add_argument("--init-checkpoint", dest="init_checkpoint")
    p.add_argument("--runs", type=int, help="train seeds 0..N-1 instead of --seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pooling", choices=[m.value for m in Pooling])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="write q-map, delta-map and overlay images")
    _shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--indices", default="0", help="comma-separated validation indices")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("faithfulness", help="Spearman agreement of LIME with BLA, CAM and a random control")
    _shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--num-samples", type=int, default=1000)
    p.add_argument("--subset", type=int, help="evaluate a seeded sample of this many images")
    p.set_defaults(func=cmd_faithfulness)

    p = sub.add_parser("report", help="summarise run records")
    _shared(p)
    p.add_argument("records", nargs="*", help="record files or run directories (default: --out)")
    p.add_argument("--baseline", default="BL", help="label to test the other groups against")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "seed", None) is None and args.command != "train":
        args.seed = 0
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"bla: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, IdxError) as exc:
        print(f"bla: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
