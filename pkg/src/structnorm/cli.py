"""Command-line entry point: ``structnorm <command> [options]``.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
Every command writes ``resolved_config.json`` next to its outputs.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .config import ConfigError, RunConfig, load_config, with_overrides
from .dataset import (
    DatasetManifest, ManifestEntry, SampleFormatError, default_phantom_config, generate_phantom_dataset,
    read_sample, transfer_phantom_config, write_sample,
)
from .evaluation import classification_metrics, project_features_2d
from .inference import (
    UNRECOGNIZED, StandardizationDictionary, crop_features, predict_sample, read_report,
    standardize_structure_set,
)
from .asac import model_inputs
from .network import load_checkpoint, save_checkpoint
from .preprocess import preprocess_sample
from .training import finetune, train

logger = logging.getLogger("structnorm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="structnorm", description="Structure-label standardization on CT volumes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="run configuration JSON")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        return sp

    sp = add("gen-phantom", "render a synthetic phantom dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--preset", choices=["default", "transfer"])
    sp.add_argument("--counts", type=_int_list, help="comma-separated per-class counts")
    sp.add_argument("--no-split", action="store_true", help="tag every sample as train")

    sp = add("preprocess", "normalize voxels, fill mask gaps and window HU")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)

    for name, help_text in (("train", "train from scratch"), ("finetune", "re-head and fine-tune Res4 + head")):
        sp = add(name, help_text)
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--scales", type=_int_list, help="indices into the scale table, e.g. 0,2")
        if name == "finetune":
            sp.add_argument("--checkpoint", required=True)

    sp = add("standardize", "relabel a directory of structures")
    sp.add_argument("--dict", required=True, dest="dictionary")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True, help="directory of samples, or one holding manifest.json")
    sp.add_argument("--out", required=True, help="report CSV path")
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--scales", type=_int_list)

    sp = add("evaluate", "score a report against ground truth")
    sp.add_argument("--report", required=True)
    sp.add_argument("--truth", required=True, help="manifest whose entry order matches the report")
    sp.add_argument("--out", help="output directory (default: next to the report)")

    sp = add("plot-features", "2-D projection of per-sample features as CSV")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True, help="CSV path")
    sp.add_argument("--split", choices=["train", "val", "test"])
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    flags = {"seed": args.seed, "workers": args.workers}
    if getattr(args, "threshold", None) is not None:
        flags["threshold"] = args.threshold
    if args.command in ("train", "finetune"):
        section = args.command
        flags[f"{section}.epochs"] = args.epochs
        flags[f"{section}.{'lr0' if section == 'train' else 'lr'}"] = args.lr
        if args.seed is not None:
            flags[f"{section}.seed"] = args.seed
    if getattr(args, "scales", None):
        try:
            flags["asac.scales"] = [cfg.asac.scales[i] for i in args.scales]
        except IndexError:
            raise ConfigError(f"--scales indices must be below {len(cfg.asac.scales)}") from None
    if args.command == "gen-phantom":
        flags["phantom.preset"] = args.preset
        flags["phantom.counts"] = args.counts
        if args.no_split:
            cfg.phantom.ratios = None
    return with_overrides(cfg, **flags)


def _load_manifest(path) -> DatasetManifest:
    return DatasetManifest.load_file(path)


def cmd_gen_phantom(args, cfg: RunConfig) -> None:
    make = default_phantom_config if cfg.phantom.preset == "default" else transfer_phantom_config
    phantom = make(cfg.phantom.counts, **cfg.phantom.overrides)
    phantom.validate()
    out = Path(args.out)
    cfg.save(out / "resolved_config.json")
    generate_phantom_dataset(phantom, cfg.seed, out, cfg.phantom.ratios)


def cmd_preprocess(args, cfg: RunConfig) -> None:
    manifest = _load_manifest(args.manifest)
    out = Path(args.out)
    cfg.save(out / "resolved_config.json")
    entries = []
    for e in manifest.entries:
        s = preprocess_sample(manifest.load(e), cfg.preprocess)
        write_sample(s, out / e.path)
        entries.append(ManifestEntry(e.path, e.true_class, e.split))
    DatasetManifest(manifest.vocabulary, entries, root=out).save(out / "manifest.json")


def cmd_train(args, cfg: RunConfig) -> None:
    manifest = _load_manifest(args.manifest)
    out = Path(args.out)
    cfg.save(out / "resolved_config.json")
    torch.manual_seed(cfg.train.seed)
    net, history = train(manifest, cfg.network.build(len(manifest.vocabulary)), cfg.train, cfg.asac, cfg.preprocess)
    history.write_csv(out / "history.csv")
    save_checkpoint(net, out / "model.ckpt", manifest.vocabulary.names, {"asac": cfg.to_json()["asac"]})


def cmd_finetune(args, cfg: RunConfig) -> None:
    manifest = _load_manifest(args.manifest)
    net, _, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    cfg.save(out / "resolved_config.json")
    tuned, history = finetune(net, manifest, cfg.finetune, cfg.asac, cfg.preprocess)
    history.write_csv(out / "history.csv")
    save_checkpoint(tuned, out / "model.ckpt", manifest.vocabulary.names, {"asac": cfg.to_json()["asac"]})


def _input_samples(path: Path):
    if (path / "manifest.json").exists():
        m = _load_manifest(path / "manifest.json")
        return [m.resolve(e) for e in m.entries]
    dirs = sorted(d for d in path.iterdir() if (d / "meta.json").exists())
    if not dirs:
        raise ValueError(f"no samples found in {path}")
    return dirs


def cmd_standardize(args, cfg: RunConfig) -> None:
    dictionary = StandardizationDictionary.load(args.dictionary)
    net, vocab, _ = load_checkpoint(args.checkpoint)
    if vocab is None:
        raise ValueError("checkpoint carries no vocabulary")
    paths = _input_samples(Path(args.input))
    out = Path(args.out)
    cfg.save(out.parent / "resolved_config.json")
    samples = [read_sample(p) for p in paths]
    net.eval()

    def predictor(sample):
        return predict_sample(sample, net, cfg.asac, cfg.preprocess)

    report = standardize_structure_set(samples, dictionary, predictor, vocab, cfg.threshold, cfg.workers)
    report.write(out)
    logger.info("%d structures, %d classifier calls", len(report.rows), report.classifier_calls)


def cmd_evaluate(args, cfg: RunConfig) -> None:
    rows = read_report(args.report)
    truth = _load_manifest(args.truth)
    names = list(truth.vocabulary.names)
    if len(rows) != len(truth.entries):
        raise ValueError(f"report has {len(rows)} rows but truth has {len(truth.entries)} entries")
    scores_path = Path(args.report).with_suffix(".scores.json")
    voted = json.loads(scores_path.read_text())["voted"] if scores_path.exists() else [None] * len(rows)
    out = Path(args.out) if args.out else Path(args.report).parent
    cfg.save(out / "resolved_config.json")
    labels, scores, preds = [], [], []
    for row, entry, v in zip(rows, truth.entries, voted):
        labels.append(entry.true_class)
        assigned = row["assigned_label"]
        pred = names.index(assigned) if assigned in names else -1
        if v is not None and len(v) == len(names):
            s = np.asarray(v, dtype=float)
        else:
            s = np.zeros(len(names))
            if pred >= 0:
                s[pred] = 1.0
        scores.append(s)
        preds.append(pred)
    if any(r["assigned_label"] not in names and r["assigned_label"] not in (UNRECOGNIZED, "") for r in rows):
        logger.warning("some assigned labels are outside the truth vocabulary; counted as misses")
    report = classification_metrics(labels, np.array(scores), names, predictions=preds)
    report.write(out / "metrics.csv", out / "metrics.json")
    logger.info("macro F1 %.4f accuracy %.4f", report.macro_f1, report.accuracy)


def cmd_plot_features(args, cfg: RunConfig) -> None:
    manifest = _load_manifest(args.manifest)
    net, _, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    cfg.save(out.parent / "resolved_config.json")
    entries = manifest.subset(args.split) if args.split else manifest.entries
    feats = []
    for e in entries:
        s = preprocess_sample(manifest.load(e), cfg.preprocess)
        feats.append(crop_features(model_inputs(s, cfg.asac), net).mean(axis=0))
    xy = project_features_2d(np.array(feats))
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "class"])
        for (x, y), e in zip(xy, entries):
            w.writerow([repr(float(x)), repr(float(y)), manifest.vocabulary[e.true_class]])


COMMANDS = {
    "gen-phantom": cmd_gen_phantom,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "standardize": cmd_standardize,
    "evaluate": cmd_evaluate,
    "plot-features": cmd_plot_features,
}

# raised while reading inputs and configs; anything else is a runtime failure
_VALIDATION_ERRORS = (ConfigError, SampleFormatError, ValueError, FileNotFoundError, KeyError, json.JSONDecodeError)


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        torch.set_num_threads(max(1, cfg.workers))
        COMMANDS[args.command](args, cfg)
    except _VALIDATION_ERRORS as exc:
        print(f"structnorm {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        logger.debug("runtime failure", exc_info=True)
        print(f"structnorm {args.command}: runtime failure: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
