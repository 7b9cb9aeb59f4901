"""Command line entry point: ``mctcap <command> [options]``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from .config import ConfigError, RunConfig, desk_config
from .data import (
    CaptionFile, DataError, FeatureFile, SplitSpec, make_examples, read_captions, read_features,
    toy_dataset, write_captions, write_features_binary, write_features_jsonl,
)
from .embedder import build_vocab
from .estimator import MCTCaptioner
from .evaluation import evaluate
from .gradcheck import THRESHOLD, family_checks
from .metrics import format_table
from .training import CheckpointError, NumericError, load_checkpoint

log = logging.getLogger("mctcap")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# shared helpers


def load_config(path: Optional[str], args) -> RunConfig:
    cfg = RunConfig.load(path) if path else desk_config()
    doc = cfg.to_dict()
    if getattr(args, "mode", None):
        doc["mode"] = args.mode
    for flag in ("epochs", "seed", "threads", "lr", "batch_size"):
        v = getattr(args, flag, None)
        if v is not None:
            doc["train"][flag] = v
    for flag in ("features", "captions", "splits"):
        v = getattr(args, flag, None)
        if v is not None:
            doc["paths"][flag] = v
    return RunConfig.from_dict(doc)


def load_data(cfg: RunConfig) -> Tuple[FeatureFile, CaptionFile, SplitSpec]:
    if not cfg.paths.features:
        raise DataError("no features path configured (paths.features)")
    if not cfg.paths.captions:
        raise DataError("no captions path configured (paths.captions)")
    features = read_features(cfg.paths.features)
    captions = read_captions(cfg.paths.captions, features)
    if cfg.paths.splits:
        if not Path(cfg.paths.splits).exists():
            raise DataError(f"split file not found: {cfg.paths.splits}")
        splits = SplitSpec.load(cfg.paths.splits)
    else:
        splits = SplitSpec(train=list(captions.captions))
    return features, captions, splits


def fit_from_config(cfg: RunConfig, features: FeatureFile, captions: CaptionFile, splits: SplitSpec,
                    log_path: Optional[Path] = None) -> MCTCaptioner:
    ids = splits.train
    if not ids:
        raise DataError("training split is empty")
    examples = make_examples(features, captions, ids)
    vocab = build_vocab([e.tokens for e in examples], cfg.min_count)
    est = MCTCaptioner.from_run_config(cfg)
    lines: List[str] = []
    start = time.time()

    def on_epoch(epoch, loss, lr):
        lines.append(f"{epoch}\t{loss!r}\t{lr!r}")
        if epoch % 50 == 0 or epoch == cfg.train.epochs - 1:
            log.info("epoch %d loss %.6f lr %g (%.1fs)", epoch, loss, lr, time.time() - start)

    X = [features[i] for i in ids]
    y = [captions[i] for i in ids]
    est.fit(X, y, on_epoch=on_epoch, vocab=vocab)
    if log_path is not None:
        log_path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return est


# ---------------------------------------------------------------------------
# commands


def cmd_gen_toy(args) -> int:
    if args.images < 2:
        raise UsageError("--images must be at least 2 (CIDEr-D idf needs two images)")
    out = Path(args.out_dir)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    features, captions = toy_dataset(args.seed, args.images)
    write_features_jsonl(out / "features.jsonl", features.records)
    write_features_binary(out / "features.bin", features.records)
    write_captions(out / "captions.jsonl", captions.captions)
    SplitSpec(train=features.image_ids).save(out / "splits.json")
    cfg = desk_config()
    cfg.paths.features = str(out / "features.jsonl")
    cfg.paths.captions = str(out / "captions.jsonl")
    cfg.paths.splits = str(out / "splits.json")
    cfg.paths.checkpoint = str(out / "model.mctc")
    (out / "config.json").write_text(cfg.dumps() + "\n", encoding="utf-8")
    log.info("wrote %d toy images to %s", len(features), out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args)
    out = args.out or cfg.paths.checkpoint
    if not out:
        raise UsageError("no checkpoint path: pass --out or set paths.checkpoint")
    features, captions, splits = load_data(cfg)
    out = Path(out)
    est = fit_from_config(cfg, features, captions, splits, log_path=out.with_suffix(out.suffix + ".log"))
    est.save(out)
    if cfg.paths.vocab:
        est.vocab_.save(cfg.paths.vocab)
    final = est.history_[-1][1]
    log.info("trained %s for %d epochs, final loss %.6f -> %s", cfg.mode, cfg.train.epochs, final, out)
    return EXIT_OK


def cmd_caption(args) -> int:
    if args.beam < 1:
        raise UsageError("--beam must be >= 1")
    model, _ = load_checkpoint(args.checkpoint)
    features = read_features(args.features)
    if args.image_id not in features.records:
        raise DataError(f"unknown image id {args.image_id!r}")
    print(" ".join(model.caption(features[args.image_id], args.beam)))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    cfg = load_config(args.config, args)
    features, captions, splits = load_data(cfg)
    ids = splits.get(args.split)
    if not ids:
        raise DataError(f"split {args.split!r} is empty")
    report = evaluate(model, features, captions, ids, beam=args.beam)
    name = args.name or model.mode
    if args.format == "json":
        print(report.to_json(name))
    else:
        sys.stdout.write(format_table([(name, report)], "Model"))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.dims != "desk":
        raise UsageError("only --dims desk is supported")
    start = time.time()
    failed = 0
    for name, err in family_checks(args.seed, fault=args.inject_bug):
        ok = err < THRESHOLD
        failed += not ok
        print(f"{name}\t{err:.3e}\t{'PASS' if ok else 'FAIL'}")
    log.info("gradcheck finished in %.2fs, %d failing", time.time() - start, failed)
    return EXIT_NUMERIC if failed else EXIT_OK


def parse_depths(text: str) -> List[int]:
    try:
        depths = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--depths must be comma separated integers, got {text!r}") from None
    if not depths or min(depths) < 1:
        raise UsageError("--depths needs at least one positive depth")
    return depths


def ablate_depth(cfg: RunConfig, depths: Sequence[int], split: str = "train") -> str:
    features, captions, splits = load_data(cfg)
    ids = splits.get(split)
    if not ids:
        raise DataError(f"split {split!r} is empty")
    rows = []
    for depth in depths:
        dcfg = cfg.with_depth(depth)
        est = fit_from_config(dcfg, features, captions, splits)
        rows.append((depth, evaluate(est.model_, features, captions, ids)))
        log.info("depth %d done", depth)
    return format_table(rows, "Profundity")


def cmd_ablate_depth(args) -> int:
    cfg = load_config(args.config, args)
    table = ablate_depth(cfg, parse_depths(args.depths), args.split)
    sys.stdout.write(table)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mctcap", description="Multimodal transformer image captioning (MCT / ELMo-MCT).")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-toy", help="write the synthetic toy dataset")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--images", type=int, default=64)
    g.add_argument("--out-dir", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_toy)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config")
    t.add_argument("--out")
    t.add_argument("--mode", choices=("MCT", "ELMo-MCT"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--threads", type=int)
    t.add_argument("--features")
    t.add_argument("--captions")
    t.add_argument("--splits")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("caption", help="caption one image")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--features", required=True)
    c.add_argument("--image-id", required=True)
    c.add_argument("--beam", type=int, default=1)
    c.set_defaults(func=cmd_caption)

    e = sub.add_parser("evaluate", help="score a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--format", default="tsv", choices=("tsv", "json"))
    e.add_argument("--config")
    e.add_argument("--features")
    e.add_argument("--captions")
    e.add_argument("--splits")
    e.add_argument("--name")
    e.add_argument("--beam", type=int, default=1)
    e.set_defaults(func=cmd_evaluate)

    k = sub.add_parser("gradcheck", help="finite-difference check of every operation family")
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--dims", default="desk")
    k.add_argument("--inject-bug", nargs="?", const="matmul", default=None, metavar="OP",
                   help="negate the backward pass of OP (default matmul) to prove the check fails")
    k.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate-depth", help="train and score one model per depth")
    a.add_argument("--config")
    a.add_argument("--depths", default="2,4,6")
    a.add_argument("--split", default="train", choices=("train", "val", "test"))
    a.add_argument("--mode", choices=("MCT", "ELMo-MCT"))
    a.add_argument("--epochs", type=int)
    a.add_argument("--seed", type=int)
    a.add_argument("--threads", type=int)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate_depth)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"mctcap: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError, KeyError) as exc:
        print(f"mctcap: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"mctcap: error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
