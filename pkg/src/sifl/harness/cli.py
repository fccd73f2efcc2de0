"""``sifl`` command line: run, gen-patches, dump-embeddings, compare.

Exit status: 0 on success, 2 for usage or configuration errors, 1 when a
run fails part-way (logs written so far are kept).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from ..errors import FormatError, InvalidConfigError, SiflError
from ..nn import embed_batched, head, load_model
from ..patchgen import AugmentationConfig, PatchDataset, SourceImage, bundled_image, generate_patches
from ..pruning import confidence_score
from .config import ExperimentConfig
from .runner import compare_table, load_summary, resolve_output, run_experiment

USAGE_ERROR = 2
RUN_ERROR = 1


def _fail(msg: str, code: int) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def cmd_run(args) -> int:
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        overrides = list(args.set or [])
        if args.seeds:
            overrides.append(f"seeds=[{', '.join(map(str, args.seeds))}]")
        if args.rounds is not None:
            overrides.append(f"federation.rounds={args.rounds}")
        if args.output:
            overrides.append(f"output_dir={str(Path(args.output).resolve())!r}")
        if args.workers is not None:
            overrides.append(f"federation.workers={args.workers}")
        cfg = cfg.with_overrides(overrides).validate()
    except FileNotFoundError as exc:
        return _fail(str(exc), USAGE_ERROR)
    except InvalidConfigError as exc:
        return _fail(f"invalid config: {exc}", USAGE_ERROR)

    out = resolve_output(cfg)
    if out.exists() and any(out.iterdir()) and not args.force:
        return _fail(f"{out} is not empty; choose a fresh directory or pass --force", USAGE_ERROR)
    if args.dry_run:
        print(cfg.dumps(), end="")
        return 0
    try:
        run_experiment(cfg, out)
    except SiflError as exc:
        return _fail(f"run failed: {exc} (partial logs in {out})", RUN_ERROR)
    print(f"outputs: {out}")
    return 0


def cmd_gen_patches(args) -> int:
    if args.count < 1:
        return _fail("--count must be at least 1", USAGE_ERROR)
    if args.seed < 0:
        return _fail("--seed must be non-negative", USAGE_ERROR)
    try:
        img = SourceImage.from_png(args.image) if args.image else bundled_image()
        if args.config:
            cfg = ExperimentConfig.load(args.config)
            aug = cfg.augmentation()
        else:
            aug = AugmentationConfig(patch_size=args.patch_size)
        ds = generate_patches(img, args.count, args.seed, aug, workers=args.workers)
    except (InvalidConfigError, FileNotFoundError) as exc:
        return _fail(str(exc), USAGE_ERROR)
    except SiflError as exc:
        return _fail(str(exc), RUN_ERROR)
    if args.out:
        ds.save(args.out)
    print(f"content_hash={ds.content_hash()}")
    return 0


def cmd_dump_embeddings(args) -> int:
    try:
        model = load_model(args.checkpoint)
        ds = PatchDataset.load(args.patches)
    except (OSError, FormatError) as exc:
        return _fail(f"cannot read input: {exc}", USAGE_ERROR)
    x = ds.patches
    want = tuple(model.arch.input_shape)
    if tuple(x.shape[1:]) != want:
        return _fail(f"patches have shape {tuple(x.shape[1:])} but the model expects {want}", RUN_ERROR)
    z = embed_batched(model, x)
    logits = np.concatenate([head(model, z[i : i + 512]) for i in range(0, len(z), 512)])
    conf = confidence_score(model, logits=logits, mode=args.score_mode)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "pseudo_label", "confidence"] + [f"e{j}" for j in range(z.shape[1])])
        for i in range(len(x)):
            w.writerow([i, int(logits[i].argmax()), repr(float(conf[i]))] + [repr(float(v)) for v in z[i]])
    print(f"rows={len(x)} dims={z.shape[1]} out={args.out}")
    return 0


def cmd_compare(args) -> int:
    if len(args.runs) < 2:
        return _fail("compare needs at least two run directories", USAGE_ERROR)
    try:
        summaries = [load_summary(r) for r in args.runs]
    except (OSError, ValueError) as exc:
        return _fail(str(exc), USAGE_ERROR)
    rows = compare_table(summaries, [Path(r).name for r in args.runs])
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sifl", description="Single-image federated distillation experiments.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log each round")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a TOML config")
    run.add_argument("config", nargs="?", help="TOML file (defaults to the built-in toy config)")
    run.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. kmeans.k=64")
    run.add_argument("--seeds", type=int, nargs="+")
    run.add_argument("--rounds", type=int)
    run.add_argument("--workers", type=int)
    run.add_argument("--output", help="output directory (default: $SIFL_OUTPUT_ROOT/<name>)")
    run.add_argument("--force", action="store_true", help="allow a non-empty output directory")
    run.add_argument("--dry-run", action="store_true", help="validate and print the resolved config")
    run.set_defaults(func=cmd_run)

    gen = sub.add_parser("gen-patches", help="generate a patch container from one image")
    gen.add_argument("--image", help="PNG source (default: the bundled test image)")
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--patch-size", type=int, default=32)
    gen.add_argument("--config", help="take augmentation settings from this TOML config")
    gen.add_argument("--workers", type=int, default=1)
    gen.add_argument("--out", help="write the container here")
    gen.set_defaults(func=cmd_gen_patches)

    dump = sub.add_parser("dump-embeddings", help="write per-patch embeddings to CSV")
    dump.add_argument("--checkpoint", required=True)
    dump.add_argument("--patches", required=True)
    dump.add_argument("--out", required=True)
    dump.add_argument("--score-mode", choices=("softmax", "logit"), default="softmax")
    dump.set_defaults(func=cmd_dump_embeddings)

    cmp_ = sub.add_parser("compare", help="tabulate best accuracy and bytes across runs")
    cmp_.add_argument("runs", nargs="+", help="run output directories")
    cmp_.set_defaults(func=cmd_compare)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
