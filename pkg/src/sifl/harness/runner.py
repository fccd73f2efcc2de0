"""Turn an ExperimentConfig into data, run it per seed, and write outputs."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..data import dirichlet_partition, load_png_dir, split_dataset, synth_dataset
from ..errors import InvalidConfigError
from ..federation import ClientSpec, Environment, RoundRecord, RunResult, derive_seed, run_federation
from ..nn import save_model
from ..patchgen import PatchDataset, SourceImage, bundled_image, generate_patches
from .config import ExperimentConfig

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "SIFL_OUTPUT_ROOT"
BYTE_KEYS = ("params_up", "logits_up", "params_down", "indices_down")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def resolve_output(cfg: ExperimentConfig) -> Path:
    if cfg.output_dir:
        out = Path(cfg.output_dir)
        return out if out.is_absolute() else output_root() / out
    return output_root() / cfg.name


@dataclass
class Prepared:
    env: Environment
    patches: PatchDataset | None
    source: SourceImage | None


def prepare(cfg: ExperimentConfig, seed: int) -> Prepared:
    """Build datasets, partition, clients and distillation pool for one seed."""
    d, p, src = cfg.dataset, cfg.partition, cfg.source
    montage = None
    if d.kind == "synthetic":
        train, montage = synth_dataset(
            d.classes,
            d.per_class,
            d.image_size,
            d.separation,
            seed=seed,
            channels=d.channels,
            montage_grid=src.montage_grid,
            montage_tile=src.montage_tile,
            montage_blank=src.montage_blank,
            name="train",
        )
        test, _ = synth_dataset(
            d.classes,
            d.test_per_class,
            d.image_size,
            d.separation,
            seed=derive_seed(seed, 0x7E57) % 2**32,
            palette_seed=seed,
            channels=d.channels,
            montage_grid=1,
            name="test",
        )
    else:
        train = load_png_dir(d.path, name="train")
        test = load_png_dir(d.test_path, num_classes=train.num_classes, name="test")

    patches = None
    source = None
    if src.kind == "samples":
        if d.kind == "synthetic":
            extra, _ = synth_dataset(
                d.classes,
                math.ceil(src.patches / d.classes),
                d.image_size,
                d.separation,
                seed=derive_seed(seed, 0x5A3) % 2**32,
                palette_seed=seed,
                channels=d.channels,
                montage_grid=1,
            )
            pool = extra.inputs[: src.patches]
        else:
            if src.patches >= len(train):
                raise InvalidConfigError("sample subset must be smaller than the training set", "source.patches")
            train, carved = split_dataset(train, src.patches / len(train), seed)
            pool = carved.inputs
    else:
        if src.kind == "montage":
            source = montage
        elif src.kind == "bundled":
            source = bundled_image()
        else:
            source = SourceImage.from_png(src.image)
        aug = cfg.augmentation()
        patches = generate_patches(source, src.patches, seed, aug, workers=cfg.federation.workers)
        pool = patches.patches
        if pool.shape[1] != train.inputs.shape[1]:
            if pool.shape[1] == 3 and train.inputs.shape[1] == 1:
                pool = pool.mean(axis=1, keepdims=True)
            else:
                raise InvalidConfigError("source channels do not match the dataset", "source.kind")

    part = dirichlet_partition(train.labels, p.clients, p.alpha, seed)
    archs = cfg.client_architectures()
    clients = tuple(ClientSpec(i, a, shard) for i, (a, shard) in enumerate(zip(archs, part.clients)))
    return Prepared(Environment(clients, train, np.ascontiguousarray(pool), test), patches, source)


# --- outputs ------------------------------------------------------------------------


def round_columns(groups: list[str]) -> list[str]:
    cols = ["seed", "round", "fedavg_init", "sampled", "selected", "macro_acc"]
    cols += [f"acc_{g}" for g in groups] + [f"pre_acc_{g}" for g in groups]
    cols += [f"steps_{g}" for g in groups] + list(BYTE_KEYS) + ["wall_time_s"]
    return cols


def round_row(seed: int, rec: RoundRecord) -> dict:
    row = {
        "seed": seed,
        "round": rec.round,
        "fedavg_init": int(rec.fedavg_init),
        "sampled": " ".join(map(str, rec.sampled)),
        "selected": len(rec.selected),
        "macro_acc": f"{rec.macro_accuracy:.6f}",
        "wall_time_s": f"{rec.wall_time:.3f}",
    }
    for g in rec.accuracy:
        row[f"acc_{g}"] = f"{rec.accuracy[g]:.6f}"
        row[f"pre_acc_{g}"] = f"{rec.accuracy_pre[g]:.6f}"
        row[f"steps_{g}"] = rec.distill_steps[g]
    row.update({k: rec.bytes[k] for k in BYTE_KEYS})
    return row


def plot_accuracy(series: dict[str, list[float]], path: Path, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, ys in series.items():
        ax.plot(range(1, len(ys) + 1), ys, marker=".", label=label)
    ax.set_xlabel("round")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def mean_std(values: list[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


def run_seed(cfg: ExperimentConfig, seed: int, out: Path) -> RunResult:
    out.mkdir(parents=True, exist_ok=True)
    prep = prepare(cfg, seed)
    fcfg = cfg.federation_config(seed)
    groups = sorted(prep.env.groups())
    if prep.patches is not None:
        prep.patches.save(out / "patches.sifl")
    (out / "partition.json").write_text(
        json.dumps({"clients": [{"id": c.id, "arch": c.arch, "size": c.size} for c in prep.env.clients]}, indent=1)
    )

    log_path = out / "log.json"
    entries: list[dict] = []
    models = out / "models"
    every = cfg.federation.checkpoint_every
    with open(out / "rounds.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=round_columns(groups))
        writer.writeheader()

        def on_round(rec: RoundRecord, state) -> None:
            writer.writerow(round_row(seed, rec))
            fh.flush()
            entries.append(rec.to_dict())
            log_path.write_text(json.dumps({"seed": seed, "config": cfg.to_dict(), "rounds": entries}, indent=1))
            if every and rec.round % every == 0:
                snap = models / f"round_{rec.round:03d}"
                snap.mkdir(parents=True, exist_ok=True)
                for g, m in state.models.items():
                    save_model(m, snap / f"{g}.sifl")

        result = run_federation(prep.env, fcfg, on_round)

    models.mkdir(exist_ok=True)
    for g, m in result.state.models.items():
        save_model(m, models / f"{g}.sifl")
    series = {"macro": [r.macro_accuracy for r in result.records]}
    if len(groups) > 1:
        series.update({g: [r.accuracy[g] for r in result.records] for g in groups})
    plot_accuracy(series, out / "accuracy.svg", f"{cfg.name} seed {seed}")
    return result


def run_experiment(cfg: ExperimentConfig, out: Path, echo=print) -> dict:
    """Run every seed under ``out`` and write the summary files."""
    cfg.validate()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(cfg.dumps(), encoding="utf-8")
    rows = []
    curves = {}
    for seed in cfg.seeds:
        result = run_seed(cfg, seed, out / f"seed_{seed}")
        best_round = max(result.records, key=lambda r: r.macro_accuracy).round
        row = {
            "seed": seed,
            "best_macro_acc": result.best_macro,
            "best_round": best_round,
            "baseline_macro_acc": result.baseline_macro,
            **{f"best_acc_{g}": v for g, v in result.best_per_group().items()},
            **result.total_bytes(),
        }
        rows.append(row)
        curves[f"seed {seed}"] = [r.macro_accuracy for r in result.records]
        echo(f"seed={seed} best_macro_acc={result.best_macro:.4f} round={best_round}")

    mean, std = mean_std([r["best_macro_acc"] for r in rows])
    summary = {"name": cfg.name, "seeds": list(cfg.seeds), "best_macro_acc_mean": mean, "best_macro_acc_std": std}
    summary["bytes_mean"] = {k: float(np.mean([r[k] for r in rows])) for k in BYTE_KEYS}
    summary["runs"] = rows
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    with open(out / "summary.csv", "w", newline="") as fh:
        cols = list(rows[0])
        writer = csv.writer(fh)
        writer.writerow(cols)
        for r in rows:
            writer.writerow([f"{r[c]:.6f}" if isinstance(r[c], float) else r[c] for c in cols])
        writer.writerow(["mean±std", f"{mean:.6f}±{std:.6f}"] + [""] * (len(cols) - 2))
    plot_accuracy(curves, out / "accuracy.svg", f"{cfg.name}: macro accuracy")
    echo(f"best_macro_acc={mean:.4f}" + (f" ± {std:.4f}" if len(rows) > 1 else ""))
    return summary


def load_summary(path) -> dict:
    p = Path(path)
    p = p / "summary.json" if p.is_dir() else p
    if not p.is_file():
        raise FileNotFoundError(f"no summary.json under {path}")
    return json.loads(p.read_text())


def compare_table(summaries: list[dict], labels: list[str] | None = None) -> list[list[str]]:
    head = ["run", "seeds", "best_macro_acc"] + list(BYTE_KEYS)
    rows = [head]
    for i, s in enumerate(summaries):
        rows.append(
            [
                labels[i] if labels else s["name"],
                str(len(s["seeds"])),
                f"{s['best_macro_acc_mean']:.4f} ± {s['best_macro_acc_std']:.4f}",
            ]
            + [str(int(s["bytes_mean"][k])) for k in BYTE_KEYS]
        )
    return rows
