"""Command-line entry point: synth, train, eval, ablate, retrieve, export-embeddings."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import datamodel as dm
from . import encoders as enc_mod
from . import margin, retrieval, training
from .config import RunConfig, load_config

logger = logging.getLogger("triretrieval")

KS = (1, 5, 10)
MODULE_ABLATIONS = (
    # (label, text, sketch, mcfa, ckfso, cldre)
    ("no-text", False, True, True, True, True),
    ("no-sketch", True, False, True, True, True),
    ("no-mcfa", True, True, False, True, True),
    ("no-ckfso", True, True, True, False, True),
    ("no-cldre", True, True, True, True, False),
    ("full", True, True, True, True, True),
)
ORDER_SWEEP = ("IST", "ITS", "TSI", "TIS", "STI", "SIT")


class UsageError(ValueError):
    pass


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    dm.atomic_write(path, buf.getvalue())


def _fmt(x: float) -> str:
    return repr(float(x))


def print_table(header: Sequence[str], rows: Sequence[Sequence], file=None) -> None:
    file = file or sys.stdout
    cells = [[str(h) for h in header]] + [[f"{c:.4f}" if isinstance(c, float) else str(c) for c in r]
                                          for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    for r in cells:
        print("  ".join(c.rjust(w) for c, w in zip(r, widths)), file=file)


# --- data ------------------------------------------------------------------

def synth_table(cfg: RunConfig) -> dm.DatasetTable:
    table = dm.synthesize_dataset(cfg.synth_config())
    train, test = dm.split(table, cfg["data.test_fraction"], cfg.seed)
    return dm.merge(train, test)


def load_data(cfg: RunConfig) -> tuple[dm.DatasetTable, dm.DatasetTable]:
    """Train/test tables from the configured manifest, or a synthetic dataset."""
    if cfg["data.manifest"]:
        table = dm.load_manifest(cfg["data.manifest"])
        if table.splits() == {"train", "test"}:
            return table.where_split("train"), table.where_split("test")
        return dm.split(table, cfg["data.test_fraction"], cfg.seed)
    table = synth_table(cfg)
    return table.where_split("train"), table.where_split("test")


def table_for_split(table: dm.DatasetTable, which: str) -> dm.DatasetTable:
    return table if which == "all" else table.where_split(which)


# --- commands ----------------------------------------------------------------

def cmd_synth(cfg: RunConfig, out_path: Path) -> dm.DatasetTable:
    table = synth_table(cfg)
    dm.write_manifest(table, out_path)
    return table


def _recall_row(recall: dict[int, float]) -> list[float]:
    return [recall[k] for k in KS]


def cmd_train(cfg: RunConfig, out_dir: Path) -> tuple[training.Model, list[training.TrainReport]]:
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test = load_data(cfg)
    tcfg = cfg.train_config()
    dm.atomic_write(out_dir / "config.yaml", cfg.to_yaml())

    def save_stage(i, stage, model, report):
        path = out_dir / f"stage{i + 1}_{stage.name}.ckpt"
        enc_mod.save_checkpoint(path, model.encoders, model.centers(), {"stage": i, "name": stage.name})
        logger.info("stage %d (%s) done, fused R@1 %.4f", i + 1, stage.name,
                    report.recall.get("fused", {}).get(1, float("nan")))

    model, reports = training.run_pipeline(cfg.plan(), train, tcfg, cfg.seed, eval_table=test,
                                           on_stage_end=save_stage)
    meta = {"order": cfg.plan().order, "seed": cfg.seed, "query": list(tcfg.query_modalities)}
    enc_mod.save_checkpoint(out_dir / "model.ckpt", model.encoders, model.centers(), meta)

    # timings live in their own file so the loss/stage reports stay bit-reproducible
    loss_rows, time_rows = [], []
    for r in reports:
        for e in r.epochs:
            loss_rows.append([e.stage + 1, e.stage_name, e.epoch + 1,
                              _fmt(e.aaml), _fmt(e.infonce), _fmt(e.triplet), _fmt(e.total)])
            time_rows.append([e.stage + 1, e.stage_name, e.epoch + 1, f"{e.elapsed:.6f}"])
    write_csv(out_dir / "losses.csv", ["stage", "modality", "epoch", "aaml", "infonce", "triplet", "total"],
              loss_rows)
    write_csv(out_dir / "timing.csv", ["stage", "modality", "epoch", "seconds"], time_rows)

    stage_rows = []
    for r in reports:
        row = [r.stage + 1, r.stage_name] + [r.checksums[m] for m in dm.MODALITIES]
        for mask in ("fused", "sketch", "text"):
            row += [_fmt(x) for x in _recall_row(r.recall[mask])]
        stage_rows.append(row)
    header = ["stage", "modality"] + [f"checksum_{m}" for m in dm.MODALITIES]
    header += [f"{mask}_R@{k}" for mask in ("fused", "sketch", "text") for k in KS]
    write_csv(out_dir / "stages.csv", header, stage_rows)

    if cfg["output.plots"]:
        plot_losses(reports, out_dir / "losses.png")
    return model, reports


def plot_losses(reports: list[training.TrainReport], path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    x = 0
    for r in reports:
        xs = np.arange(x, x + len(r.epochs)) + 1
        ax.plot(xs, [e.total for e in r.epochs], label=f"stage {r.stage + 1}: {r.stage_name}")
        x += len(r.epochs)
    ax.set_xlabel("epoch")
    ax.set_ylabel("total loss")
    ax.legend()
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="png")
    plt.close(fig)
    dm.atomic_write(path, buf.getvalue())


def _load_model(checkpoint: Path) -> training.Model:
    encoders, centers, _ = enc_mod.load_checkpoint(checkpoint)
    missing = set(dm.MODALITIES) - set(encoders)
    if missing:
        raise ValueError(f"{checkpoint}: missing encoders {sorted(missing)}")
    return training.Model(encoders, {k: margin.CenterBank(v) for k, v in centers.items()})


def _check_dims(model: training.Model, table: dm.DatasetTable) -> None:
    for m, d in zip(dm.MODALITIES, table.dims):
        if model.encoders[m].input_dim != d:
            raise enc_mod.ShapeError(f"{m} encoder expects {model.encoders[m].input_dim}-dim views, "
                                     f"manifest has {d}")


def cmd_eval(checkpoint: Path, manifest: Path, masks: Sequence[str] = ("fused", "sketch", "text"),
             split: str = "test") -> list[list]:
    model = _load_model(checkpoint)
    table = dm.load_manifest(manifest)
    _check_dims(model, table)
    table = table_for_split(table, split)
    recall = training.evaluate(model, table, masks, KS)
    return [[mask] + _recall_row(recall[mask]) for mask in masks]


def _recall_for(model: training.Model, table: dm.DatasetTable, mods: Sequence[str]) -> list[float]:
    gallery = retrieval.GalleryIndex.build(enc_mod.encode(model.encoders["image"], table.views("image")),
                                           table.ids)
    q = training.query_features(model, table, tuple(mods))
    return _recall_row(retrieval.recall_table(q, gallery, table.ids, KS))


def cmd_ablate(cfg: RunConfig, sweep: str) -> tuple[list[str], list[list]]:
    train, test = load_data(cfg)
    splits = (("test", test), ("train", train))
    metric_cols = [f"{s}_R@{k}" for s, _ in splits for k in KS]

    def run(run_cfg: RunConfig) -> list[float]:
        model, _ = training.run_pipeline(run_cfg.plan(), train, run_cfg.train_config(), run_cfg.seed)
        mods = run_cfg.query_modalities()
        return [x for _, tbl in splits for x in _recall_for(model, tbl, mods)]

    if sweep == "order":
        rows = [[" -> ".join(order)] + run(cfg.with_overrides(**{"mcfa.order": order, "mcfa.enabled": True}))
                for order in ORDER_SWEEP]
        return ["order"] + metric_cols, rows
    if sweep == "modules":
        rows = []
        for label, te, sh, mcfa, ckfso, cldre in MODULE_ABLATIONS:
            run_cfg = cfg.with_overrides(**{"query.text": te, "query.sketch": sh, "mcfa.enabled": mcfa,
                                            "ckfso.enabled": ckfso, "cldre.enabled": cldre})
            flags = [int(te), int(sh), int(mcfa), int(ckfso), int(cldre)]
            rows.append([label] + flags + run(run_cfg))
        return ["setting", "text", "sketch", "mcfa", "ckfso", "cldre"] + metric_cols, rows
    raise UsageError(f"unknown sweep {sweep!r}; expected 'order' or 'modules'")


def parse_vector(text: str, dim: int, what: str) -> np.ndarray:
    try:
        vec = np.array([float(x) for x in text.replace(",", " ").split()], dtype=np.float64)
    except ValueError:
        raise UsageError(f"--{what}: not a list of numbers") from None
    if vec.size != dim:
        raise UsageError(f"--{what}: expected {dim} values, got {vec.size}")
    if not np.all(np.isfinite(vec)):
        raise UsageError(f"--{what}: non-finite value")
    return vec


def cmd_retrieve(checkpoint: Path, manifest: Path, sketch: str | None, text: str | None, k: int,
                 split: str = "all") -> list[tuple[int, float]]:
    model = _load_model(checkpoint)
    table = table_for_split(dm.load_manifest(manifest), split)
    _check_dims(model, table)
    if sketch is None and text is None:
        raise UsageError("give --sketch, --text or both")
    parts = []
    for name, raw in (("sketch", sketch), ("text", text)):
        if raw is not None:
            vec = parse_vector(raw, model.encoders[name].input_dim, name)
            parts.append(enc_mod.encode(model.encoders[name], vec[None, :]))
    query = parts[0] if len(parts) == 1 else retrieval.fuse(*parts)
    gallery = retrieval.GalleryIndex.build(enc_mod.encode(model.encoders["image"], table.views("image")),
                                           table.ids)
    if not 1 <= k <= len(gallery):
        raise UsageError(f"-k must lie in [1, {len(gallery)}]")
    res = retrieval.top_k(retrieval.score(query, gallery), k, gallery.ids)
    return [(int(i), float(s)) for i, s in zip(res.ids[0], res.scores[0])]


def cmd_export_embeddings(checkpoint: Path, manifest: Path, modality: str, path: Path,
                          split: str = "all") -> int:
    model = _load_model(checkpoint)
    table = table_for_split(dm.load_manifest(manifest), split)
    _check_dims(model, table)
    mods = training.EVAL_MASKS.get(modality, (modality,))
    feats = (enc_mod.encode(model.encoders["image"], table.views("image")) if modality == "image"
             else training.query_features(model, table, mods))
    retrieval.export_embeddings(path, feats.values, table.ids, {"modality": modality})
    return len(table)


# --- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand's defaults from clobbering flags given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", type=Path, help="YAML file with dotted config keys")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", type=Path, help="output directory (overrides output.dir)")
    common.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("-v", "--verbose", action="count")

    parser = argparse.ArgumentParser(prog="triretrieval", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic manifest")
    p.add_argument("--manifest", type=Path, help="output path (default <out>/manifest.jsonl)")

    sub.add_parser("train", parents=[common], help="run the staged training pipeline")

    p = sub.add_parser("eval", parents=[common], help="Recall@1/5/10 per query modality")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--mask", choices=["fused", "sketch", "text", "all"], default="all")
    p.add_argument("--split", choices=["train", "test", "all"], default="test")

    p = sub.add_parser("ablate", parents=[common], help="stage-order or module ablation sweep")
    p.add_argument("--sweep", choices=["order", "modules"], required=True)

    p = sub.add_parser("retrieve", parents=[common], help="rank a gallery for one query")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True, help="gallery manifest")
    p.add_argument("--sketch", help="sketch view, comma or space separated")
    p.add_argument("--text", help="text view, comma or space separated")
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--split", choices=["train", "test", "all"], default="all")

    p = sub.add_parser("export-embeddings", parents=[common], help="write embeddings in binary form")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--modality", choices=["image", "sketch", "text", "fused"], default="image")
    p.add_argument("--path", type=Path, required=True)
    p.add_argument("--split", choices=["train", "test", "all"], default="all")
    return parser


def _run_config(args) -> RunConfig:
    extra = {}
    if getattr(args, "seed", None) is not None:
        extra["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        extra["output.dir"] = str(args.out)
    return load_config(getattr(args, "config", None), getattr(args, "overrides", []), extra)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(getattr(args, "verbose", 0), 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _run_config(args)
        out = Path(cfg["output.dir"])
        if args.command == "synth":
            path = args.manifest or out / "manifest.jsonl"
            table = cmd_synth(cfg, path)
            print(f"wrote {len(table)} samples to {path}")
        elif args.command == "train":
            _, reports = cmd_train(cfg, out)
            rows = [[mask] + _recall_row(reports[-1].recall[mask]) for mask in ("fused", "sketch", "text")]
            print_table(["query", "R@1", "R@5", "R@10"], rows)
            print(f"checkpoints and reports in {out}")
        elif args.command == "eval":
            masks = ("fused", "sketch", "text") if args.mask == "all" else (args.mask,)
            rows = cmd_eval(args.checkpoint, args.manifest, masks, args.split)
            header = ["query", "R@1", "R@5", "R@10"]
            write_csv(out / "eval.csv", header, [[r[0]] + [_fmt(x) for x in r[1:]] for r in rows])
            print_table(header, rows)
        elif args.command == "ablate":
            header, rows = cmd_ablate(cfg, args.sweep)
            write_csv(out / f"ablate_{args.sweep}.csv", header,
                      [[_fmt(c) if isinstance(c, float) else c for c in r] for r in rows])
            print_table(header, rows)
        elif args.command == "retrieve":
            hits = cmd_retrieve(args.checkpoint, args.manifest, args.sketch, args.text, args.k, args.split)
            print_table(["rank", "instance_id", "score"], [[i + 1, iid, s] for i, (iid, s) in enumerate(hits)])
        elif args.command == "export-embeddings":
            n = cmd_export_embeddings(args.checkpoint, args.manifest, args.modality, args.path, args.split)
            print(f"wrote {n} {args.modality} embeddings to {args.path}")
    except UsageError as exc:
        parser.error(str(exc))
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
