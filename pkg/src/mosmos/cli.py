"""Command-line entry point.

Every subcommand exits 0 on success. Failures print one JSON object
``{"error": <kind>, "message": <text>}`` on stderr and exit nonzero.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig


class UsageError(ValueError):
    pass


class JsonArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _config(args):
    if getattr(args, "config", None):
        cfg = RunConfig.load(args.config)
    else:
        cfg = RunConfig.from_flat({})
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg.validate()


def _jsonl_logger(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fh = open(path, "a")

    def log_fn(rec):
        fh.write(json.dumps(rec) + "\n")
        fh.flush()

    return log_fn


def _load_masks(path):
    """Integer label maps from an ``.npy`` file or a dataset/blob directory."""
    from .corpus import load_dataset, read_array

    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    if (path / "manifest.json").exists():
        ds = load_dataset(path)
        if ds.masks is None:
            raise UsageError(f"dataset {path} has no masks")
        return ds.masks
    if (path / "masks.json").exists():
        return read_array(path, "masks")
    raise UsageError(f"no masks found at {path}")


# -- subcommands -----------------------------------------------------------------

def cmd_gen_corpus(args):
    from .corpus import save_dataset
    from .experiments import finetune_dataset, pretrain_dataset

    cfg = _config(args)
    if args.n is not None:
        if args.kind == "pretrain":
            cfg.data.pretrain_n = args.n
        else:
            cfg.data.finetune_n = args.n
    if args.dims:
        dims = tuple(int(d) for d in args.dims.split("x"))
        if args.kind == "pretrain":
            cfg.data.pretrain_dims = dims
        else:
            cfg.data.finetune_dims = dims
    if args.classes:
        cfg.finetune.class_names = json.loads(Path(args.classes).read_text())
        cfg.data.num_classes = len(cfg.finetune.class_names)
    ds = pretrain_dataset(cfg) if args.kind == "pretrain" else finetune_dataset(cfg)
    save_dataset(args.out, ds)
    return {"out": str(args.out), "n": len(ds), "splits": {k: len(v) for k, v in ds.manifest.splits.items()}}


def cmd_extract_tags(args):
    from .tagvocab import TagVocabulary, default_vocabulary, extract_tags_batch

    vocab = TagVocabulary.load(args.vocab) if args.vocab else default_vocabulary()
    src = Path(getattr(args, "in"))
    if src.suffix == ".jsonl":
        recs = [json.loads(line) for line in src.read_text().splitlines() if line.strip()]
        ids = [r.get("id", i) for i, r in enumerate(recs)]
        texts = [r["text"] for r in recs]
    else:
        texts = [line for line in src.read_text().splitlines() if line.strip()]
        ids = list(range(len(texts)))
    labels = extract_tags_batch(texts, vocab)
    with open(args.out, "w") as fh:
        for i, row in zip(ids, labels):
            fh.write(json.dumps({"id": i, "labels": [int(b) for b in row]}) + "\n")
    return {"out": str(args.out), "reports": len(texts), "tags": vocab.names}


def cmd_pretrain(args):
    from .corpus import load_dataset
    from .experiments import _snapshot, pretrain_dataset
    from .pretrain import pretrain_run

    cfg = _config(args)
    cfg.stage = "pretrain"
    out = _snapshot(args.out, cfg, {"data": str(args.data) if args.data else None})
    ds = load_dataset(args.data) if args.data else pretrain_dataset(cfg)
    records = pretrain_run(cfg, ds, out / "checkpoint", _jsonl_logger(out / "events.jsonl"))
    (out / "metrics.json").write_text(json.dumps({"history": records}, indent=2))
    return {"checkpoint": str(out / "checkpoint"), "final": records[-1]}


def cmd_finetune(args):
    from .corpus import load_dataset
    from .experiments import _snapshot, finetune_dataset
    from .finetune import finetune_run

    cfg = _config(args)
    cfg.stage = "finetune"
    if args.classes:
        cfg.finetune.class_names = json.loads(Path(args.classes).read_text())
    if args.label_ratio is not None:
        cfg.finetune.label_ratio = args.label_ratio
    cfg.validate()
    out = _snapshot(args.out, cfg, {"init": args.init, "data": str(args.data) if args.data else None})
    ds = load_dataset(args.data) if args.data else finetune_dataset(cfg)
    result, _ = finetune_run(cfg, ds, args.init, out, _jsonl_logger(out / "events.jsonl"))
    return {"out": str(out), "test": result["test"]}


def cmd_evaluate(args):
    from .metrics import evaluate_masks

    gt, pred = _load_masks(args.gt), _load_masks(args.pred)
    if args.classes:
        names = json.loads(Path(args.classes).read_text())
    else:
        names = [f"class{q}" for q in range(1, int(max(gt.max(), pred.max())) + 1)]
    spacing = [float(s) for s in args.spacing.split(",")] if args.spacing else None
    report = evaluate_masks(gt, pred, names, spacing).to_json()
    Path(args.out).write_text(json.dumps(report, indent=2))
    return {"out": str(args.out), "mean_dice": report["mean_dice"], "mean_hd95": report["mean_hd95"]}


def cmd_infer(args):
    import torch

    from .corpus import load_dataset, write_array
    from .finetune import predict_volumes
    from .metrics import evaluate_masks
    from .pretrain import images_to_tensor

    model, meta = _load_seg(args.ckpt)
    gt = None
    vol = Path(args.volume)
    if vol.suffix == ".npy":
        images = np.load(vol)
        if images.ndim == len(meta["crop"]) + 1:
            images = images[None]
    else:
        ds = load_dataset(vol)
        ids = ds.split(args.split) if args.split else list(range(len(ds)))
        images = ds.images[ids]
        gt = ds.masks[ids] if ds.masks is not None else None
    if args.gt:
        gt = _load_masks(args.gt)
    cf = RunConfig.from_flat(meta["config"], env={}).finetune
    overlap = args.overlap if args.overlap is not None else cf.overlap
    torch.set_num_threads(max(1, args.workers))
    pred = predict_volumes(model, images_to_tensor(images), model.crop, overlap, args.workers, cf.window_weighting)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_array(out, "pred", pred.astype(np.int64))
    summary = {"out": str(out), "n": int(len(pred))}
    if gt is not None:
        report = evaluate_masks(gt, pred, model.class_names).to_json()
        (out / "metrics.json").write_text(json.dumps(report, indent=2))
        summary["mean_dice"] = report["mean_dice"]
    return summary


def _load_seg(path):
    from .finetune import load_segmentation_model

    return load_segmentation_model(path)


def cmd_ablate(args):
    from .experiments import ablation_table, run_ablation

    cfg = _config(args)
    if args.label_ratio is not None:
        cfg.finetune.label_ratio = args.label_ratio
    rows = run_ablation(args.recipes, args.seeds, cfg, args.out, log_fn=_jsonl_logger(Path(args.out) / "events.jsonl"))
    table = ablation_table(rows)
    (Path(args.out) / "ablation.txt").write_text(table + "\n")
    print(table, file=sys.stderr)
    return {"out": str(args.out), "rows": rows}


def cmd_sweep_labels(args):
    from .experiments import run_label_ratio_sweep
    from .plotting import plot_label_ratio_curves

    cfg = _config(args)
    pretrained = {}
    for item in args.pretrained or []:
        seed, _, path = item.partition("=")
        pretrained[int(seed)] = path
    doc = run_label_ratio_sweep(args.ratios, args.seeds, cfg, args.out, pretrained,
                                _jsonl_logger(Path(args.out) / "events.jsonl"))
    plot = plot_label_ratio_curves(doc, Path(args.out) / "dice_vs_ratio.png")
    return {"out": str(args.out), "plot": str(plot), "ratios": doc["ratios"], "series": doc["series"]}


def cmd_plot(args):
    from .plotting import plot_attention_overlay, plot_label_ratio_curves

    if args.sweep:
        path = plot_label_ratio_curves(json.loads(Path(args.sweep).read_text()), args.out)
        return {"out": str(path)}
    if not (args.ckpt and args.data):
        raise UsageError("plot needs --sweep, or --ckpt with --data")
    import torch

    from .corpus import load_dataset
    from .pretrain import images_to_tensor

    model, _ = _load_seg(args.ckpt)
    ds = load_dataset(args.data)
    x = images_to_tensor(ds.images[args.index:args.index + 1])
    with torch.no_grad():
        maps = model(x)["y_pta"][0, 1:].numpy()
    mask = ds.masks[args.index] if ds.masks is not None else None
    path = plot_attention_overlay(ds.images[args.index, ..., 0], maps, model.class_names, args.out, mask)
    return {"out": str(path)}


# -- parser --------------------------------------------------------------------------

def build_parser():
    p = JsonArgumentParser(prog="mosmos", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=JsonArgumentParser)

    s = sub.add_parser("gen-corpus", help="generate a synthetic dataset")
    s.add_argument("--kind", choices=["pretrain", "finetune"], required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int)
    s.add_argument("--dims", help="e.g. 32x32 or 32x32x32")
    s.add_argument("--classes", help="JSON list of class names (finetune)")
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_gen_corpus)

    s = sub.add_parser("extract-tags", help="report text -> multi-hot tag labels")
    s.add_argument("--vocab")
    s.add_argument("--in", required=True, help="reports.jsonl or one report per line")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract_tags)

    s = sub.add_parser("pretrain", help="stage 1 training")
    s.add_argument("--data", help="dataset directory (generated from config when omitted)")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="stage 2 training")
    s.add_argument("--init", default="random", help="pretrain checkpoint directory or 'random'")
    s.add_argument("--data")
    s.add_argument("--classes")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--label-ratio", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("evaluate", help="Dice/HD95 of predicted masks")
    s.add_argument("--gt", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--classes")
    s.add_argument("--spacing", help="comma-separated per-axis spacing")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("infer", help="sliding-window segmentation")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--volume", required=True, help=".npy volume(s) or dataset directory")
    s.add_argument("--split")
    s.add_argument("--gt")
    s.add_argument("--overlap", type=float)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("ablate", help="module ablation recipes")
    s.add_argument("--recipes", nargs="+", default=["full", "no_irc", "no_prompt", "scratch"])
    s.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    s.add_argument("--label-ratio", type=float)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("sweep-labels", help="Dice vs labeled fraction for both inits")
    s.add_argument("--ratios", nargs="+", type=float, default=[0.25, 0.5, 0.75, 1.0])
    s.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    s.add_argument("--pretrained", nargs="*", help="SEED=CHECKPOINT_DIR pairs to reuse")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep_labels)

    s = sub.add_parser("plot", help="render curves or attention overlays")
    s.add_argument("--sweep", help="sweep.json from sweep-labels")
    s.add_argument("--ckpt", help="fine-tuned checkpoint directory")
    s.add_argument("--data", help="dataset directory")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
        result = args.func(args)
    except UsageError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as JSON
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(result, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
