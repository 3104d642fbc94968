"""Experiment recipes: module ablations and label-ratio sweeps.

Every run directory holds ``config.json`` (flat snapshot, seed included),
``version.json`` (code version) and ``metrics.json``. Re-running
:func:`rerun` on such a directory repeats the run from the snapshot alone.
"""

import copy
import json
import subprocess
from pathlib import Path

from . import __version__
from .config import RunConfig
from .corpus import build_finetune_dataset, build_pretrain_dataset, label_subset
from .finetune import finetune_run
from .pretrain import pretrain_run

RECIPES = ("full", "no_irc", "no_prompt", "scratch")
DEFAULT_RATIOS = (0.25, 0.5, 0.75, 1.0)


class RecipeError(ValueError):
    pass


def code_version():
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
            capture_output=True, text=True, timeout=10,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _snapshot(run_dir, cfg, extra=None):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.json")
    info = {"code_version": code_version(), "seed": cfg.seed, **(extra or {})}
    (run_dir / "version.json").write_text(json.dumps(info, indent=2))
    return run_dir


def pretrain_dataset(cfg):
    d = cfg.data
    return build_pretrain_dataset(d.pretrain_n, dims=(*d.pretrain_dims, d.channels), seed=cfg.seed,
                                  ratios=d.pretrain_split)


def finetune_dataset(cfg):
    d = cfg.data
    return build_finetune_dataset(d.finetune_n, tuple(d.finetune_dims), d.num_classes, cfg.seed,
                                  class_names=cfg.finetune.class_names, ratios=d.finetune_split,
                                  channels=d.channels)


def run_pretrain(cfg, run_dir):
    """Generate the corpus for ``cfg.seed`` and run stage 1; checkpoint in ``run_dir/checkpoint``."""
    cfg = copy.deepcopy(cfg)
    cfg.stage = "pretrain"
    run_dir = _snapshot(run_dir, cfg)
    records = pretrain_run(cfg, pretrain_dataset(cfg), run_dir / "checkpoint")
    (run_dir / "metrics.json").write_text(json.dumps({"history": records}, indent=2))
    return run_dir / "checkpoint", records


def run_finetune(cfg, run_dir, init="random"):
    """Stage 2 on the synthetic segmentation corpus for ``cfg.seed``."""
    cfg = copy.deepcopy(cfg)
    cfg.stage = "finetune"
    run_dir = _snapshot(run_dir, cfg, {"init": str(init)})
    result, _ = finetune_run(cfg, finetune_dataset(cfg), init, run_dir)
    return result


def rerun(run_dir, out_dir):
    """Repeat a recorded run from its config snapshot; returns the new metrics."""
    run_dir = Path(run_dir)
    cfg = RunConfig.load(run_dir / "config.json", env={})
    info = json.loads((run_dir / "version.json").read_text())
    if cfg.stage == "pretrain":
        return {"history": run_pretrain(cfg, out_dir)[1]}
    return run_finetune(cfg, out_dir, info.get("init", "random"))


def recipe_config(cfg, recipe):
    if recipe not in RECIPES:
        raise RecipeError(f"unknown recipe {recipe!r}; expected one of {', '.join(RECIPES)}")
    cfg = copy.deepcopy(cfg)
    if recipe == "no_irc":
        cfg.pretrain.use_irc = False
    elif recipe == "no_prompt":
        cfg.pretrain.use_prompt = False
    return cfg


def run_ablation(recipes, seeds, cfg, out_dir, pretrained=None, log_fn=None):
    """Pretrain + finetune per recipe and seed; returns table rows and writes ``ablation.json``.

    ``pretrained`` maps seed -> an existing stage-1 checkpoint for the ``full`` recipe.
    """
    recipes = list(recipes)
    for r in recipes:
        recipe_config(cfg, r)
    out_dir = Path(out_dir)
    rows = []
    for seed in seeds:
        for recipe in recipes:
            c = recipe_config(cfg, recipe)
            c.seed = seed
            run = out_dir / f"{recipe}_seed{seed}"
            init = "random"
            if recipe == "full" and pretrained and seed in pretrained:
                init = pretrained[seed]
            elif recipe != "scratch":
                init, _ = run_pretrain(c, run / "pretrain")
            result = run_finetune(c, run / "finetune", init)
            row = {"recipe": recipe, "seed": seed, "mean_dice": result["test"]["mean_dice"],
                   "mean_hd95": result["test"]["mean_hd95"], "label_ratio": c.finetune.label_ratio}
            rows.append(row)
            if log_fn:
                log_fn(row)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.json").write_text(json.dumps({"recipes": recipes, "rows": rows}, indent=2))
    return rows


def ablation_table(rows):
    """Plain-text table: one line per recipe with per-seed and mean Dice."""
    recipes = list(dict.fromkeys(r["recipe"] for r in rows))
    seeds = sorted({r["seed"] for r in rows})
    lines = ["recipe     " + " ".join(f"seed{s:<5}" for s in seeds) + " mean"]
    for rec in recipes:
        vals = {r["seed"]: r["mean_dice"] for r in rows if r["recipe"] == rec}
        cells = " ".join(f"{vals[s]:.4f}   " if s in vals else "   -     " for s in seeds)
        mean = sum(vals.values()) / len(vals)
        lines.append(f"{rec:<10} {cells} {mean:.4f}")
    return "\n".join(lines)


def run_label_ratio_sweep(ratios, seeds, cfg, out_dir, pretrained=None, log_fn=None):
    """Fine-tune both inits on nested labeled subsets.

    ``pretrained`` maps seed -> stage-1 checkpoint; missing seeds are
    pretrained here. Writes and returns ``sweep.json`` content:
    ``{"ratios": [...], "series": {"random": [[dice per seed] per ratio], "pretrained": ...}}``.
    """
    ratios = [float(r) for r in ratios]
    for r in ratios:
        if not 0.0 < r <= 1.0:
            raise RecipeError(f"label ratio must be in (0, 1], got {r}")
    out_dir = Path(out_dir)
    pretrained = dict(pretrained or {})
    series = {"random": [[] for _ in ratios], "pretrained": [[] for _ in ratios]}
    for seed in seeds:
        c = copy.deepcopy(cfg)
        c.seed = seed
        if seed not in pretrained:
            pretrained[seed], _ = run_pretrain(c, out_dir / f"pretrain_seed{seed}")
        for i, ratio in enumerate(ratios):
            c.finetune.label_ratio = ratio
            for name, init in (("random", "random"), ("pretrained", pretrained[seed])):
                result = run_finetune(c, out_dir / f"{name}_r{ratio:g}_seed{seed}", init)
                series[name][i].append(result["test"]["mean_dice"])
                if log_fn:
                    log_fn({"init": name, "ratio": ratio, "seed": seed, "mean_dice": result["test"]["mean_dice"]})
    doc = {"ratios": ratios, "seeds": list(seeds), "series": series}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "sweep.json").write_text(json.dumps(doc, indent=2))
    return doc


def nested_subsets(train_ids, ratios, seed):
    """The labeled subsets a sweep uses, smallest ratio first."""
    return [label_subset(train_ids, r, seed) for r in sorted(ratios)]
