import json

import numpy as np
import pytest

from mosmos.cli import main
from mosmos.config import RunConfig
from mosmos.corpus import load_dataset, read_array
from mosmos.experiments import RecipeError, ablation_table, nested_subsets, recipe_config, run_label_ratio_sweep


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def tiny_config(tmp_path):
    cfg = RunConfig()
    m = cfg.model
    m.conv_widths = (4, 8)
    m.embed_dim = m.text_dim = 8
    m.text_layers = m.decoder_layers = 1
    m.text_heads = m.decoder_heads = m.pool_heads = 2
    cfg.data.pretrain_n = 40
    cfg.data.finetune_n = 20
    cfg.data.num_classes = 2
    cfg.pretrain.epochs = 1
    cfg.pretrain.batch_size = 16
    cfg.finetune.epochs = 2
    cfg.finetune.val_every = 1
    path = tmp_path / "cfg.json"
    cfg.save(path)
    return path


def test_gen_corpus_and_extract_tags(tmp_path, capsys):
    code, out, _ = run(["gen-corpus", "--kind", "pretrain", "--n", 30, "--out", tmp_path / "pre", "--seed", 3], capsys)
    assert code == 0 and json.loads(out)["n"] == 30
    ds = load_dataset(tmp_path / "pre")
    assert (tmp_path / "pre" / "tags.json").exists()
    code, out, _ = run(["extract-tags", "--vocab", tmp_path / "pre" / "tags.json", "--in", tmp_path / "pre" / "reports.jsonl",
                        "--out", tmp_path / "labels.jsonl"], capsys)
    assert code == 0
    rows = [json.loads(line) for line in (tmp_path / "labels.jsonl").read_text().splitlines()]
    np.testing.assert_array_equal(np.array([r["labels"] for r in rows]), ds.labels)


def test_gen_finetune_3d(tmp_path, capsys):
    code, _, _ = run(["gen-corpus", "--kind", "finetune", "--n", 4, "--dims", "16x16x16", "--out", tmp_path], capsys)
    assert code == 0
    assert load_dataset(tmp_path).masks.shape == (4, 16, 16, 16)


def test_pipeline_finetune_infer_evaluate_plot(tmp_path, capsys, tiny_config):
    code, out, err = run(["pretrain", "--config", tiny_config, "--out", tmp_path / "pre"], capsys)
    assert code == 0, err
    ckpt = json.loads(out)["checkpoint"]
    for name in ("config.json", "version.json", "metrics.json", "events.jsonl"):
        assert (tmp_path / "pre" / name).exists()

    run(["gen-corpus", "--kind", "finetune", "--config", tiny_config, "--out", tmp_path / "ft"], capsys)
    (tmp_path / "classes.json").write_text(json.dumps(["liver", "spleen"]))
    code, out, err = run(["finetune", "--init", ckpt, "--data", tmp_path / "ft", "--classes", tmp_path / "classes.json",
                          "--config", tiny_config, "--out", tmp_path / "run"], capsys)
    assert code == 0, err
    assert json.loads((tmp_path / "run" / "version.json").read_text())["init"] == ckpt

    code, out, err = run(["infer", "--ckpt", tmp_path / "run" / "checkpoint", "--volume", tmp_path / "ft",
                          "--split", "test", "--out", tmp_path / "pred"], capsys)
    assert code == 0, err
    pred = read_array(tmp_path / "pred", "pred")
    assert (tmp_path / "pred" / "metrics.json").exists()

    ds = load_dataset(tmp_path / "ft")
    np.save(tmp_path / "gt.npy", ds.masks[ds.split("test")])
    np.save(tmp_path / "pred.npy", pred)
    code, out, err = run(["evaluate", "--gt", tmp_path / "gt.npy", "--pred", tmp_path / "pred.npy",
                          "--classes", tmp_path / "classes.json", "--out", tmp_path / "m.json"], capsys)
    assert code == 0, err
    via_infer = json.loads((tmp_path / "pred" / "metrics.json").read_text())
    assert json.loads((tmp_path / "m.json").read_text())["mean_dice"] == via_infer["mean_dice"]

    code, out, err = run(["plot", "--ckpt", tmp_path / "run" / "checkpoint", "--data", tmp_path / "ft",
                          "--out", tmp_path / "att.png"], capsys)
    assert code == 0, err
    assert (tmp_path / "att.png").stat().st_size > 0


def test_ablate_and_sweep(tmp_path, capsys, tiny_config):
    code, out, err = run(["ablate", "--recipes", "full", "scratch", "--seeds", 0, "--config", tiny_config,
                          "--out", tmp_path / "abl"], capsys)
    assert code == 0, err
    rows = json.loads(out)["rows"]
    assert [r["recipe"] for r in rows] == ["full", "scratch"]
    assert set(rows[0]) == set(rows[1])
    assert "full" in (tmp_path / "abl" / "ablation.txt").read_text()

    code, out, err = run(["sweep-labels", "--ratios", 0.5, 1.0, "--seeds", 0, "--config", tiny_config,
                          "--out", tmp_path / "sw"], capsys)
    assert code == 0, err
    assert (tmp_path / "sw" / "dice_vs_ratio.png").exists()
    code, _, err = run(["plot", "--sweep", tmp_path / "sw" / "sweep.json", "--out", tmp_path / "curve.png"], capsys)
    assert code == 0, err


def test_sweep_ratio_one_matches_finetune(tmp_path, tiny_config):
    cfg = RunConfig.load(tiny_config, env={})
    doc = run_label_ratio_sweep([1.0], [0], cfg, tmp_path / "sw")
    from mosmos.experiments import run_finetune
    again = run_finetune(cfg, tmp_path / "direct", "random")
    assert doc["series"]["random"][0][0] == again["test"]["mean_dice"]


def test_errors_are_json(tmp_path, capsys):
    code, _, err = run(["finetune", "--data", tmp_path / "missing", "--out", tmp_path / "x"], capsys)
    assert code != 0
    doc = json.loads(err.strip().splitlines()[-1])
    assert doc["error"] == "DatasetError"
    code, _, err = run(["nonsense"], capsys)
    assert code == 2 and json.loads(err)["error"] == "usage"
    code, _, err = run(["ablate", "--recipes", "bogus", "--out", tmp_path], capsys)
    assert code == 1 and "unknown recipe" in json.loads(err)["message"]
    code, _, err = run(["sweep-labels", "--ratios", 1.5, "--out", tmp_path], capsys)
    assert code == 1 and "(0, 1]" in json.loads(err)["message"]


def test_recipes():
    cfg = RunConfig()
    assert recipe_config(cfg, "no_irc").pretrain.use_irc is False
    assert recipe_config(cfg, "no_prompt").pretrain.use_prompt is False
    assert recipe_config(cfg, "full") == cfg
    with pytest.raises(RecipeError):
        recipe_config(cfg, "clip")


def test_nested_subsets():
    subsets = nested_subsets(list(range(120)), [1.0, 0.25, 0.75, 0.5], 0)
    assert [len(s) for s in subsets] == [30, 60, 90, 120]
    assert all(set(a) <= set(b) for a, b in zip(subsets, subsets[1:]))


def test_ablation_table_format():
    rows = [{"recipe": "full", "seed": 0, "mean_dice": 0.5}, {"recipe": "scratch", "seed": 0, "mean_dice": 0.4}]
    table = ablation_table(rows).splitlines()
    assert table[1].startswith("full") and table[2].startswith("scratch")
