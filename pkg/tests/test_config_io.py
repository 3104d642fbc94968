import json

import numpy as np
import pytest
import torch

from mosmos.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from mosmos.config import ConfigError, RunConfig
from mosmos.tokenizer import Tokenizer


def test_defaults():
    cfg = RunConfig.from_flat({}, env={})
    assert cfg.pretrain.tau_init == 0.07
    assert cfg.finetune.eps_init == 0.07
    assert cfg.finetune.lam == 0.8
    assert cfg.finetune.overlap == 0.5
    assert (cfg.model.report_len, cfg.model.context_len, cfg.model.tag_len) == (77, 16, 10)


def test_flat_round_trip(tmp_path):
    cfg = RunConfig()
    cfg.finetune.crop = (16, 16)
    cfg.finetune.class_names = ["liver", "duodenum"]
    cfg.seed = 4
    cfg.save(tmp_path / "c.json")
    back = RunConfig.load(tmp_path / "c.json", env={})
    assert back == cfg
    assert json.loads((tmp_path / "c.json").read_text())["finetune.lam"] == 0.8


def test_nested_sections_accepted():
    cfg = RunConfig.from_flat({"finetune": {"lam": 0.5}, "seed": 3}, env={})
    assert cfg.finetune.lam == 0.5 and cfg.seed == 3


def test_env_override():
    cfg = RunConfig.from_flat({"finetune.lam": 0.5}, env={"MOSMOS_FINETUNE__LAM": "0.25", "OTHER": "x"})
    assert cfg.finetune.lam == 0.25


@pytest.mark.parametrize("key,value", [
    ("finetune.lam", -0.1), ("finetune.overlap", 1.0), ("pretrain.tau_init", 0.0),
    ("finetune.eps_init", -1), ("finetune.label_ratio", 0.0), ("model.encoder", "mlp"),
    ("finetune.pta_normalization", "other"), ("finetune.baseline", "unetr-patch"),
])
def test_invalid_values(key, value):
    with pytest.raises(ConfigError):
        RunConfig.from_flat({key: value}, env={})


def test_unknown_key():
    with pytest.raises(ConfigError):
        RunConfig.from_flat({"finetune.nope": 1}, env={})


def test_tokenizer_encoding(tmp_path):
    tok = Tokenizer.build(["the liver is normal.", "left ventricle"])
    rep = tok.encode_report("The liver is NORMAL. spleen", 10)
    assert rep[0] == tok.sot_id and len(rep) == 10
    # sot the liver is normal . spleen(unk) eot pad pad
    assert rep[5] == tok.stoi["."] and rep[6] == tok.unk_id and rep[7] == tok.eot_id
    assert rep[8:] == [tok.pad_id] * 2
    tag = tok.encode_tag("left ventricle", 4)
    assert tag == [tok.stoi["left"], tok.stoi["ventricle"], tok.eot_id, tok.pad_id]
    long = tok.encode_report("liver " * 100, 77)
    assert len(long) == 77 and long[-1] == tok.eot_id
    tok.save(tmp_path / "tok.json")
    assert Tokenizer.load(tmp_path / "tok.json").itos == tok.itos


def test_checkpoint_round_trip(tmp_path):
    state = {
        "w": torch.randn(3, 4),
        "count": torch.tensor(7),
        "ids": torch.arange(5),
        "d": torch.randn(2, dtype=torch.float64),
    }
    save_checkpoint(tmp_path, state, {"note": "x"})
    back, meta = load_checkpoint(tmp_path)
    assert meta == {"note": "x"}
    for k, v in state.items():
        assert back[k].shape == v.shape and back[k].dtype == v.dtype
        assert torch.equal(back[k], v)
    index = json.loads((tmp_path / "params.json").read_text())["tensors"]
    assert set(index["w"]) == {"offset", "shape", "dtype"}


def test_checkpoint_truncated(tmp_path):
    save_checkpoint(tmp_path, {"w": torch.zeros(10)})
    (tmp_path / "params.bin").write_bytes(b"\0" * 8)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


def test_checkpoint_missing(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "none")
