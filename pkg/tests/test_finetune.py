import copy

import numpy as np
import pytest
import torch

from mosmos.config import RunConfig
from mosmos.corpus import build_finetune_dataset
from mosmos.encoders import TransDecoder, init_weights
from mosmos.finetune import (
    FinetuneError, SegDecoder, SegmentationModel, attention_maps, build_segmentation_model, finetune_run, fuse,
    linear_upsample, load_segmentation_model, loss_seg_dice_ce, loss_total_down, lr_factor, one_hot_bvq,
    pta_output, sliding_window_infer, to_bvq, window_starts,
)
from mosmos.pretrain import build_tokenizer
from mosmos.tagvocab import default_vocabulary

from gradcheck import TOL, module_errors, relative_errors
from oracles import seg_loop

f64 = torch.float64


def small_cfg(encoder="conv"):
    cfg = RunConfig()
    m = cfg.model
    m.encoder = encoder
    cfg.finetune.baseline = "unet-conv" if encoder == "conv" else "unetr-patch"
    m.conv_widths = (4, 8)
    m.embed_dim = m.text_dim = m.vit_dim = 8
    m.patch_size = 4
    m.vit_depth = 2
    m.text_layers = m.decoder_layers = 1
    m.text_heads = m.decoder_heads = m.pool_heads = m.vit_heads = 2
    m.context_len, m.tag_len = 4, 4
    return cfg


def small_model(encoder="conv", crop=(16, 16), names=("liver", "spleen", "kidney")):
    torch.manual_seed(0)
    cfg = small_cfg(encoder)
    tok = build_tokenizer([], default_vocabulary(), names)
    model = SegmentationModel(cfg.model, cfg.finetune, tok, list(names), 1, crop)
    model.freeze_text_encoder()
    return model


# -- attention maps and fusion ------------------------------------------------------

def test_attention_map_shapes():
    dec = TransDecoder(8, 1, 2)
    init_weights(dec)
    kv = torch.randn(2, 16, 8)
    assert attention_maps(dec, torch.randn(13, 8), kv).shape == (2, 16, 13)
    single = attention_maps(dec, torch.randn(1, 8), kv)
    assert single.shape == (2, 16, 1) and torch.isfinite(single).all()


def test_attention_batch_independence():
    dec = TransDecoder(8, 2, 2).eval()
    init_weights(dec)
    tags, kv = torch.randn(4, 8), torch.randn(3, 10, 8)
    batched = attention_maps(dec, tags, kv)
    looped = torch.cat([attention_maps(dec, tags, kv[i:i + 1]) for i in range(3)])
    assert torch.allclose(batched, looped, atol=1e-6)


def test_fuse_channels_and_mismatch():
    fused = fuse(torch.randn(2, 16, 8), torch.rand(2, 16, 3), (4, 4))
    assert fused.shape == (2, 11, 4, 4)
    with pytest.raises(FinetuneError):
        fuse(torch.randn(2, 16, 8), torch.rand(2, 9, 3), (4, 4))


def test_model_output_dims_2d_3d():
    for crop in [(16, 16), (16, 16, 16)]:
        model = small_model(crop=crop).eval()
        out = model(torch.randn(2, 1, *crop))
        assert out["logits"].shape == (2, 4, *crop)
        assert out["y_pta"].shape == (2, 4, *crop)


def test_patch_family_output_dims():
    model = small_model("patch").eval()
    out = model(torch.randn(2, 1, 16, 16))
    assert out["y_seg"].shape == (2, 4, 16, 16)


def test_seg_decoder_resolution_error():
    dec = SegDecoder(8, [4, 8], 3, 2)
    with pytest.raises(FinetuneError, match="resolution"):
        dec(torch.randn(1, 8, 4, 4), [torch.randn(1, 4, 16, 16), torch.randn(1, 8, 9, 9)])


# -- pixel-tag output ---------------------------------------------------------------

def test_pta_rows_sum_to_one():
    attn = torch.softmax(torch.randn(2, 16, 5), dim=1)
    y = pta_output(attn, (4, 4), (16, 16), 0.07, 1.0)
    s = y.sum(dim=1)
    assert torch.allclose(s, torch.ones_like(s), atol=1e-5)
    assert (y >= 0).all()


def test_pta_constant_map():
    attn = torch.full((1, 16, 3), 1 / 16)
    y = pta_output(attn, (4, 4), (16, 16), 0.07)
    assert torch.allclose(y, y[:, :, :1, :1].expand_as(y), atol=1e-7)


def test_bilinear_2x_oracle():
    field = torch.tensor([[1.0, 2.0], [3.0, 5.0]], dtype=f64)
    W = torch.tensor([[1, 0], [0.75, 0.25], [0.25, 0.75], [0, 1]], dtype=f64)
    expected = W @ field @ W.T
    got = linear_upsample(field[None, None], (4, 4))[0, 0]
    assert torch.allclose(got, expected, atol=1e-12)


def test_pta_raw_and_errors():
    attn = torch.rand(1, 4, 2)
    raw = pta_output(attn, (2, 2), (2, 2), 0.5, normalization="raw")
    assert torch.allclose(raw[0, 1:].flatten(1), (attn[0] / 0.5).T)
    with pytest.raises(FinetuneError):
        pta_output(attn, (2, 2), (4, 4), 0.0)
    with pytest.raises(FinetuneError):
        pta_output(attn, (2, 2), (4, 4), 0.1, normalization="other")


# -- losses -------------------------------------------------------------------------

def test_seg_loss_perfect_prediction():
    mask = torch.tensor([[0, 1, 2, 3, 1, 2]])
    X = one_hot_bvq(mask, 4)[..., 1:]
    assert loss_seg_dice_ce(X, X.clone()).item() == pytest.approx(0.0, abs=1e-12)


def test_seg_loss_absent_class_is_zero_term():
    X = torch.zeros(1, 4, 2, dtype=f64)
    X[0, :, 0] = 1
    Y = X.clone()
    # class 1 absent from both: its dice term is 0, class 0 contributes 1/2
    assert loss_seg_dice_ce(X, Y).item() == pytest.approx(1 - 0 - (2 / 2) * 0.5)
    assert torch.isfinite(loss_seg_dice_ce(X, Y))


def test_seg_loss_matches_oracle():
    gen = torch.Generator().manual_seed(0)
    for _ in range(20):
        B, V, Q = 2, 12, 3
        mask = torch.randint(0, Q + 1, (B, V), generator=gen)
        X = one_hot_bvq(mask, Q + 1)[..., 1:]
        Y = torch.softmax(torch.randn(B, V, Q + 1, generator=gen, dtype=f64), -1)[..., 1:]
        assert abs(loss_seg_dice_ce(X, Y).item() - seg_loop(X.tolist(), Y.tolist())) <= 1e-8


def test_seg_loss_shape_error():
    with pytest.raises(FinetuneError):
        loss_seg_dice_ce(torch.zeros(1, 4, 2), torch.zeros(1, 4, 3))


def test_total_down_lambda():
    gen = torch.Generator().manual_seed(1)
    X = one_hot_bvq(torch.randint(0, 3, (2, 10), generator=gen), 3)[..., 1:]
    Ys = torch.softmax(torch.randn(2, 10, 3, generator=gen, dtype=f64), -1)[..., 1:]
    Yp = torch.softmax(torch.randn(2, 10, 3, generator=gen, dtype=f64), -1)[..., 1:]
    assert loss_total_down(X, Ys, Ys, 0).item() == loss_seg_dice_ce(X, Ys).item()
    seg, pta = loss_seg_dice_ce(X, Ys).item(), loss_seg_dice_ce(X, Yp).item()
    for lam in (0.1, 0.5, 1.0):
        assert loss_total_down(X, Ys, Yp, lam).item() == pytest.approx(seg + lam * pta, abs=1e-12)


def test_model_outputs_are_probabilities():
    model = small_model().eval()
    out = model(torch.randn(2, 1, 16, 16))
    for key in ("y_seg", "y_pta"):
        s = out[key].sum(dim=1)
        assert torch.allclose(s, torch.ones_like(s), atol=1e-5)
    rows = out["attention"].sum(dim=1)
    assert torch.allclose(rows, torch.ones_like(rows), atol=1e-6)


def test_zero_map_recovers_plain_baseline():
    model = small_model().eval()
    model.use_attention = False
    x = torch.randn(2, 1, 16, 16)
    logits = model(x)["logits"]
    # a plain U-Net decoder fed only the encoder features, sharing weights
    plain = SegDecoder(8, model.image_encoder.skip_channels, model.Q + 1, 2).eval()
    state = copy.deepcopy(model.seg_decoder.state_dict())
    state["ups.0.weight"] = state["ups.0.weight"][:8]
    plain.load_state_dict(state)
    enc = model.image_encoder(x)
    feats = enc.spatial.transpose(1, 2).reshape(2, 8, *enc.grid)
    assert (plain(feats, enc.skips) - logits).abs().max() < 1e-6


def test_downstream_gradients():
    model = small_model()
    model.double()
    model.eval()  # fixed normalization statistics
    x = torch.randn(2, 1, 16, 16, dtype=f64)
    mask = torch.randint(0, 4, (2, 16, 16))
    f = lambda: model.losses(x, mask, 0.8)[0]
    assert max(module_errors(model.image_encoder, f)) < TOL
    assert max(module_errors(model.decoder, f)) < TOL
    assert max(module_errors(model.seg_decoder, f)) < TOL
    assert max(relative_errors([model.tag_encoder.context, model.log_eps], f)) < TOL


# -- sliding window -----------------------------------------------------------------

def test_window_starts():
    assert window_starts(128, 96, 0.5) == [0, 32]
    assert window_starts(96, 96, 0.5) == [0]
    assert window_starts(64, 16, 0.5) == [0, 8, 16, 24, 32, 40, 48]
    with pytest.raises(FinetuneError):
        window_starts(64, 96, 0.5)


def test_sliding_window_equals_forward_when_crop_is_volume():
    model = small_model().eval()
    x = torch.randn(2, 1, 16, 16)
    with torch.no_grad():
        direct = model.probabilities(x).double()
    tiled = sliding_window_infer(model.probabilities, x, (16, 16))
    assert (tiled - direct).abs().max() < 1e-6


def test_constant_model_constant_output():
    const = lambda v: torch.full((v.shape[0], 3, *v.shape[2:]), 0.25)
    out = sliding_window_infer(const, torch.randn(1, 1, 40, 36), (16, 16), 0.5)
    assert torch.allclose(out, torch.full_like(out, 0.25))
    out = sliding_window_infer(const, torch.randn(1, 1, 40, 36), (16, 16), 0.5, weighting="gaussian")
    assert torch.allclose(out, torch.full_like(out, 0.25))


def test_thread_count_invariance():
    model = small_model().eval()
    x = torch.randn(1, 1, 40, 32)
    a = sliding_window_infer(model.probabilities, x, (16, 16), 0.5, workers=1)
    b = sliding_window_infer(model.probabilities, x, (16, 16), 0.5, workers=4)
    assert (a - b).abs().max() < 1e-6


def test_sliding_window_crop_too_large():
    with pytest.raises(FinetuneError):
        sliding_window_infer(lambda v: v, torch.randn(1, 1, 8, 8), (16, 16))


def test_lr_schedule():
    assert lr_factor(0, 100, 0.01) == 1.0
    assert lr_factor(1, 100, 0.01) == 1.0
    assert lr_factor(100, 100, 0.01) == pytest.approx(0.0, abs=1e-12)
    vals = [lr_factor(e, 100, 0.01) for e in range(1, 101)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


# -- training run -------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_data():
    return build_finetune_dataset(40, Q=3, seed=0)


def test_finetune_run_contract(tiny_data, tmp_path):
    cfg = small_cfg()
    cfg.finetune.epochs = 4
    cfg.finetune.val_every = 2
    result, model = finetune_run(cfg, tiny_data, "random", tmp_path)
    assert result["text_encoder_frozen"]
    assert {"per_class", "mean_dice", "mean_hd95"} <= set(result["test"])
    assert [c["name"] for c in result["test"]["per_class"]] == ["liver", "spleen", "kidney"]
    back, meta = load_segmentation_model(tmp_path / "checkpoint")
    x = torch.randn(1, 1, 32, 32)
    model.eval()
    assert torch.allclose(back(x)["y_seg"], model(x)["y_seg"], atol=1e-6)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_finetune_loss_decreases(tiny_data, seed):
    cfg = small_cfg()
    cfg.seed = seed
    cfg.finetune.epochs = 10
    cfg.finetune.val_every = 10
    result, _ = finetune_run(cfg, tiny_data, "random")
    losses = [h["train_loss"] for h in result["history"]]
    assert losses[-1] < losses[0]


def test_q_mismatch(tiny_data):
    cfg = small_cfg()
    cfg.finetune.class_names = ["liver", "spleen"]
    with pytest.raises(FinetuneError, match="Q mismatch"):
        build_segmentation_model(cfg, tiny_data)
