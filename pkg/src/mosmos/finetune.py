"""Stage 2: segmentation with pixel-tag attention maps.

Tag queries for the downstream class names cross-attend to the image
encoder's spatial tokens. The resulting pixels x Q map is concatenated to the
spatial features before the segmentation decoder, and is also upsampled as a
second low-resolution prediction trained with the same Dice+CE loss.

Class channel 0 is background throughout; losses run over the Q foreground
channels only.
"""

import copy
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from itertools import product
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import label_subset
from .encoders import (
    ConvBlock, ConvImageEncoder, PatchImageEncoder, TagEncoder, TransDecoder, adapt_state_dict,
    build_image_encoder, build_text_encoder, convT_nd, conv_nd, init_weights, tag_token_ids,
)
from .metrics import dice, evaluate_masks
from .pretrain import build_tokenizer, images_to_tensor
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-8


class FinetuneError(ValueError):
    pass


# -- pure operations -------------------------------------------------------------

def attention_maps(decoder: TransDecoder, tag_embeddings, spatial):
    """Final-layer head-averaged cross-attention, B x P x Q (rows over pixels sum to 1 per tag)."""
    return decoder(tag_embeddings, spatial).attention


def fuse(spatial, attn_map, grid):
    """Concatenate B x P x C features with the B x P x Q map into B x (C+Q) x grid."""
    if spatial.shape[:2] != attn_map.shape[:2]:
        raise FinetuneError(
            f"pixel count mismatch: features {tuple(spatial.shape)} vs map {tuple(attn_map.shape)}"
        )
    fused = torch.cat([spatial, attn_map.to(spatial.dtype)], dim=-1)
    return fused.transpose(1, 2).reshape(fused.shape[0], fused.shape[2], *grid)


def linear_upsample(field, size):
    """Bi/trilinear interpolation, align_corners=False. ``field``: B x Ch x grid."""
    mode = {1: "linear", 2: "bilinear", 3: "trilinear"}[field.dim() - 2]
    if tuple(field.shape[2:]) == tuple(size):
        return field
    return F.interpolate(field, size=tuple(size), mode=mode, align_corners=False)


def pta_output(attn_map, grid, target_dims, eps, bg_logit=None, normalization="softmax_tags"):
    """Temperature-scaled attention map at input resolution, B x (Q+1) x target_dims.

    ``softmax_tags``: softmax over [background logit, map / eps] before
    interpolation, so every voxel stays a probability vector. ``raw``: the
    scaled map itself, with ``bg_logit`` (or zeros) as channel 0.
    """
    eps = torch.as_tensor(eps, dtype=attn_map.dtype)
    if torch.any(eps <= 0):
        raise FinetuneError("temperature eps must be positive")
    z = attn_map / eps
    B, P, Q = z.shape
    if bg_logit is None:
        bg = z.new_zeros(B, P, 1)
    else:
        bg = torch.as_tensor(bg_logit, dtype=z.dtype).reshape(1, 1, 1).expand(B, P, 1)
    z = torch.cat([bg, z], dim=-1)
    if normalization == "softmax_tags":
        z = torch.softmax(z, dim=-1)
    elif normalization != "raw":
        raise FinetuneError(f"unknown normalization {normalization!r}")
    field = z.transpose(1, 2).reshape(B, Q + 1, *grid)
    return linear_upsample(field, target_dims)


def to_bvq(t):
    """B x Q x spatial -> B x V x Q."""
    return t.flatten(2).transpose(1, 2)


def one_hot_bvq(mask, num_channels):
    """Integer mask B x spatial -> one-hot B x V x num_channels (float64)."""
    return F.one_hot(mask.flatten(1).long(), num_channels).to(torch.float64)


def loss_seg_dice_ce(X, Y, log_Y=None):
    """Cross-entropy plus squared-denominator Dice over B x V x Q tensors.

    Per sample: 1 - (1/V) sum_v sum_q X log Y - (2/Q) sum_q XY / (X^2 + Y^2),
    averaged over the batch. ``log Y`` is floored at 1e-8 unless ``log_Y``
    is supplied; a class absent from both X and Y contributes 0.
    """
    if X.shape != Y.shape:
        raise FinetuneError(f"shape mismatch: X {tuple(X.shape)} vs Y {tuple(Y.shape)}")
    X = X.to(Y.dtype)
    B, V, Q = Y.shape
    if log_Y is None:
        log_Y = torch.log(Y.clamp(min=LOG_FLOOR))
    ce = (X * log_Y).sum(dim=(1, 2)) / V
    num = (X * Y).sum(dim=1)
    den = (X * X).sum(dim=1) + (Y * Y).sum(dim=1)
    safe = torch.where(den > 0, den, torch.ones_like(den))
    ratio = torch.where(den > 0, num / safe, torch.zeros_like(den))
    return (1.0 - ce - (2.0 / Q) * ratio.sum(dim=1)).mean()


def loss_total_down(X, Y_seg, Y_pta, lam, log_Y_seg=None, log_Y_pta=None):
    seg = loss_seg_dice_ce(X, Y_seg, log_Y_seg)
    if lam == 0:
        return seg
    return seg + lam * loss_seg_dice_ce(X, Y_pta, log_Y_pta)


# -- decoders ----------------------------------------------------------------------

class SegDecoder(nn.Module):
    """Upsampling stack: transposed conv x2, concat skip, conv block; 1x1 head to Q+1."""

    def __init__(self, in_channels, skip_channels, num_outputs, dims):
        super().__init__()
        # skip_channels fine -> coarse; stages run coarse -> fine
        self.skip_channels = list(skip_channels)
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        ch = in_channels
        for sc in reversed(self.skip_channels):
            self.ups.append(convT_nd(dims)(ch, sc, 2, stride=2))
            self.blocks.append(ConvBlock(2 * sc, sc, dims))
            ch = sc
        self.head = conv_nd(dims)(ch, num_outputs, 1)

    def forward(self, x, skips):
        if len(skips) != len(self.ups):
            raise FinetuneError(f"decoder expects {len(self.ups)} skips, got {len(skips)}")
        for up, block, skip in zip(self.ups, self.blocks, reversed(skips)):
            x = up(x)
            if x.shape[2:] != skip.shape[2:]:
                raise FinetuneError(
                    f"resolution mismatch: decoder stage {tuple(x.shape[2:])} vs skip {tuple(skip.shape[2:])}"
                )
            x = block(torch.cat([x, skip], dim=1))
        return self.head(x)


class UnetrSkips(nn.Module):
    """Skip tensors for the patch family: a conv block on the raw image, then
    intermediate token grids upsampled by stacks of transposed convs."""

    def __init__(self, in_channels, vit_dim, patch_size, depth, dims, base=16):
        super().__init__()
        levels = int(round(math.log2(patch_size)))
        if 2 ** levels != patch_size:
            raise FinetuneError(f"patch size {patch_size} must be a power of two")
        self.channels = [base * 2 ** l for l in range(levels)]  # fine -> coarse
        self.layer_ids = [min(depth, max(1, round(l * depth / levels))) - 1 for l in range(1, levels)]
        self.stem = ConvBlock(in_channels, self.channels[0], dims)
        self.paths = nn.ModuleList()
        for l in range(1, levels):
            mods, ch = [], vit_dim
            for _ in range(levels - l):
                mods += [convT_nd(dims)(ch, self.channels[l], 2, stride=2), ConvBlock(self.channels[l], self.channels[l], dims)]
                ch = self.channels[l]
            self.paths.append(nn.Sequential(*mods))

    def forward(self, image, hidden, grid):
        skips = [self.stem(image)]
        for path, idx in zip(self.paths, self.layer_ids):
            h = hidden[idx]
            skips.append(path(h.transpose(1, 2).reshape(h.shape[0], h.shape[2], *grid)))
        return skips


class SegmentationModel(nn.Module):
    def __init__(self, cfg_model, cfg_ft, tokenizer: Tokenizer, class_names, in_channels, crop,
                 use_prompt=True):
        super().__init__()
        self.class_names = list(class_names)
        self.Q = len(self.class_names)
        self.crop = tuple(crop)
        dims = len(crop)
        self.use_attention = cfg_ft.use_attention
        self.normalization = cfg_ft.pta_normalization
        self.tokenizer = tokenizer
        self.image_encoder = build_image_encoder(cfg_model, in_channels, crop)
        self.text_encoder = build_text_encoder(cfg_model, len(tokenizer))
        self.tag_encoder = TagEncoder(cfg_model.text_dim, cfg_model.context_len if use_prompt else 0,
                                      cfg_model.init_std)
        self.decoder = TransDecoder(cfg_model.embed_dim, cfg_model.decoder_layers, cfg_model.decoder_heads)
        init_weights(self.decoder, cfg_model.init_std)
        C = cfg_model.embed_dim
        if isinstance(self.image_encoder, ConvImageEncoder):
            self.skip_adapter = None
            skip_channels = self.image_encoder.skip_channels
            stride = self.image_encoder.stride
        else:
            self.skip_adapter = UnetrSkips(in_channels, cfg_model.vit_dim, cfg_model.patch_size,
                                           cfg_model.vit_depth, dims)
            init_weights(self.skip_adapter, cfg_model.init_std)
            skip_channels = self.skip_adapter.channels
            stride = cfg_model.patch_size
        self.seg_decoder = SegDecoder(C + self.Q, skip_channels, self.Q + 1, dims)
        init_weights(self.seg_decoder, cfg_model.init_std)
        P = math.prod(s // stride for s in crop)
        self.log_eps = nn.Parameter(torch.tensor(math.log(cfg_ft.eps_init)))
        # background logit starts at the level of uniform attention
        self.bg_logit = nn.Parameter(torch.tensor(1.0 / (P * cfg_ft.eps_init)))
        self.register_buffer("tag_tokens", tag_token_ids(tokenizer, self.class_names, cfg_model.tag_len))

    @property
    def eps(self):
        return self.log_eps.exp()

    def freeze_text_encoder(self):
        for p in self.text_encoder.parameters():
            p.requires_grad_(False)

    def tag_embeddings(self):
        return self.tag_encoder(self.text_encoder, self.tag_tokens)

    def forward(self, x):
        enc = self.image_encoder(x)
        attn = attention_maps(self.decoder, self.tag_embeddings(), enc.spatial)
        fmap = attn if self.use_attention else torch.zeros_like(attn)
        fused = fuse(enc.spatial, fmap, enc.grid)
        skips = enc.skips if self.skip_adapter is None else self.skip_adapter(x, enc.hidden, enc.grid)
        logits = self.seg_decoder(fused, skips)
        y_pta = pta_output(attn, enc.grid, x.shape[2:], self.eps, self.bg_logit, self.normalization)
        return {
            "logits": logits,
            "y_seg": torch.softmax(logits, dim=1),
            "log_y_seg": torch.log_softmax(logits, dim=1),
            "y_pta": y_pta,
            "attention": attn,
            "grid": enc.grid,
        }

    def probabilities(self, x):
        return self(x)["y_seg"]

    def losses(self, x, mask, lam):
        out = self(x)
        X = one_hot_bvq(mask, self.Q + 1)[..., 1:]
        y_seg = to_bvq(out["y_seg"])[..., 1:]
        log_seg = to_bvq(out["log_y_seg"])[..., 1:]
        y_pta = to_bvq(out["y_pta"])[..., 1:]
        seg = loss_seg_dice_ce(X, y_seg, log_seg)
        pta = loss_seg_dice_ce(X, y_pta)
        return seg + lam * pta, seg, pta


# -- sliding window ------------------------------------------------------------------

def window_starts(size, crop, overlap):
    """Start offsets along one axis: stride crop*(1-overlap), last window clamped to fit."""
    if crop > size:
        raise FinetuneError(f"crop {crop} larger than volume extent {size}")
    if crop == size:
        return [0]
    stride = max(1, int(crop * (1 - overlap)))
    starts = list(range(0, size - crop + 1, stride))
    if starts[-1] + crop < size:
        starts.append(size - crop)
    return starts


def _gaussian_weight(crop, sigma_scale=0.125):
    w = torch.ones(crop, dtype=torch.float64)
    for axis, c in enumerate(crop):
        x = torch.arange(c, dtype=torch.float64) - (c - 1) / 2
        g = torch.exp(-0.5 * (x / (c * sigma_scale)) ** 2)
        shape = [1] * len(crop)
        shape[axis] = c
        w = w * g.reshape(shape)
    return w / w.max()


def sliding_window_infer(predict, volume, crop, overlap=0.5, workers=1, weighting="uniform"):
    """Average window probabilities over a full volume.

    ``predict`` maps a B x C x crop tensor to B x K x crop probabilities;
    ``volume`` is B x C x spatial. Window outputs are summed in window order
    regardless of ``workers``, so results do not depend on the thread count.
    """
    spatial = tuple(volume.shape[2:])
    crop = tuple(crop)
    if len(crop) != len(spatial):
        raise FinetuneError(f"crop {crop} does not match volume dims {spatial}")
    for c, s in zip(crop, spatial):
        if c > s:
            raise FinetuneError(f"crop {crop} larger than volume {spatial}")
    starts = [window_starts(s, c, overlap) for s, c in zip(spatial, crop)]
    windows = [tuple(slice(o, o + c) for o, c in zip(origin, crop)) for origin in product(*starts)]
    weight = _gaussian_weight(crop) if weighting == "gaussian" else torch.ones(crop, dtype=torch.float64)

    def run(win):
        with torch.no_grad():
            return predict(volume[(slice(None), slice(None), *win)]).to(torch.float64)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            outputs = list(pool.map(run, windows))
    else:
        outputs = [run(w) for w in windows]
    total = None
    norm = torch.zeros(spatial, dtype=torch.float64)
    for win, out in zip(windows, outputs):
        if total is None:
            total = torch.zeros(out.shape[:2] + spatial, dtype=torch.float64)
        total[(slice(None), slice(None), *win)] += out * weight
        norm[win] += weight
    return total / norm


# -- training ------------------------------------------------------------------------

def lr_factor(epoch, epochs, constant_frac):
    """Constant for the first ``constant_frac`` of epochs, cosine decay afterwards."""
    const = max(1, int(round(constant_frac * epochs)))
    if epoch < const:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * (epoch - const) / max(1, epochs - const)))


def build_segmentation_model(cfg, dataset, init="random"):
    """Fresh model, optionally initialized from a stage-1 checkpoint directory."""
    cm, cf = cfg.model, cfg.finetune
    class_names = list(cf.class_names or dataset.manifest.class_names)
    if len(class_names) != len(dataset.manifest.class_names):
        raise FinetuneError(
            f"Q mismatch: {len(class_names)} class names vs {len(dataset.manifest.class_names)} dataset classes"
        )
    spatial = tuple(dataset.images.shape[1:-1])
    crop = tuple(cf.crop) if cf.crop else spatial
    channels = dataset.images.shape[-1]
    state = meta = None
    use_prompt = cfg.pretrain.use_prompt
    if init != "random":
        state, meta = load_checkpoint(init)
        tokenizer = Tokenizer(meta["tokenizer"])
        use_prompt = meta["use_prompt"]
    else:
        vocab = dataset.vocab
        tokenizer = build_tokenizer([], vocab, class_names) if vocab is not None else Tokenizer.build(class_names + ["background"])
    model = SegmentationModel(cm, cf, tokenizer, class_names, channels, crop, use_prompt)
    if state is not None:
        transfer = {"image_encoder", "text_encoder", "tag_encoder"}
        if cf.transfer_decoder:
            transfer.add("decoder")
        for prefix in sorted(transfer):
            part = {k[len(prefix) + 1:]: v for k, v in state.items() if k.startswith(prefix + ".")}
            module = getattr(model, prefix)
            adapted = adapt_state_dict(part, module)
            missing = set(module.state_dict()) - set(adapted)
            if missing:
                raise FinetuneError(f"checkpoint lacks {prefix} tensors: {sorted(missing)[:5]}")
            module.load_state_dict(adapted)
    model.freeze_text_encoder()
    return model, meta


def _random_crop(images, masks, crop, gen):
    spatial = images.shape[2:]
    if tuple(crop) == tuple(spatial):
        return images, masks
    outs_i, outs_m = [], []
    for i in range(len(images)):
        origin = [int(torch.randint(0, s - c + 1, (1,), generator=gen)) for s, c in zip(spatial, crop)]
        sl = tuple(slice(o, o + c) for o, c in zip(origin, crop))
        outs_i.append(images[i][(slice(None), *sl)])
        outs_m.append(masks[i][sl])
    return torch.stack(outs_i), torch.stack(outs_m)


def predict_volumes(model, images, crop, overlap, workers=1, weighting="uniform", batch_size=16):
    """Argmax label maps (N x spatial) via sliding-window inference."""
    model.eval()
    preds = []
    for start in range(0, len(images), batch_size):
        probs = sliding_window_infer(model.probabilities, images[start:start + batch_size], crop,
                                     overlap, workers, weighting)
        preds.append(probs.argmax(dim=1))
    return torch.cat(preds).numpy()


def mean_dice(gt, pred, Q):
    return float(np.mean([dice(g == q, p == q) for q in range(1, Q + 1) for g, p in zip(gt, pred)]))


def finetune_run(cfg, dataset, init="random", out_dir=None, log_fn=None):
    """Train on L_seg + lam * L_pta; periodic validation Dice picks the checkpoint.

    Returns a dict with the training history and test metrics.
    """
    cf = cfg.finetune
    torch.manual_seed(cfg.seed)
    model, _ = build_segmentation_model(cfg, dataset, init)
    text_before = {k: v.clone() for k, v in model.text_encoder.state_dict().items()}
    images = images_to_tensor(dataset.images)
    masks = torch.as_tensor(dataset.masks)
    crop = model.crop
    train_ids = label_subset(dataset.split("train"), cf.label_ratio, cfg.seed)
    val_ids, test_ids = dataset.split("val"), dataset.split("test")
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cf.lr, weight_decay=cf.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda e: lr_factor(e, cf.epochs, cf.constant_frac))
    gen = torch.Generator().manual_seed(cfg.seed)
    history = []
    best_dice, best_state, best_epoch = -1.0, None, 0
    tr = torch.as_tensor(train_ids)
    for epoch in range(1, cf.epochs + 1):
        model.train()
        model.text_encoder.eval()
        t0 = time.time()
        losses = []
        for idx in tr[torch.randperm(len(tr), generator=gen)].split(cf.batch_size):
            x, m = _random_crop(images[idx], masks[idx], crop, gen)
            loss, seg, pta = model.losses(x, m, cf.lam)
            if not torch.isfinite(loss):
                raise FloatingPointError(json.dumps({"epoch": epoch, "seg": seg.item(), "pta": pta.item()}))
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        sched.step()
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)), "lr": opt.param_groups[0]["lr"],
               "eps": model.eps.item(), "seconds": round(time.time() - t0, 3)}
        if epoch % cf.val_every == 0 or epoch == cf.epochs:
            pred = predict_volumes(model, images[val_ids], crop, cf.overlap, weighting=cf.window_weighting)
            rec["val_dice"] = mean_dice(masks[val_ids].numpy(), pred, model.Q)
            if rec["val_dice"] > best_dice:
                best_dice, best_epoch = rec["val_dice"], epoch
                best_state = copy.deepcopy(model.state_dict())
        history.append(rec)
        if log_fn:
            log_fn(rec)
        log.info("finetune epoch %d %s", epoch, rec)
    model.load_state_dict(best_state)
    frozen_ok = all(torch.equal(text_before[k], v) for k, v in model.text_encoder.state_dict().items())
    pred = predict_volumes(model, images[test_ids], crop, cf.overlap, weighting=cf.window_weighting)
    report = evaluate_masks(masks[test_ids].numpy(), pred, model.class_names)
    result = {
        "init": "random" if init == "random" else "pretrained",
        "label_ratio": cf.label_ratio,
        "n_train": len(train_ids),
        "best_epoch": best_epoch,
        "best_val_dice": best_dice,
        "text_encoder_frozen": frozen_ok,
        "history": history,
        "test": report.to_json(),
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_checkpoint(out_dir / "checkpoint", model.state_dict(), {
            "kind": "finetune", "tokenizer": model.tokenizer.to_json(), "class_names": model.class_names,
            "in_channels": int(images.shape[1]), "crop": list(crop), "config": cfg.to_flat(),
            "use_prompt": model.tag_encoder.context is not None,
        })
        (out_dir / "metrics.json").write_text(json.dumps(result, indent=2))
    return result, model


def load_segmentation_model(path):
    """Rebuild a fine-tuned :class:`SegmentationModel` from its checkpoint directory."""
    from .config import RunConfig

    state, meta = load_checkpoint(path)
    cfg = RunConfig.from_flat(meta["config"], env={})
    model = SegmentationModel(cfg.model, cfg.finetune, Tokenizer(meta["tokenizer"]), meta["class_names"],
                              meta["in_channels"], tuple(meta["crop"]), meta["use_prompt"])
    model.load_state_dict(state)
    model.eval()
    return model, meta
