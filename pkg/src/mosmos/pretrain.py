"""Stage 1: global image-report contrast plus tag recognition from pixel queries."""

import json
import logging
import math
import time
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .encoders import (
    MlrHead, TagEncoder, TransDecoder, build_image_encoder, build_text_encoder, init_weights,
    tag_token_ids,
)
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


def mlr_gamma(K):
    return 1.0 / (K - 1) if K > 1 else 1.0


def loss_irc(image_globals, report_globals, tau):
    """Symmetric InfoNCE over cosine similarities with temperature ``tau``.

    Averages the image->report and report->image cross-entropies over the
    batch: (1 / 2B) * sum_i (L_i2r + L_r2i).
    """
    tau = torch.as_tensor(tau, dtype=image_globals.dtype)
    if torch.any(tau <= 0):
        raise ValueError("temperature must be positive")
    for name, x in (("image", image_globals), ("report", report_globals)):
        if torch.any(x.norm(dim=1) == 0):
            raise ValueError(f"zero-norm {name} embedding row: cosine similarity undefined")
    img = F.normalize(image_globals, dim=1)
    rep = F.normalize(report_globals, dim=1)
    logits = img @ rep.t() / tau
    target = torch.arange(logits.shape[0], device=logits.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.t(), target))


def loss_mlr(probs, targets, gamma=None):
    """Weak-assume-negative BCE; absent tags are down-weighted by ``gamma``."""
    probs = torch.as_tensor(probs)
    targets = torch.as_tensor(targets, dtype=probs.dtype)
    if probs.shape != targets.shape:
        raise ValueError(f"shape mismatch: probs {tuple(probs.shape)} vs targets {tuple(targets.shape)}")
    if torch.any((probs <= 0) | (probs >= 1)):
        raise ValueError("probabilities must lie strictly inside (0, 1)")
    K = probs.shape[-1]
    gamma = mlr_gamma(K) if gamma is None else gamma
    terms = targets * torch.log(probs) + gamma * (1 - targets) * torch.log1p(-probs)
    return -terms.mean()


def loss_mlr_logits(logits, targets, gamma=None):
    """:func:`loss_mlr` evaluated from pre-sigmoid logits (no saturation at 0/1)."""
    targets = targets.to(logits.dtype)
    gamma = mlr_gamma(logits.shape[-1]) if gamma is None else gamma
    terms = targets * F.logsigmoid(logits) + gamma * (1 - targets) * F.logsigmoid(-logits)
    return -terms.mean()


def loss_total_up(irc, mlr):
    return irc + mlr


class PretrainModel(nn.Module):
    def __init__(self, cfg_model, tokenizer: Tokenizer, tag_names, in_channels=1, image_size=(32, 32),
                 tau_init=0.07, tau_min=0.01, use_prompt=True):
        super().__init__()
        self.tokenizer = tokenizer
        self.tag_names = list(tag_names)
        self.cfg_model = cfg_model
        self.tau_min = tau_min
        self.image_encoder = build_image_encoder(cfg_model, in_channels, image_size)
        self.text_encoder = build_text_encoder(cfg_model, len(tokenizer))
        self.tag_encoder = TagEncoder(cfg_model.text_dim, cfg_model.context_len if use_prompt else 0,
                                      cfg_model.init_std)
        self.decoder = TransDecoder(cfg_model.embed_dim, cfg_model.decoder_layers, cfg_model.decoder_heads)
        init_weights(self.decoder, cfg_model.init_std)
        self.mlr_head = MlrHead(cfg_model.embed_dim, len(self.tag_names))
        self.log_tau = nn.Parameter(torch.tensor(math.log(tau_init)))
        self.register_buffer("tag_tokens", tag_token_ids(tokenizer, self.tag_names, cfg_model.tag_len))

    @property
    def tau(self):
        return self.log_tau.exp().clamp(min=self.tau_min)

    def tag_embeddings(self):
        return self.tag_encoder(self.text_encoder, self.tag_tokens)

    def forward(self, images, report_tokens):
        enc = self.image_encoder(images)
        rep = self.text_encoder(report_tokens)
        dec = self.decoder(self.tag_embeddings(), enc.spatial)
        return {
            "image_global": enc.global_,
            "report_global": rep,
            "mlr_logits": self.mlr_head.logits(dec.queries),
            "attention": dec.attention,
        }

    def losses(self, images, report_tokens, labels, use_irc=True, use_mlr=True):
        return self.losses_from(self(images, report_tokens), labels, use_irc, use_mlr)

    def losses_from(self, out, labels, use_irc=True, use_mlr=True):
        zero = out["mlr_logits"].new_zeros(())
        irc = loss_irc(out["image_global"], out["report_global"], self.tau) if use_irc else zero
        mlr = loss_mlr_logits(out["mlr_logits"], labels) if use_mlr else zero
        return loss_total_up(irc, mlr), irc, mlr


# -- data ----------------------------------------------------------------------

def images_to_tensor(images):
    """N x spatial x C (channels-last numpy) -> N x C x spatial float tensor."""
    arr = np.asarray(images, dtype=np.float32)
    return torch.from_numpy(np.moveaxis(arr, -1, 1).copy())


def tokenize_reports(tokenizer, reports, length):
    return torch.tensor([tokenizer.encode_report(r, length) for r in reports], dtype=torch.long)


def build_tokenizer(reports, vocab, extra_names=()):
    texts = list(reports)
    for entry in vocab.entries:
        texts.append(entry.canonical)
        texts.extend(entry.surface_forms())
    texts.extend(extra_names)
    texts.append("background")
    return Tokenizer.build(texts)


def _batches(n, batch_size, generator):
    order = torch.randperm(n, generator=generator)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def average_precision(scores, targets):
    """Mean over positives of the precision at their rank (score ties broken by order)."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    hits = np.asarray(targets)[order].astype(bool)
    if not hits.any():
        return None
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits].mean())


def mean_average_precision(logits, labels):
    aps = [average_precision(logits[:, k], labels[:, k]) for k in range(labels.shape[1])]
    aps = [a for a in aps if a is not None]
    return float(np.mean(aps)) if aps else None


def evaluate_loss(model, images, tokens, labels, cfg_pre, batch_size=256):
    """Mean validation loss and tag-recognition mAP."""
    model.eval()
    total, count, logits = 0.0, 0, []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            sl = slice(start, start + batch_size)
            out = model(images[sl], tokens[sl])
            loss, _, _ = model.losses_from(out, labels[sl], cfg_pre.use_irc, cfg_pre.use_mlr)
            logits.append(out["mlr_logits"])
            n = len(images[sl])
            total += loss.item() * n
            count += n
    val_map = mean_average_precision(torch.cat(logits).numpy(), np.asarray(labels)) if logits else None
    return total / max(count, 1), val_map


def random_flips(images, generator):
    """Flip each image independently along each spatial axis with probability 1/2."""
    out = images.clone()
    for axis in range(2, images.dim()):
        flip = torch.rand(len(images), generator=generator) < 0.5
        if flip.any():
            out[flip] = out[flip].flip(axis)
    return out


def pretrain_epoch(model, optimizer, images, tokens, labels, cfg_pre, generator, epoch=0):
    """One pass of minibatch steps; returns the mean train loss."""
    model.train()
    losses = []
    for b, idx in enumerate(_batches(len(images), cfg_pre.batch_size, generator)):
        x = random_flips(images[idx], generator) if cfg_pre.augment else images[idx]
        loss, irc, mlr = model.losses(x, tokens[idx], labels[idx], cfg_pre.use_irc, cfg_pre.use_mlr)
        if not torch.isfinite(loss):
            raise NonFiniteLossError(
                json.dumps({"epoch": epoch, "batch": b, "loss": loss.item(), "irc": irc.item(), "mlr": mlr.item()})
            )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(loss.item())
    return float(np.mean(losses))


def pretrain_run(cfg, dataset, out_dir, log_fn=None):
    """Train stage 1 on ``dataset``; keeps the best-validation checkpoint in ``out_dir``.

    Returns the list of per-epoch metric records.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cp, cm = cfg.pretrain, cfg.model
    torch.manual_seed(cfg.seed)
    tokenizer = build_tokenizer(dataset.reports, dataset.vocab, cfg.finetune.class_names or ())
    images = images_to_tensor(dataset.images)
    tokens = tokenize_reports(tokenizer, dataset.reports, cm.report_len)
    labels = torch.as_tensor(dataset.labels)
    tr = torch.as_tensor(dataset.split("train"))
    va = torch.as_tensor(dataset.split("val"))
    model = PretrainModel(cm, tokenizer, dataset.vocab.names, images.shape[1], tuple(images.shape[2:]),
                          cp.tau_init, cp.tau_min, cp.use_prompt)
    optimizer = torch.optim.Adam(model.parameters(), lr=cp.lr)
    sched = None
    if cp.cosine:
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, max(cp.epochs, 1))
    gen = torch.Generator().manual_seed(cfg.seed)
    meta = {
        "kind": "pretrain", "tokenizer": tokenizer.to_json(), "tag_names": model.tag_names,
        "in_channels": int(images.shape[1]), "image_size": list(images.shape[2:]),
        "use_prompt": cp.use_prompt, "config": cfg.to_flat(), "init_scheme": cm.init_scheme,
    }
    args = (images[va], tokens[va], labels[va], cp)
    val_loss, val_map = evaluate_loss(model, *args)
    records = [{"epoch": 0, "train_loss": None, "val_loss": val_loss, "val_map": val_map}]
    # with tag recognition on, selection follows validation mAP (the contrastive
    # term keeps overfitting the report pairs after recognition has peaked)
    score = (lambda r: -r["val_map"]) if cp.use_mlr else (lambda r: r["val_loss"])
    best = score(records[0])
    save_checkpoint(out_dir, model.state_dict(), {**meta, "epoch": 0, "val_loss": val_loss, "val_map": val_map})
    for epoch in range(1, cp.epochs + 1):
        t0 = time.time()
        train_loss = pretrain_epoch(model, optimizer, images[tr], tokens[tr], labels[tr], cp, gen, epoch)
        if sched is not None:
            sched.step()
        val_loss, val_map = evaluate_loss(model, *args)
        rec = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "val_map": val_map,
               "tau": model.tau.item(), "seconds": round(time.time() - t0, 3)}
        records.append(rec)
        if log_fn:
            log_fn(rec)
        log.info("pretrain epoch %d train %.4f val %.4f", epoch, train_loss, val_loss)
        if score(rec) < best:
            best = score(rec)
            save_checkpoint(out_dir, model.state_dict(), {**meta, "epoch": epoch, "val_loss": val_loss, "val_map": val_map})
    return records


def load_pretrained(path, cfg_model=None):
    """Rebuild a :class:`PretrainModel` from a checkpoint directory."""
    from .config import RunConfig

    state, meta = load_checkpoint(path)
    cfg = RunConfig.from_flat(meta["config"], env={})
    cm = cfg_model or cfg.model
    model = PretrainModel(cm, Tokenizer(meta["tokenizer"]), meta["tag_names"], meta["in_channels"],
                          tuple(meta["image_size"]), cfg.pretrain.tau_init, cfg.pretrain.tau_min,
                          meta["use_prompt"])
    model.load_state_dict(state)
    return model, meta
