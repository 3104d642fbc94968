"""Trainable stacks: image encoders, shared text encoder, prompted tag encoder
and the cross-attention decoder.

Image tensors are channels-first, ``(B, C1, H, W)`` or ``(B, C1, H, W, D)``.
Every image encoder returns an :class:`EncodedImage` whose spatial tokens are
flattened in row-major grid order.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .tokenizer import Tokenizer


@dataclass
class EncodedImage:
    global_: torch.Tensor  # B x C
    spatial: torch.Tensor  # B x P x C
    grid: tuple  # encoder output grid, prod(grid) == P
    skips: List[torch.Tensor] = field(default_factory=list)  # fine -> coarse
    hidden: List[torch.Tensor] = field(default_factory=list)  # per-block tokens (patch family)


@dataclass
class DecoderOutput:
    queries: torch.Tensor  # B x K x C
    attention: torch.Tensor  # B x P x K, final layer, head-averaged
    head_maps: torch.Tensor  # B x heads x K x P, final layer


def init_weights(module, std=0.02):
    """Truncated normal on all weights, zeros on biases.

    Linear maps, embeddings and bare tables use ``std``. Conv kernels use
    sqrt(2 / fan_in) (Adam steps on tiny normalization-invariant kernels are
    effectively huge) and attention input projections use dim**-0.5.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.ConvTranspose2d, nn.ConvTranspose3d)):
            fan_in = m.weight[0].numel() if isinstance(m, (nn.Conv2d, nn.Conv3d)) else m.weight[:, 0].numel()
            s = math.sqrt(2.0 / fan_in)
            nn.init.trunc_normal_(m.weight, std=s, a=-2 * s, b=2 * s)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
        elif isinstance(m, nn.MultiheadAttention):
            # q/k at std 0.02 leaves attention uniform with vanishing gradients
            s = m.embed_dim ** -0.5
            if m.in_proj_weight is not None:
                nn.init.trunc_normal_(m.in_proj_weight, std=s, a=-2 * s, b=2 * s)
            if m.in_proj_bias is not None:
                nn.init.zeros_(m.in_proj_bias)
        elif isinstance(m, (nn.LayerNorm, nn.GroupNorm, nn.BatchNorm2d, nn.BatchNorm3d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        else:
            # bare parameters: class token, positional tables, prompt context
            for p in m.parameters(recurse=False):
                if p.dim() > 0:
                    nn.init.trunc_normal_(p, std=std, a=-2 * std, b=2 * std)


def conv_nd(dims):
    return {2: nn.Conv2d, 3: nn.Conv3d}[dims]


def convT_nd(dims):
    return {2: nn.ConvTranspose2d, 3: nn.ConvTranspose3d}[dims]


def batch_norm(ch, dims):
    return {2: nn.BatchNorm2d, 3: nn.BatchNorm3d}[dims](ch)


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, dims, stride=1):
        super().__init__()
        Conv = conv_nd(dims)
        self.conv1 = Conv(cin, cout, 3, stride=stride, padding=1)
        self.norm1 = batch_norm(cout, dims)
        self.conv2 = Conv(cout, cout, 3, padding=1)
        self.norm2 = batch_norm(cout, dims)
        self.short = None if (cin == cout and stride == 1) else Conv(cin, cout, 1, stride=stride)

    def forward(self, x):
        h = F.gelu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.gelu(h + (x if self.short is None else self.short(x)))


def _check_image(x, channels, dims, multiple, expected=None):
    if x.dim() != dims + 2 or x.shape[1] != channels:
        raise ValueError(
            f"expected image of shape (B, {channels}, {'x'.join(['*'] * dims)}), got {tuple(x.shape)}"
        )
    spatial = tuple(x.shape[2:])
    if expected is not None and spatial != tuple(expected):
        raise ValueError(f"expected spatial dims {tuple(expected)}, got {spatial}")
    for s in spatial:
        if s % multiple:
            raise ValueError(f"spatial dims {spatial} not divisible by {multiple}")
    return spatial


class ConvImageEncoder(nn.Module):
    """Residual conv stack, attention-pooled global feature, per-location projection."""

    def __init__(self, in_channels=1, widths=(16, 32, 64), embed_dim=64, dims=2, pool_heads=4):
        super().__init__()
        self.dims = dims
        self.in_channels = in_channels
        self.stride = 2 ** len(widths)
        self.stem = ConvBlock(in_channels, widths[0], dims)
        chans = [widths[0], *widths]
        self.stages = nn.ModuleList(
            ConvBlock(chans[i], chans[i + 1], dims, stride=2) for i in range(len(widths))
        )
        width = widths[-1]
        self.skip_channels = chans[:-1]  # fine -> coarse, strides 1, 2, ...
        self.width = width
        self.pool = nn.MultiheadAttention(width, pool_heads, batch_first=True)
        self.proj = nn.Linear(width, embed_dim)

    def forward(self, x):
        _check_image(x, self.in_channels, self.dims, self.stride)
        h = self.stem(x)
        skips = [h]
        for stage in self.stages:
            h = stage(h)
            skips.append(h)
        skips.pop()
        grid = tuple(h.shape[2:])
        tokens = h.flatten(2).transpose(1, 2)  # B x P x width
        query = tokens.mean(dim=1, keepdim=True)
        pooled = self.pool(query, tokens, tokens, need_weights=False)[0][:, 0]
        return EncodedImage(self.proj(pooled), self.proj(tokens), grid, skips)

    def reset_pool(self):
        """Attention pool and projection at std width**-0.5 (0.02 stalls training)."""
        std = self.width ** -0.5
        for w in (self.pool.in_proj_weight, self.pool.out_proj.weight, self.proj.weight):
            nn.init.trunc_normal_(w, std=std, a=-2 * std, b=2 * std)


class Block(nn.Module):
    """Pre-norm transformer encoder block."""

    def __init__(self, dim, heads, mlp_ratio=4):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x, mask=None):
        h = self.ln1(x)
        x = x + self.attn(h, h, h, attn_mask=mask, need_weights=False)[0]
        return x + self.mlp(self.ln2(x))


class PatchImageEncoder(nn.Module):
    """Patch embedding + transformer blocks; class token gives the global feature."""

    def __init__(self, in_channels=1, image_size=(32, 32), patch_size=8, dim=64, depth=2,
                 heads=4, embed_dim=64):
        super().__init__()
        self.dims = len(image_size)
        self.in_channels = in_channels
        self.patch_size = patch_size
        self.image_size = tuple(image_size)
        for s in image_size:
            if s % patch_size:
                raise ValueError(f"spatial dims {tuple(image_size)} not divisible by patch size {patch_size}")
        self.grid = tuple(s // patch_size for s in image_size)
        self.width = dim
        self.patch_embed = conv_nd(self.dims)(in_channels, dim, patch_size, stride=patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + math.prod(self.grid), dim))
        self.blocks = nn.ModuleList(Block(dim, heads) for _ in range(depth))
        self.ln_post = nn.LayerNorm(dim)
        self.proj = nn.Linear(dim, embed_dim)

    def forward(self, x):
        _check_image(x, self.in_channels, self.dims, self.patch_size, self.image_size)
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        h = torch.cat([cls, tokens], dim=1) + self.pos_embed
        hidden = []
        for blk in self.blocks:
            h = blk(h)
            hidden.append(h[:, 1:])
        h = self.ln_post(h)
        return EncodedImage(self.proj(h[:, 0]), self.proj(h[:, 1:]), self.grid, [], hidden)


class TextEncoder(nn.Module):
    """Causal transformer over token embeddings; the end-of-sequence position is read out."""

    def __init__(self, vocab_size, dim=64, layers=2, heads=4, max_len=77, embed_dim=64, eot_id=2, pad_id=0):
        super().__init__()
        self.vocab_size = vocab_size
        self.dim = dim
        self.max_len = max_len
        self.eot_id = eot_id
        self.pad_id = pad_id
        self.token_embedding = nn.Embedding(vocab_size, dim)
        self.positional_embedding = nn.Parameter(torch.zeros(max_len, dim))
        self.blocks = nn.ModuleList(Block(dim, heads) for _ in range(layers))
        self.ln_final = nn.LayerNorm(dim)
        self.proj = nn.Linear(dim, embed_dim, bias=False)

    def readout_index(self, tokens):
        """EOT position, else last non-pad position, else 0."""
        is_eot = tokens == self.eot_id
        nonpad = tokens != self.pad_id
        pos = torch.arange(tokens.shape[1], device=tokens.device)
        last_nonpad = torch.where(nonpad, pos, torch.zeros_like(pos)).max(dim=1).values
        first_eot = torch.where(is_eot, pos, torch.full_like(pos, tokens.shape[1])).min(dim=1).values
        return torch.where(is_eot.any(dim=1), first_eot, last_nonpad)

    def encode_embeddings(self, x, readout):
        """``x``: B x L x dim token embeddings (no positions yet)."""
        L = x.shape[1]
        if L > self.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {self.max_len}")
        h = x + self.positional_embedding[:L]
        mask = torch.full((L, L), float("-inf"), dtype=h.dtype, device=h.device).triu(1)
        for blk in self.blocks:
            h = blk(h, mask)
        h = self.ln_final(h)
        return self.proj(h[torch.arange(h.shape[0], device=h.device), readout])

    def forward(self, tokens):
        tokens = torch.as_tensor(tokens)
        if tokens.dim() == 1:
            tokens = tokens[None]
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            bad = tokens[(tokens < 0) | (tokens >= self.vocab_size)][0].item()
            raise ValueError(f"unknown token id {bad} (vocabulary size {self.vocab_size})")
        if tokens.shape[1] == 0:
            tokens = torch.full((tokens.shape[0], 1), self.pad_id, dtype=torch.long)
        return self.encode_embeddings(self.token_embedding(tokens), self.readout_index(tokens))


class TagEncoder(nn.Module):
    """Tag names behind a shared learnable context, through the shared text encoder.

    With ``context_len=0`` the tags are encoded bare (no prompt).
    """

    def __init__(self, text_dim=64, context_len=16, std=0.02):
        super().__init__()
        self.context_len = context_len
        if context_len > 0:
            self.context = nn.Parameter(torch.empty(context_len, text_dim))
            nn.init.trunc_normal_(self.context, std=std, a=-2 * std, b=2 * std)
        else:
            self.register_parameter("context", None)

    def forward(self, text_encoder: TextEncoder, tag_tokens):
        """``tag_tokens``: Q x N2 ids from :meth:`Tokenizer.encode_tag`. Returns Q x C."""
        tag_tokens = torch.as_tensor(tag_tokens, dtype=torch.long)
        emb = text_encoder.token_embedding(tag_tokens)
        readout = text_encoder.readout_index(tag_tokens)
        if self.context is not None:
            if self.context.shape[1] != emb.shape[2]:
                raise ValueError(
                    f"prompt dim {self.context.shape[1]} does not match text dim {emb.shape[2]}"
                )
            ctx = self.context.unsqueeze(0).expand(emb.shape[0], -1, -1).to(emb.dtype)
            emb = torch.cat([ctx, emb], dim=1)
            readout = readout + self.context_len
        return text_encoder.encode_embeddings(emb, readout)


def tag_token_ids(tokenizer: Tokenizer, names, length):
    return torch.tensor([tokenizer.encode_tag(n, length) for n in names], dtype=torch.long)


class DecoderLayer(nn.Module):
    """Post-norm decoder block: query self-attention, cross-attention to pixels, FFN."""

    def __init__(self, dim, heads, mlp_ratio=4):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, q, kv):
        q = self.norm1(q + self.self_attn(q, q, q, need_weights=False)[0])
        out, maps = self.cross_attn(q, kv, kv, need_weights=True, average_attn_weights=False)
        q = self.norm2(q + out)
        q = self.norm3(q + self.ffn(q))
        return q, maps


class TransDecoder(nn.Module):
    def __init__(self, dim=64, layers=2, heads=4):
        super().__init__()
        if layers < 1:
            raise ValueError("decoder needs at least one layer")
        self.dim = dim
        self.layers = nn.ModuleList(DecoderLayer(dim, heads) for _ in range(layers))

    def forward(self, queries, keys_values):
        """``queries``: K x C (shared) or B x K x C; ``keys_values``: B x P x C."""
        if keys_values.dim() == 2:
            keys_values = keys_values[None]
        if queries.dim() == 2:
            queries = queries.unsqueeze(0).expand(keys_values.shape[0], -1, -1)
        if queries.shape[-1] != self.dim or keys_values.shape[-1] != self.dim:
            raise ValueError(
                f"decoder dim {self.dim} does not match queries {tuple(queries.shape)} "
                f"/ keys {tuple(keys_values.shape)}"
            )
        q = queries
        maps = None
        for layer in self.layers:
            q, maps = layer(q, keys_values)
        return DecoderOutput(q, maps.mean(dim=1).transpose(1, 2), maps)


class MlrHead(nn.Module):
    """Per-class C -> 1 maps (one weight row per tag) followed by a sigmoid."""

    def __init__(self, dim=64, num_classes=20):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_classes, dim))
        self.bias = nn.Parameter(torch.zeros(num_classes))
        std = dim ** -0.5
        nn.init.trunc_normal_(self.weight, std=std, a=-2 * std, b=2 * std)

    def logits(self, queries):
        return (queries * self.weight).sum(-1) + self.bias

    def forward(self, queries):
        return torch.sigmoid(self.logits(queries))


def build_image_encoder(cfg_model, in_channels, image_size):
    if cfg_model.encoder == "conv":
        enc = ConvImageEncoder(in_channels, tuple(cfg_model.conv_widths), cfg_model.embed_dim,
                               len(image_size), cfg_model.pool_heads)
        init_weights(enc, cfg_model.init_std)
        enc.reset_pool()
        return enc
    enc = PatchImageEncoder(in_channels, tuple(image_size), cfg_model.patch_size, cfg_model.vit_dim,
                            cfg_model.vit_depth, cfg_model.vit_heads, cfg_model.embed_dim)
    init_weights(enc, cfg_model.init_std)
    return enc


def build_text_encoder(cfg_model, vocab_size):
    enc = TextEncoder(vocab_size, cfg_model.text_dim, cfg_model.text_layers, cfg_model.text_heads,
                      max(cfg_model.report_len, cfg_model.context_len + cfg_model.tag_len),
                      cfg_model.embed_dim)
    init_weights(enc, cfg_model.init_std)
    return enc


# -- 2D -> 3D weight transfer --------------------------------------------------

def adapt_state_dict(state, target: nn.Module):
    """Reshape pre-trained tensors to fit ``target``.

    Conv kernels gain a depth axis by replication divided by the kernel depth;
    patch positional embeddings are resampled to the target grid. Tensors
    that already match pass through; the rest are dropped.
    """
    own = target.state_dict()
    out = {}
    for name, tensor in state.items():
        if name not in own:
            continue
        want = own[name].shape
        if tensor.shape == want:
            out[name] = tensor
        elif tensor.dim() + 1 == len(want) and tuple(tensor.shape) == tuple(want[:-1]):
            depth = want[-1]
            out[name] = tensor.unsqueeze(-1).expand(*tensor.shape, depth).clone() / depth
        elif name.endswith("pos_embed") and tensor.shape[-1] == want[-1]:
            out[name] = _resample_pos_embed(tensor, target.grid if hasattr(target, "grid") else None, want)
    return out


def _resample_pos_embed(pos, target_grid, want):
    cls, tokens = pos[:, :1], pos[:, 1:]
    n = tokens.shape[1]
    side = int(round(math.sqrt(n)))
    dim = tokens.shape[-1]
    grid2 = tokens.reshape(1, side, side, dim).permute(0, 3, 1, 2)
    g = tuple(target_grid)
    grid2 = F.interpolate(grid2, size=g[:2], mode="bilinear", align_corners=False)
    if len(g) == 3:
        grid2 = grid2.unsqueeze(-1).expand(-1, -1, -1, -1, g[2])
    resized = grid2.flatten(2).transpose(1, 2)
    out = torch.cat([cls, resized], dim=1)
    assert out.shape == want
    return out
