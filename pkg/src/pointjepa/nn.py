"""Mini-PointNet patch encoder, positional MLPs, Transformer encoders and the predictor.

Batched tensors use ``(B, L, ...)`` layouts. Variable-length sequences are
right-padded and described by a boolean ``pad`` mask (True marks padding);
padded keys receive zero attention weight.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
from torch import nn

from pointjepa.errors import InvalidArgument, NumericFailure

LN_EPS = 1e-5


POINT_NORMS = ("batch", "layer")


@dataclass(frozen=True)
class ModelConfig:
    c: int = 64
    k: int = 32
    dim: int = 384
    depth: int = 12
    heads: int = 6
    pred_dim: int = 192
    pred_depth: int = 6
    pred_heads: int = 6
    h1: int = 128
    h2: int = 256
    h3: int = 512
    pos_hidden: int = 128
    mlp_ratio: int = 4
    pos_every_block: bool = False  # re-add positional embeddings before each block
    point_norm: str = "batch"  # "batch" | "layer", normalization inside the patch encoder

    def __post_init__(self):
        if self.dim % self.heads:
            raise InvalidArgument(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.pred_dim % self.pred_heads:
            raise InvalidArgument(f"pred_dim {self.pred_dim} not divisible by pred_heads {self.pred_heads}")
        if self.point_norm not in POINT_NORMS:
            raise InvalidArgument(f"point_norm must be one of {POINT_NORMS}")
        for name in ("c", "k", "dim", "depth", "heads", "pred_dim", "pred_depth", "pred_heads",
                     "h1", "h2", "h3", "pos_hidden", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be positive")


def _init_weights(module):
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class PointBatchNorm(nn.BatchNorm1d):
    """Batch norm over every point of every patch in the batch, channels last."""

    def forward(self, x):
        return super().forward(x.reshape(-1, x.shape[-1])).reshape(x.shape)


def _point_norm(kind: str, width: int) -> nn.Module:
    return PointBatchNorm(width, eps=LN_EPS) if kind == "batch" else nn.LayerNorm(width, eps=LN_EPS)


class PointEncoder(nn.Module):
    """Two shared per-point MLPs, each followed by a max-pool over the patch.

    With ``norm="batch"`` the statistics are taken over all points of the batch
    in training mode and from running averages in eval mode.
    """

    def __init__(self, h1: int, h2: int, h3: int, dim: int, norm: str = "batch"):
        super().__init__()
        self.mlp1 = nn.Sequential(nn.Linear(3, h1), _point_norm(norm, h1), nn.GELU(), nn.Linear(h1, h2))
        self.mlp2 = nn.Sequential(
            nn.Linear(2 * h2, h3), _point_norm(norm, h3), nn.GELU(), nn.Linear(h3, dim)
        )

    def forward(self, local: torch.Tensor) -> torch.Tensor:
        # local: (..., k, 3)
        if local.shape[-1] != 3 or local.dim() < 2 or local.shape[-2] < 1:
            raise InvalidArgument(f"expected (..., k, 3) patches, got {tuple(local.shape)}")
        feat = self.mlp1(local)
        pooled = feat.max(dim=-2, keepdim=True).values
        feat = torch.cat([pooled.expand_as(feat), feat], dim=-1)
        return self.mlp2(feat).max(dim=-2).values


class PosEncoder(nn.Module):
    def __init__(self, width: int, hidden: int = 128):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(3, hidden), nn.GELU(), nn.Linear(hidden, width))

    def forward(self, centers: torch.Tensor) -> torch.Tensor:
        return self.net(centers)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = 1.0 / math.sqrt(dim // heads)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, pad=None, return_weights=False):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(-2, -1)) * self.scale
        if pad is not None:
            scores = scores.masked_fill(pad[:, None, None, :], float("-inf"))
        weights = scores.softmax(dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, n, d)
        out = self.proj(out)
        return (out, weights) if return_weights else out


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def forward(self, x, pad=None):
        x = x + self.attn(self.norm1(x), pad)
        return x + self.mlp(self.norm2(x))


def _run_blocks(blocks, norm, x, pad, pos=None):
    for i, blk in enumerate(blocks):
        x = blk(x if pos is None or i == 0 else x + pos, pad)
        if not torch.isfinite(x).all():
            raise NumericFailure(f"non-finite activations after block {i}", block=i)
    return norm(x)


class TransformerEncoder(nn.Module):
    """Pre-norm Transformer with a final layer norm (context or target encoder)."""

    def __init__(self, dim: int, depth: int, heads: int, mlp_ratio: int = 4,
                 pos_every_block: bool = False):
        super().__init__()
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim, eps=LN_EPS)
        self.pos_every_block = pos_every_block

    def forward(self, tokens, positions, pos_encoder: PosEncoder, pad=None):
        if tokens.shape[-2] < 1:
            raise InvalidArgument("encoder needs at least one token")
        pos = pos_encoder(positions)
        return _run_blocks(self.blocks, self.norm, tokens + pos, pad,
                           pos if self.pos_every_block else None)


class Predictor(nn.Module):
    """Narrow Transformer mapping context encodings plus positioned mask tokens to targets."""

    def __init__(self, dim: int, pred_dim: int, depth: int, heads: int,
                 pos_hidden: int = 128, mlp_ratio: int = 4, pos_every_block: bool = False):
        super().__init__()
        self.pos_every_block = pos_every_block
        self.embed = nn.Linear(dim, pred_dim)
        self.pos = PosEncoder(pred_dim, pos_hidden)
        self.mask_token = nn.Parameter(torch.zeros(pred_dim))
        self.blocks = nn.ModuleList(Block(pred_dim, heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(pred_dim, eps=LN_EPS)
        self.head = nn.Linear(pred_dim, dim)

    def forward(self, context, context_pos, target_pos, context_pad=None, target_pad=None):
        """context: (B, mx, D); target_pos: (B, mt, 3) -> predictions (B, mt, D)."""
        b, mx, _ = context.shape
        mt = target_pos.shape[1]
        if mx < 1:
            raise InvalidArgument("predictor needs a non-empty context")
        pos = torch.cat([self.pos(context_pos), self.pos(target_pos)], dim=1)
        x = torch.cat([self.embed(context), self.mask_token.expand(b, mt, -1)], dim=1) + pos
        pad = None
        if context_pad is not None or target_pad is not None:
            cp = context_pad if context_pad is not None else torch.zeros(b, mx, dtype=torch.bool)
            tp = target_pad if target_pad is not None else torch.zeros(b, mt, dtype=torch.bool)
            pad = torch.cat([cp, tp], dim=1)
        x = _run_blocks(self.blocks, self.norm, x, pad, pos if self.pos_every_block else None)
        return self.head(x[:, mx:])


class PointJEPA(nn.Module):
    """Shared patch and positional encoders, context encoder, EMA target encoder, predictor."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.point_encoder = PointEncoder(cfg.h1, cfg.h2, cfg.h3, cfg.dim, cfg.point_norm)
        self.pos_encoder = PosEncoder(cfg.dim, cfg.pos_hidden)
        self.context_encoder = TransformerEncoder(cfg.dim, cfg.depth, cfg.heads, cfg.mlp_ratio,
                                                  cfg.pos_every_block)
        self.predictor = Predictor(cfg.dim, cfg.pred_dim, cfg.pred_depth, cfg.pred_heads,
                                   cfg.pos_hidden, cfg.mlp_ratio, cfg.pos_every_block)
        self.apply(_init_weights)
        nn.init.trunc_normal_(self.predictor.mask_token, std=0.02)
        # identical start; updated only by EMA
        self.target_encoder = copy.deepcopy(self.context_encoder)
        self.target_encoder.requires_grad_(False)

    def trainable_named_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("target_encoder.")]

    def encode(self, local, centers, pad=None):
        """Context-encode full token sequences: local (B, c, k, 3), centers (B, c, 3)."""
        return self.context_encoder(self.point_encoder(local), centers, self.pos_encoder, pad)


# Functional surface -----------------------------------------------------------

def encode_patches(local_coords, point_encoder: PointEncoder):
    return point_encoder(local_coords)


def pos_encode(centers, pos_encoder: PosEncoder):
    return pos_encoder(centers)


def encoder_forward(tokens, positions, encoder: TransformerEncoder, pos_encoder: PosEncoder, pad=None):
    return encoder(tokens, positions, pos_encoder, pad)


def predict_targets(context_enc, context_positions, target_positions, predictor: Predictor):
    """Predict each target block separately from an unbatched context.

    ``context_enc`` is ``(m_x, D)``; ``target_positions`` is a list of ``(|B_i|, 3)``
    tensors. Returns a list of ``(|B_i|, D)`` predictions.
    """
    if context_enc.shape[0] < 1:
        raise InvalidArgument("predictor needs a non-empty context")
    return [
        predictor(context_enc[None], context_positions[None], tp[None])[0]
        for tp in target_positions
    ]


def select_target_embeddings(full_target_enc, blocks):
    c = full_target_enc.shape[0]
    out = []
    for blk in blocks:
        idx = torch.as_tensor(blk, dtype=torch.long)
        if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= c):
            raise InvalidArgument(f"block index out of range for {c} positions")
        out.append(full_target_enc.detach()[idx])
    return out
