"""Self-attentive sequence encoder: embeddings, stacked attention blocks, next-item scores."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import IndexOutOfRange, MaskAllFalseRow

BIDIRECTIONAL = "bidirectional"
CAUSAL = "causal"

# logit assigned to disallowed attention entries
MASK_FILL = -1e9


@dataclass
class ModelConfig:
    n_items: int
    n_attrs: int
    d: int = 64
    heads: int = 2
    blocks: int = 2
    max_len: int = 50
    dropout: float = 0.2
    ffn_mult: int = 4
    init_std: float = 0.02

    def __post_init__(self):
        if self.d < 1 or self.heads < 1 or self.blocks < 0 or self.max_len < 1:
            raise ValueError("model sizes must be positive")
        if self.n_items < 1 or self.n_attrs < 0:
            raise ValueError("vocabulary sizes must be positive")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def mask_token(self) -> int:
        return self.n_items + 1

    def to_dict(self) -> dict:
        return asdict(self)


class AttentionBlock(nn.Module):
    def __init__(self, d: int, heads: int, d_ff: int):
        super().__init__()
        self.heads = heads
        self.w_q = nn.Parameter(torch.empty(d, d))
        self.w_k = nn.Parameter(torch.empty(d, d))
        self.w_v = nn.Parameter(torch.empty(d, d))
        self.w_o = nn.Parameter(torch.empty(d, d))
        self.ln1 = nn.LayerNorm(d)
        self.w_1 = nn.Parameter(torch.empty(d, d_ff))
        self.b_1 = nn.Parameter(torch.zeros(d_ff))
        self.w_2 = nn.Parameter(torch.empty(d_ff, d))
        self.b_2 = nn.Parameter(torch.zeros(d))
        self.ln2 = nn.LayerNorm(d)


class SeqEncoder(nn.Module):
    """All transferable parameters: item/attribute/position embeddings and the attention blocks.

    Item rows: 0 is padding, 1..n_items real items, n_items+1 the mask token.
    Attribute rows: 0 is padding, 1..n_attrs real attributes.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d
        self.item_emb = nn.Parameter(torch.empty(config.n_items + 2, d))
        self.attr_emb = nn.Parameter(torch.empty(config.n_attrs + 1, d))
        self.pos_emb = nn.Parameter(torch.empty(config.max_len, d))
        self.blocks = nn.ModuleList(
            AttentionBlock(d, config.heads, config.ffn_mult * d) for _ in range(config.blocks)
        )
        self.reset_parameters()

    def reset_parameters(self):
        std = self.config.init_std
        for name, p in self.named_parameters():
            if "ln" in name:
                nn.init.ones_(p) if name.endswith("weight") else nn.init.zeros_(p)
            elif name.split(".")[-1].startswith("b_"):
                nn.init.zeros_(p)
            else:
                nn.init.trunc_normal_(p, std=std, a=-2 * std, b=2 * std)

    def encode(self, ids, validity, direction=CAUSAL, pos_offset=None):
        return encode(ids, validity, direction, self, pos_offset=pos_offset)


class Critics(nn.Module):
    """Bilinear critic matrices of the four pretraining objectives (never transferred)."""

    names = ("aap", "mip", "map", "sp")

    def __init__(self, d: int, init_std: float = 0.02):
        super().__init__()
        self.aap = nn.Parameter(torch.empty(d, d))
        self.mip = nn.Parameter(torch.empty(d, d))
        self.map = nn.Parameter(torch.empty(d, d))
        self.sp = nn.Parameter(torch.empty(d, d))
        for p in self.parameters():
            nn.init.trunc_normal_(p, std=init_std, a=-2 * init_std, b=2 * init_std)


# ---------------------------------------------------------------------------
# functional pieces
# ---------------------------------------------------------------------------


def _as_long(ids, device=None):
    if isinstance(ids, torch.Tensor):
        return ids.long()
    return torch.as_tensor(np.asarray(ids), dtype=torch.long, device=device)


def _as_bool(mask):
    if isinstance(mask, torch.Tensor):
        return mask.bool()
    return torch.as_tensor(np.asarray(mask), dtype=torch.bool)


def _default_offset(width: int, max_len: int) -> int:
    # right-align: the last column always takes the last position embedding
    return max_len - width


def embed_sequence(ids, params: SeqEncoder, pos_offset: Optional[int] = None):
    """F0[t] = M_I[ids[t]] + P[pos_offset + t]; works on [n] or [B, n] inputs.

    With the default offset a sequence of width ``max_len`` uses P[0..n-1];
    a narrower (trimmed) batch keeps its last column on P[max_len-1].
    """
    ids = _as_long(ids)
    width = ids.shape[-1]
    max_len = params.pos_emb.shape[0]
    if pos_offset is None:
        pos_offset = _default_offset(width, max_len)
    if pos_offset < 0 or pos_offset + width > max_len:
        raise IndexOutOfRange(f"positions {pos_offset}..{pos_offset + width - 1} exceed max_len={max_len}")
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= params.item_emb.shape[0]):
        raise IndexOutOfRange("item index outside the embedding table")
    return params.item_emb[ids] + params.pos_emb[pos_offset : pos_offset + width]


def build_attention_mask(validity, direction: str):
    """Boolean [.., n, n]; entry [q, k] is True when query q may attend to key k."""
    validity = _as_bool(validity)
    n = validity.shape[-1]
    keys = validity.unsqueeze(-2).expand(*validity.shape[:-1], n, n)
    if direction == CAUSAL:
        tri = torch.tril(torch.ones(n, n, dtype=torch.bool))
        mask = keys & tri
    elif direction == BIDIRECTIONAL:
        mask = keys.clone()
    else:
        raise ValueError(f"unknown direction {direction!r}")
    eye = torch.eye(n, dtype=torch.bool)
    return mask | (eye & validity.unsqueeze(-1))


def attention_block(x, attn_mask, block: AttentionBlock, dropout: float = 0.0, training: bool = False,
                    return_weights: bool = False):
    """Multi-head self-attention then the position-wise FFN, each wrapped as LN(x + dropout(sublayer(x)))."""
    attn_mask = _as_bool(attn_mask)
    if not bool(attn_mask.any(dim=-1).all()):
        raise MaskAllFalseRow("every query row needs at least one attendable key")
    *lead, n, d = x.shape
    h = block.heads
    dh = d // h

    def split(t):
        return t.reshape(*lead, n, h, dh).transpose(-3, -2)

    q = split(x @ block.w_q)
    k = split(x @ block.w_k)
    v = split(x @ block.w_v)
    logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
    logits = logits.masked_fill(~attn_mask.unsqueeze(-3), MASK_FILL)
    weights = torch.softmax(logits, dim=-1)
    heads_out = (weights @ v).transpose(-3, -2).reshape(*lead, n, d)
    attn_out = heads_out @ block.w_o
    x = block.ln1(x + F.dropout(attn_out, dropout, training))
    ffn = torch.relu(x @ block.w_1 + block.b_1) @ block.w_2 + block.b_2
    x = block.ln2(x + F.dropout(ffn, dropout, training))
    if return_weights:
        return x, weights
    return x


def encode(ids, validity, direction, params: SeqEncoder, pos_offset: Optional[int] = None):
    """Embedding followed by every attention block, masked per ``direction``.

    Padding query rows have no attendable key under the causal mask (and under
    both masks when a whole row is padding); they are given a self-loop so the
    block stays well defined.  Their outputs never reach a loss.
    """
    validity = _as_bool(validity)
    x = embed_sequence(ids, params, pos_offset)
    mask = build_attention_mask(validity, direction)
    n = validity.shape[-1]
    eye = torch.eye(n, dtype=torch.bool)
    mask = mask | (eye & ~validity.unsqueeze(-1))
    cfg = params.config
    for block in params.blocks:
        x = attention_block(x, mask, block, cfg.dropout, params.training)
    return x


def last_state(hidden, validity=None):
    """Final-layer state at the last column (the last real item under left padding)."""
    return hidden[..., -1, :]


def score_next_item(f_t, candidates, params: SeqEncoder):
    """Dot products between a context state and candidate item embeddings.

    ``f_t`` is [d] or [B, d]; ``candidates`` is [C] or [B, C].
    """
    cand = _as_long(candidates)
    if cand.numel() and (int(cand.min()) < 0 or int(cand.max()) >= params.item_emb.shape[0]):
        raise IndexOutOfRange("candidate index outside the embedding table")
    emb = params.item_emb[cand]
    return (emb * f_t.unsqueeze(-2)).sum(-1)


def trim_padding(ids: np.ndarray, validity: np.ndarray, min_width: int = 1):
    """Drop leading columns that are padding in every row.

    Returns (ids, validity, pos_offset) such that encoding the trimmed batch
    with ``pos_offset`` gives the same per-position result as the full batch.
    """
    max_len = ids.shape[1]
    real_cols = np.flatnonzero(validity.any(axis=0))
    start = int(real_cols[0]) if real_cols.size else max_len - 1
    start = min(start, max_len - min_width)
    return ids[:, start:], validity[:, start:], start
