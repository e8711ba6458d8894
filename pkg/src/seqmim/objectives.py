"""Contrastive pretraining losses (AAP, MIP, MAP, SP) and the pairwise fine-tuning loss.

Each pretraining objective is a sampled InfoNCE term: softmax cross-entropy
of the positive critic score against its negatives, averaged over the
objective's terms.  Critic scores are ``sigmoid(x^T W y)`` unless
``raw_bilinear`` is set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import torch
import torch.nn.functional as F

from .encoder import BIDIRECTIONAL, Critics, SeqEncoder, encode, trim_padding
from .sampler import FinetuneBatch, PretrainBatch

OBJECTIVES = ("aap", "mip", "map", "sp")


@dataclass
class LossWeights:
    aap: float = 0.2
    mip: float = 1.0
    map: float = 1.0
    sp: float = 0.5

    def __post_init__(self):
        for name in OBJECTIVES:
            w = getattr(self, name)
            if not math.isfinite(w) or w < 0:
                raise ValueError(f"loss weight {name}={w} must be finite and non-negative")

    def as_dict(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in OBJECTIVES}

    def without(self, name: str) -> "LossWeights":
        w = self.as_dict()
        w[name] = 0.0
        return LossWeights(**w)


@dataclass
class LossReport:
    """``means``/``counts`` only hold objectives that were computed; ``total`` is a tensor."""

    total: torch.Tensor
    means: Dict[str, torch.Tensor] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)

    def summary(self) -> Dict[str, float]:
        out = {f"{k}_loss": float(v.detach()) for k, v in self.means.items()}
        out.update({f"{k}_terms": n for k, n in self.counts.items()})
        out["total_loss"] = float(self.total.detach())
        return out


def bilinear_logit(x, y, W, raw: bool = False):
    """sigmoid(x^T W y) over the trailing dimension (broadcasting over leading ones)."""
    s = ((x @ W) * y).sum(-1)
    return s if raw else torch.sigmoid(s)


def sampled_info_nce(pos_score, neg_scores):
    """-[pos - logsumexp({pos} U negs)] per term; ``neg_scores`` carries negatives on its last axis."""
    pos = torch.as_tensor(pos_score, dtype=torch.float64) if not isinstance(pos_score, torch.Tensor) else pos_score
    neg = torch.as_tensor(neg_scores, dtype=pos.dtype) if not isinstance(neg_scores, torch.Tensor) else neg_scores
    if neg.shape[-1] < 1:
        raise ValueError("at least one negative is required")
    logits = torch.cat([pos.unsqueeze(-1), neg], dim=-1)
    return torch.logsumexp(logits, dim=-1) - pos


def _mean(terms):
    if terms.numel() == 0:
        return terms.sum()  # zero that still belongs to the graph
    return terms.mean()


def _t(a, device=None):
    return torch.as_tensor(a, dtype=torch.long, device=device)


def aap_loss(batch: PretrainBatch, encoder: SeqEncoder, critics: Critics, raw: bool = False):
    """Item embedding vs. each of its attributes, against attributes the item lacks."""
    e_i = encoder.item_emb[_t(batch.aap_item)]
    pos = bilinear_logit(e_i, encoder.attr_emb[_t(batch.aap_pos)], critics.aap, raw)
    neg = bilinear_logit(e_i.unsqueeze(1), encoder.attr_emb[_t(batch.aap_neg)], critics.aap, raw)
    terms = sampled_info_nce(pos, neg)
    return _mean(terms), terms.numel()


def mip_loss(batch: PretrainBatch, hidden, encoder: SeqEncoder, critics: Critics, raw: bool = False):
    """Masked-position state vs. the item that was masked out."""
    f_t = hidden[_t(batch.mask_row), _t(batch.mask_col)]
    pos = bilinear_logit(f_t, encoder.item_emb[_t(batch.mask_target)], critics.mip, raw)
    neg = bilinear_logit(f_t.unsqueeze(1), encoder.item_emb[_t(batch.mip_neg)], critics.mip, raw)
    terms = sampled_info_nce(pos, neg)
    return _mean(terms), terms.numel()


def map_loss(batch: PretrainBatch, hidden, encoder: SeqEncoder, critics: Critics, raw: bool = False):
    """Masked-position state vs. each attribute of the masked item."""
    slot = _t(batch.map_slot)
    f_t = hidden[_t(batch.mask_row)[slot], _t(batch.mask_col)[slot]]
    pos = bilinear_logit(f_t, encoder.attr_emb[_t(batch.map_pos)], critics.map, raw)
    neg = bilinear_logit(f_t.unsqueeze(1), encoder.attr_emb[_t(batch.map_neg)], critics.map, raw)
    terms = sampled_info_nce(pos, neg)
    return _mean(terms), terms.numel()


def encode_segments(batch: PretrainBatch, encoder: SeqEncoder):
    """Standalone bidirectional encoding of every segment (positions from 0, right-padded).

    Returns [S, 1 + n_neg, d]: the state at each segment's last real position.
    """
    S, C, W = batch.seg_ids.shape
    flat = _t(batch.seg_ids.reshape(S * C, W))
    lengths = _t(batch.seg_len).repeat_interleave(C)
    validity = torch.arange(W).unsqueeze(0) < lengths.unsqueeze(1)
    hidden = encode(flat, validity, BIDIRECTIONAL, encoder, pos_offset=0)
    last = hidden[torch.arange(S * C), lengths - 1]
    return last.reshape(S, C, -1)


def sp_loss(context, segments, critics: Critics, raw: bool = False):
    """``context`` [S, d]; ``segments`` [S, 1 + n_neg, d] with the true segment first."""
    pos = bilinear_logit(context, segments[:, 0], critics.sp, raw)
    neg = bilinear_logit(context.unsqueeze(1), segments[:, 1:], critics.sp, raw)
    terms = sampled_info_nce(pos, neg)
    return _mean(terms), terms.numel()


def pretrain_loss(batch: PretrainBatch, encoder: SeqEncoder, critics: Critics,
                  weights: Optional[LossWeights] = None, raw: bool = False) -> LossReport:
    """Weighted sum of the four objectives.  Objectives with weight 0 are not computed at all."""
    weights = weights or LossWeights()
    w = weights.as_dict()
    means, counts = {}, {}
    param = encoder.item_emb
    total = param.new_zeros(())

    if w["mip"] > 0 or w["map"] > 0:
        ids, validity, offset = trim_padding(batch.mim_ids, batch.validity)
        hidden = encode(ids, validity, BIDIRECTIONAL, encoder, pos_offset=offset)
        shifted = _ShiftedHidden(hidden, offset)
    if w["aap"] > 0:
        means["aap"], counts["aap"] = aap_loss(batch, encoder, critics, raw)
    if w["mip"] > 0:
        means["mip"], counts["mip"] = mip_loss(batch, shifted, encoder, critics, raw)
    if w["map"] > 0:
        means["map"], counts["map"] = map_loss(batch, shifted, encoder, critics, raw)
    if w["sp"] > 0:
        if batch.sp_row.size:
            ids, validity, offset = trim_padding(batch.sp_ids, batch.validity)
            hidden_sp = encode(ids, validity, BIDIRECTIONAL, encoder, pos_offset=offset)
            context = hidden_sp[_t(batch.sp_row), -1]
            segs = encode_segments(batch, encoder)
            means["sp"], counts["sp"] = sp_loss(context, segs, critics, raw)
        else:
            means["sp"], counts["sp"] = param.new_zeros(()), 0

    for name in OBJECTIVES:
        if name in means:
            total = total + w[name] * means[name]
    return LossReport(total=total, means=means, counts=counts)


class _ShiftedHidden:
    """Index a trimmed hidden tensor with full-width column indices."""

    def __init__(self, hidden, offset):
        self.hidden = hidden
        self.offset = offset

    def __getitem__(self, idx):
        rows, cols = idx
        return self.hidden[rows, cols - self.offset]


def finetune_loss(batch: FinetuneBatch, hidden, encoder: SeqEncoder, col_offset: int = 0):
    """Sum over supervised positions of -log sigmoid(score_pos - score_neg), divided by batch size.

    ``hidden`` is the causal encoding of ``batch.input_ids[:, col_offset:]``.
    """
    validity = torch.as_tensor(batch.validity[:, col_offset:])
    pos = encoder.item_emb[_t(batch.pos[:, col_offset:])]
    neg = encoder.item_emb[_t(batch.neg[:, col_offset:])]
    diff = (hidden * pos).sum(-1) - (hidden * neg).sum(-1)
    terms = F.softplus(-diff)[validity]
    return terms.sum() / batch.input_ids.shape[0]
