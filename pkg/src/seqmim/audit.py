"""Finite-difference check of autograd gradients for every training loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import torch

from .corpus import AttributeTable
from .encoder import BIDIRECTIONAL, CAUSAL, Critics, ModelConfig, SeqEncoder, encode
from .objectives import (
    LossWeights,
    aap_loss,
    encode_segments,
    finetune_loss,
    map_loss,
    mip_loss,
    pretrain_loss,
    sp_loss,
)
from .sampler import SamplerConfig, build_finetune_batch, build_pretrain_batch

LOSSES = ("aap", "mip", "map", "sp", "finetune")


@dataclass
class ToyConfig:
    d: int = 8
    max_len: int = 6
    blocks: int = 2
    heads: int = 2
    n_items: int = 12
    n_attrs: int = 6
    n_users: int = 3
    init_std: float = 0.5
    step: float = 1e-5


def _toy_problem(cfg: ToyConfig, seed: int):
    rng = np.random.default_rng(seed)
    seqs = [rng.integers(1, cfg.n_items + 1, size=int(rng.integers(4, cfg.max_len + 1))).tolist()
            for _ in range(cfg.n_users)]
    attrs = {}
    for i in range(1, cfg.n_items + 1):
        k = int(rng.integers(1, 4))
        attrs[i] = sorted(rng.choice(np.arange(1, cfg.n_attrs + 1), size=k, replace=False).tolist())
    table = AttributeTable(attrs=attrs, n_attrs=cfg.n_attrs)
    torch.manual_seed(seed)
    mcfg = ModelConfig(n_items=cfg.n_items, n_attrs=cfg.n_attrs, d=cfg.d, heads=cfg.heads, blocks=cfg.blocks,
                       max_len=cfg.max_len, dropout=0.0, init_std=cfg.init_std)
    encoder = SeqEncoder(mcfg).double().eval()
    critics = Critics(cfg.d, cfg.init_std).double()
    hyper = SamplerConfig(mask_ratio=0.3, n_neg_item=2, n_neg_attr=2, n_neg_seg=2, seg_max=3)
    pre = build_pretrain_batch(seqs, table, hyper, rng, cfg.n_items, cfg.max_len)
    fine = build_finetune_batch(seqs, rng, cfg.n_items, cfg.max_len)
    return encoder, critics, pre, fine


def loss_closure(name: str, encoder, critics, pre, fine, weights: Optional[LossWeights] = None):
    def fn():
        if name == "aap":
            return aap_loss(pre, encoder, critics)[0]
        if name in ("mip", "map"):
            hidden = encode(pre.mim_ids, pre.validity, BIDIRECTIONAL, encoder)
            f = mip_loss if name == "mip" else map_loss
            return f(pre, hidden, encoder, critics)[0]
        if name == "sp":
            hidden = encode(pre.sp_ids, pre.validity, BIDIRECTIONAL, encoder)
            context = hidden[torch.as_tensor(pre.sp_row), -1]
            return sp_loss(context, encode_segments(pre, encoder), critics)[0]
        if name == "finetune":
            hidden = encode(fine.input_ids, fine.validity, CAUSAL, encoder)
            return finetune_loss(fine, hidden, encoder)
        if name == "pretrain":
            return pretrain_loss(pre, encoder, critics, weights).total
        raise ValueError(f"unknown loss {name!r}")

    return fn


def gradient_errors(fn, named_params, step: float = 1e-5) -> Dict[str, Tuple[float, float, float]]:
    """Per tensor: (relative error, |analytic|, |numeric|) with central differences."""
    names = [n for n, _ in named_params]
    params = [p for _, p in named_params]
    loss = fn()
    if loss.requires_grad:
        grads = torch.autograd.grad(loss, params, allow_unused=True)
    else:
        grads = [None] * len(params)
    analytic = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, grads)]
    out = {}
    with torch.no_grad():
        for name, p, a in zip(names, params, analytic):
            numeric = torch.zeros_like(p)
            flat, nflat = p.view(-1), numeric.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + step
                up = float(fn())
                flat[i] = orig - step
                down = float(fn())
                flat[i] = orig
                nflat[i] = (up - down) / (2 * step)
            num_norm = float(torch.linalg.vector_norm(numeric))
            err = float(torch.linalg.vector_norm(a - numeric)) / max(num_norm, 1e-8)
            out[name] = (err, float(torch.linalg.vector_norm(a)), num_norm)
    return out


def finite_difference_audit(loss_selector: str, toy: Optional[ToyConfig] = None, seed: int = 0,
                            weights: Optional[LossWeights] = None, details: bool = False):
    """Max over parameter tensors of ||analytic - numeric|| / max(||numeric||, 1e-8), in float64."""
    toy = toy or ToyConfig()
    encoder, critics, pre, fine = _toy_problem(toy, seed)
    fn = loss_closure(loss_selector, encoder, critics, pre, fine, weights)
    named = [("encoder." + n, p) for n, p in encoder.named_parameters()]
    if loss_selector != "finetune":
        named += [("critic." + n, p) for n, p in critics.named_parameters()]
    errors = gradient_errors(fn, named, toy.step)
    worst = max(e[0] for e in errors.values())
    return (worst, errors) if details else worst


# ---------------------------------------------------------------------------
# invariants
# ---------------------------------------------------------------------------


def uniform_logit_law(seed: int = 0, toy: Optional[ToyConfig] = None) -> Tuple[float, float]:
    """Zero every parameter; return (max |InfoNCE term - ln(1+n_neg)|, max |fine-tune term - ln 2|)."""
    toy = toy or ToyConfig()
    encoder, critics, pre, fine = _toy_problem(toy, seed)
    with torch.no_grad():
        for p in list(encoder.parameters()) + list(critics.parameters()):
            p.zero_()
    worst = 0.0
    hidden = encode(pre.mim_ids, pre.validity, BIDIRECTIONAL, encoder)
    sp_hidden = encode(pre.sp_ids, pre.validity, BIDIRECTIONAL, encoder)
    segs = encode_segments(pre, encoder)
    context = sp_hidden[torch.as_tensor(pre.sp_row), -1]
    with torch.no_grad():
        from .objectives import bilinear_logit, sampled_info_nce

        pairs = [
            (encoder.item_emb[torch.as_tensor(pre.aap_item)], encoder.attr_emb[torch.as_tensor(pre.aap_pos)],
             encoder.attr_emb[torch.as_tensor(pre.aap_neg)], critics.aap),
            (hidden[pre.mask_row, pre.mask_col], encoder.item_emb[torch.as_tensor(pre.mask_target)],
             encoder.item_emb[torch.as_tensor(pre.mip_neg)], critics.mip),
            (hidden[pre.mask_row, pre.mask_col][pre.map_slot], encoder.attr_emb[torch.as_tensor(pre.map_pos)],
             encoder.attr_emb[torch.as_tensor(pre.map_neg)], critics.map),
            (context, segs[:, 0], segs[:, 1:], critics.sp),
        ]
        for x, y, neg, W in pairs:
            terms = sampled_info_nce(bilinear_logit(x, y, W), bilinear_logit(x.unsqueeze(1), neg, W))
            expected = np.log1p(neg.shape[1])
            worst = max(worst, float((terms - expected).abs().max()))
        fh = encode(fine.input_ids, fine.validity, CAUSAL, encoder)
        pos = encoder.item_emb[torch.as_tensor(fine.pos)]
        negs = encoder.item_emb[torch.as_tensor(fine.neg)]
        diff = (fh * pos).sum(-1) - (fh * negs).sum(-1)
        per_term = torch.nn.functional.softplus(-diff)[torch.as_tensor(fine.validity)]
        fine_err = float((per_term - np.log(2.0)).abs().max())
    return worst, fine_err


def causality_check(trials: int = 100, seed: int = 0, d: int = 16, n: int = 10) -> Tuple[bool, bool]:
    """(causal prefixes never move under suffix edits, bidirectional prefixes do move at least once)."""
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    cfg = ModelConfig(n_items=30, n_attrs=5, d=d, heads=2, blocks=2, max_len=n, dropout=0.0, init_std=0.5)
    encoder = SeqEncoder(cfg).eval()
    causal_ok, bidir_moved = True, False
    validity = np.ones((1, n), dtype=bool)
    with torch.no_grad():
        for _ in range(trials):
            ids = rng.integers(1, cfg.n_items + 1, size=(1, n))
            cut = int(rng.integers(1, n))
            other = ids.copy()
            other[0, cut:] = rng.integers(1, cfg.n_items + 1, size=n - cut)
            for direction in (CAUSAL, BIDIRECTIONAL):
                a = encode(ids, validity, direction, encoder)[0, :cut]
                b = encode(other, validity, direction, encoder)[0, :cut]
                same = bool(torch.equal(a, b))
                if direction == CAUSAL:
                    causal_ok &= same
                elif not same:
                    bidir_moved = True
    return causal_ok, bidir_moved


def metric_oracle(instances: int = 100, seed: int = 0) -> bool:
    """``evaluate``'s metric path versus a brute-force recomputation on tiny candidate lists."""
    from .evaluation import metrics_from_ranks, ndcg_at_k, rank_ground_truth
    import math

    rng = np.random.default_rng(seed)
    for _ in range(instances):
        n_users = int(rng.integers(1, 6))
        ranks = []
        for _ in range(n_users):
            m = int(rng.integers(1, 6))
            scores = rng.integers(0, 4, size=m).astype(float)
            gt = int(rng.integers(0, m))
            r = rank_ground_truth(scores, gt)
            brute = 1 + sum(1 for j in range(m) if j != gt and scores[j] >= scores[gt])
            if r != brute:
                return False
            ranks.append(brute)
        res = metrics_from_ranks(ranks, (1, 3, 5))
        for k in (1, 3, 5):
            hr = sum(1.0 for r in ranks if r <= k) / n_users
            nd = sum(1.0 / math.log2(r + 1) for r in ranks if r <= k) / n_users
            if abs(res.hr[k] - hr) > 1e-15 or abs(res.ndcg[k] - nd) > 1e-15:
                return False
        if abs(res.mrr - sum(1.0 / r for r in ranks) / n_users) > 1e-15:
            return False
    return ndcg_at_k(3, 5) == 0.5


def _check_uniform():
    a, b = uniform_logit_law()
    return a < 1e-9 and b < 1e-9, f"infonce_err={a:.1e} finetune_err={b:.1e}"


def _check_causal():
    causal, bidir = causality_check()
    return causal and bidir, f"causal_prefix_fixed={causal} bidirectional_moves={bidir}"


def _check_metrics():
    ok = metric_oracle()
    return ok, "brute-force agreement" if ok else "mismatch"


INVARIANTS = {
    "uniform_logit": _check_uniform,
    "causality": _check_causal,
    "metric_oracle": _check_metrics,
}
