"""Leave-one-out ranking evaluation against sampled (or all) candidate items."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import kernels
from .corpus import DatasetSplit, pad_batch
from .encoder import CAUSAL, SeqEncoder, encode, trim_padding
from .errors import VocabExhausted

_TARGET_CODE = {"valid": 1, "test": 2}


@dataclass
class EvalProtocol:
    n_negatives: int = 99
    k_values: Tuple[int, ...] = (1, 5, 10)
    seed: int = 0
    target: str = "test"
    scope: str = "sampled"

    def __post_init__(self):
        self.k_values = tuple(int(k) for k in self.k_values)
        if self.n_negatives < 1:
            raise ValueError("n_negatives must be >= 1")
        if self.target not in _TARGET_CODE:
            raise ValueError(f"target must be 'valid' or 'test', not {self.target!r}")
        if self.scope not in ("sampled", "full"):
            raise ValueError(f"scope must be 'sampled' or 'full', not {self.scope!r}")
        if self.scope == "sampled" and any(k > self.n_negatives + 1 for k in self.k_values):
            raise ValueError("k cannot exceed the number of candidates")

    def to_json(self) -> dict:
        return {
            "n_negatives": self.n_negatives,
            "k_values": list(self.k_values),
            "seed": self.seed,
            "scope": self.scope,
            "target": self.target,
        }


@dataclass
class EvalResult:
    hr: Dict[int, float]
    ndcg: Dict[int, float]
    mrr: float
    n_users: int
    protocol: Optional[dict] = None

    def to_json(self, label: str = "") -> dict:
        return {
            "label": label,
            "protocol": self.protocol,
            "metrics": {
                "hr": {str(k): v for k, v in sorted(self.hr.items())},
                "ndcg": {str(k): v for k, v in sorted(self.ndcg.items())},
                "mrr": self.mrr,
            },
            "n_users": self.n_users,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EvalResult":
        m = obj["metrics"]
        return cls(
            hr={int(k): float(v) for k, v in m["hr"].items()},
            ndcg={int(k): float(v) for k, v in m["ndcg"].items()},
            mrr=float(m["mrr"]),
            n_users=int(obj["n_users"]),
            protocol=obj.get("protocol"),
        )


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def rank_ground_truth(scores, gt_position: int) -> int:
    """1 + #candidates scoring strictly higher + #other candidates tied with the ground truth."""
    scores = np.asarray(scores, dtype=np.float64)
    return int(kernels.pessimistic_ranks(scores[None, :], np.array([gt_position]))[0])


def hr_at_k(rank: int, k: int) -> float:
    return 1.0 if rank <= k else 0.0


def ndcg_at_k(rank: int, k: int) -> float:
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def mrr(rank: int) -> float:
    return 1.0 / rank


def metrics_from_ranks(ranks, k_values=(1, 5, 10), protocol: Optional[dict] = None) -> EvalResult:
    ranks = np.asarray(ranks, dtype=np.int64)
    n = int(ranks.size)
    if n == 0:
        return EvalResult(hr={k: 0.0 for k in k_values}, ndcg={k: 0.0 for k in k_values}, mrr=0.0,
                          n_users=0, protocol=protocol)
    hr = {k: float(np.mean(ranks <= k)) for k in k_values}
    gains = 1.0 / np.log2(ranks + 1.0)
    ndcg = {k: float(np.mean(np.where(ranks <= k, gains, 0.0))) for k in k_values}
    return EvalResult(hr=hr, ndcg=ndcg, mrr=float(np.mean(1.0 / ranks)), n_users=n, protocol=protocol)


# ---------------------------------------------------------------------------
# candidates
# ---------------------------------------------------------------------------


def _user_rng(protocol: EvalProtocol, user: int) -> np.random.Generator:
    return np.random.default_rng([protocol.seed, _TARGET_CODE[protocol.target], int(user)])


def sample_candidates(user_history, ground_truth: int, protocol: EvalProtocol, rng: np.random.Generator,
                      n_items: int) -> Tuple[List[int], int]:
    """Ground truth plus ``n_negatives`` items the user never touched, in random order.

    Returns (candidates, index of the ground truth).
    """
    cands, pos = _sample_many([user_history], [ground_truth], protocol.n_negatives, [rng], n_items)
    return cands[0].tolist(), int(pos[0])


def _sample_many(histories, truths, n_negatives, rngs, n_items):
    excl, uniforms = [], []
    for hist, gt, rng in zip(histories, truths, rngs):
        e = sorted(set(int(v) for v in hist) | {int(gt)})
        if n_items - len(e) < n_negatives:
            raise VocabExhausted(f"only {n_items - len(e)} unseen items for {n_negatives} negatives")
        excl.append(e)
        uniforms.append(rng.random(n_negatives))
    lengths = np.fromiter((len(e) for e in excl), dtype=np.int64, count=len(excl))
    indptr = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    values = np.fromiter((v for e in excl for v in e), dtype=np.int64, count=int(indptr[-1]))
    negs = kernels.sample_complement(np.asarray(uniforms).reshape(len(excl), n_negatives), indptr, values, n_items)
    cands = np.empty((len(excl), n_negatives + 1), dtype=np.int64)
    gt_pos = np.empty(len(excl), dtype=np.int64)
    for u, rng in enumerate(rngs):
        row = np.concatenate([[truths[u]], negs[u]])
        perm = rng.permutation(n_negatives + 1)
        cands[u] = row[perm]
        gt_pos[u] = int(np.flatnonzero(perm == 0)[0])
    return cands, gt_pos


@dataclass
class EvalContext:
    """Contexts, targets and (for sampled scope) frozen candidate slates for one protocol."""

    contexts: List[List[int]]
    targets: np.ndarray
    candidates: Optional[np.ndarray] = None
    gt_pos: Optional[np.ndarray] = None


def prepare(split: DatasetSplit, protocol: EvalProtocol, n_items: int,
            users: Optional[Sequence[int]] = None) -> EvalContext:
    idx = range(len(split.users)) if users is None else users
    if protocol.target == "valid":
        contexts = [split.train[i] for i in idx]
        targets = np.asarray([split.valid_target[i] for i in idx], dtype=np.int64)
    else:
        contexts = [split.train[i] + [split.valid_target[i]] for i in idx]
        targets = np.asarray([split.test_target[i] for i in idx], dtype=np.int64)
    ctx = EvalContext(contexts=contexts, targets=targets)
    if protocol.scope == "sampled":
        rngs = [_user_rng(protocol, split.users[i]) for i in idx]
        histories = [split.full[i] for i in idx]
        ctx.candidates, ctx.gt_pos = _sample_many(histories, targets, protocol.n_negatives, rngs, n_items)
    return ctx


@torch.no_grad()
def score_contexts(encoder: SeqEncoder, contexts, candidates=None, batch_size: int = 512):
    """Causal-encode each context and score its candidates (or every item when ``candidates`` is None)."""
    was_training = encoder.training
    encoder.eval()
    max_len = encoder.config.max_len
    out = []
    try:
        for lo in range(0, len(contexts), batch_size):
            ids, validity = pad_batch(contexts[lo : lo + batch_size], max_len)
            ids, validity, offset = trim_padding(ids, validity)
            hidden = encode(ids, validity, CAUSAL, encoder, pos_offset=offset)
            f_t = hidden[:, -1]
            if candidates is None:
                scores = f_t @ encoder.item_emb[1 : encoder.config.n_items + 1].T
            else:
                cand = torch.as_tensor(candidates[lo : lo + batch_size], dtype=torch.long)
                scores = (encoder.item_emb[cand] * f_t.unsqueeze(1)).sum(-1)
            out.append(scores.double().numpy())
    finally:
        encoder.train(was_training)
    return np.concatenate(out, axis=0) if out else np.zeros((0, 0))


def evaluate(encoder: SeqEncoder, split: DatasetSplit, protocol: EvalProtocol,
             context: Optional[EvalContext] = None, batch_size: int = 512) -> EvalResult:
    """Average HR@k, NDCG@k and MRR over users; pass a prepared ``context`` to reuse candidates."""
    n_items = encoder.config.n_items
    ctx = context or prepare(split, protocol, n_items)
    if protocol.scope == "sampled":
        scores = score_contexts(encoder, ctx.contexts, ctx.candidates, batch_size)
        ranks = kernels.pessimistic_ranks(scores, ctx.gt_pos)
    else:
        scores = score_contexts(encoder, ctx.contexts, None, batch_size)
        ranks = kernels.pessimistic_ranks(scores, ctx.targets - 1)
    return metrics_from_ranks(ranks, protocol.k_values, protocol.to_json())


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def format_table(results: Sequence[Tuple[str, EvalResult]]) -> str:
    if not results:
        return "(no results)\n"
    ks = sorted(results[0][1].hr)
    cols = [f"HR@{k}" for k in ks] + [f"NDCG@{k}" for k in ks if k != 1] + ["MRR"]
    width = max(12, max(len(label) for label, _ in results) + 2)
    lines = ["label".ljust(width) + "".join(c.rjust(10) for c in cols)]
    for label, r in results:
        vals = [r.hr[k] for k in ks] + [r.ndcg[k] for k in ks if k != 1] + [r.mrr]
        lines.append(label.ljust(width) + "".join(f"{v:10.4f}" for v in vals))
    return "\n".join(lines) + "\n"


def emit_report(results: Sequence[Tuple[str, EvalResult]], out_dir, curve: Optional[dict] = None):
    """Write ``report.json`` and ``report.txt``; with ``curve`` also ``curve.png``.

    ``curve`` is ``{"x": [...], "x_label": str}`` aligned with ``results``.
    Returns the list of written paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    payload = [r.to_json(label) for label, r in results]
    paths = []
    path = os.path.join(out_dir, "report.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    paths.append(path)
    path = os.path.join(out_dir, "report.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_table(results))
    paths.append(path)
    if curve and results:
        paths.append(_plot_curve(results, curve, out_dir))
    return paths


def _plot_curve(results, curve, out_dir):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = curve["x"]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for k in sorted(results[0][1].hr):
        if k == 1:
            continue
        ax.plot(xs, [r.hr[k] for _, r in results], marker="o", label=f"HR@{k}")
        ax.plot(xs, [r.ndcg[k] for _, r in results], marker="s", label=f"NDCG@{k}")
    ax.set_xlabel(curve.get("x_label", "x"))
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = os.path.join(out_dir, "curve.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def load_report(path) -> List[Tuple[str, EvalResult]]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return [(obj["label"], EvalResult.from_json(obj)) for obj in payload]
