"""Synthetic interaction corpora with a planted cluster-level Markov chain.

Items are split into clusters.  Each cluster has one designated successor
(together they form a single cycle) and a block of attributes; a user's
next item comes from the successor cluster with probability
``(1 + c) / (K + c)`` for concentration ``c`` and from any cluster otherwise.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from typing import List, Tuple

import numpy as np
from scipy import stats

from .corpus import RawInteractions


@dataclass
class SynthSpec:
    n_users: int = 2000
    n_items: int = 500
    n_attrs: int = 50
    attrs_per_item: int = 4
    n_clusters: int = 10
    markov_order: int = 1
    transition_concentration: float = 20.0
    attr_noise: float = 0.1
    seq_len_min: int = 5
    seq_len_max: int = 20
    seed: int = 0

    def __post_init__(self):
        if min(self.n_users, self.n_items, self.n_attrs, self.attrs_per_item, self.n_clusters) < 2:
            raise ValueError("all sizes must be >= 2")
        if self.markov_order != 1:
            raise ValueError("only first-order chains are supported")
        if self.transition_concentration <= 0:
            raise ValueError("transition_concentration must be positive")
        if not 0.0 <= self.attr_noise <= 1.0:
            raise ValueError("attr_noise must lie in [0, 1]")
        if self.seq_len_min < 5 or self.seq_len_max < self.seq_len_min:
            raise ValueError("sequence lengths must be >= 5 and ordered")
        if self.n_clusters * self.attrs_per_item > self.n_attrs:
            raise ValueError("n_attrs too small for disjoint cluster attribute blocks")
        if self.n_items < self.n_clusters:
            raise ValueError("need at least one item per cluster")


@dataclass
class SynthData:
    interactions: RawInteractions
    attributes: List[dict]
    item_cluster: np.ndarray
    successor: np.ndarray
    transition: np.ndarray


def transition_matrix(successor: np.ndarray, concentration: float) -> np.ndarray:
    K = successor.size
    T = np.zeros((K, K))
    if math.isinf(concentration):
        T[np.arange(K), successor] = 1.0
        return T
    T[:] = 1.0 / (K + concentration)
    T[np.arange(K), successor] = (1.0 + concentration) / (K + concentration)
    return T


def generate(spec: SynthSpec) -> SynthData:
    rng = np.random.default_rng(spec.seed)
    K = spec.n_clusters
    item_cluster = rng.permutation(np.arange(spec.n_items) % K)
    members = [np.flatnonzero(item_cluster == c) for c in range(K)]
    cycle = rng.permutation(K)
    successor = np.empty(K, dtype=np.int64)
    successor[cycle] = np.roll(cycle, -1)
    T = transition_matrix(successor, spec.transition_concentration)
    cum = np.cumsum(T, axis=1)

    records = []
    for u in range(spec.n_users):
        length = int(rng.integers(spec.seq_len_min, spec.seq_len_max + 1))
        c = int(rng.integers(K))
        base = 1_000_000 + 10_000 * u
        for t in range(length):
            if t:
                c = min(int(np.searchsorted(cum[c], rng.random(), side="right")), K - 1)
            item = int(members[c][rng.integers(members[c].size)])
            records.append((f"u{u}", f"i{item}", base + 60 * t))

    block = spec.attrs_per_item
    attributes = []
    for item in range(spec.n_items):
        c = int(item_cluster[item])
        attrs = list(range(c * block, (c + 1) * block))
        for j in range(block):
            if rng.random() < spec.attr_noise:
                choices = [a for a in range(spec.n_attrs) if a not in attrs]
                attrs[j] = int(choices[rng.integers(len(choices))])
        attributes.append({"item": f"i{item}", "attrs": [f"a{a}" for a in attrs]})

    return SynthData(
        interactions=RawInteractions(records),
        attributes=attributes,
        item_cluster=item_cluster,
        successor=successor,
        transition=T,
    )


def write_files(data: SynthData, out_dir, spec: SynthSpec = None) -> Tuple[str, str]:
    """Write ``interactions.tsv`` and ``attributes.jsonl`` in the corpus input formats."""
    os.makedirs(out_dir, exist_ok=True)
    inter = os.path.join(out_dir, "interactions.tsv")
    with open(inter, "w", encoding="utf-8") as fh:
        for user, item, ts in data.interactions.records:
            fh.write(f"{user}\t{item}\t{ts}\n")
    attrs = os.path.join(out_dir, "attributes.jsonl")
    with open(attrs, "w", encoding="utf-8") as fh:
        for row in data.attributes:
            fh.write(json.dumps(row) + "\n")
    if spec is not None:
        with open(os.path.join(out_dir, "synth_spec.json"), "w", encoding="utf-8") as fh:
            json.dump(asdict(spec), fh, indent=2)
    return inter, attrs


def planted_hit_rates(spec: SynthSpec, k: int = 10, n_negatives: int = 99) -> dict:
    """Expected HR@k of a bigram oracle on the planted chain vs. a popularity ranker.

    Clusters are equally sized in expectation and the chain is doubly
    stochastic, so every item is equally popular and the popularity ranker is
    a random ranking.  The oracle scores an item by the transition probability
    into its cluster; ties are broken uniformly at random.  Negatives are
    treated as independent uniform draws over the other items.
    """
    K, N = spec.n_clusters, spec.n_items
    m = N / K
    conc = spec.transition_concentration
    p_hi = 1.0 if math.isinf(conc) else (1.0 + conc) / (K + conc)

    def tie_hit(n_ahead, n_ties):
        return np.minimum(1.0, np.maximum(0.0, (k - n_ahead) / (n_ties + 1.0)))

    # ground truth in the successor cluster: only same-cluster negatives tie
    t = np.arange(n_negatives + 1)
    pmf_same = stats.binom.pmf(t, n_negatives, (m - 1) / (N - 1))
    hit_in = float(np.sum(pmf_same * tie_hit(0, t)))
    # ground truth elsewhere: successor-cluster negatives rank ahead, the rest tie
    h = np.arange(n_negatives + 1)
    pmf_ahead = stats.binom.pmf(h, n_negatives, m / (N - 1))
    hit_out = float(np.sum(pmf_ahead * tie_hit(h, n_negatives - h)))
    bigram = p_hi * hit_in + (1.0 - p_hi) * hit_out
    popularity = k / (n_negatives + 1)
    return {"bigram_hr": bigram, "popularity_hr": popularity, "p_successor": p_hi}
