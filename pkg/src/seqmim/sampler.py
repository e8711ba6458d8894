"""Pretraining and fine-tuning batch construction."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import kernels
from .corpus import AttributeTable, pad_batch
from .errors import (
    NoEligibleDonor,
    NoRealPositions,
    SequenceTooShortForSegment,
    VocabExhausted,
)


@dataclass
class SamplerConfig:
    mask_ratio: float = 0.2
    n_neg_item: int = 1
    n_neg_attr: int = 1
    n_neg_seg: int = 1
    seg_max: int = 8


@dataclass
class MaskPlan:
    positions: List[int]
    targets: List[int]


@dataclass
class SegmentPlan:
    start: int
    end: int  # inclusive
    segment_items: List[int]
    negative_segments: List[List[int]] = field(default_factory=list)

    @property
    def length(self) -> int:
        return self.end - self.start + 1


@dataclass
class PretrainBatch:
    """Arrays consumed by the four pretraining losses.

    ``mim_ids`` is the item-masked view (MIP/MAP/AAP), ``sp_ids`` the
    segment-masked view.  Masked slots are addressed by (``mask_row``,
    ``mask_col``); MAP and AAP pairs by one entry per ground-truth attribute.
    Segments are right-padded in ``seg_ids`` with the positive in column 0 of
    the second axis and negatives after it.
    """

    mim_ids: np.ndarray
    validity: np.ndarray
    mask_plans: List[MaskPlan]
    mask_row: np.ndarray
    mask_col: np.ndarray
    mask_target: np.ndarray
    mip_neg: np.ndarray
    map_slot: np.ndarray
    map_pos: np.ndarray
    map_neg: np.ndarray
    aap_item: np.ndarray
    aap_pos: np.ndarray
    aap_neg: np.ndarray
    sp_ids: np.ndarray
    segment_plans: List[Optional[SegmentPlan]]
    sp_row: np.ndarray
    seg_ids: np.ndarray
    seg_len: np.ndarray


@dataclass
class FinetuneBatch:
    input_ids: np.ndarray
    validity: np.ndarray
    pos: np.ndarray
    neg: np.ndarray


def _ceil_count(ratio: float, n: int) -> int:
    # guard against 0.2 * 15 = 3.0000000000000004
    return max(1, math.ceil(ratio * n - 1e-9))


def mask_count(ratio: float, real_length: int) -> int:
    return min(real_length, _ceil_count(ratio, real_length))


def mask_items(seq, validity, mask_ratio: float, rng: np.random.Generator, mask_token: int):
    """Replace ``max(1, ceil(ratio * real_length))`` random real positions with the mask token."""
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError("mask_ratio must lie in (0, 1)")
    seq = np.asarray(seq)
    real = np.flatnonzero(np.asarray(validity))
    if real.size == 0:
        raise NoRealPositions("cannot mask a sequence with no real items")
    count = mask_count(mask_ratio, real.size)
    positions = np.sort(rng.choice(real, size=count, replace=False))
    masked = seq.copy()
    masked[positions] = mask_token
    plan = MaskPlan(positions=positions.tolist(), targets=seq[positions].tolist())
    return masked, plan


def select_segment(seq, validity, seg_max: int, rng: np.random.Generator) -> SegmentPlan:
    """Pick a contiguous real segment; length uniform in [2, min(real_len // 2, seg_max)]."""
    seq = np.asarray(seq)
    real = np.flatnonzero(np.asarray(validity))
    n_real = real.size
    if n_real < 4:
        raise SequenceTooShortForSegment(f"need at least 4 real items, got {n_real}")
    hi = min(n_real // 2, seg_max)
    if hi < 2:
        raise SequenceTooShortForSegment(f"seg_max={seg_max} leaves no valid segment length")
    length = int(rng.integers(2, hi + 1))
    first = int(real[0])
    start = first + int(rng.integers(0, n_real - length + 1))
    end = start + length - 1
    return SegmentPlan(start=start, end=end, segment_items=seq[start : end + 1].tolist())


def _csr(lists):
    lengths = np.fromiter((len(x) for x in lists), dtype=np.int64, count=len(lists))
    indptr = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    values = np.fromiter((v for x in lists for v in x), dtype=np.int64, count=int(indptr[-1]))
    return indptr, values


def sample_complement_batch(exclusions: Sequence[Sequence[int]], universe: int, count: int,
                            rng: np.random.Generator) -> np.ndarray:
    """Per slot, ``count`` distinct uniform draws from {1..universe} minus that slot's exclusions."""
    excl = [sorted(set(int(v) for v in e if 1 <= v <= universe)) for e in exclusions]
    for e in excl:
        if universe - len(e) < count:
            raise VocabExhausted(f"only {universe - len(e)} candidates left for {count} draws")
    indptr, values = _csr(excl)
    uniforms = rng.random((len(excl), count))
    return kernels.sample_complement(uniforms, indptr, values, universe)


def sample_negative_items(exclude, count: int, rng: np.random.Generator, n_items: int) -> List[int]:
    """Uniform sample without replacement from items 1..n_items not in ``exclude``."""
    if count == 0:
        return []
    return sample_complement_batch([list(exclude)], n_items, count, rng)[0].tolist()


def sample_negative_attributes(item_attrs, count: int, rng: np.random.Generator, n_attrs: int) -> List[int]:
    """Uniform sample without replacement from attributes 1..n_attrs outside ``item_attrs``."""
    if count == 0:
        return []
    return sample_complement_batch([list(item_attrs)], n_attrs, count, rng)[0].tolist()


def sample_negative_segment(pool: Sequence[Sequence[int]], length: int, rng: np.random.Generator,
                            avoid: Optional[Sequence[int]] = None) -> List[int]:
    """A contiguous window of ``length`` items from a uniformly chosen donor long enough to host it.

    ``avoid`` (usually the positive segment) is never returned; donors whose
    every window equals it are treated as ineligible.
    """
    avoid = list(avoid) if avoid is not None else None
    eligible = [seq for seq in pool if len(seq) >= length]
    if eligible:
        for _ in range(64):
            donor = eligible[int(rng.integers(len(eligible)))]
            start = int(rng.integers(len(donor) - length + 1))
            window = list(donor[start : start + length])
            if avoid is None or window != avoid:
                return window
        # every draw hit the positive; fall back to enumerating the admissible windows
        windows = [
            list(seq[s : s + length])
            for seq in eligible
            for s in range(len(seq) - length + 1)
        ]
        windows = [w for w in windows if w != avoid]
        if windows:
            return windows[int(rng.integers(len(windows)))]
    raise NoEligibleDonor(f"no donor sequence holds a segment of length {length}")


def build_pretrain_batch(seqs: Sequence[Sequence[int]], attr_table: AttributeTable, hyper: SamplerConfig,
                         rng: np.random.Generator, n_items: int, max_len: int) -> PretrainBatch:
    """Assemble both masked views, every negative slate and the segment encodings for one batch."""
    n_attrs = attr_table.n_attrs
    mask_token = n_items + 1
    ids, validity = pad_batch(seqs, max_len)
    B = ids.shape[0]

    # item-masked view
    mim_ids = ids.copy()
    plans = []
    rows, cols, targets = [], [], []
    for b in range(B):
        masked, plan = mask_items(ids[b], validity[b], hyper.mask_ratio, rng, mask_token)
        mim_ids[b] = masked
        plans.append(plan)
        rows.extend([b] * len(plan.positions))
        cols.extend(plan.positions)
        targets.extend(plan.targets)
    mask_row = np.asarray(rows, dtype=np.int64)
    mask_col = np.asarray(cols, dtype=np.int64)
    mask_target = np.asarray(targets, dtype=np.int64)
    mip_neg = sample_complement_batch([[t] for t in targets], n_items, hyper.n_neg_item, rng)

    # MAP: one slot per (masked position, ground-truth attribute)
    map_slot, map_pos, map_excl = [], [], []
    for slot, t in enumerate(targets):
        a_set = attr_table.of(t)
        for a in a_set:
            map_slot.append(slot)
            map_pos.append(a)
            map_excl.append(a_set)
    map_neg = _attr_negatives(map_excl, n_attrs, hyper.n_neg_attr, rng)

    # AAP: every non-masked real position of the item-masked view
    aap_item, aap_pos, aap_excl = [], [], []
    for b in range(B):
        for t in np.flatnonzero(validity[b] & (mim_ids[b] != mask_token)):
            item = int(ids[b, t])
            a_set = attr_table.of(item)
            for a in a_set:
                aap_item.append(item)
                aap_pos.append(a)
                aap_excl.append(a_set)
    aap_neg = _attr_negatives(aap_excl, n_attrs, hyper.n_neg_attr, rng)

    # segment-masked view, independent of the item mask
    sp_ids = ids.copy()
    seg_plans: List[Optional[SegmentPlan]] = []
    real_items = [ids[b][validity[b]].tolist() for b in range(B)]
    for b in range(B):
        if validity[b].sum() < 4:
            seg_plans.append(None)
            continue
        plan = select_segment(ids[b], validity[b], hyper.seg_max, rng)
        peers = [real_items[o] for o in range(B) if o != b]
        try:
            plan.negative_segments = [
                sample_negative_segment(peers, plan.length, rng, avoid=plan.segment_items)
                for _ in range(hyper.n_neg_seg)
            ]
        except NoEligibleDonor:
            seg_plans.append(None)
            continue
        sp_ids[b, plan.start : plan.end + 1] = mask_token
        seg_plans.append(plan)

    sp_row = np.asarray([b for b, p in enumerate(seg_plans) if p is not None], dtype=np.int64)
    width = max([p.length for p in seg_plans if p is not None], default=1)
    seg_ids = np.zeros((sp_row.size, 1 + hyper.n_neg_seg, width), dtype=np.int64)
    seg_len = np.zeros(sp_row.size, dtype=np.int64)
    for r, b in enumerate(sp_row):
        plan = seg_plans[b]
        seg_len[r] = plan.length
        seg_ids[r, 0, : plan.length] = plan.segment_items
        for j, neg in enumerate(plan.negative_segments):
            seg_ids[r, 1 + j, : plan.length] = neg

    return PretrainBatch(
        mim_ids=mim_ids,
        validity=validity,
        mask_plans=plans,
        mask_row=mask_row,
        mask_col=mask_col,
        mask_target=mask_target,
        mip_neg=mip_neg,
        map_slot=np.asarray(map_slot, dtype=np.int64),
        map_pos=np.asarray(map_pos, dtype=np.int64),
        map_neg=map_neg,
        aap_item=np.asarray(aap_item, dtype=np.int64),
        aap_pos=np.asarray(aap_pos, dtype=np.int64),
        aap_neg=aap_neg,
        sp_ids=sp_ids,
        segment_plans=seg_plans,
        sp_row=sp_row,
        seg_ids=seg_ids,
        seg_len=seg_len,
    )


def _attr_negatives(exclusions, n_attrs, count, rng):
    if not exclusions:
        return np.zeros((0, count), dtype=np.int64)
    return sample_complement_batch(exclusions, n_attrs, count, rng)


def build_finetune_batch(train_seqs: Sequence[Sequence[int]], rng: np.random.Generator, n_items: int,
                         max_len: int) -> FinetuneBatch:
    """Inputs i_1..i_{n-1} against next-item targets i_2..i_n, one uniform negative per position."""
    inputs = [list(s)[:-1] for s in train_seqs]
    nexts = [list(s)[1:] for s in train_seqs]
    input_ids, validity = pad_batch(inputs, max_len)
    pos, _ = pad_batch(nexts, max_len)
    # one draw from the n_items - 1 ids that differ from the positive
    r = rng.integers(0, n_items - 1, size=pos.shape) + 1 if n_items > 1 else np.zeros(pos.shape, np.int64)
    if n_items < 2 and validity.any():
        raise VocabExhausted("need at least two items to draw a negative")
    neg = np.where(r >= pos, r + 1, r)
    neg = np.where(validity, neg, 0).astype(np.int64)
    return FinetuneBatch(input_ids=input_ids, validity=validity, pos=pos, neg=neg)
