from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from seqmim.corpus import AttributeTable
from seqmim.errors import NoEligibleDonor, NoRealPositions, SequenceTooShortForSegment, VocabExhausted
from seqmim.sampler import (
    SamplerConfig,
    build_finetune_batch,
    build_pretrain_batch,
    mask_count,
    mask_items,
    sample_negative_attributes,
    sample_negative_items,
    sample_negative_segment,
    select_segment,
)


def _padded(items, width):
    ids = np.zeros(width, dtype=np.int64)
    ids[width - len(items):] = items
    return ids, ids > 0


def test_mask_counts():
    assert mask_count(0.2, 10) == 2
    assert mask_count(0.2, 1) == 1
    assert mask_count(0.2, 15) == 3
    ids, v = _padded(list(range(1, 11)), 12)
    masked, plan = mask_items(ids, v, 0.2, np.random.default_rng(0), 99)
    assert len(plan.positions) == 2
    assert (masked[plan.positions] == 99).all()
    assert plan.targets == ids[plan.positions].tolist()
    assert all(v[p] for p in plan.positions)


def test_mask_is_deterministic():
    ids, v = _padded(list(range(1, 21)), 25)
    a = mask_items(ids, v, 0.2, np.random.default_rng(5), 99)[1]
    b = mask_items(ids, v, 0.2, np.random.default_rng(5), 99)[1]
    assert a == b


def test_mask_needs_real_items():
    with pytest.raises(NoRealPositions):
        mask_items(np.zeros(4, dtype=int), np.zeros(4, dtype=bool), 0.2, np.random.default_rng(0), 9)


def test_segment_collapses_to_two():
    ids, v = _padded([1, 2, 3, 4], 8)
    for seed in range(20):
        plan = select_segment(ids, v, 8, np.random.default_rng(seed))
        assert plan.length == 2
        assert plan.start >= 4 and plan.end <= 7
        assert plan.segment_items == ids[plan.start : plan.end + 1].tolist()


def test_segment_too_short():
    ids, v = _padded([1, 2, 3], 5)
    with pytest.raises(SequenceTooShortForSegment):
        select_segment(ids, v, 8, np.random.default_rng(0))


def test_segment_distribution_chi_square():
    # real_length 10, seg_max 3: length uniform on {2, 3}, start uniform given length
    ids, v = _padded(list(range(1, 11)), 10)
    rng = np.random.default_rng(123)
    counts = Counter()
    for _ in range(10_000):
        p = select_segment(ids, v, 3, rng)
        counts[(p.length, p.start)] += 1
    cells = [(2, s) for s in range(9)] + [(3, s) for s in range(8)]
    assert set(counts) == set(cells)
    expected = [10_000 * 0.5 / 9] * 9 + [10_000 * 0.5 / 8] * 8
    observed = [counts[c] for c in cells]
    assert stats.chisquare(observed, expected).pvalue > 0.01


def test_negative_item_forced_and_empty():
    rng = np.random.default_rng(0)
    for _ in range(10):
        assert sample_negative_items([1, 2, 4, 5], 1, rng, 5) == [3]
    assert sample_negative_items([1], 0, rng, 5) == []
    with pytest.raises(VocabExhausted):
        sample_negative_items([1, 2, 3, 4, 5], 1, rng, 5)


def test_negative_attributes_avoid_item_set():
    rng = np.random.default_rng(1)
    for _ in range(50):
        out = sample_negative_attributes([1, 3], 2, rng, 6)
        assert len(set(out)) == 2 and not {1, 3} & set(out)


def test_negative_items_uniform_chi_square():
    rng = np.random.default_rng(7)
    draws = [sample_negative_items([2, 5], 1, rng, 8)[0] for _ in range(6000)]
    c = Counter(draws)
    assert set(c) == {1, 3, 4, 6, 7, 8}
    assert stats.chisquare([c[k] for k in sorted(c)]).pvalue > 0.01


def test_negative_segment_cases():
    rng = np.random.default_rng(0)
    assert sample_negative_segment([[1, 2, 3, 4, 5]], 5, rng) == [1, 2, 3, 4, 5]
    pairs = {tuple(sample_negative_segment([[1, 2, 3, 4, 5]], 2, rng)) for _ in range(200)}
    assert pairs == {(1, 2), (2, 3), (3, 4), (4, 5)}
    with pytest.raises(NoEligibleDonor):
        sample_negative_segment([[1, 2], [3]], 3, rng)
    assert sample_negative_segment([[1, 2], [1, 2, 9]], 2, rng, avoid=[1, 2]) == [2, 9]


def _table(n_items, n_attrs, empty=()):
    rng = np.random.default_rng(0)
    attrs = {i: [] if i in empty else sorted(rng.choice(np.arange(1, n_attrs + 1), 2, replace=False).tolist())
             for i in range(1, n_items + 1)}
    return AttributeTable(attrs=attrs, n_attrs=n_attrs)


def test_single_sequence_batch_counts():
    hyper = SamplerConfig(mask_ratio=0.2, n_neg_item=1, n_neg_attr=1, n_neg_seg=1)
    b = build_pretrain_batch([[1, 2, 3, 4, 5, 6]], _table(10, 6), hyper, np.random.default_rng(0), 10, 8)
    assert b.mip_neg.shape == (len(b.mask_target), 1)
    assert b.map_neg.shape == (len(b.map_pos), 1)
    assert b.aap_neg.shape == (len(b.aap_pos), 1)
    assert (b.mip_neg != b.mask_target[:, None]).all()
    # no peer can donate a negative segment, so the segment objective sits this batch out
    assert b.sp_row.size == 0


def test_empty_attribute_item_contributes_nothing():
    table = _table(10, 6, empty={3})
    hyper = SamplerConfig()
    b = build_pretrain_batch([[3, 3, 3, 3, 1], [2, 4, 5, 6, 7]], table, hyper, np.random.default_rng(0), 10, 8)
    assert 3 not in b.aap_item.tolist()
    for slot, t in enumerate(b.mask_target):
        if t == 3:
            assert slot not in b.map_slot.tolist()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_pretrain_batch_invariants(seed, batch):
    rng = np.random.default_rng(seed)
    n_items, n_attrs = 15, 8
    seqs = [rng.integers(1, n_items + 1, size=int(rng.integers(1, 12))).tolist() for _ in range(batch)]
    hyper = SamplerConfig(n_neg_item=2, n_neg_attr=2, n_neg_seg=2, seg_max=4)
    table = _table(n_items, n_attrs)
    b = build_pretrain_batch(seqs, table, hyper, rng, n_items, 10)
    mask = n_items + 1
    assert (b.mim_ids[b.mask_row, b.mask_col] == mask).all()
    assert b.validity[b.mask_row, b.mask_col].all()
    for row, t, negs in zip(b.mask_row, b.mask_target, b.mip_neg):
        assert t not in negs and len(set(negs)) == 2
    for slot, negs in zip(b.map_slot, b.map_neg):
        assert not set(negs) & set(table.of(int(b.mask_target[slot])))
    for item, negs in zip(b.aap_item, b.aap_neg):
        assert not set(negs) & set(table.of(int(item)))
    for r, row in enumerate(b.sp_row):
        plan = b.segment_plans[row]
        L = b.seg_len[r]
        assert (b.sp_ids[row, plan.start : plan.end + 1] == mask).all()
        assert b.seg_ids[r, 0, :L].tolist() == plan.segment_items
        for j in range(1, b.seg_ids.shape[1]):
            assert b.seg_ids[r, j, :L].tolist() != plan.segment_items


def test_finetune_batch_shift_and_determinism():
    b = build_finetune_batch([[4, 5, 6]], np.random.default_rng(0), 10, 5)
    v = b.validity[0]
    assert b.input_ids[0][v].tolist() == [4, 5]
    assert b.pos[0][v].tolist() == [5, 6]
    assert all(n != p for n, p in zip(b.neg[0][v], b.pos[0][v]))
    c = build_finetune_batch([[4, 5, 6]], np.random.default_rng(0), 10, 5)
    assert (b.neg == c.neg).all() and (b.input_ids == c.input_ids).all()


def test_default_mask_ratio():
    assert SamplerConfig().mask_ratio == 0.2
