import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from seqmim.corpus import DatasetSplit
from seqmim.encoder import ModelConfig, SeqEncoder
from seqmim.errors import VocabExhausted
from seqmim.evaluation import (
    EvalProtocol,
    EvalResult,
    emit_report,
    evaluate,
    format_table,
    hr_at_k,
    load_report,
    metrics_from_ranks,
    mrr,
    ndcg_at_k,
    prepare,
    rank_ground_truth,
    sample_candidates,
)


def test_candidate_count_and_exclusion():
    rng = np.random.default_rng(0)
    hist = list(range(1, 51))
    cands, pos = sample_candidates(hist, 50, EvalProtocol(), rng, 300)
    assert len(cands) == 100 and len(set(cands)) == 100
    assert cands[pos] == 50
    assert not set(cands) - {50} & set(hist)


def test_forced_single_negative():
    hist = [1, 2, 4, 5]
    cands, pos = sample_candidates(hist, 3, EvalProtocol(n_negatives=1, k_values=(1,)), np.random.default_rng(0), 6)
    assert sorted(cands) == [3, 6] and cands[pos] == 3
    with pytest.raises(VocabExhausted):
        sample_candidates([1, 2, 4, 5, 6], 3, EvalProtocol(n_negatives=1, k_values=(1,)), np.random.default_rng(0), 6)


def test_rank_cases():
    assert rank_ground_truth([0.1, 0.9, 0.3], 1) == 1
    assert rank_ground_truth([0.5] * 100, 42) == 100
    assert rank_ground_truth([0.9, 0.5, 0.7, 0.1], 1) == 3


def test_metric_cases():
    assert (hr_at_k(1, 1), ndcg_at_k(1, 5), mrr(1)) == (1.0, 1.0, 1.0)
    assert ndcg_at_k(3, 5) == 0.5
    assert (hr_at_k(11, 10), ndcg_at_k(11, 10)) == (0.0, 0.0)
    assert mrr(11) == 1 / 11


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.integers(0, 3), min_size=1, max_size=5), min_size=1, max_size=8), st.data())
def test_metrics_match_brute_force(score_lists, data):
    ranks = []
    for s in score_lists:
        gt = data.draw(st.integers(0, len(s) - 1))
        r = rank_ground_truth(s, gt)
        assert r == 1 + sum(1 for j, v in enumerate(s) if j != gt and v >= s[gt])
        ranks.append(r)
    res = metrics_from_ranks(ranks, (1, 3, 5))
    n = len(ranks)
    for k in (1, 3, 5):
        assert res.hr[k] == pytest.approx(sum(r <= k for r in ranks) / n, abs=1e-15)
        assert res.ndcg[k] == pytest.approx(sum(1 / math.log2(r + 1) for r in ranks if r <= k) / n, abs=1e-15)
    assert res.mrr == pytest.approx(sum(1 / r for r in ranks) / n, abs=1e-15)


def _split(n_users=5, n_items=150):
    rng = np.random.default_rng(0)
    train, valid, test, full = [], [], [], []
    for _ in range(n_users):
        s = rng.choice(np.arange(3, n_items + 1), size=6, replace=False).tolist()
        train.append(s[:-2]); valid.append(s[-2]); test.append(s[-1]); full.append(s)
    return DatasetSplit(users=list(range(n_users)), train=train, valid_target=valid, test_target=test, full=full)


def _encoder(n_items=150, blocks=1):
    return SeqEncoder(ModelConfig(n_items=n_items, n_attrs=3, d=8, heads=2, blocks=blocks, max_len=10, dropout=0.0))


def test_identical_scores_give_zero_hit_rate():
    enc = _encoder()
    with torch.no_grad():
        enc.item_emb.zero_()
    res = evaluate(enc, _split(), EvalProtocol())
    assert res.hr[10] == 0.0 and res.mrr == 1 / 100


def test_oracle_model():
    split = _split()
    # every test target is item 1 and every context ends in item 2
    for i in range(len(split.users)):
        split.test_target[i] = 1
        split.valid_target[i] = 2
        split.full[i] = split.train[i] + [2, 1]
    enc = _encoder(blocks=0)
    with torch.no_grad():
        enc.item_emb.zero_()
        enc.pos_emb.zero_()
        enc.item_emb[2, 0] = 1.0
        enc.item_emb[1, 0] = 10.0
        enc.item_emb[3:, 0] = -1.0
    res = evaluate(enc, split, EvalProtocol())
    assert res.hr[1] == 1.0 and res.mrr == 1.0


def test_candidates_fixed_per_user_and_seed():
    split = _split()
    a = prepare(split, EvalProtocol(seed=4), 150)
    b = prepare(split, EvalProtocol(seed=4), 150, users=[3, 1])
    np.testing.assert_array_equal(a.candidates[3], b.candidates[0])
    np.testing.assert_array_equal(a.candidates[1], b.candidates[1])
    c = prepare(split, EvalProtocol(seed=5), 150)
    assert not np.array_equal(a.candidates, c.candidates)
    v = prepare(split, EvalProtocol(seed=4, target="valid"), 150)
    assert v.contexts[0] == split.train[0]
    assert a.contexts[0] == split.train[0] + [split.valid_target[0]]


def test_full_scope_runs():
    res = evaluate(_encoder(), _split(), EvalProtocol(scope="full"))
    assert res.n_users == 5 and 0 <= res.hr[10] <= 1


def test_report_roundtrip(tmp_path):
    r = metrics_from_ranks([1, 3, 20], (1, 5, 10), EvalProtocol().to_json())
    emit_report([("model", r)], tmp_path)
    back = load_report(tmp_path / "report.json")
    assert back[0][0] == "model"
    assert back[0][1].hr == r.hr and back[0][1].ndcg == r.ndcg and back[0][1].mrr == r.mrr
    assert EvalResult.from_json(json.loads(json.dumps(r.to_json("x")))).ndcg == r.ndcg
    assert len(format_table([("model", r)]).strip().splitlines()) == 2
    assert format_table([]).strip() == "(no results)"
    emit_report([], tmp_path / "empty")
    assert load_report(tmp_path / "empty" / "report.json") == []


def test_protocol_validation():
    with pytest.raises(ValueError):
        EvalProtocol(target="train")
    with pytest.raises(ValueError):
        EvalProtocol(n_negatives=3, k_values=(10,))
