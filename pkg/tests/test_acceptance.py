"""Acceptance criteria, one printed PASS/FAIL line each.

The synthetic experiments (criteria 5-7) take roughly half an hour on one
CPU core.  Set ``SEQMIM_SKIP_SLOW=1`` to skip them.
"""

import hashlib
import os
import time

import numpy as np
import pytest

from seqmim import audit, synth
from seqmim.config import ExperimentConfig
from seqmim.corpus import preprocess
from seqmim.evaluation import EvalProtocol, evaluate, metrics_from_ranks, ndcg_at_k, prepare
from seqmim.experiments import pretrain_epoch_curve, run_pipeline, write_metrics

SLOW = pytest.mark.skipif(os.environ.get("SEQMIM_SKIP_SLOW") == "1", reason="SEQMIM_SKIP_SLOW=1")

# Calibrated experiment budget for the synthetic criteria (identical for pretrained and scratch arms).
PRETRAIN_LR = 0.005
FINETUNE_EPOCHS = 60
FINETUNE_MIN_EPOCHS = 30
# random ranking of 100 candidates gives NDCG@10 of about 0.045; a run this low never left the plateau
CHANCE_FLOOR = 0.08
BENEFIT_SEEDS = (0, 1, 2, 3, 4)
CURVE_SEEDS = (0, 1, 2)
ABLATION_SEEDS = (0, 1, 2)


def report(capsys, criterion, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {criterion}] {'PASS' if ok else 'FAIL'} {detail}")


def _dataset(tmp_root, seed, attr_noise=0.1):
    spec = synth.SynthSpec(seed=seed, attr_noise=attr_noise)
    out = os.path.join(tmp_root, f"synth-{seed}-{attr_noise}")
    inter, attrs = synth.write_files(synth.generate(spec), out, spec)
    return preprocess(inter, attrs)


def _cfg(seed):
    return (ExperimentConfig()
            .set("train.seed", seed).set("eval.seed", seed)
            .set("train.pretrain_lr", PRETRAIN_LR)
            .set("train.finetune_epochs", FINETUNE_EPOCHS)
            .set("train.finetune_min_epochs", FINETUNE_MIN_EPOCHS))


# ---------------------------------------------------------------------------
# 1-4: exact properties
# ---------------------------------------------------------------------------


def test_c1_gradient_audit(capsys):
    t0 = time.time()
    worst = {}
    for loss in audit.LOSSES:
        worst[loss] = max(audit.finite_difference_audit(loss, seed=s) for s in (0, 1))
    elapsed = time.time() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 120
    detail = " ".join(f"{k}={v:.1e}" for k, v in worst.items())
    report(capsys, 1, ok, f"max rel err per loss (d=8, n=6, L=2, seeds 0,1): {detail}; {elapsed:.0f}s")
    assert max(worst.values()) < 1e-4
    assert elapsed < 120


def test_c2_uniform_logit_law(capsys):
    errs = [audit.uniform_logit_law(seed=s) for s in (0, 1)]
    info = max(e[0] for e in errs)
    fine = max(e[1] for e in errs)
    ok = info < 1e-9 and fine < 1e-9
    report(capsys, 2, ok, f"|InfoNCE - ln(1+n_neg)|={info:.1e}, |fine-tune - ln 2|={fine:.1e}")
    assert ok


def test_c3_causality(capsys):
    causal, bidir = audit.causality_check(trials=100)
    report(capsys, 3, causal and bidir, f"causal prefixes unchanged={causal}, bidirectional prefix moved={bidir}")
    assert causal and bidir


def test_c4_metric_oracle(capsys):
    # evaluate() on random tiny instances against brute force, through the full scoring path
    import torch

    from seqmim.corpus import DatasetSplit
    from seqmim.encoder import ModelConfig, SeqEncoder

    rng = np.random.default_rng(0)
    mismatches = 0
    for trial in range(100):
        n_cand = int(rng.integers(1, 6))
        n_items = n_cand + 3
        n_users = int(rng.integers(1, 5))
        enc = SeqEncoder(ModelConfig(n_items=n_items, n_attrs=1, d=4, heads=1, blocks=0, max_len=4, dropout=0.0))
        with torch.no_grad():
            enc.pos_emb.zero_()
            enc.item_emb.copy_(torch.as_tensor(rng.integers(-2, 3, size=enc.item_emb.shape), dtype=torch.float32))
        train = [[int(rng.integers(1, 3))] for _ in range(n_users)]
        split = DatasetSplit(users=list(range(n_users)), train=train, valid_target=[3] * n_users,
                             test_target=[4 + int(rng.integers(0, n_cand))] * n_users, full=[])
        split.full = [t + [3, split.test_target[i]] for i, t in enumerate(train)]
        proto = EvalProtocol(n_negatives=max(1, n_cand - 1), k_values=(1,), seed=trial)
        res = evaluate(enc, split, proto)
        ctx = prepare(split, proto, n_items)
        ranks = []
        for u in range(n_users):
            f = enc.encode(np.array([split.train[u] + [3]]), np.array([[True, True]]), "causal")
            f = f.detach().numpy()[0, -1]
            scores = [float(f @ enc.item_emb[c].detach().numpy()) for c in ctx.candidates[u]]
            g = int(ctx.gt_pos[u])
            ranks.append(1 + sum(1 for j, s in enumerate(scores) if j != g and s >= scores[g]))
        hr = sum(r <= 1 for r in ranks) / n_users
        mrr = sum(1 / r for r in ranks) / n_users
        if res.hr[1] != hr or abs(res.mrr - mrr) > 1e-15 or res.ndcg[1] != hr:
            mismatches += 1
    formula = ndcg_at_k(3, 5) == 0.5 and metrics_from_ranks([3], (5,)).ndcg[5] == 0.5
    ok = mismatches == 0 and formula and audit.metric_oracle()
    report(capsys, 4, ok, f"{100 - mismatches}/100 instances match brute force; NDCG@5(rank 3)=0.5: {formula}")
    assert ok


# ---------------------------------------------------------------------------
# 5-7: calibrated synthetic experiments
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def curves(tmp_path_factory):
    """NDCG@10 after fine-tuning from 0 / 20 (/ 40) pretraining epochs, per seed, plus wall time."""
    root = str(tmp_path_factory.mktemp("accept"))
    out, timing = {}, {}
    for seed in BENEFIT_SEEDS:
        t0 = time.time()
        ds = _dataset(root, seed)
        epochs = [0, 20, 40] if seed in CURVE_SEEDS else [0, 20]
        out[seed] = {e: r.ndcg[10] for e, r in pretrain_epoch_curve(ds, _cfg(seed), epochs)}
        timing[seed] = time.time() - t0
    return out, timing


@SLOW
def test_c5_pretraining_benefit(capsys, curves):
    res, timing = curves
    wins = sum(res[s][20] > res[s][0] for s in BENEFIT_SEEDS)
    rel = [res[s][20] / res[s][0] - 1 for s in BENEFIT_SEEDS]
    mean_rel = float(np.mean(rel))
    per_seed = ", ".join(f"s{s}:{res[s][20]:.4f}/{res[s][0]:.4f}" for s in BENEFIT_SEEDS)
    # seeds without the 40-epoch arm cost the same as a dedicated 20-epoch run
    budget = sum(timing.values())
    ok = wins >= 4 and mean_rel >= 0.03
    report(capsys, 5, ok, f"pretrained/scratch NDCG@10 {per_seed}; wins {wins}/5, mean rel "
                          f"{100 * mean_rel:+.1f}%; wall {budget / 60:.1f} min incl. 40-epoch arms")
    assert wins >= 4 and mean_rel >= 0.03


@SLOW
def test_c6_epoch_onset(capsys, curves):
    res, _ = curves
    m = {e: float(np.mean([res[s][e] for s in CURVE_SEEDS])) for e in (0, 20, 40)}
    first, second = m[20] - m[0], m[40] - m[20]
    collapsed = [(s, e) for s in CURVE_SEEDS for e in (0, 20, 40) if res[s][e] < CHANCE_FLOOR]
    ok = m[20] > m[0] and second < first and not collapsed
    per_seed = ", ".join(f"s{s}:" + "/".join(f"{res[s][e]:.4f}" for e in (0, 20, 40)) for s in CURVE_SEEDS)
    report(capsys, 6, ok, f"mean NDCG@10 at 0/20/40 epochs: {m[0]:.4f}/{m[20]:.4f}/{m[40]:.4f}; "
                          f"gain 0->20 {first:+.4f}, 20->40 {second:+.4f}; {per_seed}; "
                          f"chance-level runs {collapsed}")
    assert ok


@SLOW
def test_c7_map_ablation(capsys, tmp_path):
    full, no_map = [], []
    for seed in ABLATION_SEEDS:
        ds = _dataset(str(tmp_path), seed, attr_noise=0.0)
        cfg = _cfg(seed).set("train.pretrain_epochs", 20)
        full.append(run_pipeline(ds, cfg).result.ndcg[10])
        no_map.append(run_pipeline(ds, cfg.set("loss.map_weight", 0.0)).result.ndcg[10])
    ok = np.mean(no_map) < np.mean(full) and min(full + no_map) >= CHANCE_FLOOR
    report(capsys, 7, ok, f"mean NDCG@10 full={np.mean(full):.4f} vs -MAP={np.mean(no_map):.4f} "
                          f"(per seed {[round(x, 4) for x in full]} / {[round(x, 4) for x in no_map]})")
    assert ok


# ---------------------------------------------------------------------------
# 8-9
# ---------------------------------------------------------------------------


def test_c8_determinism(capsys, tmp_path):
    spec = synth.SynthSpec(n_users=300, seed=11)
    inter, attrs = synth.write_files(synth.generate(spec), tmp_path / "raw", spec)
    ds = preprocess(inter, attrs)
    cfg = (ExperimentConfig().set("train.pretrain_epochs", 2).set("train.finetune_epochs", 3)
           .set("train.seed", 5).set("eval.seed", 5))
    digests = []
    for run in ("a", "b"):
        outcome = run_pipeline(ds, cfg, label="det")
        path = tmp_path / f"{run}.json"
        write_metrics(path, "det", outcome.result)
        digests.append(hashlib.sha256(path.read_bytes()).hexdigest())
    ok = digests[0] == digests[1]
    report(capsys, 8, ok, f"metric JSON sha256 {digests[0][:16]} vs {digests[1][:16]}")
    assert ok


LASTFM_DIR = os.environ.get("SEQMIM_LASTFM_DIR", "")


@pytest.mark.skipif(not LASTFM_DIR, reason="optional stretch: LastFM data not bundled (set SEQMIM_LASTFM_DIR)")
def test_c9_lastfm_stretch(capsys):
    ds = preprocess(os.path.join(LASTFM_DIR, "interactions.tsv"), os.path.join(LASTFM_DIR, "attributes.jsonl"))
    result = run_pipeline(ds, ExperimentConfig()).result
    ok = abs(result.ndcg[10] - 0.3583) <= 0.05
    report(capsys, 9, ok, f"LastFM NDCG@10={result.ndcg[10]:.4f} (target 0.3583 +/- 0.05)")
    assert ok
