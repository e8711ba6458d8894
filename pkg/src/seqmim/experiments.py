"""End-to-end runs: pretrain -> transfer -> fine-tune -> evaluate, plus ablations and sweeps."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from .config import ExperimentConfig
from .corpus import Dataset, load_dataset
from .evaluation import EvalResult, evaluate
from .objectives import OBJECTIVES
from .trainer import (
    Checkpoint,
    finetune,
    make_checkpoint,
    pretrain,
    save_checkpoint,
    transfer_parameters,
)

log = logging.getLogger(__name__)


@dataclass
class RunOutcome:
    label: str
    result: EvalResult
    pretrained: Optional[Checkpoint]
    finetuned: Checkpoint


def run_pipeline(ds: Dataset, cfg: ExperimentConfig, label: str = "run", use_pretraining: bool = True,
                 out_dir: Optional[str] = None) -> RunOutcome:
    """One full run.  ``use_pretraining=False`` (or 0 pretrain epochs) fine-tunes from scratch."""
    mcfg = cfg.model_config(ds.n_items, ds.n_attrs)
    tcfg = cfg.train_config()
    pre = None
    init = None
    if use_pretraining and tcfg.pretrain_epochs > 0:
        pre = pretrain(ds, tcfg, mcfg, cfg.sampler_config(), cfg.weights(),
                       out_dir=os.path.join(out_dir, "pretrain") if out_dir else None)
        init = transfer_parameters(pre, mcfg)
    fine = finetune(init, ds, tcfg, model_cfg=mcfg, protocol=cfg.protocol("valid"))
    result = evaluate(fine.encoder(), ds.split, cfg.protocol("test"))
    if out_dir:
        write_run(out_dir, cfg, label, result, pre, fine)
    return RunOutcome(label=label, result=result, pretrained=pre, finetuned=fine)


def write_run(out_dir, cfg: ExperimentConfig, label, result: EvalResult, pre, fine):
    os.makedirs(out_dir, exist_ok=True)
    cfg.write(os.path.join(out_dir, "config.txt"))
    if pre is not None:
        save_checkpoint(pre, os.path.join(out_dir, "pretrained"))
    save_checkpoint(fine, os.path.join(out_dir, "finetuned"))
    write_metrics(os.path.join(out_dir, "metrics.json"), label, result)


def write_metrics(path, label: str, result: EvalResult):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(result.to_json(label), fh, indent=2, sort_keys=True)
        fh.write("\n")


def pretrain_epoch_curve(ds: Dataset, cfg: ExperimentConfig, epochs: Sequence[int]) -> List[Tuple[int, EvalResult]]:
    """Fine-tune from snapshots taken after each listed pretraining epoch (0 = no pretraining).

    One pretraining run of ``max(epochs)`` epochs supplies every snapshot.
    """
    epochs = sorted(set(int(e) for e in epochs))
    mcfg = cfg.model_config(ds.n_items, ds.n_attrs)
    tcfg = cfg.train_config()
    snapshots: Dict[int, Checkpoint] = {}
    wanted = set(epochs)

    def keep(epoch, encoder, critics, row):
        if epoch in wanted:
            snapshots[epoch] = make_checkpoint(encoder, critics, "pretrained", epoch)

    last = max(epochs)
    if last > 0:
        pre_cfg = cfg.set("train.pretrain_epochs", last).train_config()
        pretrain(ds, pre_cfg, mcfg, cfg.sampler_config(), cfg.weights(), on_epoch=keep)
    out = []
    for e in epochs:
        init = transfer_parameters(snapshots[e], mcfg) if e > 0 else None
        fine = finetune(init, ds, tcfg, model_cfg=mcfg, protocol=cfg.protocol("valid"))
        out.append((e, evaluate(fine.encoder(), ds.split, cfg.protocol("test"))))
    return out


def ablation_configs(cfg: ExperimentConfig) -> List[Tuple[str, ExperimentConfig]]:
    """The full model plus one run per objective with that objective's weight set to 0."""
    runs = [("full", cfg)]
    for name in OBJECTIVES:
        runs.append((f"-{name.upper()}", cfg.set(f"loss.{name}_weight", 0.0)))
    return runs


def fraction_configs(cfg: ExperimentConfig, fractions: Sequence[float]) -> List[Tuple[str, ExperimentConfig]]:
    return [(f"fraction={f:g}", cfg.set("train.train_fraction", f)) for f in fractions]


def epoch_configs(cfg: ExperimentConfig, epochs: Sequence[int]) -> List[Tuple[str, ExperimentConfig]]:
    return [(f"pretrain_epochs={e}", cfg.set("train.pretrain_epochs", e)) for e in epochs]


def _run_job(args):
    data_dir, cfg_values, label, out_dir = args
    ds = load_dataset(data_dir)
    outcome = run_pipeline(ds, ExperimentConfig(cfg_values), label=label, out_dir=out_dir)
    return label, outcome.result


def run_many(data_dir: str, runs: Sequence[Tuple[str, ExperimentConfig]], out_dir: str,
             parallel: int = 1) -> List[Tuple[str, EvalResult]]:
    """Run each labelled config end to end under ``out_dir/<index>-<label>``."""
    jobs = [
        (data_dir, cfg.values, label, os.path.join(out_dir, f"{i:02d}-{_slug(label)}"))
        for i, (label, cfg) in enumerate(runs)
    ]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_run_job, jobs))
    return [_run_job(job) for job in jobs]


def _slug(label: str) -> str:
    return "".join(c if c.isalnum() or c in "-_.=" else "_" for c in label)
