"""Two-stage training: bidirectional pretraining, parameter transfer, causal fine-tuning."""

from __future__ import annotations

import base64
import copy
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from .corpus import Dataset, DatasetSplit
from .encoder import CAUSAL, Critics, ModelConfig, SeqEncoder, encode, trim_padding
from .errors import ConfigMismatch, CorruptCheckpoint, DivergenceDetected, NonFiniteGradient
from .evaluation import EvalProtocol, evaluate, prepare
from .objectives import LossWeights, finetune_loss, pretrain_loss
from .sampler import SamplerConfig, build_finetune_batch, build_pretrain_batch

log = logging.getLogger(__name__)

PRETRAINED = "pretrained"
FINETUNED = "finetuned"
INITIAL = "initial"


@dataclass
class TrainConfig:
    pretrain_epochs: int = 100
    pretrain_batch: int = 200
    finetune_epochs: int = 200
    finetune_min_epochs: int = 0  # early stopping cannot fire before this epoch
    finetune_batch: int = 256
    patience: int = 10
    lr: float = 0.001
    pretrain_lr: float = 0.0  # 0 -> use lr
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    train_fraction: float = 1.0
    checkpoint_every: int = 0
    clip_norm: float = 0.0
    raw_bilinear: bool = False

    def __post_init__(self):
        if min(self.pretrain_batch, self.finetune_batch) < 1:
            raise ValueError("batch sizes must be positive")
        if self.pretrain_epochs < 0 or self.finetune_epochs < 0 or self.patience < 1:
            raise ValueError("epoch counts must be non-negative and patience positive")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError("train_fraction must lie in (0, 1]")
        if self.lr <= 0 or self.pretrain_lr < 0:
            raise ValueError("lr must be positive")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[torch.Tensor] = field(default_factory=list)
    v: List[torch.Tensor] = field(default_factory=list)


@torch.no_grad()
def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, in place.  ``None`` gradients count as zero."""
    params = list(params)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    for g in grads:
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteGradient("gradient contains NaN or Inf")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / c2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / c1)
    return params, state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    config: dict
    stage: str
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    history: List[dict] = field(default_factory=list)

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.config)

    def encoder(self, dropout: Optional[float] = None) -> SeqEncoder:
        cfg = self.model_config
        if dropout is not None:
            cfg = ModelConfig(**{**self.config, "dropout": dropout})
        enc = SeqEncoder(cfg)
        _load_into(enc, self.tensors, "encoder.")
        return enc

    def critics(self) -> Optional[Critics]:
        if not any(k.startswith("critic.") for k in self.tensors):
            return None
        crit = Critics(self.config["d"])
        _load_into(crit, self.tensors, "critic.")
        return crit


def _load_into(module, tensors, prefix):
    state = {}
    for name, ref in module.state_dict().items():
        key = prefix + name
        if key not in tensors:
            raise CorruptCheckpoint(f"tensor {key} missing from checkpoint")
        arr = tensors[key]
        if tuple(arr.shape) != tuple(ref.shape):
            raise ConfigMismatch(f"{key}: shape {arr.shape} != {tuple(ref.shape)}")
        state[name] = torch.from_numpy(np.array(arr, dtype=np.float32)).to(ref.dtype)
    module.load_state_dict(state)


def _rng_snapshot(rng: Optional[np.random.Generator]) -> dict:
    out = {"torch": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode("ascii")}
    if rng is not None:
        out["numpy"] = rng.bit_generator.state
    return out


def make_checkpoint(encoder: SeqEncoder, critics: Optional[Critics], stage: str, epoch: int = 0,
                    rng: Optional[np.random.Generator] = None, history=None) -> Checkpoint:
    tensors = {
        "encoder." + k: v.detach().cpu().to(torch.float32).numpy().copy()
        for k, v in encoder.state_dict().items()
    }
    if critics is not None:
        tensors.update(
            {"critic." + k: v.detach().cpu().to(torch.float32).numpy().copy() for k, v in critics.state_dict().items()}
        )
    return Checkpoint(
        tensors=tensors,
        config=encoder.config.to_dict(),
        stage=stage,
        epoch=epoch,
        rng_state=_rng_snapshot(rng),
        history=list(history or []),
    )


def _expected_tensor_names(config: dict, with_critics: bool):
    names = ["encoder." + k for k in SeqEncoder(ModelConfig(**config)).state_dict()]
    if with_critics:
        names += ["critic." + k for k in Critics(config["d"]).state_dict()]
    return names


def save_checkpoint(ckpt: Checkpoint, out_dir) -> str:
    """``manifest.json`` + ``tensors.bin`` (little-endian float32, manifest order) + ``history.jsonl``."""
    os.makedirs(out_dir, exist_ok=True)
    entries, offset = [], 0
    payload = hashlib.sha256()
    with open(os.path.join(out_dir, "tensors.bin"), "wb") as fh:
        for name in sorted(ckpt.tensors):
            blob = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4").tobytes()
            fh.write(blob)
            payload.update(blob)
            entries.append(
                {
                    "name": name,
                    "shape": list(ckpt.tensors[name].shape),
                    "dtype": "float32",
                    "byte_order": "little",
                    "offset": offset,
                    "nbytes": len(blob),
                    "sha256": hashlib.sha256(blob).hexdigest(),
                }
            )
            offset += len(blob)
    manifest = {
        "format": "seqmim-checkpoint/1",
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "config": ckpt.config,
        "rng_state": ckpt.rng_state,
        "tensors": entries,
        "payload_sha256": payload.hexdigest(),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    with open(os.path.join(out_dir, "history.jsonl"), "w", encoding="utf-8") as fh:
        for row in ckpt.history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return out_dir


def load_checkpoint(ckpt_dir) -> Checkpoint:
    try:
        with open(os.path.join(ckpt_dir, "manifest.json"), encoding="utf-8") as fh:
            manifest = json.load(fh)
        with open(os.path.join(ckpt_dir, "tensors.bin"), "rb") as fh:
            data = fh.read()
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"cannot read checkpoint at {ckpt_dir}: {exc}") from None
    if hashlib.sha256(data).hexdigest() != manifest.get("payload_sha256"):
        raise CorruptCheckpoint("payload hash mismatch")
    tensors = {}
    for e in manifest["tensors"]:
        blob = data[e["offset"] : e["offset"] + e["nbytes"]]
        if len(blob) != e["nbytes"] or hashlib.sha256(blob).hexdigest() != e["sha256"]:
            raise CorruptCheckpoint(f"tensor {e['name']} hash mismatch")
        arr = np.frombuffer(blob, dtype="<f4").reshape(e["shape"]).astype(np.float32)
        tensors[e["name"]] = arr
    with_critics = any(k.startswith("critic.") for k in tensors)
    for name in _expected_tensor_names(manifest["config"], with_critics):
        if name not in tensors:
            raise CorruptCheckpoint(f"tensor {name} missing from manifest")
    history = []
    hist_path = os.path.join(ckpt_dir, "history.jsonl")
    if os.path.exists(hist_path):
        with open(hist_path, encoding="utf-8") as fh:
            history = [json.loads(line) for line in fh if line.strip()]
    return Checkpoint(
        tensors=tensors,
        config=manifest["config"],
        stage=manifest["stage"],
        epoch=manifest["epoch"],
        rng_state=manifest.get("rng_state", {}),
        history=history,
    )


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def training_users(n_users: int, fraction: float, seed: int) -> np.ndarray:
    """Indices of the users kept for training, chosen by a seeded shuffle."""
    if fraction >= 1.0:
        return np.arange(n_users)
    keep = max(1, math.ceil(fraction * n_users - 1e-9))
    perm = np.random.default_rng([seed, 101]).permutation(n_users)
    return np.sort(perm[:keep])


def _params(*modules):
    return [p for m in modules if m is not None for p in m.parameters()]


def _optimizer(cfg: TrainConfig, lr: Optional[float] = None) -> AdamState:
    return AdamState(lr=lr or cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)


def _step(loss, params, opt, cfg):
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    if cfg.clip_norm > 0:
        present = [g for g in grads if g is not None]
        norm = torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in present]))
        scale = min(1.0, cfg.clip_norm / (float(norm) + 1e-12))
        grads = [None if g is None else g * scale for g in grads]
    adam_step(params, grads, opt)


def pretrain(data: Dataset, cfg: TrainConfig, model_cfg: ModelConfig,
             sampler_cfg: Optional[SamplerConfig] = None, weights: Optional[LossWeights] = None,
             out_dir=None, on_epoch: Optional[Callable] = None) -> Checkpoint:
    """Run ``cfg.pretrain_epochs`` epochs of the four-objective loss on the train split.

    ``on_epoch(epoch, encoder, critics, row)`` is called after every epoch;
    with ``cfg.checkpoint_every`` and ``out_dir`` a checkpoint is written every
    that many epochs under ``out_dir/epoch_XXXX``.
    """
    sampler_cfg = sampler_cfg or SamplerConfig()
    weights = weights or LossWeights()
    torch.manual_seed(cfg.seed)
    encoder = SeqEncoder(model_cfg)
    critics = Critics(model_cfg.d, model_cfg.init_std)
    params = _params(encoder, critics)
    opt = _optimizer(cfg, cfg.pretrain_lr)
    rng = np.random.default_rng([cfg.seed, 1])
    users = training_users(len(data.split.users), cfg.train_fraction, cfg.seed)
    seqs = [data.split.train[i][-model_cfg.max_len :] for i in users]
    history = []
    encoder.train()
    for epoch in range(1, cfg.pretrain_epochs + 1):
        order = rng.permutation(len(seqs))
        sums: Dict[str, float] = {}
        n_batches = 0
        for lo in range(0, len(order), cfg.pretrain_batch):
            batch_seqs = [seqs[i] for i in order[lo : lo + cfg.pretrain_batch]]
            batch = build_pretrain_batch(batch_seqs, data.attributes, sampler_cfg, rng, model_cfg.n_items,
                                         model_cfg.max_len)
            report = pretrain_loss(batch, encoder, critics, weights, raw=cfg.raw_bilinear)
            if not math.isfinite(float(report.total.detach())):
                raise DivergenceDetected(f"non-finite pretraining loss at epoch {epoch}")
            _step(report.total, params, opt, cfg)
            for k, v in report.summary().items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        row = {"stage": PRETRAINED, "epoch": epoch}
        row.update({k: v / n_batches for k, v in sums.items() if k.endswith("_loss")})
        row.update({k: int(v) for k, v in sums.items() if k.endswith("_terms")})
        history.append(row)
        log.info("pretrain epoch %d %s", epoch, row)
        if on_epoch is not None:
            on_epoch(epoch, encoder, critics, row)
        if out_dir and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(make_checkpoint(encoder, critics, PRETRAINED, epoch, rng, history),
                            os.path.join(out_dir, f"epoch_{epoch:04d}"))
    return make_checkpoint(encoder, critics, PRETRAINED, cfg.pretrain_epochs, rng, history)


_TRANSFER_KEYS = ("n_items", "n_attrs", "d", "heads", "blocks", "max_len", "ffn_mult")


def transfer_parameters(pretrained: Checkpoint, model_cfg: Optional[ModelConfig] = None) -> SeqEncoder:
    """Fresh encoder whose embeddings and attention blocks are copied from ``pretrained``.

    Critic matrices are left behind.  ``model_cfg`` may change the dropout
    rate but no shape-bearing field.
    """
    src = pretrained.config
    if model_cfg is None:
        model_cfg = ModelConfig(**src)
    for key in _TRANSFER_KEYS:
        if getattr(model_cfg, key) != src[key]:
            raise ConfigMismatch(f"{key}: pretrained {src[key]} vs fine-tune {getattr(model_cfg, key)}")
    encoder = SeqEncoder(model_cfg)
    _load_into(encoder, pretrained.tensors, "encoder.")
    return encoder


def finetune(init: Optional[SeqEncoder], data: Dataset, cfg: TrainConfig, model_cfg: Optional[ModelConfig] = None,
             protocol: Optional[EvalProtocol] = None, on_epoch: Optional[Callable] = None) -> Checkpoint:
    """Pairwise next-item training with the causal encoder, keeping the best-validation state.

    ``init=None`` trains from a fresh initialization.  Validation uses NDCG@10
    on the second-to-last item; training stops after ``cfg.patience`` epochs
    without improvement, but never before ``cfg.finetune_min_epochs`` (the
    randomly initialised stack can sit on a chance-level plateau for a while).
    """
    torch.manual_seed(cfg.seed)
    if init is None:
        if model_cfg is None:
            raise ValueError("model_cfg is required when fine-tuning from scratch")
        encoder = SeqEncoder(model_cfg)
    else:
        encoder = init
    mcfg = encoder.config
    params = _params(encoder)
    opt = _optimizer(cfg)
    rng = np.random.default_rng([cfg.seed, 2])
    users = training_users(len(data.split.users), cfg.train_fraction, cfg.seed)
    seqs = [data.split.train[i][-(mcfg.max_len + 1) :] for i in users]
    protocol = protocol or EvalProtocol(seed=cfg.seed)
    valid_protocol = EvalProtocol(
        n_negatives=protocol.n_negatives, k_values=tuple(sorted(set(protocol.k_values) | {10})),
        seed=protocol.seed, target="valid", scope=protocol.scope,
    )
    valid_ctx = prepare(data.split, valid_protocol, mcfg.n_items)

    history = []
    best_score, best_epoch = -1.0, 0
    best_state = copy.deepcopy(encoder.state_dict())
    stale = 0
    for epoch in range(1, cfg.finetune_epochs + 1):
        encoder.train()
        order = rng.permutation(len(seqs))
        total, n_batches = 0.0, 0
        for lo in range(0, len(order), cfg.finetune_batch):
            batch = build_finetune_batch([seqs[i] for i in order[lo : lo + cfg.finetune_batch]], rng,
                                         mcfg.n_items, mcfg.max_len)
            ids, validity, offset = trim_padding(batch.input_ids, batch.validity)
            hidden = encode(ids, validity, CAUSAL, encoder, pos_offset=offset)
            loss = finetune_loss(batch, hidden, encoder, col_offset=offset)
            if not math.isfinite(float(loss)):
                raise DivergenceDetected(f"non-finite fine-tuning loss at epoch {epoch}")
            _step(loss, params, opt, cfg)
            total += float(loss)
            n_batches += 1
        result = evaluate(encoder, data.split, valid_protocol, context=valid_ctx)
        score = result.ndcg[10]
        row = {"stage": FINETUNED, "epoch": epoch, "loss": total / max(n_batches, 1),
               "valid_ndcg@10": score, "valid_hr@10": result.hr[10]}
        history.append(row)
        log.info("finetune epoch %d %s", epoch, row)
        if on_epoch is not None:
            on_epoch(epoch, encoder, row)
        if score > best_score:
            best_score, best_epoch, stale = score, epoch, 0
            best_state = copy.deepcopy(encoder.state_dict())
        else:
            stale += 1
            if stale >= cfg.patience and epoch >= cfg.finetune_min_epochs:
                break
    encoder.load_state_dict(best_state)
    if history:
        history.append({"stage": FINETUNED, "best_epoch": best_epoch, "best_valid_ndcg@10": best_score})
    return make_checkpoint(encoder, None, FINETUNED, best_epoch, rng, history)
