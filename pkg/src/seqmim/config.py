"""Flat ``dotted.key = value`` experiment configuration.

Every key has a default; files and ``--set`` overrides are layered on top
in that order.  The resolved document is written into each run directory.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional

from .encoder import ModelConfig
from .errors import ConfigError
from .evaluation import EvalProtocol
from .objectives import LossWeights
from .sampler import SamplerConfig
from .trainer import TrainConfig

OUTPUT_ROOT_ENV = "SEQMIM_OUTPUT_ROOT"

DEFAULTS: Dict[str, object] = {
    "data.dir": "",
    "data.interactions": "",
    "data.attributes": "",
    "data.format": "tsv",
    "data.k_core": 5,
    "data.min_timestamp": -1,
    "model.d": 64,
    "model.heads": 2,
    "model.blocks": 2,
    "model.max_len": 50,
    "model.dropout": 0.2,
    "model.ffn_mult": 4,
    "model.init_std": 0.02,
    "train.pretrain_epochs": 100,
    "train.pretrain_batch": 200,
    "train.finetune_epochs": 200,
    "train.finetune_min_epochs": 0,
    "train.finetune_batch": 256,
    "train.patience": 10,
    "train.lr": 0.001,
    "train.pretrain_lr": 0.0,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.eps": 1e-8,
    "train.seed": 0,
    "train.train_fraction": 1.0,
    "train.checkpoint_every": 0,
    "train.clip_norm": 0.0,
    "loss.aap_weight": 0.2,
    "loss.mip_weight": 1.0,
    "loss.map_weight": 1.0,
    "loss.sp_weight": 0.5,
    "loss.n_neg_item": 1,
    "loss.n_neg_attr": 1,
    "loss.n_neg_seg": 1,
    "loss.raw_bilinear": False,
    "sampler.mask_ratio": 0.2,
    "sampler.seg_max": 8,
    "eval.n_negatives": 99,
    "eval.k_values": "1,5,10",
    "eval.seed": 0,
    "eval.scope": "sampled",
    "out.root": "",
}


def _coerce(key: str, raw):
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return text


def parse_lines(lines: Iterable[str], source: str = "<config>") -> Dict[str, object]:
    out = {}
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


@dataclass
class ExperimentConfig:
    values: Dict[str, object] = field(default_factory=lambda: dict(DEFAULTS))

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Iterable[str] = ()) -> "ExperimentConfig":
        values = dict(DEFAULTS)
        if path:
            with open(path, encoding="utf-8") as fh:
                values.update(parse_lines(fh, path))
        values.update(parse_lines(overrides, "--set"))
        return cls(values)

    def get(self, key: str):
        return self.values[key]

    def set(self, key: str, value) -> "ExperimentConfig":
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        values = dict(self.values)
        values[key] = _coerce(key, value)
        return ExperimentConfig(values)

    def dumps(self) -> str:
        return "".join(f"{k} = {_fmt(self.values[k])}\n" for k in sorted(self.values))

    def write(self, path: str):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    def _section(self, prefix: str) -> Dict[str, object]:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    def model_config(self, n_items: int, n_attrs: int) -> ModelConfig:
        return ModelConfig(n_items=n_items, n_attrs=n_attrs, **self._section("model"))

    def train_config(self) -> TrainConfig:
        return TrainConfig(raw_bilinear=bool(self.values["loss.raw_bilinear"]), **self._section("train"))

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(
            mask_ratio=self.values["sampler.mask_ratio"],
            seg_max=self.values["sampler.seg_max"],
            n_neg_item=self.values["loss.n_neg_item"],
            n_neg_attr=self.values["loss.n_neg_attr"],
            n_neg_seg=self.values["loss.n_neg_seg"],
        )

    def weights(self) -> LossWeights:
        return LossWeights(
            aap=self.values["loss.aap_weight"],
            mip=self.values["loss.mip_weight"],
            map=self.values["loss.map_weight"],
            sp=self.values["loss.sp_weight"],
        )

    def protocol(self, target: str = "test") -> EvalProtocol:
        ks = tuple(int(k) for k in str(self.values["eval.k_values"]).split(",") if k.strip())
        return EvalProtocol(
            n_negatives=self.values["eval.n_negatives"],
            k_values=ks,
            seed=self.values["eval.seed"],
            target=target,
            scope=self.values["eval.scope"],
        )

    def output_root(self) -> str:
        return self.values["out.root"] or os.environ.get(OUTPUT_ROOT_ENV, "runs")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)
