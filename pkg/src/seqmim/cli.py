"""Command-line entry point: ``seqmim <subcommand> ...``.

Exit codes: 0 success, 1 usage/config error, 2 audit or invariant failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict

from . import audit as audit_mod
from .config import ExperimentConfig
from .corpus import corpus_stats, format_stats, load_dataset, preprocess, save_dataset
from .errors import ConfigError, SeqMimError
from .evaluation import emit_report, evaluate, load_report
from .experiments import (
    ablation_configs,
    epoch_configs,
    fraction_configs,
    run_many,
    write_metrics,
)
from .synth import SynthSpec, generate, planted_hit_rates, write_files
from .trainer import finetune, load_checkpoint, pretrain, save_checkpoint, transfer_parameters

log = logging.getLogger("seqmim")

EXIT_OK, EXIT_USAGE, EXIT_AUDIT = 0, 1, 2


class UsageError(Exception):
    pass


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(getattr(args, "config", None), getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        cfg = cfg.set("train.seed", args.seed)
    if getattr(args, "data", None):
        cfg = cfg.set("data.dir", args.data)
    return cfg


def _run_dir(args, cfg: ExperimentConfig, command: str) -> str:
    if getattr(args, "out", None):
        path = args.out
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        path = os.path.join(cfg.output_root(), f"{command}-{stamp}")
    os.makedirs(path, exist_ok=True)
    cfg.write(os.path.join(path, "config.txt"))
    return path


def _dataset(cfg: ExperimentConfig):
    data_dir = cfg.get("data.dir")
    if not data_dir or not os.path.isdir(data_dir):
        raise UsageError(f"dataset directory {data_dir!r} does not exist (set --data or data.dir)")
    return load_dataset(data_dir)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_preprocess(args):
    if not os.path.exists(args.interactions):
        raise UsageError(f"interaction file {args.interactions!r} not found")
    if args.attributes and not os.path.exists(args.attributes):
        raise UsageError(f"attribute file {args.attributes!r} not found")
    ds = preprocess(args.interactions, args.attributes, fmt=args.format, k=args.k,
                    min_timestamp=args.min_timestamp)
    stats = save_dataset(ds, args.out)
    print(format_stats(stats))
    return EXIT_OK


def cmd_synth(args):
    spec = SynthSpec(
        n_users=args.users, n_items=args.items, n_attrs=args.attrs, attrs_per_item=args.attrs_per_item,
        n_clusters=args.clusters, transition_concentration=args.concentration, attr_noise=args.attr_noise,
        seq_len_min=args.min_len, seq_len_max=args.max_len, seed=args.seed,
    )
    raw_dir = os.path.join(args.out, "raw")
    inter, attrs = write_files(generate(spec), raw_dir, spec)
    ds = preprocess(inter, attrs)
    stats = save_dataset(ds, os.path.join(args.out, "data"))
    print(format_stats(stats))
    oracle = planted_hit_rates(spec)
    print(f"planted bigram HR@10={oracle['bigram_hr']:.4f} popularity HR@10={oracle['popularity_hr']:.4f}")
    return EXIT_OK


def cmd_pretrain(args):
    cfg = _config(args)
    ds = _dataset(cfg)
    out = _run_dir(args, cfg, "pretrain")
    ckpt = pretrain(ds, cfg.train_config(), cfg.model_config(ds.n_items, ds.n_attrs), cfg.sampler_config(),
                    cfg.weights(), out_dir=out)
    save_checkpoint(ckpt, os.path.join(out, "checkpoint"))
    print(os.path.join(out, "checkpoint"))
    return EXIT_OK


def cmd_finetune(args):
    cfg = _config(args)
    if bool(args.init) == bool(args.from_scratch):
        raise UsageError("pass exactly one of --init <checkpoint> or --from-scratch")
    ds = _dataset(cfg)
    mcfg = cfg.model_config(ds.n_items, ds.n_attrs)
    init = transfer_parameters(load_checkpoint(args.init), mcfg) if args.init else None
    out = _run_dir(args, cfg, "finetune")
    ckpt = finetune(init, ds, cfg.train_config(), model_cfg=mcfg, protocol=cfg.protocol("valid"))
    save_checkpoint(ckpt, os.path.join(out, "checkpoint"))
    print(os.path.join(out, "checkpoint"))
    return EXIT_OK


def cmd_evaluate(args):
    cfg = _config(args)
    ds = _dataset(cfg)
    ckpt = load_checkpoint(args.ckpt)
    result = evaluate(ckpt.encoder(), ds.split, cfg.protocol(args.target))
    out = _run_dir(args, cfg, "evaluate")
    write_metrics(os.path.join(out, "metrics.json"), args.label, result)
    emit_report([(args.label, result)], out)
    with open(os.path.join(out, "report.txt"), encoding="utf-8") as fh:
        print(fh.read(), end="")
    return EXIT_OK


def cmd_ablate(args):
    cfg = _config(args)
    _dataset(cfg)
    out = _run_dir(args, cfg, "ablate")
    results = run_many(cfg.get("data.dir"), ablation_configs(cfg), out, parallel=args.parallel)
    emit_report(results, out)
    print(open(os.path.join(out, "report.txt"), encoding="utf-8").read(), end="")
    return EXIT_OK


def _floats(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text):
    return [int(x) for x in text.split(",") if x.strip()]


def cmd_sweep(args):
    cfg = _config(args)
    _dataset(cfg)
    if bool(args.fractions) == bool(args.epochs):
        raise UsageError("pass exactly one of --fractions or --epochs")
    if args.fractions:
        xs = _floats(args.fractions)
        runs, x_label = fraction_configs(cfg, xs), "training fraction"
    else:
        xs = _ints(args.epochs)
        runs, x_label = epoch_configs(cfg, xs), "pretraining epochs"
    out = _run_dir(args, cfg, "sweep")
    results = run_many(cfg.get("data.dir"), runs, out, parallel=args.parallel)
    emit_report(results, out, curve={"x": xs, "x_label": x_label} if args.plot else None)
    print(open(os.path.join(out, "report.txt"), encoding="utf-8").read(), end="")
    return EXIT_OK


def cmd_audit(args):
    seeds = _ints(args.seeds)
    failures = []
    for loss in audit_mod.LOSSES:
        for seed in seeds:
            err = audit_mod.finite_difference_audit(loss, seed=seed)
            ok = err < args.tolerance
            print(f"gradient {loss:8s} seed={seed} max_rel_err={err:.3e} {'PASS' if ok else 'FAIL'}")
            if not ok:
                failures.append(f"gradient:{loss}:{seed}")
    for name, check in audit_mod.INVARIANTS.items():
        ok, detail = check()
        print(f"invariant {name:16s} {'PASS' if ok else 'FAIL'} {detail}")
        if not ok:
            failures.append(name)
    if failures:
        print("audit failed: " + ", ".join(failures), file=sys.stderr)
        return EXIT_AUDIT
    return EXIT_OK


def cmd_report(args):
    results = []
    for path in args.inputs:
        if os.path.isdir(path):
            path = os.path.join(path, "metrics.json")
        if not os.path.exists(path):
            raise UsageError(f"no metrics file at {path}")
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
        if isinstance(obj, list):
            results.extend(load_report(path))
        else:
            from .evaluation import EvalResult

            results.append((obj.get("label") or path, EvalResult.from_json(obj)))
    emit_report(results, args.out)
    print(open(os.path.join(args.out, "report.txt"), encoding="utf-8").read(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_common(p, needs_data=True):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, help="shortcut for --set train.seed=N")
    p.add_argument("--out", help="run directory (default: $SEQMIM_OUTPUT_ROOT/<command>-<timestamp>)")
    if needs_data:
        p.add_argument("--data", help="processed dataset directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqmim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="raw files -> processed dataset directory")
    p.add_argument("--interactions", required=True)
    p.add_argument("--attributes")
    p.add_argument("--format", choices=("tsv", "jsonl"), default="tsv")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--min-timestamp", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="generate a planted synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--users", type=int, default=2000)
    p.add_argument("--items", type=int, default=500)
    p.add_argument("--attrs", type=int, default=50)
    p.add_argument("--attrs-per-item", type=int, default=4)
    p.add_argument("--clusters", type=int, default=10)
    p.add_argument("--concentration", type=float, default=20.0)
    p.add_argument("--attr-noise", type=float, default=0.1)
    p.add_argument("--min-len", type=int, default=5)
    p.add_argument("--max-len", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="four-objective pretraining")
    _add_common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="next-item fine-tuning")
    _add_common(p)
    p.add_argument("--init", help="pretrained checkpoint directory")
    p.add_argument("--from-scratch", action="store_true")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="ranking metrics for a fine-tuned checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--target", choices=("valid", "test"), default="test")
    p.add_argument("--label", default="model")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="full model plus one run per removed objective")
    _add_common(p)
    p.add_argument("--parallel", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="training-fraction or pretraining-epoch sweep")
    _add_common(p)
    p.add_argument("--fractions", help="comma-separated training fractions")
    p.add_argument("--epochs", help="comma-separated pretraining epoch counts")
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--plot", action="store_true", help="also write curve.png")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("audit", help="gradient audit and invariant checks")
    p.add_argument("--seeds", default="0,1")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("report", help="combine metrics.json files into one report")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SeqMimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
