"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import harness
from .attack import OBJECTIVES, AttackConfig, train_uap
from .data import (atomic_write_bytes, generate_synthetic, load_uap, read_manifest,
                   save_image_ppm, save_uap, select_split, write_dataset)
from .embedders import ARCHITECTURES, TrainConfig, load_model, save_model, train_embedder


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _cfg_values(path):
    return harness.read_config(path) if path else {}


def _attack_config(args) -> AttackConfig:
    cfg = harness.attack_config_from(_cfg_values(getattr(args, "cfg", None)))
    overrides = {}
    for opt, name in (("lam", "lam"), ("epsilon", "epsilon"), ("gamma", "gamma"),
                      ("objective", "objective"), ("seed", "seed")):
        value = getattr(args, opt, None)
        if value is not None:
            overrides[name] = value
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _splits(manifest):
    return harness.Splits.from_items(read_manifest(manifest))


def _model_name(path):
    return os.path.splitext(os.path.basename(path))[0]


def _emit(text, out):
    if out:
        harness.write_text(out, text)
    else:
        sys.stdout.write(text)


def cmd_gen_data(args):
    spec = harness.synthetic_spec_from(harness.read_config(args.spec))
    manifest = write_dataset(generate_synthetic(spec), args.out_dir)
    print(manifest)


def cmd_train_embedder(args):
    train = select_split(read_manifest(args.manifest), "train")
    overrides = {k: v for k, v in (("epochs", args.epochs), ("embed_dim", args.embed_dim))
                 if v is not None}
    cfg = TrainConfig.for_arch(args.arch, seed=args.seed, **overrides)
    model, head = train_embedder(args.arch, train, cfg)
    save_model(model, args.out, head)


def cmd_attack(args):
    cfg = _attack_config(args)
    model, head = load_model(args.model)
    train = select_split(read_manifest(args.manifest), "train")
    result = train_uap(model, train, cfg, head)
    save_uap(result.uap, args.out)
    lines = "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in result.log)
    atomic_write_bytes(args.log or args.out + ".log.jsonl", lines.encode("utf-8"))


def cmd_eval(args):
    model, _ = load_model(args.model)
    report = harness.evaluate_attack(model, _splits(args.manifest), load_uap(args.uap))
    text = report.to_json() + "\n"
    if args.json:
        harness.write_text(args.json, text)
    summary = {k: v for k, v in json.loads(text).items() if k != "per_query_ap"}
    print(json.dumps(summary, sort_keys=True))


def cmd_matrix(args):
    cfg = _attack_config(args)
    models = {_model_name(p): load_model(p) for p in args.models}
    if len(models) != len(args.models):
        raise UsageError("model file names must be distinct")
    res = harness.cross_matrix(models, _splits(args.manifest), cfg)
    _emit(res.to_csv("mdr"), args.out)
    if args.rdr_out:
        harness.write_text(args.rdr_out, res.to_csv("rdr"))


def cmd_sweep(args):
    cfg = _attack_config(args)
    model = load_model(args.model)
    targets = {_model_name(p): load_model(p) for p in args.targets} if args.targets else None
    rows = harness.epsilon_sweep(model, _splits(args.manifest), cfg, args.epsilons, targets)
    _emit(harness.sweep_csv(rows), args.out)


def cmd_energy(args):
    splits = _splits(args.manifest)
    uaps = {_model_name(p): load_uap(p) for p in args.uaps}
    _emit(harness.energy_csv(harness.energy_report(splits, uaps)), args.out)


def cmd_export_uap_ppm(args):
    u = load_uap(args.uap)
    # centre on mid-grey so negative values stay visible
    img = np.clip(127.5 + args.amplify * u.values.astype(np.float64), 0.0, 255.0)
    save_image_ppm(img, args.out)


def _add_attack_options(p, full=True):
    p.add_argument("--cfg", help="config file with attack.* keys")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--gamma", choices=["1", "2", "inf"])
    if full:
        p.add_argument("--objective", choices=OBJECTIVES)
        p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rankuap", description="Universal ranking attacks on retrieval embedders.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("spec")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-embedder", help="train an embedding network")
    p.add_argument("arch", choices=ARCHITECTURES)
    p.add_argument("manifest")
    p.add_argument("out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int)
    p.add_argument("--embed-dim", type=int)
    p.set_defaults(func=cmd_train_embedder)

    p = sub.add_parser("attack", help="learn a universal perturbation")
    p.add_argument("model")
    p.add_argument("manifest")
    p.add_argument("out")
    _add_attack_options(p)
    p.add_argument("--log", help="training log path (default: <out>.log.jsonl)")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="evaluate a perturbation against a model")
    p.add_argument("model")
    p.add_argument("manifest")
    p.add_argument("uap")
    p.add_argument("--json", help="write the full report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("matrix", help="cross-model mDR matrix")
    p.add_argument("models", nargs="+")
    p.add_argument("manifest")
    _add_attack_options(p)
    p.add_argument("--out")
    p.add_argument("--rdr-out")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("sweep", help="mDR as a function of the budget")
    p.add_argument("model")
    p.add_argument("manifest")
    p.add_argument("--epsilons", required=True, type=harness.parse_epsilons)
    p.add_argument("--targets", nargs="*", default=[], help="models for the cross-model column")
    _add_attack_options(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("energy", help="gradient energy of perturbed queries")
    p.add_argument("manifest")
    p.add_argument("uaps", nargs="*")
    p.add_argument("--out")
    p.set_defaults(func=cmd_energy)

    p = sub.add_parser("export-uap-ppm", help="save a perturbation as a viewable image")
    p.add_argument("uap")
    p.add_argument("out")
    p.add_argument("--amplify", type=float, default=10.0)
    p.set_defaults(func=cmd_export_uap_ppm)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
