"""Experiment command line: train, eval, gradcheck, sweep, dump-attention.

Exit codes: 0 success, 2 configuration or input error, 3 runtime
divergence (non-finite loss).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from aal.attack import AttackConfig
from aal.checkpoint import CheckpointError, load_checkpoint
from aal.config import ConfigError, load_run_config
from aal.data import DataFormatError, dump_attention_pgm
from aal.diagnostics import run_gradient_suite
from aal.experiment import load_datasets, run_training
from aal.training import DivergenceError, attention_snapshot, evaluate
from aal.config import DatasetConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

_SWEEP_TRAIN_PARAMS = ("xi1", "xi2", "zeta", "lr0", "momentum", "weight_decay", "epochs", "batch_size", "seed")
_SWEEP_ATTACK_PARAMS = ("epsilon", "step_size", "iterations", "kernel", "method", "direction")


def cmd_train(args):
    cfg = load_run_config(args.config)
    try:
        _, rows, _ = run_training(cfg)
    except DivergenceError as e:
        out_dir = Path(cfg.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        dump = {k: v for k, v in e.diagnostics.items() if v is not None}
        np.savez(out_dir / "divergence_dump.npz", **dump)
        print(f"error: {e} (diagnostics in divergence_dump.npz)", file=sys.stderr)
        return EXIT_DIVERGED
    last = rows[-1]
    print(
        json.dumps(
            {
                "epochs": len(rows),
                "clean_acc": last.clean_acc,
                "fgsm_acc": last.fgsm_acc,
                "pgd_acc": last.pgd_acc,
                "out_dir": cfg.out_dir,
            }
        )
    )
    return EXIT_OK


def _eval_accuracies(model, test_ds, attack, seed=0):
    from aal.rng import keyed_rng

    clean = evaluate(model, test_ds, AttackConfig(method="none", epsilon=0.0))
    fgsm = evaluate(
        model,
        test_ds,
        AttackConfig(method="fgsm", epsilon=attack.epsilon, step_size=attack.step_size, kernel="one"),
    )
    pgd_acc = evaluate(
        model,
        test_ds,
        AttackConfig(
            method="pgd",
            epsilon=attack.epsilon,
            step_size=attack.step_size,
            iterations=attack.iterations,
            kernel="one",
        ),
        rng=keyed_rng(seed, 0xE7A1),
    )
    return {"clean_acc": clean, "fgsm_acc": fgsm, "pgd_acc": pgd_acc}


def _dataset_from_snapshot(snapshot, data_dir=None):
    extra = snapshot.extra or {}
    if "dataset" not in extra:
        raise ConfigError("checkpoint carries no dataset description")
    dcfg = DatasetConfig(**extra["dataset"])
    if data_dir:
        dcfg.data_dir = data_dir
    return load_datasets(dcfg)


def cmd_eval(args):
    model, snapshot = load_checkpoint(args.checkpoint)
    _, test_ds = _dataset_from_snapshot(snapshot, args.data_dir)
    attack = snapshot.config.attack
    if args.attack:
        spec = json.loads(args.attack)
        if not isinstance(spec, dict):
            raise ConfigError("--attack must be a JSON object")
        unknown = set(spec) - {f.name for f in dataclasses.fields(AttackConfig)}
        if unknown:
            raise ConfigError(f"--attack: unknown keys {sorted(unknown)}")
        attack = dataclasses.replace(attack, **spec)
        attack.validate()
    print(json.dumps(_eval_accuracies(model, test_ds, attack, seed=snapshot.config.seed)))
    return EXIT_OK


def cmd_gradcheck(args):
    ok, _ = run_gradient_suite(seeds=args.seeds, inject_bug=args.inject_bug)
    return EXIT_OK if ok else 1


def _set_sweep_value(cfg, parameter, raw):
    if parameter in _SWEEP_TRAIN_PARAMS:
        target, name = cfg.train, parameter
    elif parameter in _SWEEP_ATTACK_PARAMS:
        target, name = cfg.train.attack, parameter
    else:
        raise ConfigError(
            f"unknown sweep parameter {parameter!r}; "
            f"train: {_SWEEP_TRAIN_PARAMS}, attack: {_SWEEP_ATTACK_PARAMS}"
        )
    current = getattr(target, name)
    if isinstance(current, bool):
        value = raw.lower() in ("1", "true", "yes")
    elif isinstance(current, int):
        value = int(raw)
    elif isinstance(current, float):
        value = float(raw)
    else:
        value = raw
    setattr(target, name, value)


def cmd_sweep(args):
    base = load_run_config(args.config)
    out_dir = Path(base.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["value,clean_acc,attacked_acc"]
    for raw in args.values:
        cfg = load_run_config(args.config)
        cfg.out_dir = str(out_dir / f"{args.parameter}_{raw}")
        _set_sweep_value(cfg, args.parameter, raw)
        cfg.validate()
        model, rows, _ = run_training(cfg)
        last = rows[-1]
        lines.append(f"{raw},{last.clean_acc:.6f},{last.fgsm_acc:.6f}")
    csv_path = out_dir / f"sweep_{args.parameter}.csv"
    csv_path.write_text("\n".join(lines) + "\n")
    print(csv_path)
    return EXIT_OK


def cmd_dump_attention(args):
    model, snapshot = load_checkpoint(args.checkpoint)
    _, test_ds = _dataset_from_snapshot(snapshot, args.data_dir)
    n = args.num
    if n < 0:
        raise ConfigError("--num must be >= 0")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if n == 0:
        print(json.dumps({"files": 0, "out_dir": str(out_dir)}))
        return EXIT_OK
    if n > len(test_ds):
        raise ConfigError(f"--num {n} exceeds dataset size {len(test_ds)}")
    model.eval()
    state = attention_snapshot(model, test_ds.images[:n], test_ds.labels[:n], snapshot.config)
    files = dump_attention_pgm(
        {"M": state.M, "Mhat": np.clip(state.M_hat, 0.0, 1.0), "Massoc": state.M_assoc},
        out_dir,
    )
    print(json.dumps({"files": len(files), "out_dir": str(out_dir)}))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="aal", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train per a JSON run config")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (clean/FGSM/PGD)")
    p.add_argument("checkpoint")
    p.add_argument("--attack", help="JSON object overriding attack fields, e.g. '{\"epsilon\": 0.1}'")
    p.add_argument("--data-dir", help="override the dataset directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--inject-bug", action="store_true", help="negative control: must fail")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="train once per value of one parameter")
    p.add_argument("config")
    p.add_argument("parameter")
    p.add_argument("values", nargs="+")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("dump-attention", help="export attention map PGM triplets")
    p.add_argument("checkpoint")
    p.add_argument("--num", type=int, default=4)
    p.add_argument("--out", required=True)
    p.add_argument("--data-dir", help="override the dataset directory")
    p.set_defaults(func=cmd_dump_attention)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, DataFormatError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
