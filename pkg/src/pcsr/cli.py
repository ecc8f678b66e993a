"""Command-line interface: generate | train | eval | inspect-division.

Exit codes: 0 success, 2 bad configuration or input files, 3 training abort
or numeric failure. Errors go to stderr prefixed with ``error:``. The
``PCSR_SEED`` environment variable supplies the seed when neither a flag nor
a config value sets one.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .data import generate_synthetic, inject_noise, load_dataset, save_dataset
from .encoders import load_checkpoint
from .errors import (ConfigurationError, DegenerateInputError, FormatError,
                     LogicError, NumericError, PcsrError, TrainingError)
from .evaluation import evaluate
from .trainer import TrainConfig, train


def _resolve_seed(flag_value, config_value=None, default=0) -> int:
    """Seed precedence: explicit flag, config value, PCSR_SEED, default."""
    if flag_value is not None:
        return int(flag_value)
    if config_value is not None:
        return int(config_value)
    env = os.environ.get("PCSR_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigurationError(f"PCSR_SEED must be an integer, got {env!r}") from None
    return default


def _out_path(args, name) -> Path:
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = Path(name)
    return path if path.is_absolute() else out_dir / path


def cmd_generate(args) -> int:
    seed = _resolve_seed(args.seed)
    ds = generate_synthetic(args.n, args.classes, d_img=args.d_img, d_txt=args.d_txt,
                            intra_class_noise=args.sigma, seed=seed)
    if args.noise > 0:
        ds = inject_noise(ds, args.noise, seed=seed)
    path = _out_path(args, args.out)
    save_dataset(ds, path)
    manifest = {"n": args.n, "classes": args.classes, "d_img": args.d_img,
                "d_txt": args.d_txt, "sigma": args.sigma, "noise": args.noise,
                "seed": seed, "path": str(path)}
    manifest_path = path.with_suffix(path.suffix + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, sort_keys=True) + "\n")
    print(json.dumps(manifest, sort_keys=True))
    return 0


def _load_train_config(args) -> TrainConfig:
    if args.config is not None:
        cfg = TrainConfig.from_file(args.config)
    else:
        cfg = TrainConfig()
    if args.override:
        cfg = cfg.with_overrides(args.override)
    overridden = any(item.split("=", 1)[0].strip() == "seed" for item in (args.override or []))
    config_seed = cfg.seed if (args.config is not None or overridden) else None
    seed = _resolve_seed(args.seed, config_value=config_seed)
    if seed != cfg.seed:
        cfg = cfg.with_overrides([f"seed={seed}"])
    return cfg


def cmd_train(args) -> int:
    cfg = _load_train_config(args)
    ds = load_dataset(args.dataset)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True) + "\n")
    result = train(cfg, ds, out_dir=out_dir, log=print)
    final = result.reports[-1]
    summary = {"epochs": len(result.reports), "final_tau": final.tau,
               "final_sizes": [final.n_clean, final.n_refinable, final.n_ambiguous],
               "val": final.val}
    (out_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def _split_for(ds, cfg, which: str):
    from .data import split_indices
    import numpy as np
    if which == "all":
        return np.arange(ds.n_images)
    split = split_indices(ds.n_images, cfg.val_fraction, cfg.test_fraction, cfg.seed)
    return getattr(split, which)


def cmd_eval(args) -> int:
    params, _epoch = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    if params.dims["d_img"] != ds.d_img or params.dims["d_txt"] != ds.d_txt:
        raise ConfigurationError(
            f"checkpoint dims ({params.dims['d_img']}, {params.dims['d_txt']}) "
            f"do not match dataset dims ({ds.d_img}, {ds.d_txt})")
    # the config (ideally the run's echoed config.json) pins the split
    # fractions and seed so the evaluated split matches training
    cfg = _load_train_config(args)
    report = evaluate(params, ds, _split_for(ds, cfg, args.split))
    path = _out_path(args, "eval_report.json")
    path.write_text(json.dumps(report.to_dict(), sort_keys=True) + "\n")
    if args.table:
        print(report.table())
    else:
        print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_inspect_division(args) -> int:
    run_dir = Path(args.run_dir)
    report_dir = run_dir / "reports"
    if not report_dir.is_dir():
        raise ConfigurationError(f"no reports directory under {run_dir}")
    ckpt = run_dir / "checkpoint_final.bin"
    if not ckpt.exists():
        ckpt = run_dir / "checkpoint_last.bin"
    if ckpt.exists():
        params, _ = load_checkpoint(ckpt)
        if args.dataset is not None:
            ds = load_dataset(args.dataset)
            if params.dims["d_img"] != ds.d_img or params.dims["d_txt"] != ds.d_txt:
                raise ConfigurationError("checkpoint dims do not match dataset")
    files = sorted(report_dir.glob("epoch_*.json"))
    if not files:
        raise ConfigurationError(f"no epoch reports under {report_dir}")
    for path in files:
        rep = json.loads(path.read_text())
        row = {"epoch": rep["epoch"], "tau": rep["tau"],
               "lambda_target": rep["lambda_target"],
               "lambda_current": rep["lambda_current"],
               "n_clean": rep["n_clean"], "n_refinable": rep["n_refinable"],
               "n_ambiguous": rep["n_ambiguous"],
               "division_precision": rep["division_precision"],
               "division_recall": rep["division_recall"]}
        print(json.dumps(row, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcsr",
                                     description="Noise-robust cross-modal retrieval trainer")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic paired dataset")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--classes", type=int, default=32)
    p.add_argument("--d-img", type=int, default=64)
    p.add_argument("--d-txt", type=int, default=64)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-o", "--out", default="dataset.bin")
    p.add_argument("--output-dir", default=".")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run the full training pipeline")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--override", action="append", default=[],
                   help="key=value, repeatable")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--output-dir", default=".")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", default=None,
                   help="training config whose split fractions and seed to reuse")
    p.add_argument("--override", action="append", default=[],
                   help="key=value, repeatable")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--table", action="store_true", help="print a plain-text table")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--output-dir", default=".")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-division", help="dump per-epoch division quality")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--dataset", default=None)
    p.set_defaults(func=cmd_inspect_division)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (TrainingError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc, TrainingError) and exc.checkpoint is not None:
            print(f"error: last good checkpoint: {exc.checkpoint}", file=sys.stderr)
        return 3
    except (ConfigurationError, DegenerateInputError, FormatError, LogicError,
            PcsrError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
