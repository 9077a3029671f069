"""Command-line surface: gen-data, train, eval, predict, ablate, gradcheck.

Config files are JSON renderings of RunConfig; a handful of flags
(--seed, --mode, --region, --out) override the file. Exit code 0 on
success; 2 for usage/config problems, 1 for runtime failures, each with
a categorized message on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np


def _load_run_config(args) -> "RunConfig":
    from .train import RunConfig

    if args.config:
        with open(args.config) as f:
            cfg = RunConfig.from_dict(json.load(f))
    else:
        cfg = RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "mode", None):
        overrides["mode"] = args.mode
    if getattr(args, "region", None):
        overrides["region"] = args.region
    if getattr(args, "out", None):
        overrides["out_dir"] = str(args.out)
    if getattr(args, "data", None):
        overrides["train_dir"] = str(args.data)
    return replace(cfg, **overrides) if overrides else cfg


def _cmd_gen_data(args) -> int:
    from .data import DatasetSpec, write_dataset

    fakes = {}
    for item in args.fake or []:
        family, _, count = item.partition("=")
        if not count:
            raise ValueError(f"--fake expects FAMILY=COUNT, got {item!r}")
        fakes[family] = int(count)
    spec = DatasetSpec(
        n_real=args.n_real,
        n_fake_per_family=fakes,
        image_size=args.size,
        frames_per_video=args.frames,
        seed=args.seed if args.seed is not None else 0,
        augment=args.augment,
    )
    root = write_dataset(spec, args.out)
    print(f"wrote {args.n_real + sum(fakes.values())} samples to {root}")
    return 0


def _cmd_train(args) -> int:
    from .train import train

    cfg = _load_run_config(args)
    if not cfg.train_dir:
        raise ValueError("no dataset: pass --data or set train_dir in the config")
    result = train(cfg)
    final = result.loss_history[-1] if result.loss_history else float("nan")
    print(f"trained {result.step} steps; final batch loss {final:.4f}")
    if result.checkpoint_dir:
        print(f"checkpoint: {result.checkpoint_dir}")
    return 0


def _cmd_eval(args) -> int:
    from .data import read_dataset
    from .metrics import emit_report
    from .train import checkpoint_load, evaluate

    ck = checkpoint_load(args.checkpoint)
    samples = read_dataset(args.data)
    report, maps = evaluate(
        ck.model,
        samples,
        loss_history=ck.loss_history,
        config_echo=ck.config.to_dict(),
        seed=ck.config.seed,
    )
    out = emit_report(report, args.out, maps=maps, write_svg=args.svg)
    print(
        f"frame AUC {report.frame_auc:.4f}  frame ACC {report.frame_acc:.4f}  "
        f"video AUC {report.video_auc:.4f}  patch ACC {report.patch_acc:.4f}"
    )
    print(f"report: {out}")
    return 0


def _cmd_predict(args) -> int:
    from .train import predict_image

    prob, _, _ = predict_image(args.checkpoint, args.image, args.out, cam_tap=args.cam)
    print(f"{prob:.6f}")
    return 0


def _cmd_ablate(args) -> int:
    from .data import read_dataset
    from .train import ablate

    cfg = _load_run_config(args)
    train_samples = read_dataset(args.train_data)
    eval_samples = read_dataset(args.eval_data)
    rows = ablate(cfg, train_samples, eval_samples, args.out)
    width = max(len(r["config"]) for r in rows)
    for r in rows:
        auc = "failed" if r["frame_auc"] is None else f"{r['frame_auc']:.4f}"
        print(f"{r['config']:<{width}}  frame AUC {auc}")
    print(f"table: {Path(args.out) / 'ablation.csv'}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .verify import check_model_gradients, check_op_gradients

    tol = 1e-5
    worst = 0.0
    for name, err in sorted(check_op_gradients(seed=args.seed or 0).items()):
        status = "ok" if err < tol else "FAIL"
        print(f"op {name:<20} max rel err {err:.3e}  {status}")
        worst = max(worst, err)
    if args.full:
        model_worst, _ = check_model_gradients(seed=args.seed or 0)
        status = "ok" if model_worst < tol else "FAIL"
        print(f"full-model loss     max rel err {model_worst:.3e}  {status}")
        worst = max(worst, model_worst)
    print(f"worst: {worst:.3e} (tolerance {tol:.0e})")
    return 0 if worst < tol else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="forgenet", description="two-stream patch-level forgery detector"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--n-real", type=int, default=0)
    p.add_argument(
        "--fake",
        action="append",
        metavar="FAMILY=COUNT",
        help="fake sample count per family (paste, feather, gradient); repeatable",
    )
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--augment", action="store_true")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("--config", help="RunConfig JSON file")
    p.add_argument("--data", help="dataset directory (overrides config train_dir)")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("mask", "sspsl"))
    p.add_argument("--region", choices=("nose", "mouth", "eyes", "inner-face"))
    p.add_argument("--out", help="output directory (checkpoint lands here)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--svg", action="store_true", help="also write roc.svg")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", help="score one TNSR image file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", help="directory for forgery_map.pgm (and cam.pgm)")
    p.add_argument("--cam", help="tap name for a saliency map")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("ablate", help="run the architecture and region ablations")
    p.add_argument("--config", help="base RunConfig JSON file")
    p.add_argument("--train-data", required=True)
    p.add_argument("--eval-data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--full", action="store_true", help="include the full-model sweep (slower)"
    )
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError) as exc:
        print(f"error (invalid input or config): {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error (io): {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
