"""Command-line entry point: ``denet <subcommand> ...``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from denet import ablate as ablate_mod
from denet import gradcheck as gradcheck_mod
from denet.data import SceneSpec, gen_dataset
from denet.train import evaluate, infer, load_run_config, roc, train


def _gen_data(args) -> int:
    spec = SceneSpec(size=(args.size, args.size))
    rows = gen_dataset(args.out, args.count, spec, args.seed)
    print(f"wrote {len(rows)} scenes to {args.out}")
    return 0


def _train(args) -> int:
    run = load_run_config(args.config)
    run.data_dir, run.out_dir = args.data, args.out
    result = train(run, log=print)
    print(f"best val mIoU {result.best_miou:.4f} at epoch {result.best_epoch}; outputs in {args.out}")
    return 0


def _eval(args) -> int:
    report = evaluate(args.ckpt, args.data, threshold=args.threshold, oracle=args.oracle,
                      report_path=args.report)
    print(f"miou {report.miou:.4f} niou {report.niou:.4f} pd {report.pd:.4f} fa_e6 {report.fa_e6:.2f}")
    return 0


def _infer(args) -> int:
    mask = infer(args.ckpt, args.image, args.out, threshold=args.threshold)
    print(f"{int(mask.sum())} foreground pixels written to {args.out}")
    return 0


def _gradcheck(args) -> int:
    results = gradcheck_mod.run_all(trials=args.trials, seed=args.seed, log=print)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} op families passed")
    return 1 if failed else 0


def _roc(args) -> int:
    curve = roc(args.ckpt, args.data, args.points, args.out)
    print(f"wrote {len(curve)} ROC points to {args.out}")
    return 0


def _ablate(args) -> int:
    run = load_run_config(args.config)
    data = args.data
    if data is None:
        data = str(Path(args.out).with_suffix("")) + "_data"
        ablate_mod.reference_dataset(data)
    run.data_dir = data
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = ablate_mod.ablate(run, args.suite, seeds=seeds, log=print)
    ablate_mod.write_table(args.out, rows)
    print(ablate_mod.summary_csv(rows), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="denet", description="Dual-path infrared small target detector")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="write a synthetic scene dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_gen_data)

    s = sub.add_parser("train", help="train from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--ckpt")
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    s.set_defaults(func=_eval)

    s = sub.add_parser("infer", help="predict a mask for one PGM image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.set_defaults(func=_infer)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op family")
    s.add_argument("--trials", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_gradcheck)

    s = sub.add_parser("roc", help="pixel ROC sweep of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--points", type=int, default=21)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_roc)

    s = sub.add_parser("ablate", help="run an ablation suite")
    s.add_argument("--suite", required=True, choices=sorted(ablate_mod.SUITES))
    s.add_argument("--config", required=True)
    s.add_argument("--data", help="dataset directory (default: generate the reference set)")
    s.add_argument("--out", default="ablation.csv")
    s.add_argument("--seeds", default="0,1,2")
    s.set_defaults(func=_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "eval" and not args.oracle and not args.ckpt:
        print("eval: --ckpt is required unless --oracle is given", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
