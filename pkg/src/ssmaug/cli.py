"""Command-line entry point tying the pipeline together.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation, reports, ssm_net, trainer
from .cohort import CohortSpec, generate_cohort, load_cohort


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _build_parser() -> _Parser:
    p = _Parser(prog="ssmaug", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic cohort")
    g.add_argument("--spec", required=True, help="cohort spec JSON file")
    g.add_argument("--out", required=True, help="output cohort directory")
    g.add_argument("--seed", type=int, default=None)

    t = sub.add_parser("train", help="train one run")
    t.add_argument("--config", required=True, help="train config JSON file")
    t.add_argument("--cohort", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)

    a = sub.add_parser("augment", help="offline KDE augmentation only")
    a.add_argument("--config", required=True)
    a.add_argument("--cohort", required=True)
    a.add_argument("--out", required=True, help="augmented cohort directory")
    a.add_argument("--seed", type=int, default=None)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--cohort", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--surface-points", type=int, default=512)

    d = sub.add_parser("downstream", help="group classification from predictions")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--cohort", required=True)
    d.add_argument("--out", required=True, help="output JSON file")
    d.add_argument("--folds", type=int, default=5)
    d.add_argument("--seed", type=int, default=0)

    m = sub.add_parser("matrix", help="run the full experiment matrix")
    m.add_argument("--config", required=True, help="matrix config JSON file")
    m.add_argument("--seed", type=int, default=None)

    r = sub.add_parser("report", help="emit a report bundle from run dirs")
    r.add_argument("--out", required=True)
    r.add_argument("run_dirs", nargs="+")
    return p


def _cmd_generate(args) -> int:
    spec_dict = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = CohortSpec.from_dict(spec_dict)
    generate_cohort(spec, args.out)
    print(f"cohort written to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = trainer.TrainConfig.from_json_file(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    result = trainer.train(cfg, args.cohort, args.out)
    print(f"best epoch {result.best_epoch}, val RMSE {result.best_val_rmse:.4f}; "
          f"artifacts in {args.out}")
    return 0


def _cmd_augment(args) -> int:
    cfg = trainer.TrainConfig.from_json_file(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    cohort = load_cohort(args.cohort)
    merged, seconds = trainer.build_augmented_cohort(cfg, cohort, args.out)
    n_aug = sum(1 for s in merged.samples if s.augmented)
    print(f"wrote {n_aug} augmented samples to {args.out} in {seconds:.1f}s")
    return 0


def _cmd_evaluate(args) -> int:
    net = ssm_net.load_checkpoint(args.checkpoint)
    cohort = load_cohort(args.cohort)
    samples = cohort.split(args.split)
    report = evaluation.evaluate_model(net, samples, args.surface_points)
    evaluation.save_eval_report(report, args.out)
    s = report.summary()
    print(f"{len(samples)} samples: RMSE {s['rmse_mean']:.4f}, "
          f"surface {s['surface_mean']:.4f}; report in {args.out}")
    return 0


def _cmd_downstream(args) -> int:
    net = ssm_net.load_checkpoint(args.checkpoint)
    cohort = load_cohort(args.cohort)
    samples = [s for s in cohort.samples if not s.augmented]
    preds = np.stack([ssm_net.predict(net, s.volume)[1] for s in samples])
    labels = [s.group for s in samples]
    result = evaluation.classify_downstream(preds, labels, folds=args.folds,
                                            seed=args.seed)
    payload = {
        "accuracy_mean": result.accuracy_mean,
        "accuracy_std": result.accuracy_std,
        "folds": result.fold_accuracies,
    }
    Path(args.out).write_text(json.dumps(payload, indent=1), encoding="utf-8")
    print(f"downstream accuracy {result.accuracy_mean:.3f} "
          f"+/- {result.accuracy_std:.3f}")
    return 0


def _cmd_matrix(args) -> int:
    matrix = reports.ExperimentMatrix.from_json_file(args.config)
    if args.seed is not None:
        matrix.runs = [
            (name, trainer.TrainConfig.from_dict({**cfg.to_dict(), "seed": args.seed}))
            for name, cfg in matrix.runs
        ]
    bundle = reports.run_matrix(matrix)
    print(f"matrix complete; report bundle in {bundle}")
    return 0


def _cmd_report(args) -> int:
    bundle = reports.emit_report(args.run_dirs, args.out)
    print(f"report bundle in {bundle}")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "augment": _cmd_augment,
    "evaluate": _cmd_evaluate,
    "downstream": _cmd_downstream,
    "matrix": _cmd_matrix,
    "report": _cmd_report,
}


def cli(argv) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if e.code in (0, None) else 1
    try:
        return _COMMANDS[args.command](args)
    except Exception as e:  # runtime failure
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
