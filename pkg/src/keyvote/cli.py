"""Command-line interface: keyvote transform|train|attack|eval|report.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.
Relative dataset paths resolve against $KEYVOTE_DATA_DIR when it is set.
"""

import argparse
import sys

import numpy as np

from . import harness
from .attacks import ATTACK_KINDS, AttackBudget
from .ensemble import load_manifest, save_manifest
from .errors import DataError, TrainingDiverged
from .harness import (
    ExperimentError,
    build_experiment_ensemble,
    load_config,
    load_dataset,
    load_experiment_data,
    render_report,
    report_from_json,
    report_to_json,
    run_attack_on_dataset,
    run_experiment,
    save_dataset,
)
from .keying import SecretKey
from .transform import transform_dataset

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser():
    parser = _Parser(prog="keyvote", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("transform", help="shuffle a dataset file with a keyed permutation")
    p.add_argument("--data", required=True, help="input dataset file")
    p.add_argument("--format", required=True, choices=harness.DATASET_FORMATS)
    p.add_argument("--labels", help="labels file (idx format)")
    p.add_argument("--key", required=True, help="hex secret key (>= 32 hex chars)")
    p.add_argument("--block-size", required=True, type=int, help="block side length M")
    p.add_argument("--out", required=True, help="output dataset file (same format)")
    p.add_argument("--out-labels", help="output labels file (idx format)")

    p = sub.add_parser("train", help="train an ensemble from a config and emit a manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out-dir", default="keyvote_out")
    p.add_argument("--name", default="ensemble")

    p = sub.add_parser("attack", help="attack a dataset against a trained ensemble manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--format", required=True, choices=harness.DATASET_FORMATS)
    p.add_argument("--labels")
    p.add_argument("--attack", required=True, choices=ATTACK_KINDS)
    p.add_argument("--eps", type=float, default=8.0 / 255.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, help="attack only the first N images")
    p.add_argument("--max-queries", type=int)
    p.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="PARAM=VALUE",
        help="attack parameter override, e.g. --set max_iters=50",
    )
    p.add_argument("--out", required=True, help="output CSV of per-image outcomes")

    p = sub.add_parser("eval", help="run a full experiment (train + metrics) from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--report", help="write the machine report (json) here")
    p.add_argument("--format", default="text-table", choices=("text-table", "csv", "json-like"))
    p.add_argument("--manifest", help="evaluate this trained manifest instead of training")

    p = sub.add_parser("report", help="render a saved machine report")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--format", default="text-table", choices=("text-table", "csv", "json-like"))

    return parser


def _cmd_transform(args):
    ds = load_dataset(args.data, args.format, labels_path=args.labels)
    key = SecretKey.from_hex(args.key)
    pairs = transform_dataset(ds.as_pairs(), args.block_size, key)
    if pairs:
        images = np.stack([img for img, _ in pairs])
        labels = np.array([lbl for _, lbl in pairs])
    else:
        images, labels = ds.images, ds.labels
    out = harness.LabeledDataset(images, labels, ds.split, ds.n_classes)
    save_dataset(out, args.out, args.format, labels_path=args.out_labels)
    print(f"wrote {len(out)} transformed images to {args.out}")
    return EXIT_OK


def _cmd_train(args):
    cfg = load_config(args.config, args.overrides)
    train, _ = load_experiment_data(cfg)
    e = build_experiment_ensemble(cfg, train)
    path = save_manifest(e, args.out_dir, name=args.name)
    print(f"trained {len(e.members_)} members; manifest: {path}")
    return EXIT_OK


def _parse_attack_overrides(items):
    out = {}
    for item in items:
        if "=" not in item:
            raise _UsageError(f"--set expects PARAM=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        try:
            out[key.strip()] = float(value) if ("." in value or "e" in value.lower()) else int(value)
        except ValueError as exc:
            raise _UsageError(f"bad --set value {item!r}: {exc}") from exc
    return out


def _cmd_attack(args):
    e = load_manifest(args.manifest)
    ds = load_dataset(args.data, args.format, labels_path=args.labels)
    if args.limit is not None:
        ds = ds.subset(np.arange(min(args.limit, len(ds))))
    budget = AttackBudget(epsilon=args.eps, max_queries=args.max_queries)
    overrides = _parse_attack_overrides(args.overrides)
    indices, outcomes, clean = run_attack_on_dataset(
        e, ds, args.attack, budget, seed=args.seed, param_overrides=overrides
    )
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        harness.outcomes_to_csv(fh, ds, indices, outcomes, clean)
    n_success = sum(o.success for o in outcomes)
    print(f"attacked {len(outcomes)} images, {n_success} successes; wrote {args.out}")
    return EXIT_OK


def _cmd_eval(args):
    cfg = load_config(args.config, args.overrides)
    ensemble = load_manifest(args.manifest) if args.manifest else None
    report = run_experiment(cfg, ensemble=ensemble)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(report_to_json(report))
    sys.stdout.write(render_report(report, args.format))
    return EXIT_OK


def _cmd_report(args):
    try:
        text = open(args.infile, "r", encoding="utf-8").read()
    except OSError as exc:
        raise DataError(f"cannot read report {args.infile}: {exc}") from exc
    reports = report_from_json(text)
    sys.stdout.write(render_report(reports, args.format))
    return EXIT_OK


_COMMANDS = {
    "transform": _cmd_transform,
    "train": _cmd_train,
    "attack": _cmd_attack,
    "eval": _cmd_eval,
    "report": _cmd_report,
}


def _root_cause(exc):
    seen = set()
    while exc is not None and id(exc) not in seen:
        seen.add(id(exc))
        if isinstance(exc, TrainingDiverged):
            return exc
        if isinstance(exc, ExperimentError):
            exc = exc.original
            continue
        cause = exc.__cause__
        if cause is None:
            return exc
        exc = cause
    return exc


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # map module errors onto documented exit codes
        root = _root_cause(exc)
        if isinstance(root, TrainingDiverged):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        if isinstance(root, (DataError, OSError, ValueError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DATA
        raise


if __name__ == "__main__":
    sys.exit(main())
