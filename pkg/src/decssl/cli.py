"""Command-line entry point: ``decssl <subcommand> ...``.

Exit codes: 0 success, 1 config or input error, 2 numerical divergence,
3 a verification ran but its check failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import datagen, experiments, verify
from .evaluation import linear_probe
from .objectives import InfeasibleOrUnconverged, LinearEncoder

EXIT_CHECK_FAILED = 3


def _out_path(path: str) -> Path:
    return experiments.output_dir(experiments.ExperimentConfig(), path)


def _emit(report: dict, out: str | None) -> None:
    text = json.dumps(experiments._jsonable(report), indent=2, sort_keys=True) + "\n"
    if out:
        path = _out_path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    else:
        sys.stdout.write(text)


def cmd_gen_data(args) -> int:
    try:
        cfg = datagen.TheoryGenConfig(args.d, args.K, args.majority, args.minority, args.tau, args.mu, args.seed)
    except ValueError as exc:
        logging.error("%s", exc)
        return experiments.EXIT_CONFIG
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for ds in datagen.generate_theory_dataset(cfg):
        datagen.save_dataset_csv(ds, out / f"source_{ds.source_id}.csv")
    return experiments.EXIT_OK


def cmd_partition(args) -> int:
    try:
        pooled = datagen.concatenate([datagen.load_dataset_csv(p) for p in args.input])
        if args.scheme == "dirichlet":
            spec = datagen.partition_dirichlet(pooled.labels, args.K, args.parameter, args.seed)
        elif args.scheme == "skewness":
            spec = datagen.partition_skewness(pooled.labels, args.K, args.parameter, args.seed)
        else:
            spec = datagen.partition_feature_clusters(pooled.samples, args.K, args.seed, pooled.labels)
    except (OSError, ValueError) as exc:
        logging.error("%s", exc)
        return experiments.EXIT_CONFIG
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "partition.json").write_text(spec.to_json() + "\n")
    for ds in spec.apply(pooled.samples, pooled.labels, pooled.num_classes):
        datagen.save_dataset_csv(ds, out / f"source_{ds.source_id}.csv")
    return experiments.EXIT_OK


def cmd_train(args) -> int:
    return experiments.run_experiment(args.config, args.output)


def cmd_probe(args) -> int:
    try:
        encoder = LinearEncoder(datagen.load_matrix_csv(args.weights))
        train = datagen.load_dataset_csv(args.train)
        test = datagen.load_dataset_csv(args.test)
        result = linear_probe(encoder, train, test, epochs=args.epochs, lr=args.lr, seed=args.seed,
                              normalize=args.normalize)
    except (OSError, ValueError) as exc:
        logging.error("%s", exc)
        return experiments.EXIT_CONFIG
    _emit(result.to_dict(), args.out)
    return experiments.EXIT_OK


def cmd_verify_theorem1(args) -> int:
    report = verify.verify_theorem1(args.d, args.K, args.m, range(args.seeds), args.majority, args.minority,
                                    args.threshold, args.threshold_from_d, args.mu)
    _emit(report.to_dict(), args.out)
    return experiments.EXIT_OK if report.passed else EXIT_CHECK_FAILED


def cmd_verify_prop1(args) -> int:
    try:
        report = verify.verify_prop1(args.d, args.K, range(args.seeds), args.factor, args.ssl_threshold,
                                     args.m, args.majority, args.minority, mu_noise=args.mu)
    except InfeasibleOrUnconverged as exc:
        logging.error("%s", exc)
        return EXIT_CHECK_FAILED
    _emit(report.to_dict(), args.out)
    return experiments.EXIT_OK if report.passed else EXIT_CHECK_FAILED


def cmd_verify_equivalence(args) -> int:
    cov = None
    if args.covariance:
        cov = datagen.load_matrix_csv(args.covariance)
    try:
        report = verify.verify_equivalence(args.d, args.m, args.steps, args.gamma, args.seed, cov,
                                           args.angle_tol, args.gap_tol)
    except verify.NumericalDivergence as exc:
        logging.error("%s", exc)
        return experiments.EXIT_DIVERGED
    except ValueError as exc:
        logging.error("%s", exc)
        return experiments.EXIT_CONFIG
    _emit(report.to_dict(), args.out)
    return experiments.EXIT_OK if report.passed else EXIT_CHECK_FAILED


def cmd_sweep(args) -> int:
    return experiments.run_sweep(args.sweep)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="decssl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the skewed theory sources as CSV")
    p.add_argument("--d", type=int, default=256)
    p.add_argument("--K", type=int, default=5)
    p.add_argument("--majority", type=int, default=500)
    p.add_argument("--minority", type=int, default=20)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--mu", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("partition", help="split pooled CSV data across sources")
    p.add_argument("input", nargs="+")
    p.add_argument("--scheme", choices=("dirichlet", "skewness", "feature-cluster"), required=True)
    p.add_argument("--parameter", type=float, default=1.0)
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("train", help="run one experiment from an INI config")
    p.add_argument("config")
    p.add_argument("--output", default=None, help="override [output] directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", help="linear probe of a saved encoder")
    p.add_argument("--weights", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--epochs", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("verify-theorem1", help="oracle representability over a d grid")
    p.add_argument("--d", type=int, nargs="+", default=[128, 512, 2048])
    p.add_argument("--K", type=int, default=3)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--majority", type=int, default=500)
    p.add_argument("--minority", type=int, default=20)
    p.add_argument("--threshold", type=float, default=0.9)
    p.add_argument("--threshold-from-d", type=int, default=512)
    p.add_argument("--mu", type=float, default=None, help="noise scale; d^(-1/5) when absent")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_verify_theorem1)

    p = sub.add_parser("verify-prop1", help="supervised vs SSL local features")
    p.add_argument("--d", type=int, default=512)
    p.add_argument("--K", type=int, default=3)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--factor", type=float, default=5.0)
    p.add_argument("--ssl-threshold", type=float, default=0.9)
    p.add_argument("--mu", type=float, default=None, help="noise scale; d^(-1/5) when absent")
    p.add_argument("--majority", type=int, default=500)
    p.add_argument("--minority", type=int, default=20)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_verify_prop1)

    p = sub.add_parser("verify-equivalence", help="gradient descent vs the spectral minimizer")
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--m", type=int, default=4)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--covariance", default=None, help="CSV matrix; random PSD instance when absent")
    p.add_argument("--angle-tol", type=float, default=1e-2)
    p.add_argument("--gap-tol", type=float, default=1e-6)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_verify_equivalence)

    p = sub.add_parser("sweep", help="run every cell of a sweep file")
    p.add_argument("sweep")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
