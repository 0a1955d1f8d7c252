"""Command-line front end.

Subcommands:

* ``qsur``: read an OSTT tensor (rows are samples), report utilization
  as JSON.
* ``transform``: apply a closed-form transform to an OSTT tensor; write
  the transformed tensor plus a before/after report.
* ``optimize``: full transform-learning run from a config file.
* ``baseline``: round-to-nearest reference run.
* ``demo``: canned end-to-end run, summary table on stdout.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical
failure, 3 file I/O or format trouble.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict

from .errors import NumericalError, ValidationError
from .linalg import hadamard
from .pipeline import RunConfig, run_baseline, run_demo, run_optimize
from .qsur import (
    fit_gaussian,
    max_qsur,
    qsur,
    qsur_monte_carlo,
    transform_stats,
    worker_count,
)
from .rng import Rng
from .tensorio import read_tensor, write_tensor
from .transforms import best_transform, orthogonality_residual, transform_rows, womi_init

_VARIANTS = ("paper_literal", "exact_box")


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems through exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(message)


def _load_samples(path):
    """Tensor file -> 2-d sample matrix (1-d input becomes a column)."""
    x = read_tensor(path)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.ndim != 2:
        raise ValidationError(f"{path}: expected a 1-d or 2-d tensor, got {x.ndim}-d")
    if x.shape[0] < 2:
        raise ValidationError(f"{path}: need at least 2 sample rows, got {x.shape[0]}")
    return x


def _emit_json(payload, out_path):
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if out_path is None:
        sys.stdout.write(text)
    else:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _cmd_qsur(args) -> int:
    x = _load_samples(args.tensor)
    stats = fit_gaussian(x, alpha=args.alpha)
    report = qsur(stats, variant=args.variant)
    payload = asdict(report)
    payload["source"] = str(args.tensor)
    payload["rows"] = int(x.shape[0])
    payload["max_qsur"] = max_qsur(report.dim)
    if args.mc_samples > 0:
        est, err = qsur_monte_carlo(
            stats,
            variant=args.variant,
            n_samples=args.mc_samples,
            rng=Rng(args.mc_seed),
            workers=worker_count(),
        )
        payload["monte_carlo"] = {
            "estimate": est,
            "std_error": err,
            "samples": args.mc_samples,
        }
    _emit_json(payload, args.out)
    return 0


def _qsur_pair(report) -> dict:
    return {"qsur": report.qsur, "qsur_normalized": report.qsur_normalized}


def _cmd_transform(args) -> int:
    x = _load_samples(args.tensor)
    stats = fit_gaussian(x, alpha=args.alpha)
    if args.kind == "best":
        t = best_transform(stats)
    elif args.kind == "hadamard":
        t = hadamard(x.shape[1])
    else:
        # womi_init returns the right-multiplier R for row data; the
        # shared helpers below want the column-convention matrix R.T.
        t = womi_init(x).T
    write_tensor(args.out, transform_rows(x, t))
    after = transform_stats(stats, t)
    payload = {
        "kind": args.kind,
        "source": str(args.tensor),
        "output": str(args.out),
        "rows": int(x.shape[0]),
        "dim": int(x.shape[1]),
        "alpha": args.alpha,
        "variant": args.variant,
        "qsur_before": _qsur_pair(qsur(stats, variant=args.variant)),
        "qsur_after": _qsur_pair(qsur(after, variant=args.variant)),
    }
    if args.kind != "best":
        payload["orthogonality_residual"] = orthogonality_residual(t)
    _emit_json(payload, args.report)
    return 0


def _cmd_optimize(args) -> int:
    config = RunConfig.from_file(args.config)
    run_optimize(config, args.out)
    return 0


def _cmd_baseline(args) -> int:
    config = RunConfig.from_file(args.config)
    run_baseline(config, args.out)
    return 0


def _cmd_demo(args) -> int:
    run_demo(args.out, seed=args.seed)
    return 0


def _add_stats_options(p):
    p.add_argument("--alpha", type=float, default=0.99, help="ellipsoid mass (default 0.99)")
    p.add_argument("--variant", choices=_VARIANTS, default="paper_literal")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ostlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("qsur", help="utilization of the samples in a tensor file")
    p.add_argument("tensor", help="OSTT file, rows are samples")
    _add_stats_options(p)
    p.add_argument("--mc-samples", type=int, default=0, help="Monte Carlo cross-check size")
    p.add_argument("--mc-seed", type=int, default=0)
    p.add_argument("--out", default=None, help="JSON path (default: stdout)")
    p.set_defaults(func=_cmd_qsur)

    p = sub.add_parser("transform", help="apply a closed-form transform to a tensor file")
    p.add_argument("tensor", help="OSTT file, rows are samples")
    p.add_argument("--kind", choices=("best", "hadamard", "womi"), default="best")
    _add_stats_options(p)
    p.add_argument("--out", required=True, help="OSTT path for the transformed tensor")
    p.add_argument("--report", default=None, help="JSON path (default: stdout)")
    p.set_defaults(func=_cmd_transform)

    p = sub.add_parser("optimize", help="learn transforms per a config file")
    p.add_argument("config", help="RunConfig as .toml or .json")
    p.add_argument("--out", default="ostlab_out", help="artifact directory")
    p.set_defaults(func=_cmd_optimize)

    p = sub.add_parser("baseline", help="round-to-nearest reference run")
    p.add_argument("config", help="RunConfig as .toml or .json")
    p.add_argument("--out", default="ostlab_baseline", help="artifact directory")
    p.set_defaults(func=_cmd_baseline)

    p = sub.add_parser("demo", help="canned end-to-end run")
    p.add_argument("--out", default="ostlab_demo", help="artifact directory")
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=_cmd_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
