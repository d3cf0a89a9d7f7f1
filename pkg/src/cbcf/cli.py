"""Command-line entry point: ``cbcf <subcommand> [--config FILE] [--key value ...]``."""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np
import yaml

from cbcf.config import flat_keys, load_config
from cbcf.errors import CbcfError, NumericalError
from cbcf.pipeline import StageError, reproduce_tables, run_pipeline

SUBCOMMANDS = {
    "ingest": "load a rating file and report its size and sparsity",
    "split": "write train/test partitions and a manifest",
    "similarity": "compute and store user/item similarity matrices",
    "predict": "predict ratings for every test pair",
    "cluster": "cluster users and write a validity report",
    "evaluate": "score fixed thresholds (IPU and/or baseline)",
    "sweep": "grid-search alpha/beta/gamma and the baseline threshold",
    "reproduce": "run all experiment families and write comparison tables",
}

# flags that keep their conventional spelling
_SHORT = {"seed", "out", "cache", "jobs"}


def _parse_value(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("-v", "--verbose", action="store_true")
    cfg_group = common.add_argument_group("config overrides")
    for key in flat_keys():
        cfg_group.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="VALUE",
                               type=_parse_value, default=None)
    parser = argparse.ArgumentParser(prog="cbcf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in SUBCOMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_, description=help_)
    return parser


def _summarise(command, bundle) -> list[str]:
    r = bundle.reports
    lines = []
    if "dataset" in r:
        d = r["dataset"]
        lines.append(f"dataset: {d['ratings']} ratings, {d['users']} users, {d['items']} items,"
                     f" sparsity {d['sparsity']:.4f}")
    if "split" in r:
        s = r["split"]
        lines.append(f"split: train {s['train']['ratings']} / test {s['test']['ratings']}"
                     + (f", {s['test_users']} test users" if "test_users" in s else ""))
    if "coverage" in r:
        lines.append(f"prediction coverage: {r['coverage']:.4f}")
    if "validity" in r:
        lines.append("clusters with intra < inter distance: "
                     f"{r['validity']['fraction_intra_below_inter']:.2f}")
    for k, rep in r.get("evaluation", {}).items():
        lines.append(f"{k}: precision {rep.precision:.4f} recall {rep.recall:.4f} f1 {rep.f1:.4f}")
    if command == "sweep" and "sweep" in r:
        res, base = r["sweep"], r["baseline"]
        k = base.best_f1()
        b = res.best
        flag = "" if res.feasible_found else " (INFEASIBLE: best-precision point)"
        lines.append(f"best: alpha {b['alpha']:g} beta {b['beta']:g} gamma {b['gamma']:g} ->"
                     f" precision {res.report.precision:.4f} recall {res.report.recall:.4f}"
                     f" f1 {res.report.f1:.4f}{flag}")
        lines.append(f"baseline best: threshold {base.threshold[k]:g} -> f1 {base.f1[k]:.4f}")
    lines.append(f"wrote {len(bundle.artifacts)} artifacts to {bundle.out}")
    return lines


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k[4:]: v for k, v in vars(args).items()
                 if k.startswith("cfg:") and v is not None}
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "reproduce":
            result = reproduce_tables(cfg)
            print(result["bundle"].out / "tables.md")
            print((result["bundle"].out / "tables.md").read_text())
            return 0
        upto = "similarity" if args.command == "similarity" else args.command
        bundle = run_pipeline(cfg, upto)
        print("\n".join(_summarise(args.command, bundle)))
        return 0
    except CbcfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        numeric = (NumericalError, np.linalg.LinAlgError, FloatingPointError, ArithmeticError)
        cause = exc.cause
        if isinstance(cause, CbcfError):
            return cause.exit_code
        return 3 if isinstance(cause, numeric) else 2


if __name__ == "__main__":
    sys.exit(main())
