"""Command-line entry point.

Subcommands::

    freetree simulate --design sim2 --n 100 --seed 1 --out data/
    freetree fit --data data/data.csv --roles data/roles.txt --out fit.json
    freetree evaluate --fit fit.json --data test.csv --truth data/truth.json
    freetree sweep --design sim2 --n-list 100,200 --seeds 1,2,3 --out sweep.csv
    freetree report --in sweep.csv --format svg --out sweep.svg

Exit codes: 0 success, 2 contract errors (bad schema, bad values, leakage),
3 numeric failures (rank deficiency, not enough data). All randomness is
controlled by explicit seeds, so repeating an invocation reproduces its
outputs byte for byte.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .bench import evaluate, report, sweep
from .errors import CONTRACT_ERRORS, NUMERIC_ERRORS
from .model_tree import MobParams, format_tree
from .panel_data import format_roles, load_csv, parse_roles_file, write_csv
from .pipeline import (
    FreetreeOptions,
    WgcnaParams,
    fit_from_dict,
    fit_to_dict,
    run_freetree,
)
from .simulate import SimConfig, gen_panel


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _write_json(path: str, payload: dict):
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _mob_from_args(args) -> MobParams:
    kwargs = {"seed": args.seed}
    if args.alpha is not None:
        kwargs["alpha"] = args.alpha
    if args.min_node_size is not None:
        kwargs["min_node_size"] = args.min_node_size
    if args.n_perm is not None:
        kwargs["n_perm"] = args.n_perm
    if getattr(args, "max_depth", None) is not None:
        kwargs["max_depth"] = args.max_depth
    return MobParams(**kwargs)


def _options_from_args(args) -> FreetreeOptions:
    wg = {}
    if getattr(args, "cut_height", None) is not None:
        wg["cut_height"] = args.cut_height
    if getattr(args, "min_module_size", None) is not None:
        wg["min_module_size"] = args.min_module_size
    return FreetreeOptions(fuzzy=args.fuzzy, mob=_mob_from_args(args), wgcna=WgcnaParams(**wg))


def _add_fit_options(p: argparse.ArgumentParser):
    p.add_argument("--fuzzy", action=argparse.BooleanOptionalAction, default=True,
                   help="screen every module independently (default) or gate the "
                        "grey pool behind the non-grey selection")
    p.add_argument("--alpha", type=float, default=None, help="split significance level")
    p.add_argument("--min-node-size", type=int, default=None)
    p.add_argument("--n-perm", type=int, default=None, help="permutations per stability test")
    p.add_argument("--max-depth", type=int, default=None)
    p.add_argument("--cut-height", type=float, default=None, help="dendrogram cut height")
    p.add_argument("--min-module-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = SimConfig(
        design=args.design,
        n_subjects=args.n,
        seed=args.seed,
        n_periods=args.t,
        module_sizes=tuple(args.modules),
        id_prefix=args.id_prefix,
    )
    ds, truth = gen_panel(cfg)
    os.makedirs(args.out, exist_ok=True)
    data_path = os.path.join(args.out, "data.csv")
    write_csv(ds, data_path)
    with open(os.path.join(args.out, "roles.txt"), "w") as fh:
        fh.write(format_roles(ds.roles))
    _write_json(os.path.join(args.out, "truth.json"), truth)
    print(f"wrote {ds.n_rows} rows x {len(ds.frame.columns)} columns to {data_path}")
    print(f"true features: {', '.join(truth['true_features'])}")
    return 0


def cmd_fit(args) -> int:
    roles = parse_roles_file(args.roles)
    train = load_csv(args.data, roles)
    opts = _options_from_args(args)
    fit = run_freetree(train, opts)
    _write_json(args.out, fit_to_dict(fit))
    print(f"selected features ({len(fit.report.final)}): {', '.join(fit.report.final) or '-'}")
    print(format_tree(fit.final_tree))
    for stage, seconds in fit.timing.items():
        print(f"timing {stage}: {seconds:.2f}s")
    if fit.diagnostics:
        print(f"diagnostics: {json.dumps(fit.diagnostics, sort_keys=True)}")
    print(f"wrote fit to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    with open(args.fit) as fh:
        fit = fit_from_dict(json.load(fh))
    test = load_csv(args.data, fit.roles)
    truth = None
    if args.truth:
        with open(args.truth) as fh:
            truth = json.load(fh)
    rep = evaluate(fit, test, truth)
    print(f"test rmse: {rep.rmse_test:.6g}")
    if truth is not None:
        print(f"true positives: {', '.join(rep.true_positives) or '-'}")
        print(f"false positives: {', '.join(rep.false_positives) or '-'}")
        print(f"exact recovery: {'yes' if rep.exact_recovery else 'no'}")
    if rep.leaf_table:
        print(json.dumps(rep.leaf_table, sort_keys=True, indent=2))
    if args.out:
        _write_json(args.out, rep.to_dict())
        print(f"wrote evaluation to {args.out}")
    return 0


def cmd_sweep(args) -> int:
    opts = _options_from_args(args)
    rows = sweep(
        args.design,
        args.n_list,
        args.seeds,
        opts=opts,
        workers=args.workers,
        n_periods=args.t,
        module_sizes=tuple(args.modules),
        val_subjects=args.val_subjects,
        test_subjects=args.test_subjects,
        tune=args.tune,
        out_path=args.out,
    )
    failed = sum(1 for r in rows if str(r.get("failed")) == "1")
    print(f"wrote {len(rows)} rows to {args.out} ({failed} failed)")
    return 0


def cmd_report(args) -> int:
    report(args.infile, args.format, args.out)
    print(f"wrote {args.format} report to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="freetree",
        description="Feature selection and prediction for correlated longitudinal data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic panel with a truth sidecar")
    p.add_argument("--design", choices=("sim1", "sim2"), required=True)
    p.add_argument("--n", type=int, required=True, help="number of subjects")
    p.add_argument("--t", type=int, default=6, help="observations per subject")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--modules", type=_int_list, default=[100, 100, 100, 100],
                   help="comma-separated feature-module sizes")
    p.add_argument("--id-prefix", default="", help="prefix for subject ids")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="run the selection pipeline on a CSV panel")
    p.add_argument("--data", required=True, help="long-format CSV")
    p.add_argument("--roles", required=True, help="roles file (key = a,b,c lines)")
    p.add_argument("--out", required=True, help="output fit JSON")
    _add_fit_options(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("evaluate", help="score a saved fit on held-out data")
    p.add_argument("--fit", required=True, help="fit JSON from the fit subcommand")
    p.add_argument("--data", required=True, help="held-out CSV (disjoint subjects)")
    p.add_argument("--truth", default=None, help="truth sidecar JSON")
    p.add_argument("--out", default=None, help="optional evaluation JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="tuned fits plus baselines over (n, seed) cells")
    p.add_argument("--design", choices=("sim1", "sim2"), required=True)
    p.add_argument("--n-list", type=_int_list, required=True)
    p.add_argument("--seeds", type=_int_list, required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--t", type=int, default=6)
    p.add_argument("--modules", type=_int_list, default=[100, 100, 100, 100])
    p.add_argument("--val-subjects", type=int, default=100)
    p.add_argument("--test-subjects", type=int, default=100)
    p.add_argument("--tune", action=argparse.BooleanOptionalAction, default=True,
                   help="tune alpha and node size on the validation set")
    p.add_argument("--out", required=True, help="output CSV")
    _add_fit_options(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="aggregate a sweep CSV into a table or chart")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--format", choices=("csv", "svg"), default="csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CONTRACT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except np.linalg.LinAlgError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
