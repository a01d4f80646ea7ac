"""Benchmark harness: scoring, sample-size sweeps, and report tables.

``evaluate`` scores one fitted pipeline against a held-out panel (RMSE
without random intercepts, selection hits against a truth sidecar, leaf
coefficients). ``sweep`` runs the full generate/tune/fit/score loop over a
grid of sample sizes and seeds, including the in-repo baselines, and writes
one CSV row per (cell, method). ``report`` aggregates such a CSV into
per-method summary tables or a static SVG chart.

CSV rows contain no timestamps or durations: repeated runs with the same
seed must be byte-identical. Timings are reported in the JSON output of
``evaluate`` instead.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import LeakageError
from .model_tree import assign_leaves, fit_lmm_tree, fit_reem_tree, used_split_features
from .panel_data import PanelDataset
from .pipeline import (
    FreetreeFit,
    FreetreeOptions,
    SelectionReport,
    leaf_coefficient_summary,
    options_to_dict,
    predict_freetree,
    run_freetree,
)
from .rand import derive_seed
from .simulate import SimConfig, gen_panel

#: Validation-tuning grid: three test levels and the rule-derived minimum
#: node size versus a coarser fixed one. Kept deliberately small; every
#: cell costs a full pipeline fit.
ALPHA_GRID = (0.01, 0.05, 0.1)
MIN_NODE_GRID = (None, 40)

CSV_COLUMNS = (
    "design",
    "n_subjects",
    "seed",
    "method",
    "fuzzy",
    "alpha",
    "min_node_size",
    "rmse_test",
    "n_selected",
    "selected",
    "true_positives",
    "false_positives",
    "exact_recovery",
    "n_leaves",
    "em_iterations",
    "failed",
    "error",
)


@dataclass
class EvalReport:
    """Held-out scorecard for one fitted model."""

    rmse_test: float
    selected: tuple[str, ...]
    true_positives: tuple[str, ...] = ()
    false_positives: tuple[str, ...] = ()
    exact_recovery: bool | None = None
    leaf_table: dict | None = None
    leaf_table_flag: str | None = None
    n_leaves: int = 0
    em_iterations: int = 0
    timing: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "rmse_test": self.rmse_test,
            "selected": list(self.selected),
            "true_positives": list(self.true_positives),
            "false_positives": list(self.false_positives),
            "exact_recovery": self.exact_recovery,
            "leaf_table": self.leaf_table,
            "leaf_table_flag": self.leaf_table_flag,
            "n_leaves": self.n_leaves,
            "em_iterations": self.em_iterations,
            "timing": self.timing,
            "config": self.config,
        }


def rmse(predictions: np.ndarray, observed: np.ndarray) -> float:
    predictions = np.asarray(predictions, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    if predictions.shape != observed.shape:
        raise ValueError("prediction and observation lengths differ")
    return float(np.sqrt(np.mean((predictions - observed) ** 2)))


def evaluate(fit: FreetreeFit, test: PanelDataset, truth: dict | None = None) -> EvalReport:
    """Score a fit on held-out subjects.

    Predictions never use random intercepts (new subjects have none).
    Raises :class:`LeakageError` when the test panel shares any cluster id
    with training; selection is scored against ``truth["true_features"]``
    when a sidecar is supplied.
    """
    train_clusters = set(fit.final_tree.blups)
    overlap = sorted(train_clusters & set(test.clusters))
    if overlap:
        shown = ", ".join(overlap[:5])
        raise LeakageError(f"test panel shares {len(overlap)} cluster(s) with training: {shown}")

    pred = predict_freetree(fit, test, include_random=False)
    observed = test.column(test.roles.response_col)
    report = EvalReport(
        rmse_test=rmse(pred, observed),
        selected=fit.report.final,
        n_leaves=fit.final_tree.n_leaves,
        em_iterations=fit.final_tree.em_iterations,
        timing=dict(fit.timing),
        config=options_to_dict(fit.options),
    )
    if truth is not None:
        true_set = set(truth["true_features"])
        report.true_positives = tuple(f for f in fit.report.final if f in true_set)
        report.false_positives = tuple(f for f in fit.report.final if f not in true_set)
        report.exact_recovery = set(fit.report.final) == true_set

    if fit.final_tree.leaf_kind == "linear" and fit.train_split_values:
        group_by = next(
            (c for c in fit.roles.fixed_split if c in fit.train_split_values), None
        )
        if group_by is not None:
            table = leaf_coefficient_summary(fit, group_by)
            report.leaf_table_flag = table.flag
            if table.flag is None:
                report.leaf_table = {
                    "group_by": group_by,
                    "levels": {
                        str(level): {c: float(v) for c, v in row.items()}
                        for level, row in table.frame.iterrows()
                    },
                }
    elif fit.final_tree.leaf_kind != "linear":
        report.leaf_table_flag = "constant_leaves"
    return report


def wrap_tree_fit(tree, train: PanelDataset, opts: FreetreeOptions) -> FreetreeFit:
    """Dress a bare model tree as a FreetreeFit so ``evaluate`` can score
    baselines with the same code path. The tree's own split variables
    (minus fixed_split) stand in for the selected set."""
    roles = train.roles
    order = {name: i for i, name in enumerate(roles.var_select)}
    used = [
        f for f in used_split_features(tree, exclude=roles.fixed_split) if f in order
    ]
    report = SelectionReport(final=tuple(sorted(used, key=order.__getitem__)))
    fit = FreetreeFit(
        report=report, final_tree=tree, options=opts, roles=roles,
    )
    fit.train_leaf_ids = assign_leaves(tree, train)
    fit.train_split_values = {
        col: np.array([str(v) for v in train.column(col)], dtype=object)
        for col in roles.fixed_split
        if train.is_categorical(col)
    }
    return fit


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def _generate_cell(design, n, seed, n_periods, module_sizes, val_subjects, test_subjects):
    def panel(part, count, prefix):
        cfg = SimConfig(
            design=design,
            n_subjects=count,
            seed=derive_seed(seed, design, n, part),
            n_periods=n_periods,
            module_sizes=module_sizes,
            id_prefix=prefix,
        )
        return gen_panel(cfg)

    train, truth = panel("train", n, "tr_")
    val, _ = panel("val", val_subjects, "va_")
    test, _ = panel("test", test_subjects, "te_")
    return train, val, test, truth


def tune_freetree(
    train: PanelDataset, val: PanelDataset, opts: FreetreeOptions
) -> tuple[FreetreeFit, FreetreeOptions]:
    """Grid-tune alpha and minimum node size on validation RMSE.

    Ties break toward the smaller alpha, then the rule-based node size, so
    the winner never depends on dict ordering.
    """
    observed = val.column(val.roles.response_col)
    best = None
    for alpha in ALPHA_GRID:
        for min_node in MIN_NODE_GRID:
            candidate = replace(
                opts, mob=replace(opts.mob, alpha=alpha, min_node_size=min_node)
            )
            fit = run_freetree(train, candidate)
            score = rmse(predict_freetree(fit, val), observed)
            key = (score, alpha, min_node is not None)
            if best is None or key < best[0]:
                best = (key, fit, candidate)
    return best[1], best[2]


def _cell_rows(payload: dict) -> list[dict]:
    design = payload["design"]
    n = payload["n"]
    seed = payload["seed"]
    opts: FreetreeOptions = payload["opts"]
    train, val, test, truth = _generate_cell(
        design,
        n,
        seed,
        payload["n_periods"],
        payload["module_sizes"],
        payload["val_subjects"],
        payload["test_subjects"],
    )
    base = {"design": design, "n_subjects": n, "seed": seed}
    rows = []

    def add(method, runner):
        row = dict(base)
        row["method"] = method
        try:
            report, used_opts = runner()
            row.update(
                {
                    "fuzzy": int(used_opts.fuzzy),
                    "alpha": repr(used_opts.mob.alpha),
                    "min_node_size": (
                        "" if used_opts.mob.min_node_size is None
                        else used_opts.mob.min_node_size
                    ),
                    "rmse_test": repr(report.rmse_test),
                    "n_selected": len(report.selected),
                    "selected": ";".join(report.selected),
                    "true_positives": ";".join(report.true_positives),
                    "false_positives": ";".join(report.false_positives),
                    "exact_recovery": (
                        "" if report.exact_recovery is None else int(report.exact_recovery)
                    ),
                    "n_leaves": report.n_leaves,
                    "em_iterations": report.em_iterations,
                    "failed": 0,
                    "error": "",
                }
            )
        except Exception as exc:  # per-cell isolation: the sweep must go on
            row.update({c: "" for c in CSV_COLUMNS if c not in row})
            row["failed"] = 1
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)

    def run_freetree_cell():
        if payload["tune"]:
            fit, used = tune_freetree(train, val, opts)
        else:
            fit, used = run_freetree(train, opts), opts
        return evaluate(fit, test, truth), used

    def run_reem_all():
        params = replace(
            opts.mob, seed=derive_seed(opts.mob.seed, "baseline", "reem_all")
        )
        splitters = train.roles.fixed_split + train.roles.var_select
        tree = fit_reem_tree(train, splitters, params)
        fit = wrap_tree_fit(tree, train, replace(opts, mob=params))
        return evaluate(fit, test, truth), fit.options

    def run_lmm_fixed():
        params = replace(
            opts.mob, seed=derive_seed(opts.mob.seed, "baseline", "lmm_fixed")
        )
        tree = fit_lmm_tree(
            train, train.roles.fixed_regress, train.roles.fixed_split, "linear", params
        )
        fit = wrap_tree_fit(tree, train, replace(opts, mob=params))
        return evaluate(fit, test, truth), fit.options

    add("freetree", run_freetree_cell)
    add("reem_all_features", run_reem_all)
    if design == "sim1":
        add("lmm_fixed_roles", run_lmm_fixed)
    return rows


def _row_key(row: dict):
    return (row["design"], int(row["n_subjects"]), int(row["seed"]), row["method"])


def sweep(
    design: str,
    n_list,
    seeds,
    opts: FreetreeOptions | None = None,
    workers: int = 1,
    n_periods: int = 6,
    module_sizes: tuple[int, ...] = (100, 100, 100, 100),
    val_subjects: int = 100,
    test_subjects: int = 100,
    tune: bool = True,
    out_path: str | None = None,
) -> list[dict]:
    """Generate, fit, and score every (n, seed) cell; returns sorted rows.

    Baselines (constant-leaf tree on all features; for the treatment
    design also the fixed-roles-only tree) share each cell's data with the
    tuned pipeline fit, so comparisons are paired by construction.
    """
    n_list = [int(v) for v in n_list]
    seeds = [int(v) for v in seeds]
    if not n_list or not seeds:
        raise ValueError("n_list and seeds must be non-empty")
    opts = opts or FreetreeOptions()
    payloads = [
        {
            "design": design,
            "n": n,
            "seed": seed,
            "opts": opts,
            "n_periods": n_periods,
            "module_sizes": tuple(module_sizes),
            "val_subjects": val_subjects,
            "test_subjects": test_subjects,
            "tune": tune,
        }
        for n in n_list
        for seed in seeds
    ]
    if workers <= 1:
        chunks = [_cell_rows(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_cell_rows, payloads))
    rows = [row for chunk in chunks for row in chunk]
    rows.sort(key=_row_key)
    if out_path is not None:
        write_rows(out_path, rows)
    return rows


def write_rows(path: str, rows: list[dict]):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c, "") for c in CSV_COLUMNS})


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

AGGREGATE_COLUMNS = (
    "design",
    "method",
    "n_subjects",
    "cells",
    "failures",
    "rmse_mean",
    "rmse_sd",
    "exact_recovery_rate",
    "mean_n_selected",
)


def aggregate_rows(rows: list[dict]) -> list[dict]:
    """Per (design, method, n) summary of a sweep CSV's rows."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault((row["design"], row["method"], int(row["n_subjects"])), []).append(row)
    out = []
    for (design, method, n), members in sorted(groups.items()):
        ok = [r for r in members if str(r.get("failed", "")) in ("0", "")]
        rmses = [float(r["rmse_test"]) for r in ok if r.get("rmse_test", "") != ""]
        exact = [int(r["exact_recovery"]) for r in ok if r.get("exact_recovery", "") != ""]
        n_sel = [int(r["n_selected"]) for r in ok if r.get("n_selected", "") != ""]
        mean = sum(rmses) / len(rmses) if rmses else float("nan")
        if len(rmses) > 1:
            sd = math.sqrt(sum((v - mean) ** 2 for v in rmses) / (len(rmses) - 1))
        else:
            sd = float("nan")
        out.append(
            {
                "design": design,
                "method": method,
                "n_subjects": n,
                "cells": len(members),
                "failures": len(members) - len(ok),
                "rmse_mean": repr(mean),
                "rmse_sd": repr(sd),
                "exact_recovery_rate": (
                    repr(sum(exact) / len(exact)) if exact else ""
                ),
                "mean_n_selected": repr(sum(n_sel) / len(n_sel)) if n_sel else "",
            }
        )
    return out


def read_rows(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def report(in_path: str, fmt: str, out_path: str):
    """Aggregate a sweep CSV into a summary CSV or a static SVG chart."""
    rows = read_rows(in_path)
    if not rows:
        raise ValueError(f"no rows in {in_path}")
    summary = aggregate_rows(rows)
    if fmt == "csv":
        with open(out_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=AGGREGATE_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for row in summary:
                writer.writerow(row)
    elif fmt == "svg":
        with open(out_path, "w") as fh:
            fh.write(render_svg(summary))
    else:
        raise ValueError(f"unknown report format: {fmt!r}")


_SVG_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2")


def render_svg(summary: list[dict]) -> str:
    """Static line chart of mean RMSE against sample size, one line per
    (design, method). No external plotting dependency, fully deterministic."""
    series: dict[tuple[str, str], list[tuple[int, float]]] = {}
    for row in summary:
        mean = float(row["rmse_mean"])
        if math.isnan(mean):
            continue
        series.setdefault((row["design"], row["method"]), []).append(
            (int(row["n_subjects"]), mean)
        )
    if not series:
        raise ValueError("nothing to plot: every cell failed")
    width, height = 640, 420
    left, right, top, bottom = 60, 200, 20, 50
    xs = sorted({x for pts in series.values() for x, _ in pts})
    ys = [y for pts in series.values() for _, y in pts]
    x_lo, x_hi = min(xs), max(xs)
    if x_lo == x_hi:
        x_lo, x_hi = x_lo - 1, x_hi + 1
    y_lo, y_hi = 0.0, max(ys) * 1.05 or 1.0

    def sx(v):
        return left + (v - x_lo) / (x_hi - x_lo) * (width - left - right)

    def sy(v):
        return height - bottom - (v - y_lo) / (y_hi - y_lo) * (height - top - bottom)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{height - bottom}" x2="{width - right}" '
        f'y2="{height - bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{height - bottom}" stroke="black"/>',
        f'<text x="{(left + width - right) / 2:.1f}" y="{height - 12}" '
        f'text-anchor="middle" font-size="13">subjects (n)</text>',
        f'<text x="16" y="{(top + height - bottom) / 2:.1f}" font-size="13" '
        f'transform="rotate(-90 16 {(top + height - bottom) / 2:.1f})" '
        f'text-anchor="middle">test RMSE</text>',
    ]
    for i in range(5):
        yv = y_lo + (y_hi - y_lo) * i / 4
        parts.append(
            f'<text x="{left - 6}" y="{sy(yv) + 4:.1f}" text-anchor="end" '
            f'font-size="11">{yv:.2f}</text>'
        )
    for x in xs:
        parts.append(
            f'<text x="{sx(x):.1f}" y="{height - bottom + 16}" text-anchor="middle" '
            f'font-size="11">{x}</text>'
        )
    for i, (key, pts) in enumerate(sorted(series.items())):
        color = _SVG_PALETTE[i % len(_SVG_PALETTE)]
        pts = sorted(pts)
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in pts)
        parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>'
        )
        for x, y in pts:
            parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3" fill="{color}"/>')
        ly = top + 16 * (i + 1)
        parts.append(
            f'<line x1="{width - right + 10}" y1="{ly}" x2="{width - right + 30}" '
            f'y2="{ly}" stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{width - right + 36}" y="{ly + 4}" font-size="11">'
            f"{key[0]}/{key[1]}</text>"
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
