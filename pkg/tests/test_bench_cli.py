"""Benchmark harness and command-line interface tests.

The RMSE and aggregation numbers are checked against direct recomputation,
sweeps are checked for byte-identical reruns, and the CLI is exercised
end to end through ``main`` including its exit-code contract.
"""

import argparse
import json
import math
import os

import numpy as np
import pytest

from freetree.bench import (
    AGGREGATE_COLUMNS,
    ALPHA_GRID,
    CSV_COLUMNS,
    MIN_NODE_GRID,
    aggregate_rows,
    evaluate,
    read_rows,
    render_svg,
    report,
    rmse,
    sweep,
    tune_freetree,
    wrap_tree_fit,
    write_rows,
)
from freetree.cli import _int_list, main
from freetree.errors import LeakageError
from freetree.model_tree import MobParams, fit_reem_tree
from freetree.pipeline import FreetreeOptions, WgcnaParams, predict_freetree, run_freetree
from freetree.simulate import SimConfig, gen_panel

FAST_OPTS = FreetreeOptions(
    mob=MobParams(n_perm=99, seed=7),
    wgcna=WgcnaParams(min_module_size=4),
)


def tiny_panels(design, seed, n_train=20, n_test=8):
    shared = dict(n_periods=3, module_sizes=(6, 5))
    train, truth = gen_panel(
        SimConfig(design, n_subjects=n_train, seed=seed, id_prefix="tr_", **shared)
    )
    test, _ = gen_panel(
        SimConfig(design, n_subjects=n_test, seed=seed + 1, id_prefix="te_", **shared)
    )
    return train, test, truth


@pytest.fixture(scope="module")
def sim1_bundle():
    train, test, truth = tiny_panels("sim1", seed=50)
    fit = run_freetree(train, FAST_OPTS)
    return fit, train, test, truth


@pytest.fixture(scope="module")
def sim2_bundle():
    train, test, truth = tiny_panels("sim2", seed=60)
    fit = run_freetree(train, FAST_OPTS)
    return fit, train, test, truth


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def test_rmse_matches_manual_formula():
    rng = np.random.default_rng(0)
    pred = rng.normal(size=37)
    obs = rng.normal(size=37)
    want = math.sqrt(sum((p - o) ** 2 for p, o in zip(pred, obs)) / 37)
    assert rmse(pred, obs) == pytest.approx(want, rel=1e-14)


def test_rmse_of_mean_predictor_is_population_sd():
    rng = np.random.default_rng(1)
    y = rng.normal(3.0, 2.5, size=200)
    constant = np.full_like(y, y.mean())
    assert rmse(constant, y) == pytest.approx(y.std(ddof=0), rel=1e-14)


def test_rmse_rejects_length_mismatch():
    with pytest.raises(ValueError):
        rmse(np.zeros(3), np.zeros(4))


def test_evaluate_scores_fixed_effects_only(sim1_bundle):
    fit, _, test, _ = sim1_bundle
    rep = evaluate(fit, test)
    pred = predict_freetree(fit, test, include_random=False)
    observed = test.column(test.roles.response_col)
    assert rep.rmse_test == pytest.approx(rmse(pred, observed), rel=1e-15)
    assert rep.selected == fit.report.final
    assert rep.n_leaves == fit.final_tree.n_leaves
    assert rep.em_iterations == fit.final_tree.em_iterations
    # without a sidecar there is nothing to score selection against
    assert rep.exact_recovery is None
    assert rep.true_positives == () and rep.false_positives == ()


def test_evaluate_flags_training_subject_overlap(sim1_bundle):
    fit, train, _, _ = sim1_bundle
    with pytest.raises(LeakageError, match="cluster"):
        evaluate(fit, train)


def test_evaluate_partitions_selection_against_truth(sim1_bundle):
    fit, _, test, truth = sim1_bundle
    rep = evaluate(fit, test, truth)
    true_set = set(truth["true_features"])
    assert set(rep.true_positives) <= true_set
    assert set(rep.false_positives).isdisjoint(true_set)
    assert tuple(sorted(rep.true_positives + rep.false_positives)) == tuple(
        sorted(rep.selected)
    )
    assert rep.exact_recovery == (set(rep.selected) == true_set)


def test_evaluate_skips_table_without_categorical_splitter(sim2_bundle):
    # sim2 regresses on the selected features (linear leaves) but has no
    # categorical fixed splitter, so there is no per-level table to build
    fit, _, test, _ = sim2_bundle
    assert fit.final_tree.leaf_kind == "linear"
    rep = evaluate(fit, test)
    assert rep.leaf_table_flag is None
    assert rep.leaf_table is None


def test_evaluate_leaf_table_levels(sim1_bundle):
    fit, train, test, _ = sim1_bundle
    rep = evaluate(fit, test)
    levels = sorted(set(str(v) for v in train.column("treatment")))
    if rep.leaf_table_flag is None:
        assert rep.leaf_table["group_by"] == "treatment"
        assert sorted(rep.leaf_table["levels"]) == levels
        for row in rep.leaf_table["levels"].values():
            assert "(intercept)" in row
    else:
        assert rep.leaf_table is None


def test_evaluate_roundtrips_to_dict(sim1_bundle):
    fit, _, test, truth = sim1_bundle
    rep = evaluate(fit, test, truth)
    payload = json.loads(json.dumps(rep.to_dict()))
    assert payload["rmse_test"] == pytest.approx(rep.rmse_test, rel=1e-15)
    assert payload["selected"] == list(rep.selected)
    assert payload["config"]["mob"]["seed"] == 7


def test_wrap_tree_fit_scores_like_a_pipeline_fit(sim1_bundle):
    _, train, test, _ = sim1_bundle
    params = MobParams(n_perm=99, seed=11)
    splitters = train.roles.fixed_split + train.roles.var_select
    tree = fit_reem_tree(train, splitters, params)
    wrapped = wrap_tree_fit(tree, train, FAST_OPTS)
    assert set(wrapped.report.final) <= set(train.roles.var_select)
    assert "treatment" not in wrapped.report.final
    order = {name: i for i, name in enumerate(train.roles.var_select)}
    assert list(wrapped.report.final) == sorted(wrapped.report.final, key=order.get)
    rep = evaluate(wrapped, test)
    assert math.isfinite(rep.rmse_test)
    assert rep.leaf_table_flag == "constant_leaves"


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

SWEEP_KW = dict(
    opts=FAST_OPTS,
    n_periods=3,
    module_sizes=(6, 5),
    val_subjects=6,
    test_subjects=6,
    tune=False,
)


@pytest.fixture(scope="module")
def sim1_sweep(tmp_path_factory):
    path = tmp_path_factory.mktemp("sweep") / "sim1.csv"
    rows = sweep("sim1", [14], [0], out_path=str(path), **SWEEP_KW)
    return rows, str(path)


def test_sweep_sim1_runs_all_three_methods(sim1_sweep):
    rows, _ = sim1_sweep
    assert [r["method"] for r in rows] == [
        "freetree",
        "lmm_fixed_roles",
        "reem_all_features",
    ]
    for row in rows:
        assert row["failed"] == 0 and row["error"] == ""
        assert math.isfinite(float(row["rmse_test"]))
        selected = [s for s in row["selected"].split(";") if s]
        assert row["n_selected"] == len(selected)
    # only the pipeline row is scored for exact recovery against the sidecar
    assert all(row["exact_recovery"] in (0, 1) for row in rows)


def test_sweep_sim2_skips_fixed_roles_baseline():
    rows = sweep("sim2", [12], [1], **SWEEP_KW)
    assert [r["method"] for r in rows] == ["freetree", "reem_all_features"]
    assert all(r["design"] == "sim2" for r in rows)


def test_sweep_csv_has_golden_header(sim1_sweep):
    _, path = sim1_sweep
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
    assert header == ",".join(CSV_COLUMNS)


def test_sweep_rerun_is_byte_identical(tmp_path):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    sweep("sim2", [12], [3], out_path=str(a), **SWEEP_KW)
    sweep("sim2", [12], [3], out_path=str(b), **SWEEP_KW)
    assert a.read_bytes() == b.read_bytes()


def test_sweep_rejects_empty_grids():
    with pytest.raises(ValueError):
        sweep("sim2", [], [1], **SWEEP_KW)
    with pytest.raises(ValueError):
        sweep("sim2", [12], [], **SWEEP_KW)


def test_write_read_roundtrip(sim1_sweep, tmp_path):
    rows, _ = sim1_sweep
    path = tmp_path / "copy.csv"
    write_rows(str(path), rows)
    back = read_rows(str(path))
    assert len(back) == len(rows)
    for got, want in zip(back, rows):
        assert set(got) == set(CSV_COLUMNS)
        for col in CSV_COLUMNS:
            assert got[col] == str(want.get(col, ""))


def test_tune_freetree_picks_from_the_grid():
    train, test, _ = tiny_panels("sim2", seed=70, n_train=14, n_test=6)
    fit, chosen = tune_freetree(train, test, FAST_OPTS)
    assert chosen.mob.alpha in ALPHA_GRID
    assert chosen.mob.min_node_size in MIN_NODE_GRID
    # the tie-breaking rule makes the winner reproducible
    _, again = tune_freetree(train, test, FAST_OPTS)
    assert (again.mob.alpha, again.mob.min_node_size) == (
        chosen.mob.alpha,
        chosen.mob.min_node_size,
    )
    assert fit.options.mob.alpha == chosen.mob.alpha


# ---------------------------------------------------------------------------
# aggregation and report rendering
# ---------------------------------------------------------------------------


def _fake_row(method="freetree", seed=0, rmse_test="", failed="0", **extra):
    row = {c: "" for c in CSV_COLUMNS}
    row.update(
        design="sim2", n_subjects="100", seed=str(seed), method=method,
        rmse_test=rmse_test, failed=failed,
    )
    row.update(extra)
    return row


def test_aggregate_rows_summary_oracle():
    rows = [
        _fake_row(seed=0, rmse_test="1.0", exact_recovery="1", n_selected="6"),
        _fake_row(seed=1, rmse_test="2.0", exact_recovery="0", n_selected="8"),
        _fake_row(seed=2, failed="1", error="RankError: boom"),
    ]
    (summary,) = aggregate_rows(rows)
    assert summary["cells"] == 3
    assert summary["failures"] == 1
    assert float(summary["rmse_mean"]) == pytest.approx(1.5)
    assert float(summary["rmse_sd"]) == pytest.approx(math.sqrt(0.5))
    assert float(summary["exact_recovery_rate"]) == pytest.approx(0.5)
    assert float(summary["mean_n_selected"]) == pytest.approx(7.0)


def test_aggregate_rows_groups_by_design_method_n():
    rows = [
        _fake_row(method="freetree", rmse_test="1.0"),
        _fake_row(method="reem_all_features", rmse_test="3.0"),
        _fake_row(method="freetree", rmse_test="2.0", n_subjects="200"),
    ]
    summary = aggregate_rows(rows)
    keys = [(s["design"], s["method"], s["n_subjects"]) for s in summary]
    assert keys == [
        ("sim2", "freetree", 100),
        ("sim2", "freetree", 200),
        ("sim2", "reem_all_features", 100),
    ]
    lone = summary[1]
    assert lone["rmse_sd"] == "nan"  # single cell, no spread to report


def test_aggregate_rows_all_failed_group():
    (summary,) = aggregate_rows([_fake_row(failed="1"), _fake_row(seed=1, failed="1")])
    assert summary["failures"] == 2
    assert summary["rmse_mean"] == "nan"
    assert summary["exact_recovery_rate"] == ""
    assert summary["mean_n_selected"] == ""


def test_report_csv_aggregates_sweep_output(sim1_sweep, tmp_path):
    _, sweep_path = sim1_sweep
    out = tmp_path / "summary.csv"
    report(sweep_path, "csv", str(out))
    with open(out) as fh:
        header = fh.readline().rstrip("\n")
    assert header == ",".join(AGGREGATE_COLUMNS)
    back = read_rows(str(out))
    assert [r["method"] for r in back] == [
        "freetree",
        "lmm_fixed_roles",
        "reem_all_features",
    ]


def test_report_svg_is_deterministic(sim1_sweep, tmp_path):
    _, sweep_path = sim1_sweep
    first = tmp_path / "chart1.svg"
    second = tmp_path / "chart2.svg"
    report(sweep_path, "svg", str(first))
    report(sweep_path, "svg", str(second))
    text = first.read_text()
    assert text.startswith("<svg ")
    assert text.endswith("</svg>\n")
    assert "polyline" in text and "sim1/freetree" in text
    assert first.read_bytes() == second.read_bytes()


def test_report_rejects_unknown_format(sim1_sweep, tmp_path):
    _, sweep_path = sim1_sweep
    with pytest.raises(ValueError, match="format"):
        report(sweep_path, "png", str(tmp_path / "x.png"))


def test_report_rejects_empty_input(tmp_path):
    empty = tmp_path / "empty.csv"
    write_rows(str(empty), [])
    with pytest.raises(ValueError, match="no rows"):
        report(str(empty), "csv", str(tmp_path / "out.csv"))


def test_render_svg_needs_at_least_one_finite_mean():
    summary = aggregate_rows([_fake_row(failed="1")])
    with pytest.raises(ValueError, match="nothing to plot"):
        render_svg(summary)


def test_render_svg_handles_a_single_sample_size():
    summary = aggregate_rows([_fake_row(rmse_test="1.25")])
    text = render_svg(summary)
    assert "<circle" in text and "1.25" not in text.split(">")[0]


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


def test_int_list_parses_comma_separated_values():
    assert _int_list("1,2,3") == [1, 2, 3]
    assert _int_list("5") == [5]
    assert _int_list("10,") == [10]
    assert _int_list("") == []
    with pytest.raises(argparse.ArgumentTypeError):
        _int_list("1,two")


def test_cli_rejects_unknown_design(tmp_path):
    with pytest.raises(SystemExit) as err:
        main(["simulate", "--design", "sim9", "--n", "5", "--out", str(tmp_path)])
    assert err.value.code == 2


FIT_ARGS = ["--n-perm", "99", "--seed", "5", "--min-module-size", "4"]


@pytest.fixture(scope="module")
def cli_artifacts(tmp_path_factory):
    """simulate -> fit once; several tests poke at the resulting files."""
    root = tmp_path_factory.mktemp("cli")
    train_dir = os.path.join(root, "train")
    test_dir = os.path.join(root, "test")
    fit_path = os.path.join(root, "fit.json")
    base = ["--t", "3", "--modules", "6,5", "--n", "16"]
    assert main(["simulate", "--design", "sim2", "--seed", "9", "--out", train_dir] + base) == 0
    assert main([
        "simulate", "--design", "sim2", "--seed", "10", "--id-prefix", "te_",
        "--out", test_dir,
    ] + base) == 0
    rc = main([
        "fit",
        "--data", os.path.join(train_dir, "data.csv"),
        "--roles", os.path.join(train_dir, "roles.txt"),
        "--out", fit_path,
    ] + FIT_ARGS)
    assert rc == 0
    return {"root": str(root), "train": train_dir, "test": test_dir, "fit": fit_path}


def test_cli_simulate_writes_expected_files(cli_artifacts):
    for name in ("data.csv", "roles.txt", "truth.json"):
        assert os.path.exists(os.path.join(cli_artifacts["train"], name))
    with open(os.path.join(cli_artifacts["train"], "truth.json")) as fh:
        truth = json.load(fh)
    assert truth["design"] == "sim2"
    assert len(truth["true_features"]) == 6


def test_cli_fit_output_reloads(cli_artifacts):
    with open(cli_artifacts["fit"]) as fh:
        payload = json.load(fh)
    assert payload["options"]["mob"]["seed"] == 5
    assert isinstance(payload["report"]["final"], list)


def test_cli_evaluate_roundtrip(cli_artifacts, tmp_path, capsys):
    out = tmp_path / "eval.json"
    rc = main([
        "evaluate",
        "--fit", cli_artifacts["fit"],
        "--data", os.path.join(cli_artifacts["test"], "data.csv"),
        "--truth", os.path.join(cli_artifacts["train"], "truth.json"),
        "--out", str(out),
    ])
    assert rc == 0
    assert "test rmse:" in capsys.readouterr().out
    with open(out) as fh:
        payload = json.load(fh)
    assert math.isfinite(payload["rmse_test"])
    assert isinstance(payload["exact_recovery"], bool)


def test_cli_evaluate_on_training_subjects_exits_2(cli_artifacts, capsys):
    rc = main([
        "evaluate",
        "--fit", cli_artifacts["fit"],
        "--data", os.path.join(cli_artifacts["train"], "data.csv"),
    ])
    assert rc == 2
    assert "cluster" in capsys.readouterr().err


def test_cli_fit_with_missing_column_exits_2(cli_artifacts, tmp_path, capsys):
    roles_path = tmp_path / "roles.txt"
    with open(os.path.join(cli_artifacts["train"], "roles.txt")) as fh:
        text = fh.read()
    roles_path.write_text(text.replace("X1", "X999"))
    rc = main([
        "fit",
        "--data", os.path.join(cli_artifacts["train"], "data.csv"),
        "--roles", str(roles_path),
        "--out", str(tmp_path / "fit.json"),
    ] + FIT_ARGS)
    assert rc == 2
    assert capsys.readouterr().err.startswith("error:")


def test_cli_fit_on_single_row_exits_3(cli_artifacts, tmp_path, capsys):
    src = os.path.join(cli_artifacts["train"], "data.csv")
    with open(src) as fh:
        lines = fh.readlines()
    short = tmp_path / "short.csv"
    short.write_text("".join(lines[:2]))
    rc = main([
        "fit",
        "--data", str(short),
        "--roles", os.path.join(cli_artifacts["train"], "roles.txt"),
        "--out", str(tmp_path / "fit.json"),
    ] + FIT_ARGS)
    assert rc == 3
    assert "numeric failure" in capsys.readouterr().err


def test_cli_sweep_then_report(tmp_path, capsys):
    sweep_path = tmp_path / "sweep.csv"
    rc = main([
        "sweep", "--design", "sim2", "--n-list", "12", "--seeds", "0",
        "--t", "3", "--modules", "6,5",
        "--val-subjects", "6", "--test-subjects", "6", "--no-tune",
        "--out", str(sweep_path),
    ] + FIT_ARGS)
    assert rc == 0
    assert "(0 failed)" in capsys.readouterr().out
    with open(sweep_path) as fh:
        assert fh.readline().rstrip("\n") == ",".join(CSV_COLUMNS)

    table = tmp_path / "summary.csv"
    chart = tmp_path / "summary.svg"
    assert main(["report", "--in", str(sweep_path), "--out", str(table)]) == 0
    assert main([
        "report", "--in", str(sweep_path), "--format", "svg", "--out", str(chart),
    ]) == 0
    assert read_rows(str(table))[0]["method"] == "freetree"
    assert chart.read_text().startswith("<svg ")
