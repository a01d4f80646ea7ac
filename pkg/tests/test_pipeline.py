"""Tests for the screen-then-select pipeline and its serialization.

The principal-component oracle is a dense eigendecomposition. Pipeline runs
use small planted panels shared across tests through module-scoped fixtures
(every full run exercises clustering, screening, selection, and the final
refit).
"""

import json
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from freetree.errors import InsufficientDataError, SchemaError
from freetree.model_tree import MobParams
from freetree.panel_data import FeatureRoles, PanelDataset
from freetree.pipeline import (
    FreetreeOptions,
    WgcnaParams,
    first_pc,
    fit_from_dict,
    fit_to_dict,
    leaf_coefficient_summary,
    options_from_dict,
    options_to_dict,
    predict_freetree,
    run_freetree,
)
from freetree.simulate import SimConfig, gen_panel

SMALL_WGCNA = WgcnaParams(min_module_size=5)


# ---------------------------------------------------------------------------
# principal components


def pc_oracle(x):
    z = (x - x.mean(axis=0)) / x.std(axis=0, ddof=1)
    corr = z.T @ z / (len(x) - 1)
    vals, vecs = np.linalg.eigh(corr)
    v = vecs[:, -1]
    if v.sum() < 0 or (v.sum() == 0 and v[0] < 0):
        v = -v
    return z @ v, v, float(vals[-1])


def pc_panel(x, names):
    frame = pd.DataFrame(x, columns=list(names))
    frame["subject"] = [str(i) for i in range(len(frame))]
    frame["y"] = 0.0
    roles = FeatureRoles(
        var_select=tuple(names),
        fixed_regress=(),
        fixed_split=(),
        cluster_col="subject",
        response_col="y",
    )
    return PanelDataset.from_frame(frame, roles)


def test_first_pc_matches_dense_eigendecomposition():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((60, 5))
    x[:, 1] += 0.8 * x[:, 0]
    x[:, 2] -= 0.5 * x[:, 0]
    names = tuple(f"f{j}" for j in range(5))
    scores, loadings = first_pc(pc_panel(x, names), names)
    want_scores, want_loadings, top = pc_oracle(x)
    np.testing.assert_allclose(loadings, want_loadings, atol=1e-7)
    np.testing.assert_allclose(scores, want_scores, atol=1e-6)
    assert np.var(scores, ddof=1) == pytest.approx(top, rel=1e-7)
    assert np.linalg.norm(loadings) == pytest.approx(1.0, abs=1e-12)


def test_first_pc_equicorrelated_block():
    rng = np.random.default_rng(1)
    n, p, rho = 600, 100, 0.8
    g = rng.standard_normal((n, 1))
    x = np.sqrt(rho) * g + np.sqrt(1 - rho) * rng.standard_normal((n, p))
    names = tuple(f"f{j}" for j in range(p))
    scores, loadings = first_pc(pc_panel(x, names), names)
    # population top eigenvalue of the correlation matrix is 1 + (p-1) rho
    assert np.var(scores, ddof=1) == pytest.approx(1 + (p - 1) * rho, rel=0.05)
    assert np.all(loadings > 0)
    np.testing.assert_allclose(loadings, 1 / np.sqrt(p), atol=0.04)


def test_first_pc_duplicated_feature():
    rng = np.random.default_rng(2)
    base = rng.standard_normal(50)
    x = np.column_stack([base, base])
    scores, loadings = first_pc(pc_panel(x, ("a", "b")), ("a", "b"))
    np.testing.assert_allclose(loadings, [1 / np.sqrt(2)] * 2, atol=1e-10)
    z = (base - base.mean()) / base.std(ddof=1)
    np.testing.assert_allclose(scores, np.sqrt(2) * z, atol=1e-9)


def test_first_pc_sign_tie_breaks_on_first_loading():
    rng = np.random.default_rng(3)
    base = rng.standard_normal(50)
    x = np.column_stack([base, -base])
    _, loadings = first_pc(pc_panel(x, ("a", "b")), ("a", "b"))
    # loading sum is zero here; the first loading must come out non-negative
    assert loadings[0] == pytest.approx(1 / np.sqrt(2), abs=1e-10)
    assert loadings[1] == pytest.approx(-1 / np.sqrt(2), abs=1e-10)


def test_first_pc_errors():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((20, 3))
    ds = pc_panel(x, ("a", "b", "c"))
    with pytest.raises(ValueError):
        first_pc(ds, ("a",))
    with pytest.raises(InsufficientDataError):
        first_pc(pc_panel(x[:2], ("a", "b", "c")), ("a", "b", "c"))
    x_dead = x.copy()
    x_dead[:, 1] = 7.0
    with pytest.raises(ValueError, match="b"):
        first_pc(pc_panel(x_dead, ("a", "b", "c")), ("a", "b", "c"))


# ---------------------------------------------------------------------------
# full pipeline runs (one per strategy)


@pytest.fixture(scope="module")
def sim1_fuzzy():
    cfg = SimConfig("sim1", n_subjects=40, seed=31, n_periods=4, module_sizes=(12, 10))
    ds, truth = gen_panel(cfg)
    opts = FreetreeOptions(fuzzy=True, mob=MobParams(seed=3), wgcna=SMALL_WGCNA)
    return ds, truth, opts, run_freetree(ds, opts)


@pytest.fixture(scope="module")
def sim2_fuzzy():
    cfg = SimConfig("sim2", n_subjects=40, seed=32, n_periods=4, module_sizes=(12, 10))
    ds, truth = gen_panel(cfg)
    opts = FreetreeOptions(fuzzy=True, mob=MobParams(seed=4), wgcna=SMALL_WGCNA)
    return ds, truth, opts, run_freetree(ds, opts)


def test_regressors_fuzzy_path(sim1_fuzzy):
    ds, truth, opts, fit = sim1_fuzzy
    report = fit.report
    # one correlated module plus the grey pool, both screened
    assert report.modules.non_grey_labels == [1]
    assert set(report.screened) == {1, 0}
    assert report.selected_non_grey == {}
    assert set(report.final) <= {f for v in report.screened.values() for f in v}
    assert fit.selected_features == report.final
    assert len(report.final) > 0
    # the final tree regresses on fixed regressors plus the selection and may
    # split on treatment plus the selection, nothing else
    tree = fit.final_tree
    assert tree.regressors == ("time", "time2") + report.final
    assert tree.splitters == ("treatment",) + report.final
    assert set(fit.timing) == {"cluster", "screen", "select", "final"}
    stage_names = set(report.stage_trees)
    assert {"screen:1", "screen:grey", "selection", "final"} <= stage_names


def test_no_regressor_fuzzy_path(sim2_fuzzy):
    ds, truth, opts, fit = sim2_fuzzy
    report = fit.report
    assert report.modules.non_grey_labels == [1]
    assert set(report.screened) == {1, 0}
    # module screening regressed on the synthetic component, which must not
    # leak into the final tree
    assert report.stage_trees["screen:1"]["regressors"] == ["_module_pc"]
    assert report.stage_trees["screen:grey"]["leaf_kind"] == "constant"
    assert report.stage_trees["selection"]["leaf_kind"] == "constant"
    tree = fit.final_tree
    assert "_module_pc" not in tree.regressors
    if report.final:
        assert tree.leaf_kind == "linear"
        assert tree.regressors == report.final
        assert tree.splitters == report.final
    assert len(report.final) > 0


def test_regressors_nonfuzzy_path():
    cfg = SimConfig("sim1", n_subjects=40, seed=33, n_periods=4, module_sizes=(12, 10))
    ds, _ = gen_panel(cfg)
    opts = FreetreeOptions(fuzzy=False, mob=MobParams(seed=5), wgcna=SMALL_WGCNA)
    fit = run_freetree(ds, opts)
    report = fit.report
    # non-grey selection happens first and is recorded per module
    assert set(report.selected_non_grey) == {1}
    q_sel = report.selected_non_grey[1]
    assert set(q_sel) <= set(report.screened[1])
    # grey screening happened afterwards and its stage tree regressed on the
    # fixed regressors plus the already selected features
    assert 0 in report.screened
    grey_stage = report.stage_trees["screen:grey"]
    assert tuple(grey_stage["regressors"]) == ("time", "time2") + q_sel
    assert set(report.final) == set(q_sel) | set(report.screened[0])


def test_no_regressor_nonfuzzy_path():
    cfg = SimConfig("sim2", n_subjects=40, seed=34, n_periods=4, module_sizes=(12, 10))
    ds, _ = gen_panel(cfg)
    opts = FreetreeOptions(fuzzy=False, mob=MobParams(seed=6), wgcna=SMALL_WGCNA)
    fit = run_freetree(ds, opts)
    report = fit.report
    assert set(report.selected_non_grey) == {1}
    q_sel = report.selected_non_grey[1]
    grey_stage = report.stage_trees["screen:grey"]
    if q_sel:
        assert grey_stage["leaf_kind"] == "linear"
        assert tuple(grey_stage["regressors"]) == q_sel
    else:
        assert grey_stage["leaf_kind"] == "constant"
    assert set(report.final) == set(q_sel) | set(report.screened[0])


def test_stage_seeds_are_distinct(sim1_fuzzy):
    _, _, opts, fit = sim1_fuzzy
    seeds = {
        stage: tree["params"]["seed"] for stage, tree in fit.report.stage_trees.items()
    }
    assert len(set(seeds.values())) == len(seeds)
    assert opts.mob.seed not in seeds.values()


def test_all_grey_fallback_still_selects():
    rng = np.random.default_rng(7)
    n_subj, t, p = 50, 3, 12
    n = n_subj * t
    cols = {f"X{j + 1}": rng.standard_normal(n) for j in range(p)}
    subj = np.repeat([f"s{i}" for i in range(n_subj)], t)
    y = 5.0 * cols["X1"] + np.repeat(rng.standard_normal(n_subj), t) + 0.5 * rng.standard_normal(n)
    frame = pd.DataFrame(cols)
    frame["subject"] = subj
    frame["y"] = y
    roles = FeatureRoles(
        var_select=tuple(f"X{j + 1}" for j in range(p)),
        fixed_regress=(),
        fixed_split=(),
        cluster_col="subject",
        response_col="y",
    )
    ds = PanelDataset.from_frame(frame, roles)
    opts = FreetreeOptions(fuzzy=True, mob=MobParams(seed=8), wgcna=WgcnaParams(min_module_size=6))
    fit = run_freetree(ds, opts)
    assert fit.diagnostics.get("all_grey_fallback")
    assert fit.report.modules.non_grey_labels == []
    assert "X1" in fit.report.final


@pytest.fixture(scope="module")
def noise_fit():
    rng = np.random.default_rng(9)
    n_subj, t, p = 40, 3, 10
    n = n_subj * t
    cols = {f"X{j + 1}": rng.standard_normal(n) for j in range(p)}
    frame = pd.DataFrame(cols)
    frame["subject"] = np.repeat([f"s{i}" for i in range(n_subj)], t)
    frame["y"] = np.repeat(rng.standard_normal(n_subj), t) + rng.standard_normal(n)
    roles = FeatureRoles(
        var_select=tuple(f"X{j + 1}" for j in range(p)),
        fixed_regress=(),
        fixed_split=(),
        cluster_col="subject",
        response_col="y",
    )
    ds = PanelDataset.from_frame(frame, roles)
    opts = FreetreeOptions(
        fuzzy=True, mob=MobParams(seed=10, alpha=0.01), wgcna=WgcnaParams(min_module_size=6)
    )
    return ds, run_freetree(ds, opts)


def test_pure_noise_selects_nothing(noise_fit):
    ds, fit = noise_fit
    assert fit.report.final == ()
    assert fit.diagnostics.get("empty_selection")
    assert fit.final_tree.leaf_kind == "constant"
    assert fit.final_tree.regressors == ()
    # single-leaf constant model predicts one value everywhere
    pred = predict_freetree(fit, ds)
    assert len(np.unique(pred)) == fit.final_tree.n_leaves


def test_constant_leaf_fit_flags_coefficient_table(noise_fit):
    _, fit = noise_fit
    table = leaf_coefficient_summary(fit, "anything")
    assert table.flag == "constant_leaves"
    assert table.frame.empty


def test_fixed_roles_only():
    cfg = SimConfig("sim1", n_subjects=30, seed=35, n_periods=4, module_sizes=(3, 3))
    ds, _ = gen_panel(cfg)
    bare = replace(ds.roles, var_select=())
    opts = FreetreeOptions(mob=MobParams(seed=11))
    fit = run_freetree(ds, opts, roles=bare)
    assert fit.diagnostics.get("fixed_roles_only")
    assert fit.report.modules is None
    assert fit.report.final == ()
    assert set(fit.timing) == {"final"}
    assert fit.final_tree.regressors == ("time", "time2")
    assert fit.final_tree.splitters == ("treatment",)


def test_roles_override_restricts_clustering():
    cfg = SimConfig("sim2", n_subjects=30, seed=36, n_periods=3, module_sizes=(6, 4))
    ds, _ = gen_panel(cfg)
    subset = ds.roles.var_select[:6]
    fit = run_freetree(
        ds,
        FreetreeOptions(mob=MobParams(seed=12), wgcna=WgcnaParams(min_module_size=3)),
        roles=replace(ds.roles, var_select=subset),
    )
    assert fit.report.modules.features == subset
    assert set(fit.report.final) <= set(subset)


def test_prediction_ignores_unselected_columns(sim1_fuzzy):
    ds, _, opts, fit = sim1_fuzzy
    cfg = SimConfig(
        "sim1", n_subjects=15, seed=99, n_periods=4, module_sizes=(12, 10), id_prefix="te_"
    )
    test_ds, _ = gen_panel(cfg)
    base = predict_freetree(fit, test_ds)
    untouched = [
        f
        for f in test_ds.roles.var_select
        if f not in fit.report.final and f not in fit.roles.fixed_split
    ]
    assert untouched
    frame = test_ds.frame.copy()
    frame[untouched[0]] = frame[untouched[0]] + 100.0
    perturbed = PanelDataset.from_frame(frame, test_ds.roles)
    np.testing.assert_array_equal(predict_freetree(fit, perturbed), base)


def test_report_json_and_rerun_determinism(sim1_fuzzy):
    ds, _, opts, fit = sim1_fuzzy
    again = run_freetree(ds, opts)
    assert fit.report.to_json() == again.report.to_json()
    from freetree.model_tree import tree_to_dict

    assert tree_to_dict(fit.final_tree) == tree_to_dict(again.final_tree)
    np.testing.assert_array_equal(fit.train_leaf_ids, again.train_leaf_ids)
    payload = json.loads(fit.report.to_json())
    assert payload["final"] == list(fit.report.final)


def test_fit_serialization_roundtrip(sim1_fuzzy):
    ds, _, opts, fit = sim1_fuzzy
    payload = json.loads(json.dumps(fit_to_dict(fit)))
    clone = fit_from_dict(payload)
    assert clone.selected_features == fit.selected_features
    assert clone.roles == fit.roles
    assert clone.options == fit.options
    np.testing.assert_array_equal(clone.train_leaf_ids, fit.train_leaf_ids)
    np.testing.assert_array_equal(predict_freetree(clone, ds), predict_freetree(fit, ds))
    np.testing.assert_array_equal(
        predict_freetree(clone, ds, include_random=True),
        predict_freetree(fit, ds, include_random=True),
    )
    t1 = leaf_coefficient_summary(fit, "treatment")
    t2 = leaf_coefficient_summary(clone, "treatment")
    pd.testing.assert_frame_equal(t1.frame, t2.frame)

    with pytest.raises(SchemaError):
        fit_from_dict({"format": "something-else"})


def test_options_dict_roundtrip():
    opts = FreetreeOptions(
        fuzzy=False,
        mob=MobParams(alpha=0.01, n_perm=499, min_node_size=25, seed=7),
        wgcna=WgcnaParams(beta_candidates=(2, 4, 6), r2_target=0.8, min_module_size=10),
    )
    assert options_from_dict(options_to_dict(opts)) == opts
    assert options_from_dict({}) == FreetreeOptions()


def test_leaf_coefficient_summary_weights(sim1_fuzzy):
    ds, _, opts, fit = sim1_fuzzy
    table = leaf_coefficient_summary(fit, "treatment")
    assert table.flag is None
    frame = table.frame
    assert list(frame.index) == ["treatment1", "treatment2"]
    assert list(frame.columns) == ["(intercept)"] + list(fit.final_tree.regressors)
    # every row is a convex combination of leaf coefficient vectors
    coef = np.stack([leaf.model.coef for leaf in fit.final_tree.leaves])
    lo, hi = coef.min(axis=0), coef.max(axis=0)
    for level in frame.index:
        row = frame.loc[level].to_numpy()
        assert np.all(row >= lo - 1e-12) and np.all(row <= hi + 1e-12)
    # recompute one row from the training assignments directly
    values = fit.train_split_values["treatment"]
    mask = values == "treatment1"
    counts = np.bincount(
        fit.train_leaf_ids[mask], minlength=fit.final_tree.n_leaves
    ).astype(float)
    expected = (counts / counts.sum()) @ coef
    np.testing.assert_allclose(frame.loc["treatment1"].to_numpy(), expected, atol=1e-12)
    with pytest.raises(SchemaError):
        leaf_coefficient_summary(fit, "time")
