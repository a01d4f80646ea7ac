"""Cluster, screen, select: the full feature-selection pipeline.

The driver groups the high-dimensional ``var_select`` columns into
correlation-network modules, screens each module with its own mixed-effects
model tree (so correlated but irrelevant features compete only against
their own module), then runs one selection tree over the screening
survivors. The features the selection tree actually splits on form the
final set, and the returned model is a mixed-effects tree refit on that set
alone.

Four variants, chosen by ``fuzzy`` and by whether known regressors exist:

* regressors present, fuzzy: every module (grey pool included) is screened
  independently, all survivors meet in one selection tree.
* regressors present, non-fuzzy: only the real modules are screened and
  selected first; the grey pool is screened afterwards with the already
  selected features added as regressors, so grey features must explain
  something beyond them.
* no regressors, fuzzy: each real module is screened with its own first
  principal component standing in as the regressor (to absorb the shared
  module signal); the grey pool and the selection stage use constant-leaf
  trees.
* no regressors, non-fuzzy: like the previous, but grey screening happens
  after non-grey selection, regressing on the selected features.

Principal components exist only inside the screening stage; the final tree
never sees them.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .corr_net import (
    GREY_LABEL,
    ModuleAssignment,
    SoftThresholdFit,
    SoftThresholdResult,
    adjacency,
    detect_modules,
    pick_soft_threshold,
    similarity_matrix,
    topological_overlap,
)
from .errors import InsufficientDataError, SchemaError
from .model_tree import (
    MobParams,
    ModelTree,
    assign_leaves,
    fit_lmm_tree,
    predict_tree,
    tree_from_dict,
    tree_to_dict,
    used_split_features,
)
from .panel_data import FeatureRoles, PanelDataset, format_roles, parse_roles_text
from .rand import derive_seed


@dataclass(frozen=True)
class WgcnaParams:
    """Correlation-network knobs: soft-threshold scan and module cut."""

    beta_candidates: tuple[int, ...] = tuple(range(1, 21))
    r2_target: float = 0.85
    cut_height: float = 0.99
    min_module_size: int = 20


@dataclass(frozen=True)
class FreetreeOptions:
    fuzzy: bool = True
    mob: MobParams = field(default_factory=MobParams)
    wgcna: WgcnaParams = field(default_factory=WgcnaParams)


@dataclass
class SelectionReport:
    """Everything the selection produced, stage by stage.

    ``screened`` maps module label to the features its screening tree used;
    ``selected_non_grey`` is only populated on the non-fuzzy paths (the
    selection happens before grey screening there). ``stage_trees`` holds a
    serialized snapshot of every intermediate tree, keyed by stage name.
    """

    modules: ModuleAssignment | None = None
    soft_threshold: SoftThresholdResult | None = None
    screened: dict[int, tuple[str, ...]] = field(default_factory=dict)
    selected_non_grey: dict[int, tuple[str, ...]] = field(default_factory=dict)
    final: tuple[str, ...] = ()
    stage_trees: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        modules = None
        if self.modules is not None:
            modules = {
                "features": list(self.modules.features),
                "labels": [int(self.modules.labels[f]) for f in self.modules.features],
                "module_count": self.modules.module_count,
            }
        soft = None
        if self.soft_threshold is not None:
            soft = {
                "beta": self.soft_threshold.beta,
                "used_fallback": self.soft_threshold.used_fallback,
                "degenerate": self.soft_threshold.degenerate,
                "table": [
                    {
                        "beta": row.beta,
                        "signed_r2": row.signed_r2,
                        "mean_connectivity": row.mean_connectivity,
                        "max_connectivity": row.max_connectivity,
                    }
                    for row in self.soft_threshold.table
                ],
            }
        return {
            "modules": modules,
            "soft_threshold": soft,
            "screened": {str(k): list(v) for k, v in self.screened.items()},
            "selected_non_grey": {str(k): list(v) for k, v in self.selected_non_grey.items()},
            "final": list(self.final),
            "stage_trees": self.stage_trees,
        }

    def to_json(self) -> str:
        """Canonical serialization; identical runs give identical bytes."""
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


@dataclass
class FreetreeFit:
    report: SelectionReport
    final_tree: ModelTree
    options: FreetreeOptions
    roles: FeatureRoles
    timing: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    train_leaf_ids: np.ndarray | None = None
    train_split_values: dict = field(default_factory=dict)

    @property
    def selected_features(self) -> tuple[str, ...]:
        return self.report.final


# ---------------------------------------------------------------------------
# principal components
# ---------------------------------------------------------------------------


def first_pc(ds: PanelDataset, features) -> tuple[np.ndarray, np.ndarray]:
    """First principal component of the standardized feature block.

    Power iteration on the correlation matrix to relative tolerance 1e-10;
    the loading sign is fixed so the loading sum is >= 0 (first loading
    >= 0 on a tie). Returns (per-row scores, unit-norm loadings).
    """
    features = tuple(features)
    if len(features) < 2:
        raise ValueError("first_pc needs at least two features")
    x = ds.matrix(features)
    n = x.shape[0]
    if n < 3:
        raise InsufficientDataError("first_pc needs at least three rows")
    mean = x.mean(axis=0)
    sd = x.std(axis=0, ddof=1)
    dead = [f for f, s in zip(features, sd) if not s > 0]
    if dead:
        raise ValueError(f"zero-variance features in PC block: {', '.join(dead)}")
    z = (x - mean) / sd
    corr = z.T @ z / (n - 1)

    p = len(features)
    v = np.full(p, 1.0 / np.sqrt(p))
    lam = 0.0
    for start in range(p + 1):
        if start > 0:
            # The previous start vector annihilated under corr; a basis
            # vector cannot (the diagonal is 1 after standardization).
            v = np.zeros(p)
            v[start - 1] = 1.0
        ok = False
        for _ in range(10000):
            w = corr @ v
            norm = float(np.linalg.norm(w))
            if norm <= 1.0e-30:
                break
            w /= norm
            if np.dot(w, v) < 0:
                w = -w
            delta = float(np.linalg.norm(w - v))
            v = w
            lam = norm
            if delta <= 1.0e-10:
                ok = True
                break
        if ok:
            break
    total = float(v.sum())
    if total < 0 or (total == 0 and v[0] < 0):
        v = -v
    return z @ v, v


# ---------------------------------------------------------------------------
# pipeline driver
# ---------------------------------------------------------------------------


def _ordered(names, reference) -> tuple[str, ...]:
    """Stable re-ordering of ``names`` by their position in ``reference``."""
    pos = {name: i for i, name in enumerate(reference)}
    return tuple(sorted(set(names), key=pos.__getitem__))


def _stage_params(mob: MobParams, *tags) -> MobParams:
    return replace(mob, seed=derive_seed(mob.seed, *tags))


def _with_column(ds: PanelDataset, name: str, values: np.ndarray) -> PanelDataset:
    if name in ds.frame.columns:
        raise SchemaError(f"synthetic column name collides with data: {name}")
    sub = PanelDataset(ds.frame.assign(**{name: values}), ds.roles)
    sub.categorical_levels = {k: list(v) for k, v in ds.categorical_levels.items()}
    return sub


class _StageRunner:
    """Fits stage trees, records them, and collects per-stage diagnostics."""

    def __init__(self, train: PanelDataset, opts: FreetreeOptions, report, diagnostics):
        self.train = train
        self.opts = opts
        self.report = report
        self.diagnostics = diagnostics

    def fit(self, stage: str, regressors, splitters, leaf_kind, *, train=None, seed_tags=None):
        params = _stage_params(self.opts.mob, *(seed_tags or (stage,)))
        tree = fit_lmm_tree(
            train if train is not None else self.train,
            tuple(regressors),
            tuple(splitters),
            leaf_kind,
            params,
        )
        self.report.stage_trees[stage] = tree_to_dict(tree)
        if tree.diagnostics.get("n_perm_capped"):
            self.diagnostics["n_perm_capped"] = True
        return tree

    def screen(self, stage: str, regressors, splitters, leaf_kind, exclude, *, train=None):
        """Screening tree; an unfittable module screens to nothing."""
        try:
            tree = self.fit(stage, regressors, splitters, leaf_kind, train=train)
        except InsufficientDataError as exc:
            self.diagnostics.setdefault("screen_failures", {})[stage] = str(exc)
            return ()
        return used_split_features(tree, exclude=exclude)


def run_freetree(
    train: PanelDataset, opts: FreetreeOptions | None = None, roles: FeatureRoles | None = None
) -> FreetreeFit:
    """Cluster var_select, screen per module, select, and refit.

    ``roles`` defaults to the dataset's own role assignment. See the module
    docstring for how (fuzzy, regressors present?) pick one of the four
    screening strategies.
    """
    opts = opts or FreetreeOptions()
    if roles is not None and roles != train.roles:
        train = PanelDataset.from_frame(train.frame, roles)
    roles = train.roles
    if train.n_rows == 0:
        raise InsufficientDataError("training set is empty")

    report = SelectionReport()
    diagnostics: dict = {}
    timing: dict = {}
    runner = _StageRunner(train, opts, report, diagnostics)
    var_select = roles.var_select
    fixed_split = roles.fixed_split
    regress = roles.fixed_regress

    def final_fit(xs: tuple[str, ...]) -> ModelTree:
        regressors = regress + xs
        splitters = fixed_split + xs
        leaf_kind = "linear" if regressors else "constant"
        if not xs:
            diagnostics["empty_selection"] = True
        t0 = time.perf_counter()
        tree = runner.fit("final", regressors, splitters, leaf_kind)
        timing["final"] = time.perf_counter() - t0
        return tree

    if not var_select:
        diagnostics["fixed_roles_only"] = True
        final = final_fit(())
        return _package(train, opts, roles, report, final, timing, diagnostics)

    t0 = time.perf_counter()
    sim = similarity_matrix(train, var_select)
    soft = pick_soft_threshold(sim, opts.wgcna.beta_candidates, opts.wgcna.r2_target)
    tom = topological_overlap(adjacency(sim, soft.beta))
    modules = detect_modules(tom, opts.wgcna.min_module_size, opts.wgcna.cut_height)
    report.soft_threshold = soft
    report.modules = modules
    timing["cluster"] = time.perf_counter() - t0

    grey = _ordered(modules.members(GREY_LABEL), var_select)
    non_grey = modules.non_grey_labels
    use_pc = not regress

    t0 = time.perf_counter()
    if not use_pc:
        if opts.fuzzy:
            labels = non_grey + [GREY_LABEL]
            for lab in labels:
                members = _ordered(modules.members(lab), var_select)
                stage = "screen:grey" if lab == GREY_LABEL else f"screen:{lab}"
                report.screened[lab] = runner.screen(
                    stage, regress, fixed_split + members, "linear", fixed_split
                )
            timing["screen"] = time.perf_counter() - t0

            t0 = time.perf_counter()
            pool = _ordered(
                [f for feats in report.screened.values() for f in feats], var_select
            )
            xs = _select(runner, report, regress, fixed_split, pool, "linear", var_select)
        else:
            for lab in non_grey:
                members = _ordered(modules.members(lab), var_select)
                report.screened[lab] = runner.screen(
                    f"screen:{lab}", regress, fixed_split + members, "linear", fixed_split
                )
            timing["screen"] = time.perf_counter() - t0

            t0 = time.perf_counter()
            pool = _ordered(
                [f for feats in report.screened.values() for f in feats], var_select
            )
            q_sel = _select(runner, report, regress, fixed_split, pool, "linear", var_select)
            for lab in non_grey:
                report.selected_non_grey[lab] = tuple(
                    f for f in q_sel if modules.labels[f] == lab
                )
            grey_sel = (
                runner.screen(
                    "screen:grey", regress + q_sel, fixed_split + grey, "linear", fixed_split
                )
                if grey
                else ()
            )
            report.screened[GREY_LABEL] = grey_sel
            xs = _ordered(q_sel + grey_sel, var_select)
            report.final = xs
    else:
        if not non_grey:
            diagnostics["all_grey_fallback"] = True
            grey = var_select
        pc_screened: dict[int, tuple[str, ...]] = {}
        for lab in non_grey:
            members = _ordered(modules.members(lab), var_select)
            pc_screened[lab] = _screen_with_pc(runner, lab, members, fixed_split)
        if opts.fuzzy:
            report.screened.update(pc_screened)
            report.screened[GREY_LABEL] = (
                runner.screen("screen:grey", (), fixed_split + grey, "constant", fixed_split)
                if grey
                else ()
            )
            timing["screen"] = time.perf_counter() - t0

            t0 = time.perf_counter()
            pool = _ordered(
                [f for feats in report.screened.values() for f in feats], var_select
            )
            xs = _select(runner, report, (), fixed_split, pool, "constant", var_select)
        else:
            report.screened.update(pc_screened)
            timing["screen"] = time.perf_counter() - t0

            t0 = time.perf_counter()
            pool = _ordered([f for feats in pc_screened.values() for f in feats], var_select)
            q_sel = _select(runner, report, (), fixed_split, pool, "constant", var_select)
            for lab in non_grey:
                report.selected_non_grey[lab] = tuple(
                    f for f in q_sel if modules.labels[f] == lab
                )
            grey_kind = "linear" if q_sel else "constant"
            grey_sel = (
                runner.screen("screen:grey", q_sel, fixed_split + grey, grey_kind, fixed_split)
                if grey
                else ()
            )
            report.screened[GREY_LABEL] = grey_sel
            xs = _ordered(q_sel + grey_sel, var_select)
            report.final = xs
    timing["select"] = time.perf_counter() - t0

    _check_containment(report, roles)
    final = final_fit(xs)
    return _package(train, opts, roles, report, final, timing, diagnostics)


def _screen_with_pc(runner: _StageRunner, lab: int, members, fixed_split) -> tuple[str, ...]:
    pc_name = "_module_pc"
    while pc_name in runner.train.frame.columns:
        pc_name += "_"
    try:
        scores, _ = first_pc(runner.train, members)
    except (ValueError, InsufficientDataError) as exc:
        runner.diagnostics.setdefault("screen_failures", {})[f"screen:{lab}"] = str(exc)
        return ()
    ds2 = _with_column(runner.train, pc_name, scores)
    return runner.screen(
        f"screen:{lab}", (pc_name,), fixed_split + tuple(members), "linear", fixed_split,
        train=ds2,
    )


def _select(runner, report, regress, fixed_split, pool, leaf_kind, var_select):
    if not pool:
        report.final = ()
        return ()
    tree = runner.fit("selection", regress, fixed_split + pool, leaf_kind)
    xs = _ordered(used_split_features(tree, exclude=fixed_split), var_select)
    report.final = xs
    return xs


def _check_containment(report: SelectionReport, roles: FeatureRoles):
    screened_union = {f for feats in report.screened.values() for f in feats}
    if not set(report.final) <= screened_union:
        raise AssertionError("selected features must come from the screened pool")
    if set(report.final) & set(roles.fixed_split):
        raise AssertionError("fixed_split variables can never be selected")
    if report.modules is not None:
        for lab, feats in report.screened.items():
            members = set(report.modules.members(lab))
            if not set(feats) <= members:
                raise AssertionError(f"screened set escapes module {lab}")


def _package(train, opts, roles, report, final_tree, timing, diagnostics) -> FreetreeFit:
    if final_tree.diagnostics.get("n_perm_capped"):
        diagnostics["n_perm_capped"] = True
    fit = FreetreeFit(
        report=report,
        final_tree=final_tree,
        options=opts,
        roles=roles,
        timing=timing,
        diagnostics=diagnostics,
    )
    fit.train_leaf_ids = assign_leaves(final_tree, train)
    fit.train_split_values = {
        col: np.array([str(v) for v in train.column(col)], dtype=object)
        for col in roles.fixed_split
        if train.is_categorical(col)
    }
    return fit


# ---------------------------------------------------------------------------
# prediction and summaries
# ---------------------------------------------------------------------------


def predict_freetree(
    fit: FreetreeFit, rows: PanelDataset, include_random: bool = False
) -> np.ndarray:
    """Predict the response for new rows with the final tree.

    Random intercepts apply only to clusters present in training; unknown
    clusters receive the fixed part alone, so ``include_random`` is a no-op
    for fully unseen data.
    """
    return predict_tree(fit.final_tree, rows, include_random=include_random)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

FIT_FORMAT = "freetree-fit-v1"


def options_to_dict(opts: FreetreeOptions) -> dict:
    return {
        "fuzzy": opts.fuzzy,
        "mob": {
            "alpha": opts.mob.alpha,
            "trim": opts.mob.trim,
            "n_perm": opts.mob.n_perm,
            "min_node_size": opts.mob.min_node_size,
            "max_depth": opts.mob.max_depth,
            "seed": opts.mob.seed,
            "em_tol": opts.mob.em_tol,
            "max_em_iter": opts.mob.max_em_iter,
        },
        "wgcna": {
            "beta_candidates": list(opts.wgcna.beta_candidates),
            "r2_target": opts.wgcna.r2_target,
            "cut_height": opts.wgcna.cut_height,
            "min_module_size": opts.wgcna.min_module_size,
        },
    }


def options_from_dict(data: dict) -> FreetreeOptions:
    wg = data.get("wgcna", {})
    return FreetreeOptions(
        fuzzy=bool(data.get("fuzzy", True)),
        mob=MobParams(**data.get("mob", {})),
        wgcna=WgcnaParams(
            beta_candidates=tuple(wg.get("beta_candidates", range(1, 21))),
            r2_target=wg.get("r2_target", 0.85),
            cut_height=wg.get("cut_height", 0.99),
            min_module_size=wg.get("min_module_size", 20),
        ),
    )


def fit_to_dict(fit: FreetreeFit) -> dict:
    """Complete JSON-ready dump; :func:`fit_from_dict` restores a fit that
    predicts and summarizes identically."""
    return {
        "format": FIT_FORMAT,
        "options": options_to_dict(fit.options),
        "roles": format_roles(fit.roles),
        "report": fit.report.to_dict(),
        "final_tree": tree_to_dict(fit.final_tree),
        "train_leaf_ids": (
            [int(i) for i in fit.train_leaf_ids] if fit.train_leaf_ids is not None else None
        ),
        "train_split_values": {
            k: [str(v) for v in vals] for k, vals in fit.train_split_values.items()
        },
        "timing": {k: float(v) for k, v in fit.timing.items()},
        "diagnostics": fit.diagnostics,
    }


def _report_from_dict(data: dict) -> SelectionReport:
    modules = None
    if data.get("modules"):
        md = data["modules"]
        features = tuple(md["features"])
        modules = ModuleAssignment(
            features=features,
            labels=dict(zip(features, (int(v) for v in md["labels"]))),
            module_count=int(md["module_count"]),
        )
    soft = None
    if data.get("soft_threshold"):
        st = data["soft_threshold"]
        soft = SoftThresholdResult(
            beta=int(st["beta"]),
            table=tuple(SoftThresholdFit(**row) for row in st["table"]),
            degenerate=bool(st["degenerate"]),
            used_fallback=bool(st["used_fallback"]),
        )
    return SelectionReport(
        modules=modules,
        soft_threshold=soft,
        screened={int(k): tuple(v) for k, v in data.get("screened", {}).items()},
        selected_non_grey={
            int(k): tuple(v) for k, v in data.get("selected_non_grey", {}).items()
        },
        final=tuple(data.get("final", ())),
        stage_trees=dict(data.get("stage_trees", {})),
    )


def fit_from_dict(data: dict) -> FreetreeFit:
    if data.get("format") != FIT_FORMAT:
        raise SchemaError(f"not a serialized fit (format tag {data.get('format')!r})")
    fit = FreetreeFit(
        report=_report_from_dict(data["report"]),
        final_tree=tree_from_dict(data["final_tree"]),
        options=options_from_dict(data["options"]),
        roles=parse_roles_text(data["roles"]),
        timing=dict(data.get("timing", {})),
        diagnostics=dict(data.get("diagnostics", {})),
    )
    if data.get("train_leaf_ids") is not None:
        fit.train_leaf_ids = np.array(data["train_leaf_ids"], dtype=np.intp)
    fit.train_split_values = {
        k: np.array([str(v) for v in vals], dtype=object)
        for k, vals in data.get("train_split_values", {}).items()
    }
    return fit


@dataclass
class LeafCoefficientTable:
    """Per-level weighted mean of leaf coefficients; empty when flagged."""

    frame: pd.DataFrame
    flag: str | None = None


def leaf_coefficient_summary(fit: FreetreeFit, group_by: str) -> LeafCoefficientTable:
    """Average the leaf models over the levels of one categorical splitter.

    Each level's row is the observation-weighted mean of the leaf
    coefficients, weighting each leaf by how many of its training rows
    carry that level (a leaf mixing levels contributes to all of them).
    """
    tree = fit.final_tree
    if tree.leaf_kind != "linear":
        return LeafCoefficientTable(pd.DataFrame(), flag="constant_leaves")
    if group_by not in fit.train_split_values:
        raise SchemaError(f"{group_by} is not a categorical split variable of this fit")
    if fit.train_leaf_ids is None:
        raise SchemaError("fit carries no training assignments")

    coef_names = ("(intercept)",) + tree.regressors
    coef = np.stack([leaf.model.coef for leaf in tree.leaves])
    values = fit.train_split_values[group_by]
    levels: list[str] = []
    for v in values:
        if v not in levels:
            levels.append(v)
    rows = {}
    for level in levels:
        mask = values == level
        counts = np.bincount(fit.train_leaf_ids[mask], minlength=tree.n_leaves).astype(float)
        weights = counts / counts.sum()
        rows[level] = weights @ coef
    frame = pd.DataFrame.from_dict(rows, orient="index", columns=list(coef_names))
    frame.index.name = group_by
    return LeafCoefficientTable(frame)
