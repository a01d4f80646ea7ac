"""Feature selection and prediction for high-dimensional longitudinal data.

The package clusters correlated features into correlation-network modules,
screens each module with a mixed-effects model tree, selects the survivors
with one more tree, and refits a final mixed-effects tree on the selected
features. See :mod:`freetree.pipeline` for the driver and the description
of the four screening strategies.
"""

from .bench import EvalReport, aggregate_rows, evaluate, render_svg, report, rmse, sweep
from .corr_net import (
    GREY_LABEL,
    ModuleAssignment,
    SoftThresholdResult,
    SymMatrix,
    adjacency,
    detect_modules,
    pick_soft_threshold,
    similarity_matrix,
    topological_overlap,
)
from .errors import (
    CONTRACT_ERRORS,
    NUMERIC_ERRORS,
    FreetreeError,
    InsufficientDataError,
    LeakageError,
    ParseError,
    RankError,
    RowError,
    SchemaError,
)
from .mixed_model import CollinearityWarning, LmmFit, fit_random_intercept, predict_lmm
from .model_tree import (
    MobParams,
    ModelTree,
    NodeModel,
    SplitRule,
    StabilityResult,
    TreeNode,
    assign_leaves,
    fit_lmm_tree,
    fit_node_model,
    fit_reem_tree,
    format_tree,
    grow_mob_tree,
    predict_tree,
    stability_test,
    tree_from_dict,
    tree_to_dict,
    used_split_features,
)
from .panel_data import (
    ColumnStats,
    FeatureRoles,
    PanelDataset,
    SubjectSplit,
    format_roles,
    load_csv,
    parse_roles_file,
    parse_roles_text,
    split_subjects,
    standardize,
    write_csv,
)
from .pipeline import (
    FreetreeFit,
    FreetreeOptions,
    LeafCoefficientTable,
    SelectionReport,
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
from .rand import derive_seed
from .simulate import SimConfig, f_true, gen_features, gen_panel

__version__ = "0.1.0"

__all__ = [
    "CONTRACT_ERRORS",
    "ColumnStats",
    "CollinearityWarning",
    "EvalReport",
    "FeatureRoles",
    "FreetreeError",
    "FreetreeFit",
    "FreetreeOptions",
    "GREY_LABEL",
    "InsufficientDataError",
    "LeafCoefficientTable",
    "LeakageError",
    "LmmFit",
    "MobParams",
    "ModelTree",
    "ModuleAssignment",
    "NUMERIC_ERRORS",
    "NodeModel",
    "PanelDataset",
    "ParseError",
    "RankError",
    "RowError",
    "SchemaError",
    "SelectionReport",
    "SimConfig",
    "SoftThresholdResult",
    "SplitRule",
    "StabilityResult",
    "SubjectSplit",
    "SymMatrix",
    "TreeNode",
    "WgcnaParams",
    "adjacency",
    "aggregate_rows",
    "assign_leaves",
    "derive_seed",
    "detect_modules",
    "evaluate",
    "f_true",
    "first_pc",
    "fit_from_dict",
    "fit_lmm_tree",
    "fit_node_model",
    "fit_random_intercept",
    "fit_reem_tree",
    "fit_to_dict",
    "format_roles",
    "format_tree",
    "gen_features",
    "gen_panel",
    "grow_mob_tree",
    "leaf_coefficient_summary",
    "load_csv",
    "options_from_dict",
    "options_to_dict",
    "parse_roles_file",
    "parse_roles_text",
    "pick_soft_threshold",
    "predict_freetree",
    "predict_lmm",
    "predict_tree",
    "render_svg",
    "report",
    "rmse",
    "run_freetree",
    "similarity_matrix",
    "split_subjects",
    "stability_test",
    "standardize",
    "sweep",
    "topological_overlap",
    "tree_from_dict",
    "tree_to_dict",
    "used_split_features",
    "write_csv",
]
