"""Model-based recursive partitioning with random-intercept alternation.

A node fits a plain OLS model (intercept plus the declared regressors, or
intercept only for constant leaves) and asks whether its per-observation
score columns ``x_ij * resid_i`` are unstable along any candidate splitter.
Instability is measured with the standardized cumulative-score process: sort
scores by the splitter, whiten them, and take

    sup over c in the trimmed range of ||cumsum_c||^2 / (n * t * (1 - t)),

with t = c/n, evaluated only where the sorted splitter actually changes
value (between tied values the ordering is arbitrary, so the process is not
identified there). Categorical splitters use the chi-square-type statistic
``(1/n) * sum_l ||level-sum_l||^2 / n_l`` instead. Significance comes from
random row permutations of the score matrix, not from asymptotic tail
formulas: p = (1 + #{perm stat >= observed}) / (n_perm + 1), with the
permutation stream seeded from (params.seed, node path, splitter name).

Family-wise control is Bonferroni over the declared splitters. Because the
permutation p-value cannot go below 1 / (n_perm + 1), the grower raises the
per-node permutation count so that the attainable floor stays strictly
below alpha after adjustment; otherwise no node with many splitters could
ever split. Permutations for a splitter are abandoned early once enough
exceedances have accumulated that the adjusted p-value can no longer beat
alpha (the decision and the chosen split are identical to the full run;
only the reported p-value of losing splitters is truncated).

``fit_lmm_tree`` alternates tree growth on the intercept-adjusted working
response with a joint random-intercept refit over the leaf-indicator-times-
regressor design, which is the standard mixed-effects model tree recipe; a
constant-leaf tree under the same alternation is the RE-EM variant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientDataError, SchemaError
from .mixed_model import LmmFit, fit_random_intercept
from .panel_data import PanelDataset
from .rand import derive_seed

try:  # pragma: no cover - exercised only when numba is installed
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

#: Hard ceiling on the adaptive per-node permutation count; nodes that
#: would need more than this to resolve alpha after Bonferroni give up on
#: splitting and say so in the tree diagnostics.
N_PERM_CAP = 20000

#: The adaptive count targets a p-value floor of alpha / _PERM_HEADROOM
#: after Bonferroni adjustment.
_PERM_HEADROOM = 1.5

_MAX_PERM_BATCH = 2048
_INTERCEPT = "(intercept)"


@dataclass(frozen=True)
class MobParams:
    """Knobs for tree growth and the mixed-effects alternation.

    ``min_node_size`` of None resolves to 10 * (#regressors + 2) for linear
    leaves and 20 for constant leaves.
    """

    alpha: float = 0.05
    trim: float = 0.1
    n_perm: int = 199
    min_node_size: int | None = None
    max_depth: int = 10
    seed: int = 0
    em_tol: float = 1.0e-4
    max_em_iter: int = 50

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if not 0 < self.trim < 0.5:
            raise ValueError("trim must lie in (0, 0.5)")
        if self.n_perm < 1:
            raise ValueError("n_perm must be positive")
        if self.max_depth < 0:
            raise ValueError("max_depth must be non-negative")
        if self.max_em_iter < 1:
            raise ValueError("max_em_iter must be positive")

    def resolved_min_node_size(self, leaf_kind: str, n_regressors: int) -> int:
        if self.min_node_size is not None:
            return int(self.min_node_size)
        return 10 * (n_regressors + 2) if leaf_kind == "linear" else 20


# ---------------------------------------------------------------------------
# node models
# ---------------------------------------------------------------------------


@dataclass
class NodeModel:
    """OLS fit inside one node: intercept-first coefficients and RSS."""

    coef: np.ndarray
    names: tuple[str, ...]
    rss: float
    n_rows: int


def fit_node_model(
    x_reg: np.ndarray, y: np.ndarray, leaf_kind: str
) -> tuple[NodeModel, np.ndarray]:
    """Fit the within-node model; returns the model and its score matrix.

    The score matrix has one column per coefficient (intercept first):
    regressor value times residual, which sums to ~0 columnwise at the OLS
    solution. Constant leaves regress on the intercept alone.
    """
    y = np.asarray(y, dtype=np.float64)
    if leaf_kind == "linear":
        x_reg = np.asarray(x_reg, dtype=np.float64)
        if x_reg.ndim != 2:
            raise ValueError("x_reg must be 2-D")
        if len(y) < x_reg.shape[1] + 2:
            raise InsufficientDataError(
                f"linear node needs at least {x_reg.shape[1] + 2} rows, got {len(y)}"
            )
        design = np.column_stack([np.ones(len(y)), x_reg])
        names = (_INTERCEPT,) + tuple(f"x{j}" for j in range(x_reg.shape[1]))
    elif leaf_kind == "constant":
        if len(y) < 1:
            raise InsufficientDataError("constant node needs at least 1 row")
        design = np.ones((len(y), 1))
        names = (_INTERCEPT,)
    else:
        raise ValueError(f"unknown leaf kind: {leaf_kind!r}")
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    model = NodeModel(coef=coef, names=names, rss=float(resid @ resid), n_rows=len(y))
    return model, design * resid[:, None]


# ---------------------------------------------------------------------------
# permutation kernels
#
# Both statistics reduce to: gather score rows in a permuted order, form
# per-position partial sums, and reduce. The numba kernels and the numpy
# fallbacks perform the identical float32 accumulation (sequential partial
# sums, squares upcast to float64), so p-values do not depend on which path
# runs.
#
# Permutation indices come from a splitmix64-driven Fisher-Yates fill keyed
# by (seed, permutation number), so permutation k is the same array no
# matter how the batches are sliced: early-stopped runs see a prefix of the
# full run, and the jit and numpy fills agree bit for bit.
# ---------------------------------------------------------------------------

_PERM_GOLD = np.uint64(0x9E3779B97F4A7C15)
_PERM_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_PERM_MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)

if HAVE_NUMBA:

    @njit(cache=True)
    def _fill_perms_jit(seed, start, idx):  # pragma: no cover - compiled
        nb, n = idx.shape
        for b in range(nb):
            state = seed ^ ((start + np.uint64(b) + np.uint64(1)) * _PERM_GOLD)
            state = (state ^ (state >> _S30)) * _PERM_MIX1
            state = (state ^ (state >> _S27)) * _PERM_MIX2
            state = state ^ (state >> _S31)
            for i in range(n):
                idx[b, i] = i
            for i in range(n - 1, 0, -1):
                state = state + _PERM_GOLD
                z = (state ^ (state >> _S30)) * _PERM_MIX1
                z = (z ^ (z >> _S27)) * _PERM_MIX2
                z = z ^ (z >> _S31)
                j = z % np.uint64(i + 1)
                t = idx[b, i]
                idx[b, i] = idx[b, j]
                idx[b, j] = t

    @njit(cache=True)
    def _suplm_stats_jit(scores, idx, w, out):  # pragma: no cover - compiled
        nb, n = idx.shape
        k = scores.shape[1]
        acc = np.zeros(k, dtype=np.float32)
        for b in range(nb):
            for j in range(k):
                acc[j] = np.float32(0.0)
            best = 0.0
            for i in range(n):
                row = idx[b, i]
                for j in range(k):
                    acc[j] += scores[row, j]
                s = 0.0
                for j in range(k):
                    v = np.float64(acc[j])
                    s += v * v
                stat = s * w[i]
                if stat > best:
                    best = stat
            out[b] = best

    @njit(cache=True)
    def _cat_stats_jit(scores, idx, bounds, inv_sizes, inv_n, out):  # pragma: no cover
        # Segment sums are differences of the running float32 cumulative
        # sum, exactly like the vectorized fallback, so both paths round
        # identically.
        nb = idx.shape[0]
        nlev = len(bounds) - 1
        k = scores.shape[1]
        acc = np.zeros(k, dtype=np.float32)
        start = np.zeros(k, dtype=np.float32)
        for b in range(nb):
            for j in range(k):
                acc[j] = np.float32(0.0)
            tot = 0.0
            for l in range(nlev):
                for j in range(k):
                    start[j] = acc[j]
                for i in range(bounds[l], bounds[l + 1]):
                    row = idx[b, i]
                    for j in range(k):
                        acc[j] += scores[row, j]
                s = 0.0
                for j in range(k):
                    v = np.float64(acc[j] - start[j])
                    s += v * v
                tot += s * inv_sizes[l]
            out[b] = tot * inv_n


def _suplm_stats_np(scores, idx, w, out):
    gathered = scores[idx]  # (B, n, k) float32
    cum = np.cumsum(gathered, axis=1)
    s = np.zeros(idx.shape, dtype=np.float64)
    for j in range(scores.shape[1]):
        cj = cum[:, :, j].astype(np.float64)
        s += cj * cj
    np.max(s * w[None, :], axis=1, out=out)


def _cat_stats_np(scores, idx, bounds, inv_sizes, inv_n, out):
    gathered = scores[idx]
    cum = np.cumsum(gathered, axis=1)  # float32, sequential
    ends = cum[:, bounds[1:] - 1, :]
    starts = np.concatenate(
        [np.zeros((idx.shape[0], 1, scores.shape[1]), dtype=np.float32), ends[:, :-1, :]],
        axis=1,
    )
    seg = ends - starts  # (B, L, k) float32
    tot = np.zeros((idx.shape[0],), dtype=np.float64)
    for l in range(len(bounds) - 1):
        s = np.zeros_like(tot)
        for j in range(scores.shape[1]):
            v = seg[:, l, j].astype(np.float64)
            s += v * v
        tot += s * inv_sizes[l]
    np.multiply(tot, inv_n, out=out)


def _fill_perms_np(seed, start, idx):
    # Row-vectorized twin of the jit fill: same uint64 arithmetic, same
    # draw order (positions n-1 down to 1), so outputs match elementwise.
    nb, n = idx.shape
    b = np.arange(nb, dtype=np.uint64)
    state = seed ^ ((start + b + np.uint64(1)) * _PERM_GOLD)
    state = (state ^ (state >> _S30)) * _PERM_MIX1
    state = (state ^ (state >> _S27)) * _PERM_MIX2
    state = state ^ (state >> _S31)
    idx[:] = np.arange(n, dtype=idx.dtype)[None, :]
    rows = np.arange(nb)
    for i in range(n - 1, 0, -1):
        state = state + _PERM_GOLD
        z = (state ^ (state >> _S30)) * _PERM_MIX1
        z = (z ^ (z >> _S27)) * _PERM_MIX2
        z = z ^ (z >> _S31)
        j = (z % np.uint64(i + 1)).astype(np.int64)
        left = idx[rows, j]
        right = idx[:, i].copy()
        idx[rows, j] = right
        idx[:, i] = left


def _fill_perms(seed, start, idx):
    seed64 = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    if HAVE_NUMBA:
        _fill_perms_jit(seed64, np.uint64(start), idx)
    else:
        _fill_perms_np(seed64, np.uint64(start), idx)


def _run_kernel(kind, scores32, idx, aux, out):
    if kind == "numeric":
        if HAVE_NUMBA:
            _suplm_stats_jit(scores32, idx, aux[0], out)
        else:
            _suplm_stats_np(scores32, idx, aux[0], out)
    else:
        bounds, inv_sizes, inv_n = aux
        if HAVE_NUMBA:
            _cat_stats_jit(scores32, idx, bounds, inv_sizes, inv_n, out)
        else:
            _cat_stats_np(scores32, idx, bounds, inv_sizes, inv_n, out)


def _perm_batches(n_perm: int) -> list[int]:
    """Deterministic doubling batch schedule (64, 128, ... capped)."""
    sizes = []
    size = 64
    remaining = n_perm
    while remaining > 0:
        b = min(size, remaining, _MAX_PERM_BATCH)
        sizes.append(b)
        remaining -= b
        size *= 2
    return sizes


# ---------------------------------------------------------------------------
# stability test
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StabilityResult:
    variable: str
    statistic: float
    p_value: float
    n_perm_used: int
    degenerate: bool = False


def _whiten_scores(scores: np.ndarray) -> np.ndarray | None:
    """Project scores onto the non-degenerate directions and scale to
    unit second moment; None when the score matrix is identically zero."""
    n = scores.shape[0]
    j = scores.T @ scores / n
    vals, vecs = np.linalg.eigh(j)
    top = float(vals[-1]) if vals.size else 0.0
    if top <= 0.0:
        return None
    keep = vals > top * 1.0e-12
    return scores @ (vecs[:, keep] / np.sqrt(vals[keep]))


def stability_test(
    scores: np.ndarray,
    split_values: np.ndarray,
    kind: str,
    params: MobParams,
    seed: int,
    variable: str = "",
    n_perm: int | None = None,
    _stop_count: int | None = None,
) -> StabilityResult:
    """Permutation test for parameter instability along one splitter.

    ``seed`` fixes the permutation stream; p-values are reproducible
    bit-for-bit given the same seed and inputs. A constant splitter (or an
    identically zero score matrix) is degenerate and reports p = 1.
    ``_stop_count`` enables the early-abandon path used during tree growth:
    once the exceedance count passes it, remaining permutations cannot
    change the split decision and are skipped.
    """
    if kind not in ("numeric", "categorical"):
        raise ValueError(f"unknown splitter kind: {kind!r}")
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    total = int(n_perm if n_perm is not None else params.n_perm)
    if len(split_values) != n:
        raise ValueError("split_values must match the score rows")

    white = _whiten_scores(scores)
    if white is None:
        return StabilityResult(variable, 0.0, 1.0, 0, degenerate=True)

    if kind == "numeric":
        values = np.asarray(split_values, dtype=np.float64)
        order = np.argsort(values, kind="stable")
        sv = values[order]
        boundaries = np.flatnonzero(sv[1:] != sv[:-1]) + 1  # left block sizes
        lo = int(math.ceil(params.trim * n))
        hi = int(math.floor((1.0 - params.trim) * n))
        valid = boundaries[(boundaries >= max(lo, 1)) & (boundaries <= min(hi, n - 1))]
        if valid.size == 0:
            return StabilityResult(variable, 0.0, 1.0, 0, degenerate=True)
        w = np.zeros(n, dtype=np.float64)
        t = valid / n
        w[valid - 1] = 1.0 / (n * t * (1.0 - t))
        aux = (w,)
    else:
        levels, codes = np.unique(np.asarray(split_values, dtype=object), return_inverse=True)
        if len(levels) < 2:
            return StabilityResult(variable, 0.0, 1.0, 0, degenerate=True)
        order = np.argsort(codes, kind="stable")
        sizes = np.bincount(codes)
        bounds = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        aux = (bounds, (1.0 / sizes).astype(np.float64), 1.0 / n)

    sorted32 = np.ascontiguousarray(white[order], dtype=np.float32)
    obs_buf = np.empty(1, dtype=np.float64)
    identity = np.arange(n, dtype=np.int64)[None, :]
    _run_kernel(kind, sorted32, identity, aux, obs_buf)
    observed = float(obs_buf[0])

    count = 0
    done = 0
    for bsize in _perm_batches(total):
        idx = np.empty((bsize, n), dtype=np.int64)
        _fill_perms(seed, done, idx)
        out = np.empty(bsize, dtype=np.float64)
        _run_kernel(kind, sorted32, idx, aux, out)
        count += int(np.count_nonzero(out >= observed))
        done += bsize
        if _stop_count is not None and count > _stop_count:
            break
    p = (1 + count) / (done + 1)
    return StabilityResult(variable, observed, float(p), done)


# ---------------------------------------------------------------------------
# tree structures
# ---------------------------------------------------------------------------


@dataclass
class SplitRule:
    variable: str
    kind: str
    threshold: float | None = None
    left_levels: tuple[str, ...] | None = None
    right_levels: tuple[str, ...] | None = None
    majority_left: bool = True
    p_adjusted: float = float("nan")

    def describe(self) -> str:
        if self.kind == "numeric":
            return f"{self.variable} <= {self.threshold:.6g}"
        return f"{self.variable} in {{{', '.join(self.left_levels)}}}"


@dataclass
class TreeNode:
    path: str
    depth: int
    n_rows: int
    model: NodeModel | None = None
    split: SplitRule | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    leaf_id: int | None = None

    @property
    def is_leaf(self) -> bool:
        return self.split is None


@dataclass
class ModelTree:
    """A grown tree, optionally carrying a joint mixed-model refit."""

    root: TreeNode
    regressors: tuple[str, ...]
    splitters: tuple[str, ...]
    leaf_kind: str
    params: MobParams
    leaves: list[TreeNode] = field(default_factory=list)
    sigma2_e: float | None = None
    sigma2_b: float | None = None
    loglik: float | None = None
    blups: dict = field(default_factory=dict)
    em_iterations: int = 0
    loglik_path: list[float] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)

    @property
    def depth(self) -> int:
        return max((leaf.depth for leaf in self.leaves), default=0)


def _collect_leaves(root: TreeNode) -> list[TreeNode]:
    leaves: list[TreeNode] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node.is_leaf:
            leaves.append(node)
        else:
            stack.extend([node.right, node.left])
    for i, leaf in enumerate(leaves):
        leaf.leaf_id = i
    return leaves


# ---------------------------------------------------------------------------
# split-point search
# ---------------------------------------------------------------------------


def _batched_child_fit(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """beta' b for a batch of normal-equation systems, with a tiny ridge to
    shrug off exactly singular child designs during the scan (the chosen
    children are refit exactly afterwards)."""
    k = a.shape[-1]
    scale = np.trace(a[-1]) / max(k, 1)
    ridge = (1.0e-10 * max(scale, 1.0)) * np.eye(k)
    try:
        beta = np.linalg.solve(a + ridge, b[..., None])[..., 0]
    except np.linalg.LinAlgError:
        beta = np.stack([np.linalg.lstsq(ai, bi, rcond=None)[0] for ai, bi in zip(a, b)])
    return np.einsum("ck,ck->c", beta, b)


def _scan_numeric_split(design, y, values, min_left, min_right):
    order = np.argsort(values, kind="stable")
    xs = design[order]
    ys = y[order]
    vs = values[order]
    n = len(ys)
    cand = np.flatnonzero(vs[1:] != vs[:-1]) + 1
    cand = cand[(cand >= min_left) & (n - cand >= min_right)]
    if cand.size == 0:
        return None
    cum_xx = np.cumsum(np.einsum("ni,nj->nij", xs, xs), axis=0)
    cum_xy = np.cumsum(xs * ys[:, None], axis=0)
    cum_yy = np.cumsum(ys * ys)
    a_l = cum_xx[cand - 1]
    b_l = cum_xy[cand - 1]
    yy_l = cum_yy[cand - 1]
    a_r = cum_xx[-1] - a_l
    b_r = cum_xy[-1] - b_l
    yy_r = cum_yy[-1] - yy_l
    sse = (yy_l - _batched_child_fit(a_l, b_l)) + (yy_r - _batched_child_fit(a_r, b_r))
    best = int(np.argmin(sse))
    c = int(cand[best])
    threshold = 0.5 * (vs[c - 1] + vs[c])
    return threshold, float(sse[best])


def _scan_categorical_split(design, y, values, levels, min_left, min_right):
    """Best binary level partition; exhaustive up to 10 present levels,
    otherwise levels are ordered by mean response and scanned linearly."""
    k = design.shape[1]
    present = [lev for lev in levels if np.any(values == lev)]
    if len(present) < 2:
        return None
    agg = {}
    for lev in present:
        mask = values == lev
        xs = design[mask]
        ys = y[mask]
        agg[lev] = (xs.T @ xs, xs.T @ ys, float(ys @ ys), int(mask.sum()))
    if len(present) <= 10:
        rest = present[1:]
        subsets = [
            [present[0]] + [lev for bit, lev in enumerate(rest) if mask_bits >> bit & 1]
            for mask_bits in range(2 ** len(rest))
        ]
        subsets = [s for s in subsets if len(s) < len(present)]
    else:
        means = {lev: agg[lev][1][0] / agg[lev][3] for lev in present}  # intercept col
        ordered = sorted(present, key=lambda lev: (means[lev], levels.index(lev)))
        subsets = [ordered[: i + 1] for i in range(len(ordered) - 1)]

    total_a = sum(agg[lev][0] for lev in present)
    total_b = sum(agg[lev][1] for lev in present)
    total_yy = sum(agg[lev][2] for lev in present)
    total_n = sum(agg[lev][3] for lev in present)
    best = None
    for subset in subsets:
        a_l = sum(agg[lev][0] for lev in subset)
        b_l = sum(agg[lev][1] for lev in subset)
        yy_l = sum(agg[lev][2] for lev in subset)
        n_l = sum(agg[lev][3] for lev in subset)
        n_r = total_n - n_l
        if n_l < min_left or n_r < min_right:
            continue
        sse = float(
            (yy_l - _batched_child_fit(a_l[None], b_l[None])[0])
            + (
                (total_yy - yy_l)
                - _batched_child_fit((total_a - a_l)[None], (total_b - b_l)[None])[0]
            )
        )
        if best is None or sse < best[0]:
            left = tuple(lev for lev in levels if lev in subset)
            best = (sse, left, n_l >= n_r)
    if best is None:
        return None
    right = tuple(lev for lev in levels if lev in set(present) - set(best[1]))
    return best[1], right, best[2], best[0]


# ---------------------------------------------------------------------------
# growth
# ---------------------------------------------------------------------------


def _effective_n_perm(base: int, n_splitters: int, alpha: float) -> tuple[int, bool]:
    """Raise the permutation count so the Bonferroni-adjusted p-value floor
    sits below alpha (with headroom); flag when the cap binds."""
    needed = int(math.ceil(_PERM_HEADROOM * n_splitters / alpha)) - 1
    eff = max(base, needed)
    capped = eff > N_PERM_CAP
    return (N_PERM_CAP if capped else eff), capped


def _max_exceed_count(alpha: float, n_perm: int, n_splitters: int) -> int:
    """Largest permutation exceedance count that still allows a split."""
    c = 0
    cap = -1
    while (1 + c) * n_splitters / (n_perm + 1) < alpha:
        cap = c
        c += 1
    return cap


class _SplitterColumn:
    __slots__ = ("name", "kind", "values", "levels")

    def __init__(self, name, kind, values, levels=None):
        self.name = name
        self.kind = kind
        self.values = values
        self.levels = levels


def _splitter_columns(ds: PanelDataset, splitters) -> list[_SplitterColumn]:
    cols = []
    for name in splitters:
        raw = ds.column(name)
        if ds.is_categorical(name):
            cols.append(
                _SplitterColumn(
                    name, "categorical", raw.astype(object), list(ds.categorical_levels[name])
                )
            )
        else:
            if not np.issubdtype(raw.dtype, np.floating):
                raise SchemaError(f"splitter {name} is neither numeric nor categorical")
            cols.append(_SplitterColumn(name, "numeric", raw.astype(np.float64)))
    return cols


def grow_mob_tree(
    ds: PanelDataset,
    regressors: tuple[str, ...],
    splitters: tuple[str, ...],
    leaf_kind: str,
    params: MobParams,
    response: np.ndarray | None = None,
) -> ModelTree:
    """Grow a model-based tree on a (possibly working) response.

    Splitter declaration order matters twice: Bonferroni argmin ties break
    toward earlier splitters, and permutation seeds are keyed by splitter
    name and node path (so row order never changes the result).
    """
    regressors = tuple(regressors)
    splitters = tuple(splitters)
    if leaf_kind not in ("linear", "constant"):
        raise ValueError(f"unknown leaf kind: {leaf_kind!r}")
    y = ds.column(ds.roles.response_col) if response is None else np.asarray(response, float)
    if len(y) != ds.n_rows:
        raise ValueError("response length must match the dataset")
    reg_mat = ds.matrix(regressors) if leaf_kind == "linear" else np.empty((ds.n_rows, 0))
    design = np.column_stack([np.ones(ds.n_rows), reg_mat])
    split_cols = _splitter_columns(ds, splitters)

    r = reg_mat.shape[1] if leaf_kind == "linear" else 0
    min_node = params.resolved_min_node_size(leaf_kind, r)
    min_child = max(min_node, r + 2 if leaf_kind == "linear" else 1)
    diagnostics = {"n_perm_capped": False, "nodes_tested": 0}

    coef_names = (_INTERCEPT,) + (regressors if leaf_kind == "linear" else ())

    def build(rows: np.ndarray, path: str, depth: int) -> TreeNode:
        node = TreeNode(path=path, depth=depth, n_rows=len(rows))
        x_node = reg_mat[rows]
        y_node = y[rows]
        model, scores = fit_node_model(x_node, y_node, leaf_kind)
        model.names = coef_names
        node.model = model
        if depth >= params.max_depth or len(rows) < 2 * min_child or not splitters:
            return node

        n_perm_eff, capped = _effective_n_perm(params.n_perm, len(splitters), params.alpha)
        diagnostics["n_perm_capped"] |= capped
        stop = _max_exceed_count(params.alpha, n_perm_eff, len(splitters))
        if stop < 0:
            # Even a zero-exceedance p-value cannot beat alpha here.
            return node
        diagnostics["nodes_tested"] += 1

        best = None  # (p_adjusted, declaration index, result, column)
        for pos, col in enumerate(split_cols):
            res = stability_test(
                scores,
                col.values[rows],
                col.kind,
                params,
                seed=derive_seed(params.seed, path, col.name),
                variable=col.name,
                n_perm=n_perm_eff,
                _stop_count=stop,
            )
            p_adj = min(1.0, res.p_value * len(splitters))
            if best is None or (p_adj, pos) < (best[0], best[1]):
                best = (p_adj, pos, res, col)
        p_adj, _, res, col = best
        if p_adj >= params.alpha:
            return node

        node_design = design[rows]
        if col.kind == "numeric":
            found = _scan_numeric_split(node_design, y_node, col.values[rows], min_child, min_child)
            if found is None:
                return node
            threshold, _ = found
            rule = SplitRule(col.name, "numeric", threshold=threshold, p_adjusted=p_adj)
            go_left = col.values[rows] <= threshold
        else:
            found = _scan_categorical_split(
                node_design, y_node, col.values[rows], col.levels, min_child, min_child
            )
            if found is None:
                return node
            left_levels, right_levels, majority_left, _ = found
            rule = SplitRule(
                col.name,
                "categorical",
                left_levels=left_levels,
                right_levels=right_levels,
                majority_left=majority_left,
                p_adjusted=p_adj,
            )
            member = set(left_levels)
            go_left = np.fromiter(
                (v in member for v in col.values[rows]), dtype=bool, count=len(rows)
            )
        node.split = rule
        node.left = build(rows[go_left], path + "0", depth + 1)
        node.right = build(rows[~go_left], path + "1", depth + 1)
        return node

    root = build(np.arange(ds.n_rows), "r", 0)
    tree = ModelTree(
        root=root,
        regressors=regressors,
        splitters=splitters,
        leaf_kind=leaf_kind,
        params=params,
        diagnostics=diagnostics,
    )
    tree.leaves = _collect_leaves(root)
    return tree


# ---------------------------------------------------------------------------
# routing and prediction
# ---------------------------------------------------------------------------


def assign_leaves(tree: ModelTree, ds: PanelDataset, diagnostics: dict | None = None) -> np.ndarray:
    """Leaf id per row of ``ds``; unseen categorical levels follow the
    training-majority side and are counted in ``diagnostics``."""
    out = np.empty(ds.n_rows, dtype=np.intp)
    col_cache: dict[str, np.ndarray] = {}

    def col(name: str) -> np.ndarray:
        if name not in col_cache:
            col_cache[name] = ds.column(name)
        return col_cache[name]

    def walk(node: TreeNode, rows: np.ndarray):
        if node.is_leaf:
            out[rows] = node.leaf_id
            return
        rule = node.split
        values = col(rule.variable)[rows]
        if rule.kind == "numeric":
            go_left = values.astype(np.float64) <= rule.threshold
        else:
            member = set(rule.left_levels)
            known = member | set(rule.right_levels or ())
            go_left = np.empty(len(rows), dtype=bool)
            unseen = 0
            for i, v in enumerate(values):
                sv = str(v)
                if sv in member:
                    go_left[i] = True
                elif sv in known:
                    go_left[i] = False
                else:
                    go_left[i] = rule.majority_left
                    unseen += 1
            if unseen and diagnostics is not None:
                diagnostics["unseen_level_rows"] = diagnostics.get("unseen_level_rows", 0) + unseen
        walk(node.left, rows[go_left])
        walk(node.right, rows[~go_left])

    walk(tree.root, np.arange(ds.n_rows))
    return out


def predict_tree(
    tree: ModelTree,
    ds: PanelDataset,
    include_random: bool = False,
    diagnostics: dict | None = None,
) -> np.ndarray:
    """Predict the response for every row; random intercepts only apply to
    clusters seen in training (others get the fixed part alone)."""
    leaf_ids = assign_leaves(tree, ds, diagnostics)
    reg = ds.matrix(tree.regressors) if tree.leaf_kind == "linear" else np.empty((ds.n_rows, 0))
    design = np.column_stack([np.ones(ds.n_rows), reg])
    coef = np.stack([leaf.model.coef for leaf in tree.leaves])
    out = np.einsum("nk,nk->n", design, coef[leaf_ids])
    if include_random and tree.blups:
        ids = ds.column(ds.roles.cluster_col)
        out = out + np.array([tree.blups.get(c, 0.0) for c in ids])
    return out


def used_split_features(tree: ModelTree, exclude=()) -> tuple[str, ...]:
    """Distinct split variables in first-use (pre-order) order."""
    exclude = set(exclude)
    seen: dict[str, None] = {}

    def walk(node: TreeNode):
        if node.is_leaf:
            return
        if node.split.variable not in exclude:
            seen.setdefault(node.split.variable)
        walk(node.left)
        walk(node.right)

    walk(tree.root)
    return tuple(seen)


# ---------------------------------------------------------------------------
# mixed-effects alternation
# ---------------------------------------------------------------------------


def _leaf_design(tree: ModelTree, ds: PanelDataset, leaf_ids: np.ndarray):
    """Leaf-indicator x (intercept, regressors) block design for the joint
    refit, plus its column names, ordered by leaf id then coefficient."""
    reg = ds.matrix(tree.regressors) if tree.leaf_kind == "linear" else np.empty((ds.n_rows, 0))
    base = np.column_stack([np.ones(ds.n_rows), reg])
    k = base.shape[1]
    design = np.zeros((ds.n_rows, tree.n_leaves * k))
    for j in range(tree.n_leaves):
        mask = leaf_ids == j
        design[mask, j * k : (j + 1) * k] = base[mask]
    names = tuple(
        f"leaf{j}:{name}"
        for j in range(tree.n_leaves)
        for name in ((_INTERCEPT,) + tree.regressors if tree.leaf_kind == "linear" else (_INTERCEPT,))
    )
    return design, names


def _install_joint_coefficients(tree: ModelTree, fit: LmmFit):
    k = 1 + (len(tree.regressors) if tree.leaf_kind == "linear" else 0)
    for j, leaf in enumerate(tree.leaves):
        leaf.model.coef = fit.beta[j * k : (j + 1) * k].copy()


def fit_lmm_tree(
    ds: PanelDataset,
    regressors: tuple[str, ...],
    splitters: tuple[str, ...],
    leaf_kind: str,
    params: MobParams,
    response: np.ndarray | None = None,
) -> ModelTree:
    """Mixed-effects model tree: alternate tree growth on the intercept-
    adjusted working response with a joint random-intercept refit.

    With ``leaf_kind="constant"`` this is the RE-EM tree. Stops when the
    joint log-likelihood moves less than ``params.em_tol`` or after
    ``params.max_em_iter`` alternations; leaf coefficients always come from
    the final joint fit, so training predictions with the random part match
    that fit's residuals exactly.
    """
    y = ds.column(ds.roles.response_col) if response is None else np.asarray(response, float)
    clusters = ds.column(ds.roles.cluster_col)
    b_row = np.zeros(ds.n_rows)
    tree = None
    last_ll = None
    ll_path: list[float] = []
    iterations = 0
    for iterations in range(1, params.max_em_iter + 1):
        tree = grow_mob_tree(ds, regressors, splitters, leaf_kind, params, response=y - b_row)
        leaf_ids = assign_leaves(tree, ds)
        design, names = _leaf_design(tree, ds, leaf_ids)
        fit = fit_random_intercept(design, y, clusters, names, on_rank_deficient="drop")
        _install_joint_coefficients(tree, fit)
        tree.sigma2_e = fit.sigma2_e
        tree.sigma2_b = fit.sigma2_b
        tree.loglik = fit.loglik
        tree.blups = dict(fit.blups)
        if fit.dropped_columns:
            tree.diagnostics["dropped_columns"] = list(fit.dropped_columns)
        b_row = np.array([fit.blups[c] for c in clusters])
        ll_path.append(fit.loglik)
        if last_ll is not None and abs(fit.loglik - last_ll) < params.em_tol:
            break
        last_ll = fit.loglik
    tree.em_iterations = iterations
    tree.loglik_path = ll_path
    return tree


def fit_reem_tree(
    ds: PanelDataset,
    splitters: tuple[str, ...],
    params: MobParams,
    response: np.ndarray | None = None,
) -> ModelTree:
    """Constant-leaf mixed-effects tree (no within-leaf regressors)."""
    return fit_lmm_tree(ds, (), splitters, "constant", params, response=response)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def format_tree(tree: ModelTree) -> str:
    """Stable indented text rendering (one node per line)."""
    lines = [
        f"model tree: leaf_kind={tree.leaf_kind}"
        f" regressors=[{', '.join(tree.regressors)}]"
        f" leaves={tree.n_leaves}"
    ]
    if tree.loglik is not None:
        lines[0] += (
            f" loglik={tree.loglik:.6g} sigma2_e={tree.sigma2_e:.6g}"
            f" sigma2_b={tree.sigma2_b:.6g}"
        )

    def walk(node: TreeNode, indent: int):
        pad = "  " * indent
        if node.is_leaf:
            terms = [f"{c:.6g}" for c in node.model.coef]
            rhs = " + ".join(
                t if nm == _INTERCEPT else f"{t}*{nm}"
                for t, nm in zip(terms, _coef_names(tree))
            )
            lines.append(f"{pad}{node.path}: leaf[{node.leaf_id}] n={node.n_rows} y^ = {rhs}")
            return
        lines.append(
            f"{pad}{node.path}: split {node.split.describe()}"
            f" (adj p={node.split.p_adjusted:.3g}, n={node.n_rows})"
        )
        walk(node.left, indent + 1)
        walk(node.right, indent + 1)

    walk(tree.root, 1)
    return "\n".join(lines)


def _coef_names(tree: ModelTree) -> tuple[str, ...]:
    if tree.leaf_kind == "linear":
        return (_INTERCEPT,) + tree.regressors
    return (_INTERCEPT,)


def tree_to_dict(tree: ModelTree) -> dict:
    """JSON-ready structural dump, complete enough to reload and predict."""

    def node_dict(node: TreeNode) -> dict:
        if node.is_leaf:
            return {
                "path": node.path,
                "n_rows": node.n_rows,
                "leaf_id": node.leaf_id,
                "coef": {n: float(c) for n, c in zip(_coef_names(tree), node.model.coef)},
                "rss": node.model.rss,
            }
        s = node.split
        return {
            "path": node.path,
            "n_rows": node.n_rows,
            "split": {
                "variable": s.variable,
                "kind": s.kind,
                "threshold": s.threshold,
                "left_levels": list(s.left_levels) if s.left_levels else None,
                "right_levels": list(s.right_levels) if s.right_levels else None,
                "majority_left": s.majority_left,
                "p_adjusted": s.p_adjusted,
            },
            "left": node_dict(node.left),
            "right": node_dict(node.right),
        }

    return {
        "leaf_kind": tree.leaf_kind,
        "regressors": list(tree.regressors),
        "splitters": list(tree.splitters),
        "params": {
            "alpha": tree.params.alpha,
            "trim": tree.params.trim,
            "n_perm": tree.params.n_perm,
            "min_node_size": tree.params.min_node_size,
            "max_depth": tree.params.max_depth,
            "seed": tree.params.seed,
            "em_tol": tree.params.em_tol,
            "max_em_iter": tree.params.max_em_iter,
        },
        "sigma2_e": tree.sigma2_e,
        "sigma2_b": tree.sigma2_b,
        "loglik": tree.loglik,
        "em_iterations": tree.em_iterations,
        "blups": {str(k): float(v) for k, v in tree.blups.items()},
        "diagnostics": dict(tree.diagnostics),
        "root": node_dict(tree.root),
    }


def tree_from_dict(data: dict) -> ModelTree:
    """Rebuild a predict-capable tree from :func:`tree_to_dict` output."""
    params = MobParams(**data["params"])
    leaf_kind = data["leaf_kind"]
    regressors = tuple(data["regressors"])
    coef_names = (_INTERCEPT,) + (regressors if leaf_kind == "linear" else ())

    def build(nd: dict, depth: int) -> TreeNode:
        if "split" not in nd:
            coef = np.array([nd["coef"][n] for n in coef_names])
            model = NodeModel(
                coef=coef, names=coef_names, rss=float(nd.get("rss", 0.0)), n_rows=nd["n_rows"]
            )
            return TreeNode(
                path=nd["path"], depth=depth, n_rows=nd["n_rows"], model=model,
                leaf_id=nd["leaf_id"],
            )
        s = nd["split"]
        rule = SplitRule(
            variable=s["variable"],
            kind=s["kind"],
            threshold=s["threshold"],
            left_levels=tuple(s["left_levels"]) if s["left_levels"] else None,
            right_levels=tuple(s["right_levels"]) if s.get("right_levels") else None,
            majority_left=s["majority_left"],
            p_adjusted=s["p_adjusted"],
        )
        node = TreeNode(path=nd["path"], depth=depth, n_rows=nd["n_rows"], split=rule)
        node.left = build(nd["left"], depth + 1)
        node.right = build(nd["right"], depth + 1)
        return node

    tree = ModelTree(
        root=build(data["root"], 0),
        regressors=regressors,
        splitters=tuple(data["splitters"]),
        leaf_kind=leaf_kind,
        params=params,
        sigma2_e=data.get("sigma2_e"),
        sigma2_b=data.get("sigma2_b"),
        loglik=data.get("loglik"),
        blups=dict(data.get("blups", {})),
        em_iterations=int(data.get("em_iterations", 0)),
        diagnostics=dict(data.get("diagnostics", {})),
    )
    tree.leaves = _collect_leaves(tree.root)
    # _collect_leaves renumbers; restore the stored ids' order (they match
    # pre-order, so this is a no-op unless the dump was edited).
    return tree
