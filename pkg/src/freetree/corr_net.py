"""Weighted correlation network construction and module detection.

The screening front-end groups correlated features before any supervised
step. The chain is the classic weighted-network recipe:

1. similarity: absolute Pearson correlation between feature columns
   (unsigned network, so strongly anti-correlated features also cluster);
2. soft threshold: raise similarities elementwise to a power ``beta`` chosen
   by the scale-free fit criterion;
3. topological overlap: for adjacency ``a`` with connectivities
   ``c_u = sum_{r != u} a_ur`` and shared-neighbor mass
   ``q_uv = sum_{r != u,v} a_ur * a_rv``,

       w_uv = (q_uv + a_uv) / (min(c_u, c_v) + 1 - a_uv),   w_uu = 1;

4. modules: average-linkage clustering of the dissimilarity ``1 - w`` with a
   static cut; undersized clusters dissolve into the grey pool (label 0).

Everything is deterministic: merge ties break toward the smallest member
index and module labels are ranked by decreasing size (then smallest member).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientDataError, SchemaError
from .panel_data import PanelDataset

FALLBACK_BETA = 6
GREY_LABEL = 0


@dataclass
class SymMatrix:
    """Square symmetric matrix over a named feature set."""

    names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        self.names = tuple(self.names)
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1] or v.shape[0] != len(self.names):
            raise SchemaError("matrix shape does not match feature names")
        self.values = v

    @property
    def size(self) -> int:
        return len(self.names)


def similarity_matrix(ds: PanelDataset, features: tuple[str, ...] | None = None) -> SymMatrix:
    """Absolute Pearson correlation between the given feature columns.

    Constant columns get similarity 0 to everything (their correlation is
    undefined); the diagonal is exactly 1. Requires at least two rows.
    """
    names = tuple(features) if features is not None else ds.roles.var_select
    if ds.n_rows < 2:
        raise InsufficientDataError("similarity needs at least 2 rows")
    x = ds.matrix(names)
    xc = x - x.mean(axis=0)
    norms = np.sqrt(np.einsum("ij,ij->j", xc, xc))
    nonconst = norms > 0
    xn = np.zeros_like(xc)
    xn[:, nonconst] = xc[:, nonconst] / norms[nonconst]
    s = np.abs(np.clip(xn.T @ xn, -1.0, 1.0))
    s[~nonconst, :] = 0.0
    s[:, ~nonconst] = 0.0
    np.fill_diagonal(s, 1.0)
    return SymMatrix(names=names, values=s)


@dataclass(frozen=True)
class SoftThresholdFit:
    """One row of the soft-threshold scan table."""

    beta: int
    signed_r2: float
    mean_connectivity: float
    max_connectivity: float


@dataclass(frozen=True)
class SoftThresholdResult:
    beta: int
    table: tuple[SoftThresholdFit, ...]
    degenerate: bool = False
    used_fallback: bool = False


def _scale_free_r2(connectivity: np.ndarray, n_bins: int = 10) -> float:
    """Signed scale-free fit index of a connectivity vector.

    Bins log10(k) into ``n_bins`` equal-width bins (k = 0 entries are
    excluded, their log is not defined), then regresses log10 of the bin
    frequency on log10 of the bin-mean connectivity. Returns R^2 signed by
    slope direction: positive only when frequency *decreases* with
    connectivity, which is what a scale-free degree law looks like.
    """
    k = connectivity[connectivity > 0]
    if k.size < 2:
        return 0.0
    logk = np.log10(k)
    lo, hi = logk.min(), logk.max()
    if hi - lo <= 0:
        return 0.0
    edges = np.linspace(lo, hi, n_bins + 1)
    which = np.clip(np.digitize(logk, edges[1:-1]), 0, n_bins - 1)
    xs, ys = [], []
    for b in range(n_bins):
        mask = which == b
        if not mask.any():
            continue
        xs.append(np.log10(np.mean(k[mask])))
        ys.append(np.log10(np.sum(mask) / k.size))
    if len(xs) < 2:
        return 0.0
    x = np.asarray(xs)
    y = np.asarray(ys)
    xm, ym = x - x.mean(), y - y.mean()
    sxx = float(xm @ xm)
    if sxx <= 0:
        return 0.0
    slope = float(xm @ ym) / sxx
    sst = float(ym @ ym)
    if sst <= 0:
        return 0.0
    resid = ym - slope * xm
    r2 = 1.0 - float(resid @ resid) / sst
    return -np.sign(slope) * r2 if slope != 0 else 0.0


def pick_soft_threshold(
    s: SymMatrix,
    candidates: tuple[int, ...] = tuple(range(1, 21)),
    r2_target: float = 0.85,
) -> SoftThresholdResult:
    """Scan candidate powers and pick one by the scale-free fit criterion.

    Returns the smallest candidate whose signed R^2 reaches ``r2_target``.
    If none does but some candidate at least has a decreasing degree law
    (positive signed R^2), the best of those is taken. When the criterion is
    uninformative for the whole scan (no candidate with a negative slope, or
    a degenerate all-zero network) the conventional fallback power 6 is used
    (the admissible candidate closest to it) and flagged.
    """
    candidates = tuple(int(b) for b in candidates)
    if not candidates:
        raise ValueError("need at least one candidate power")
    if any(b < 1 for b in candidates):
        raise ValueError("candidate powers must be >= 1")
    off = s.values.copy()
    np.fill_diagonal(off, 0.0)
    degenerate = not np.any(off > 0)
    table = []
    for b in candidates:
        a = off**b
        k = a.sum(axis=1)
        table.append(
            SoftThresholdFit(
                beta=b,
                signed_r2=float(_scale_free_r2(k)) if not degenerate else 0.0,
                mean_connectivity=float(k.mean()),
                max_connectivity=float(k.max()),
            )
        )
    fallback = min(candidates, key=lambda b: (abs(b - FALLBACK_BETA), b))
    if degenerate:
        return SoftThresholdResult(fallback, tuple(table), degenerate=True, used_fallback=True)
    for row in table:
        if row.signed_r2 >= r2_target:
            return SoftThresholdResult(row.beta, tuple(table))
    best = max(table, key=lambda r: r.signed_r2)
    if best.signed_r2 > 0:
        first_best = next(r for r in table if r.signed_r2 == best.signed_r2)
        return SoftThresholdResult(first_best.beta, tuple(table))
    return SoftThresholdResult(fallback, tuple(table), used_fallback=True)


def adjacency(s: SymMatrix, beta: int | float) -> SymMatrix:
    """Soft-threshold the similarity matrix: elementwise power, unit diagonal."""
    if beta < 1:
        raise ValueError("beta must be >= 1")
    a = s.values**beta
    np.fill_diagonal(a, 1.0)
    return SymMatrix(names=s.names, values=a)


def topological_overlap(a: SymMatrix) -> SymMatrix:
    """Topological overlap matrix of an adjacency matrix.

    Shared-neighbor sums exclude both endpoints and connectivities exclude
    the diagonal; the diagonal of the result is set to 1 by convention. For
    adjacencies in [0, 1] the result stays in [0, 1]: the denominator
    dominates the numerator because every cross term a_ur * a_rv is at most
    min(a_ur, a_rv).
    """
    b = a.values.copy()
    np.fill_diagonal(b, 0.0)
    q = b @ b
    # matmul of a symmetric matrix is not bitwise symmetric; restore that
    q = (q + q.T) * 0.5
    c = b.sum(axis=1)
    denom = np.minimum.outer(c, c) + 1.0 - b
    w = (q + b) / denom
    np.fill_diagonal(w, 1.0)
    return SymMatrix(names=a.names, values=w)


@dataclass
class ModuleAssignment:
    """Feature-to-module labeling plus the merge history that produced it.

    Label 0 is the grey pool (unclustered features); real modules are
    numbered 1..module_count-1 by decreasing size. ``merges`` records the
    full agglomeration as (step, left, right, height) with clusters named by
    their smallest member's feature index.
    """

    features: tuple[str, ...]
    labels: dict[str, int]
    module_count: int
    merges: list[tuple[int, int, int, float]] = field(default_factory=list)

    @property
    def non_grey_labels(self) -> list[int]:
        return [m for m in range(1, self.module_count)]

    def members(self, label: int) -> list[str]:
        return [f for f in self.features if self.labels[f] == label]

    @property
    def sizes(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for lab in self.labels.values():
            out[lab] = out.get(lab, 0) + 1
        return out


def _average_linkage(d: np.ndarray) -> list[tuple[int, int, int, float]]:
    """Full average-linkage merge sequence on a dissimilarity matrix.

    Clusters live in the slot of their smallest member, so a row-major
    argmin breaks merge-height ties toward the smallest member indices.
    Heights are monotone non-decreasing (average linkage has no inversions).
    """
    p = d.shape[0]
    work = d.astype(np.float64).copy()
    np.fill_diagonal(work, np.inf)
    sizes = np.ones(p)
    merges = []
    for step in range(p - 1):
        flat = np.argmin(work)
        i, j = divmod(int(flat), p)
        if i > j:
            i, j = j, i
        height = work[i, j]
        merges.append((step, i, j, float(height)))
        ni, nj = sizes[i], sizes[j]
        new = (ni * work[i, :] + nj * work[j, :]) / (ni + nj)
        work[i, :] = new
        work[:, i] = new
        work[i, i] = np.inf
        work[j, :] = np.inf
        work[:, j] = np.inf
        sizes[i] = ni + nj
    return merges


def detect_modules(
    w: SymMatrix, min_module_size: int = 20, cut_height: float = 0.99
) -> ModuleAssignment:
    """Cluster features by topological-overlap dissimilarity.

    Cuts the average-linkage dendrogram of ``1 - w`` at ``cut_height``
    (merges at height <= cut_height apply). Clusters smaller than
    ``min_module_size`` dissolve into grey.
    """
    if min_module_size < 1:
        raise ValueError("min_module_size must be positive")
    if not 0 < cut_height <= 1:
        raise ValueError("cut_height must lie in (0, 1]")
    p = w.size
    d = np.maximum(1.0 - w.values, 0.0)
    merges = _average_linkage(d) if p > 1 else []

    parent = list(range(p))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for _, i, j, height in merges:
        if height <= cut_height:
            parent[find(j)] = find(i)
    groups: dict[int, list[int]] = {}
    for u in range(p):
        groups.setdefault(find(u), []).append(u)

    kept = [g for g in groups.values() if len(g) >= min_module_size]
    kept.sort(key=lambda g: (-len(g), min(g)))
    labels = {name: GREY_LABEL for name in w.names}
    for rank, group in enumerate(kept, start=1):
        for u in group:
            labels[w.names[u]] = rank
    return ModuleAssignment(
        features=w.names,
        labels=labels,
        module_count=len(kept) + 1,
        merges=merges,
    )
