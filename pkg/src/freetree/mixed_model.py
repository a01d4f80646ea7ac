"""Random-intercept linear mixed models via profiled maximum likelihood.

Model: ``y = X b + Z u + e`` with one random intercept per cluster,
``u_j ~ N(0, sigma2_b)`` and ``e ~ N(0, sigma2_e I)``. The marginal
covariance is ``sigma2_e * (I + theta Z Z')`` with the variance ratio
``theta = sigma2_b / sigma2_e``. Everything is profiled down to a 1-D search
over theta:

* per cluster j with n_j rows, ``W_j = I + theta 1 1'`` has the rank-one
  inverse ``W_j^-1 = I - (theta / (1 + theta n_j)) 1 1'`` and determinant
  ``1 + theta n_j``;
* therefore the GLS normal equations need only global cross-products plus
  per-cluster column sums:

      A(theta) = X'X - sum_j f_j s_j s_j',     f_j = theta / (1 + theta n_j),
      r(theta) = X'y - sum_j f_j s_j t_j,      s_j = colsum X_j, t_j = sum y_j,

  and the profiled ML deviance (up to a constant) is

      n * log(RSS(theta) / n) + sum_j log(1 + theta n_j);

* clusters with equal n_j share f_j, so the rank-one corrections group by
  distinct cluster size and each deviance evaluation is O(G p^2 + p^3) for
  G distinct sizes. No dense n x n matrix is ever formed.

The theta search is golden-section on the log1p scale over [0, 1e4], run to
an absolute width of 1e-8 in theta, with an explicit comparison against the
theta = 0 (pure OLS) endpoint so the returned likelihood can never fall
below the fixed-effects-only fit. ML is used rather than REML so that
likelihoods stay comparable across the changing fixed-effect designs the
tree pipeline produces.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError, RankError

THETA_BRACKET = (0.0, 1.0e4)
THETA_TOL = 1.0e-8
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class CollinearityWarning(UserWarning):
    """Emitted when dependent design columns are dropped instead of raised."""


@dataclass
class LmmFit:
    """Fitted random-intercept model.

    ``beta`` always has one entry per input column; dropped (collinear)
    columns carry coefficient 0 so the fit stays applicable to the original
    design. ``blups`` maps cluster id to its shrunken intercept.
    """

    beta: np.ndarray
    sigma2_e: float
    sigma2_b: float
    theta: float
    loglik: float
    blups: dict
    column_names: tuple[str, ...]
    dropped_columns: tuple[str, ...]
    n_obs: int
    n_clusters: int

    def to_dict(self) -> dict:
        return {
            "beta": {n: float(v) for n, v in zip(self.column_names, self.beta)},
            "sigma2_e": self.sigma2_e,
            "sigma2_b": self.sigma2_b,
            "loglik": self.loglik,
            "dropped_columns": list(self.dropped_columns),
            "n_obs": self.n_obs,
            "n_clusters": self.n_clusters,
        }


def _cluster_index(clusters) -> tuple[np.ndarray, list]:
    """Map cluster ids to 0..K-1 in first-appearance order."""
    ids: dict = {}
    idx = np.empty(len(clusters), dtype=np.intp)
    for i, c in enumerate(clusters):
        idx[i] = ids.setdefault(c, len(ids))
    return idx, list(ids)


def _independent_columns(x: np.ndarray) -> np.ndarray:
    """Boolean mask of columns to keep; later dependent columns are flagged.

    An unpivoted QR puts a (near-)zero on the diagonal exactly at columns
    that lie in the span of earlier ones, which matches the drop-later rule.
    """
    n, p = x.shape
    if p == 0:
        return np.zeros(0, dtype=bool)
    r = np.linalg.qr(x, mode="r")
    diag = np.abs(np.diag(r))
    scale = diag.max() if diag.size else 0.0
    if scale <= 0:
        keep = np.zeros(p, dtype=bool)
        keep[0] = bool(np.any(x[:, 0] != 0))
        return keep
    tol = scale * max(n, p) * np.finfo(np.float64).eps
    keep = diag > tol
    # Re-check iteratively: QR diagonals after a tiny pivot are unreliable,
    # so confirm the kept set is independent and grow it column by column
    # if the quick mask was too aggressive or too lax.
    if not keep.all():
        keep = np.zeros(p, dtype=bool)
        rank = 0
        for j in range(p):
            keep[j] = True
            sub = x[:, keep]
            if np.linalg.matrix_rank(sub) > rank:
                rank += 1
            else:
                keep[j] = False
    return keep


@dataclass
class _Sufficient:
    xtx: np.ndarray
    xty: np.ndarray
    yty: float
    col_sums: np.ndarray  # (K, p) per-cluster column sums
    y_sums: np.ndarray  # (K,)
    sizes: np.ndarray  # (K,)
    n: int

    @classmethod
    def build(cls, x: np.ndarray, y: np.ndarray, idx: np.ndarray, k: int) -> "_Sufficient":
        p = x.shape[1]
        col_sums = np.zeros((k, p))
        np.add.at(col_sums, idx, x)
        return cls(
            xtx=x.T @ x,
            xty=x.T @ y,
            yty=float(y @ y),
            col_sums=col_sums,
            y_sums=np.bincount(idx, weights=y, minlength=k),
            sizes=np.bincount(idx, minlength=k).astype(np.float64),
            n=len(y),
        )


class _ProfiledDeviance:
    """Evaluates the profiled ML deviance at a given theta."""

    def __init__(self, stats: _Sufficient):
        self.stats = stats
        self.group_sizes = np.unique(stats.sizes)
        self.group_m = []
        self.group_v = []
        self.group_w = []
        self.group_count = []
        for g in self.group_sizes:
            members = stats.sizes == g
            s = stats.col_sums[members]
            t = stats.y_sums[members]
            self.group_m.append(s.T @ s)
            self.group_v.append(s.T @ t)
            self.group_w.append(float(t @ t))
            self.group_count.append(int(members.sum()))

    def __call__(self, theta: float) -> tuple[float, np.ndarray, float]:
        st = self.stats
        a = st.xtx.copy()
        r = st.xty.copy()
        c = st.yty
        logdet = 0.0
        for g, m, v, w, cnt in zip(
            self.group_sizes, self.group_m, self.group_v, self.group_w, self.group_count
        ):
            f = theta / (1.0 + theta * g)
            a -= f * m
            r -= f * v
            c -= f * w
            logdet += cnt * math.log1p(theta * g)
        try:
            beta = np.linalg.solve(a, r) if a.size else np.zeros(0)
        except np.linalg.LinAlgError:
            beta, *_ = np.linalg.lstsq(a, r, rcond=None)
        rss = max(c - float(beta @ r), 1.0e-30)
        dev = st.n * math.log(rss / st.n) + logdet
        return dev, beta, rss


def _golden_min(fun, lo: float, hi: float, tol: float) -> float:
    """Golden-section minimum of fun(theta) with the search on log1p(theta)."""
    a, b = math.log1p(lo), math.log1p(hi)
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = fun(math.expm1(c)), fun(math.expm1(d))
    for _ in range(200):
        if math.expm1(b) - math.expm1(a) <= tol:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = fun(math.expm1(c))
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = fun(math.expm1(d))
    return math.expm1(c) if fc < fd else math.expm1(d)


def fit_random_intercept(
    x: np.ndarray,
    y: np.ndarray,
    clusters,
    column_names: tuple[str, ...] | None = None,
    on_rank_deficient: str = "raise",
) -> LmmFit:
    """Fit a random-intercept LMM by profiled maximum likelihood.

    Parameters
    ----------
    x, y : design matrix (n, p) and response (n,). Needs n >= 2 and more
        rows than independent columns.
    clusters : length-n sequence of cluster ids (any hashable).
    column_names : names used in reports and rank-deficiency messages.
    on_rank_deficient : "raise" (default) raises :class:`RankError` naming
        the dependent columns; "drop" removes them with a
        :class:`CollinearityWarning` and reports them in the fit.
    """
    if on_rank_deficient not in ("raise", "drop"):
        raise ValueError("on_rank_deficient must be 'raise' or 'drop'")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0] or len(clusters) != len(y):
        raise ValueError("x, y, clusters must agree on the number of rows")
    n, p = x.shape
    if n < 2:
        raise InsufficientDataError("mixed model needs at least 2 observations")
    names = tuple(column_names) if column_names is not None else tuple(f"x{j}" for j in range(p))
    if len(names) != p:
        raise ValueError("column_names length must match design width")

    keep = _independent_columns(x)
    dropped = tuple(names[j] for j in range(p) if not keep[j])
    if dropped:
        if on_rank_deficient == "raise":
            raise RankError(
                f"design is rank deficient; dependent columns: {', '.join(dropped)}",
                columns=list(dropped),
            )
        warnings.warn(
            f"dropping dependent design columns: {', '.join(dropped)}",
            CollinearityWarning,
            stacklevel=2,
        )
    xk = x[:, keep]
    if n <= xk.shape[1]:
        raise InsufficientDataError(
            f"need more rows ({n}) than independent columns ({xk.shape[1]})"
        )

    idx, cluster_ids = _cluster_index(clusters)
    stats = _Sufficient.build(xk, y, idx, len(cluster_ids))
    profiled = _ProfiledDeviance(stats)

    theta_star = _golden_min(lambda t: profiled(t)[0], *THETA_BRACKET, tol=THETA_TOL)
    candidates = [0.0, theta_star]
    best_theta, best = 0.0, None
    for t in candidates:
        dev, beta, rss = profiled(t)
        if best is None or dev < best[0] - 1e-12:
            best = (dev, beta, rss)
            best_theta = t
    dev, beta_kept, rss = best
    sigma2_e = rss / n
    sigma2_b = best_theta * sigma2_e
    loglik = -0.5 * (dev + n * (1.0 + math.log(2.0 * math.pi)))

    beta = np.zeros(p)
    beta[keep] = beta_kept
    resid = y - xk @ beta_kept
    resid_sums = np.bincount(idx, weights=resid, minlength=len(cluster_ids))
    shrink = best_theta * stats.sizes / (1.0 + best_theta * stats.sizes)
    mean_resid = resid_sums / stats.sizes
    blups = {cid: float(v) for cid, v in zip(cluster_ids, shrink * mean_resid)}

    return LmmFit(
        beta=beta,
        sigma2_e=float(sigma2_e),
        sigma2_b=float(sigma2_b),
        theta=float(best_theta),
        loglik=float(loglik),
        blups=blups,
        column_names=names,
        dropped_columns=dropped,
        n_obs=n,
        n_clusters=len(cluster_ids),
    )


def predict_lmm(
    fit: LmmFit, x: np.ndarray, clusters=None, include_random: bool = False
) -> np.ndarray:
    """Predict from a fit; unseen clusters contribute no random part."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != len(fit.beta):
        raise ValueError(f"design must have {len(fit.beta)} columns")
    out = x @ fit.beta
    if include_random:
        if clusters is None:
            raise ValueError("include_random requires cluster ids")
        out = out + np.array([fit.blups.get(c, 0.0) for c in clusters])
    return out


def marginal_loglik(
    x: np.ndarray, y: np.ndarray, clusters, beta: np.ndarray, sigma2_e: float, sigma2_b: float
) -> float:
    """Gaussian marginal log-likelihood at explicit parameter values.

    Exposed so calibration tests can cross-check the profiled optimizer
    against a dense-covariance computation at matched parameters.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    idx, ids = _cluster_index(clusters)
    theta = sigma2_b / sigma2_e
    resid = y - x @ np.asarray(beta, dtype=np.float64)
    sizes = np.bincount(idx, minlength=len(ids)).astype(np.float64)
    rsums = np.bincount(idx, weights=resid, minlength=len(ids))
    f = theta / (1.0 + theta * sizes)
    quad = (float(resid @ resid) - float(f @ (rsums**2))) / sigma2_e
    logdet = len(y) * math.log(sigma2_e) + float(np.sum(np.log1p(theta * sizes)))
    return -0.5 * (len(y) * math.log(2.0 * math.pi) + logdet + quad)


def beta_score(
    x: np.ndarray, y: np.ndarray, clusters, beta: np.ndarray, sigma2_e: float, sigma2_b: float
) -> np.ndarray:
    """Analytic gradient of :func:`marginal_loglik` with respect to beta."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    idx, ids = _cluster_index(clusters)
    theta = sigma2_b / sigma2_e
    resid = y - x @ np.asarray(beta, dtype=np.float64)
    sizes = np.bincount(idx, minlength=len(ids)).astype(np.float64)
    rsums = np.bincount(idx, weights=resid, minlength=len(ids))
    col_sums = np.zeros((len(ids), x.shape[1]))
    np.add.at(col_sums, idx, x)
    f = theta / (1.0 + theta * sizes)
    return (x.T @ resid - col_sums.T @ (f * rsums)) / sigma2_e
