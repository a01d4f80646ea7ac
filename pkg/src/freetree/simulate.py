"""Synthetic longitudinal benchmark designs with planted feature structure.

Both designs share the same feature process: ``p`` standard-normal features
split into contiguous modules. Every module except the last shares a
one-factor structure per draw,

    X_j = sqrt(rho) * g + sqrt(1 - rho) * e_j,

which gives exact pairwise correlation ``rho`` inside the module and zero
across modules; the last module is drawn i.i.d. The response loads on the
first three features of the first module and the first three of the last
module, with coefficients (5, 2, 2) plus a product interaction between the
second and third of each triple (weight 5). With the default four modules of
100 that is

    signal = 5*X1 + 2*X2 + 2*X3 + 5*X2*X3
           + 5*X301 + 2*X302 + 2*X303 + 5*X302*X303.

Design "sim1" adds a treatment-by-time profile ``(t-3)^2`` with opposite
signs for the two alternating treatment arms, and declares time/time2 as
fixed regressors and treatment as a fixed split candidate. Design "sim2" has
no fixed roles at all. Both add a subject random intercept (variance
``sigma2_b``) and i.i.d. observation noise (variance ``sigma2_eps``).

Generation is seeded per subject (hash of the master seed and the subject
index), so output is identical no matter how subjects are batched or
parallelized, and features are redrawn at every occasion unless
``freeze_features`` is set.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
import pandas as pd

from .panel_data import FeatureRoles, PanelDataset
from .rand import derive_seed

_LINEAR_WEIGHTS = (5.0, 2.0, 2.0)
_INTERACTION_WEIGHT = 5.0


@dataclass(frozen=True)
class SimConfig:
    """Configuration for one synthetic panel draw.

    Parameters
    ----------
    design : str
        Either ``"sim1"`` (treatment-by-time profile, fixed roles) or
        ``"sim2"`` (no fixed roles).
    n_subjects : int
        Number of clusters.
    seed : int
        Master seed; all randomness derives from it.
    n_periods : int
        Occasions per subject (time runs 1..n_periods).
    module_sizes : tuple of int
        Contiguous feature-module sizes; all but the last module are
        equicorrelated at ``within_corr``. First and last module need at
        least three features each to host the signal.
    within_corr : float
        Pairwise correlation inside the correlated modules, in [0, 1).
    sigma2_b : float
        Random-intercept variance.
    sigma2_eps : float
        Observation-noise variance.
    freeze_features : bool
        If True, draw each subject's features once and repeat them across
        occasions instead of redrawing per occasion.
    id_prefix : str
        Prepended to every subject id; lets independently generated panels
        (train vs. test) keep disjoint cluster ids. Does not affect draws.
    """

    design: str
    n_subjects: int
    seed: int
    n_periods: int = 6
    module_sizes: tuple[int, ...] = (100, 100, 100, 100)
    within_corr: float = 0.8
    sigma2_b: float = 3.0
    sigma2_eps: float = 1.0
    freeze_features: bool = False
    id_prefix: str = ""

    def __post_init__(self):
        object.__setattr__(self, "module_sizes", tuple(int(m) for m in self.module_sizes))
        if self.design not in ("sim1", "sim2"):
            raise ValueError(f"unknown design: {self.design!r}")
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be positive")
        if self.n_periods < 1:
            raise ValueError("n_periods must be positive")
        if len(self.module_sizes) < 2:
            raise ValueError("need at least two feature modules")
        if self.module_sizes[0] < 3 or self.module_sizes[-1] < 3:
            raise ValueError("first and last module must hold at least 3 features")
        if any(m < 1 for m in self.module_sizes):
            raise ValueError("module sizes must be positive")
        if not 0.0 <= self.within_corr < 1.0:
            raise ValueError("within_corr must lie in [0, 1)")
        if self.sigma2_b < 0 or self.sigma2_eps < 0:
            raise ValueError("variances must be non-negative")

    @property
    def n_features(self) -> int:
        return sum(self.module_sizes)

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(f"X{j + 1}" for j in range(self.n_features))

    @property
    def true_features(self) -> tuple[str, ...]:
        """The six signal-bearing feature names."""
        names = self.feature_names
        first = names[:3]
        last_start = self.n_features - self.module_sizes[-1]
        last = names[last_start : last_start + 3]
        return first + last

    @property
    def module_labels(self) -> np.ndarray:
        """Planted module index (1-based) per feature."""
        return np.repeat(np.arange(1, len(self.module_sizes) + 1), self.module_sizes)


def f_true(columns: Mapping[str, np.ndarray], cfg: SimConfig) -> np.ndarray:
    """Evaluate the planted signal on feature columns keyed by name."""
    t1, t2, t3, u1, u2, u3 = (np.asarray(columns[c], dtype=float) for c in cfg.true_features)
    a, b, c = _LINEAR_WEIGHTS
    w = _INTERACTION_WEIGHT
    return a * t1 + b * t2 + c * t3 + w * t2 * t3 + a * u1 + b * u2 + c * u3 + w * u2 * u3


def gen_features(cfg: SimConfig, rng: np.random.Generator, n_draws: int) -> np.ndarray:
    """Draw an (n_draws, p) feature block with the module correlation design.

    The factor draw happens for every non-final module regardless of
    ``within_corr`` so that the random stream (and therefore every other
    column) is unchanged when only the correlation level varies.
    """
    out = np.empty((n_draws, cfg.n_features))
    rho = cfg.within_corr
    pos = 0
    last = len(cfg.module_sizes) - 1
    for k, size in enumerate(cfg.module_sizes):
        if k < last:
            g = rng.standard_normal((n_draws, 1))
            e = rng.standard_normal((n_draws, size))
            out[:, pos : pos + size] = np.sqrt(rho) * g + np.sqrt(1.0 - rho) * e
        else:
            out[:, pos : pos + size] = rng.standard_normal((n_draws, size))
        pos += size
    return out


def _subject_block(cfg: SimConfig, index: int) -> tuple[np.ndarray, float, np.ndarray]:
    """Features, random intercept, and noise for one subject.

    Draw order per subject is fixed (intercept, features, noise) so output
    does not depend on how subjects are scheduled across workers.
    """
    rng = np.random.default_rng(derive_seed(cfg.seed, "subject", index))
    b = float(rng.standard_normal() * np.sqrt(cfg.sigma2_b))
    if cfg.freeze_features:
        x = np.repeat(gen_features(cfg, rng, 1), cfg.n_periods, axis=0)
    else:
        x = gen_features(cfg, rng, cfg.n_periods)
    eps = rng.standard_normal(cfg.n_periods) * np.sqrt(cfg.sigma2_eps)
    return x, b, eps


def gen_panel(cfg: SimConfig) -> tuple[PanelDataset, dict]:
    """Generate one panel plus a truth sidecar describing what was planted."""
    n, T = cfg.n_subjects, cfg.n_periods
    x = np.empty((n * T, cfg.n_features))
    b = np.empty(n)
    eps = np.empty(n * T)
    for i in range(n):
        xi, bi, ei = _subject_block(cfg, i)
        x[i * T : (i + 1) * T] = xi
        b[i] = bi
        eps[i * T : (i + 1) * T] = ei

    subject = np.repeat([f"{cfg.id_prefix}{i + 1}" for i in range(n)], T)
    time = np.tile(np.arange(1.0, T + 1.0), n)
    names = cfg.feature_names
    feature_cols = {names[j]: x[:, j] for j in range(cfg.n_features)}
    signal = f_true(feature_cols, cfg)
    y = signal + np.repeat(b, T) + eps

    data: dict[str, np.ndarray] = {"subject": subject, "time": time}
    if cfg.design == "sim1":
        arm = np.array(["treatment1" if i % 2 == 0 else "treatment2" for i in range(n)])
        treatment = np.repeat(arm, T)
        profile = np.where(treatment == "treatment1", 1.0, -1.0) * (time - 3.0) ** 2
        y = y + profile
        data["time2"] = time**2
        data["treatment"] = treatment
        roles = FeatureRoles(
            var_select=names,
            fixed_regress=("time", "time2"),
            fixed_split=("treatment",),
            cluster_col="subject",
            response_col="y",
        )
    else:
        roles = FeatureRoles(
            var_select=names,
            fixed_regress=(),
            fixed_split=(),
            cluster_col="subject",
            response_col="y",
            time_col="time",
        )
    data["y"] = y
    data.update(feature_cols)
    frame = pd.DataFrame(data)
    ds = PanelDataset.from_frame(frame, roles)

    truth = {
        "design": cfg.design,
        "seed": cfg.seed,
        "n_subjects": n,
        "n_periods": T,
        "module_sizes": list(cfg.module_sizes),
        "within_corr": cfg.within_corr,
        "sigma2_b": cfg.sigma2_b,
        "sigma2_eps": cfg.sigma2_eps,
        "freeze_features": cfg.freeze_features,
        "true_features": list(cfg.true_features),
        "linear_coefficients": {
            name: w
            for name, w in zip(
                cfg.true_features, _LINEAR_WEIGHTS + _LINEAR_WEIGHTS
            )
        },
        "interaction_coefficients": [
            [cfg.true_features[1], cfg.true_features[2], _INTERACTION_WEIGHT],
            [cfg.true_features[4], cfg.true_features[5], _INTERACTION_WEIGHT],
        ],
        "time_profile": (
            {"treatment1": 1.0, "treatment2": -1.0} if cfg.design == "sim1" else None
        ),
        "random_intercepts": {f"{cfg.id_prefix}{i + 1}": float(b[i]) for i in range(n)},
    }
    return ds, truth
