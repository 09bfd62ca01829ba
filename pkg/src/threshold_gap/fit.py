"""Least-squares fitting with cluster-robust (CR1) inference.

OLS goes through a QR decomposition (no explicit normal equations); the
within (fixed-effects) estimator demeans by absorbed group and refits,
dropping columns that the transformation leaves with no variation. Standard
errors use the cluster sandwich with the G/(G-1) * (N-1)/(N-K) small-sample
factor and a t(G-1) reference distribution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from scipy import stats
from scipy.linalg import solve_triangular

from .design import DesignMatrix, COLLINEARITY_RTOL, filter_collinear
from .errors import DataError


@dataclass
class FitResult:
    """Coefficients with cluster-robust inference and a drop report."""

    coefficients: Dict[str, float]
    robust_se: Dict[str, float]
    t_stat: Dict[str, float]
    p_value: Dict[str, float]
    n_obs: int
    n_clusters: int
    n_individuals: int
    r_squared: float
    dropped: List[str] = field(default_factory=list)
    model: str = "ols"

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "coefficients": {
                name: {
                    "coef": self.coefficients[name],
                    "se": self.robust_se[name],
                    "t": self.t_stat[name],
                    "p": self.p_value[name],
                }
                for name in self.coefficients
            },
            "n_obs": self.n_obs,
            "n_clusters": self.n_clusters,
            "n_individuals": self.n_individuals,
            "r_squared": self.r_squared,
            "dropped": self.dropped,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def format_table(self) -> str:
        """Aligned coefficient table, SE in parentheses, significance stars."""
        width = max((len(n) for n in self.coefficients), default=8) + 2
        lines = [f"{'':{width}}{'coef':>12}  {'(se)':>12}",
                 "-" * (width + 28)]
        for name, coef in self.coefficients.items():
            p = self.p_value[name]
            star = "***" if p < 0.01 else "**" if p < 0.05 else \
                "*" if p < 0.10 else ""
            lines.append(f"{name:{width}}{coef:>12.4g}{star:<3} "
                         f"({self.robust_se[name]:.4g})")
        lines.append("-" * (width + 28))
        lines.append(f"N = {self.n_obs}   clusters = {self.n_clusters}   "
                     f"individuals = {self.n_individuals}   "
                     f"r2 = {self.r_squared:.4f}")
        if self.dropped:
            lines.append(f"dropped: {', '.join(self.dropped)}")
        lines.append("* p<0.10, ** p<0.05, *** p<0.01")
        return "\n".join(lines)


def _cluster_codes(labels) -> np.ndarray:
    codes, _ = pd.factorize(np.asarray(labels), sort=False)
    return codes


def _cluster_meat(X: np.ndarray, resid: np.ndarray,
                  codes: np.ndarray) -> np.ndarray:
    order = np.argsort(codes, kind="stable")
    Xe = X[order] * resid[order, None]
    sc = codes[order]
    starts = np.flatnonzero(np.r_[True, np.diff(sc) != 0])
    S = np.add.reduceat(Xe, starts, axis=0)
    return S.T @ S


def _qr_solve(X: np.ndarray, y: np.ndarray):
    Q, R = np.linalg.qr(X)
    diag = np.abs(np.diag(R))
    if diag.min() <= COLLINEARITY_RTOL * diag.max():
        raise RuntimeError("internal error: rank-deficient design after drops")
    beta = solve_triangular(R, Q.T @ y)
    Rinv = solve_triangular(R, np.eye(R.shape[0]))
    xtx_inv = Rinv @ Rinv.T
    return beta, xtx_inv


def _sandwich(X, y, beta, xtx_inv, codes, k_total):
    n, _ = X.shape
    G = int(codes.max()) + 1
    resid = y - X @ beta
    meat = _cluster_meat(X, resid, codes)
    c = (G / (G - 1.0)) * ((n - 1.0) / (n - k_total))
    V = c * xtx_inv @ meat @ xtx_inv
    se = np.sqrt(np.diag(V))
    return resid, se, G


def _assemble(dm_columns, beta, se, df_t, n, G, n_individuals, r2,
              dropped, model) -> FitResult:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, beta / se, np.inf)
    p = 2.0 * stats.t.sf(np.abs(t), df=df_t)
    return FitResult(
        coefficients=dict(zip(dm_columns, beta.tolist())),
        robust_se=dict(zip(dm_columns, se.tolist())),
        t_stat=dict(zip(dm_columns, t.tolist())),
        p_value=dict(zip(dm_columns, p.tolist())),
        n_obs=n, n_clusters=G, n_individuals=n_individuals,
        r_squared=float(r2), dropped=list(dropped), model=model,
    )


def fit_ols(dm: DesignMatrix, y: np.ndarray, clusters) -> FitResult:
    """OLS with CR1 cluster-sandwich standard errors."""
    X = dm.values
    n, k = X.shape
    if n <= k:
        raise DataError(f"need more rows ({n}) than columns ({k})")
    codes = _cluster_codes(clusters)
    if codes.max() < 1:
        raise DataError("need at least 2 clusters")
    beta, xtx_inv = _qr_solve(X, y)
    resid, se, G = _sandwich(X, y, beta, xtx_inv, codes, k_total=k)
    tss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / tss if tss > 0 else 0.0
    return _assemble(dm.columns, beta, se, df_t=G - 1, n=n, G=G,
                     n_individuals=G, r2=r2, dropped=dm.dropped, model="ols")


def _group_means(values: np.ndarray, codes: np.ndarray, n_groups: int):
    counts = np.bincount(codes, minlength=n_groups).astype(float)
    if values.ndim == 1:
        sums = np.bincount(codes, weights=values, minlength=n_groups)
        return sums / counts
    means = np.empty((n_groups, values.shape[1]))
    for j in range(values.shape[1]):
        means[:, j] = np.bincount(codes, weights=values[:, j],
                                  minlength=n_groups) / counts
    return means


def fit_fe(dm: DesignMatrix, y: np.ndarray, absorb, clusters) -> FitResult:
    """Within estimator: absorb group means, then OLS on the demeaned system.

    Columns with no within-group variation (and any collinearity that the
    demeaning introduces) are dropped and reported. R-squared is computed on
    the untransformed outcome from group means plus fitted within-variation.
    """
    X = dm.values
    n, k = X.shape
    a_codes = _cluster_codes(absorb)
    G_a = int(a_codes.max()) + 1
    if G_a < 2:
        raise DataError("within transform is degenerate with a single "
                        "absorbed group")
    c_codes = _cluster_codes(clusters)
    if c_codes.max() < 1:
        raise DataError("need at least 2 clusters")

    x_means = _group_means(X, a_codes, G_a)
    y_means = _group_means(y, a_codes, G_a)
    Xw = X - x_means[a_codes]
    yw = y - y_means[a_codes]

    # absorbed columns: demeaning wiped them out relative to their own scale
    orig_norm = np.linalg.norm(X, axis=0)
    within_norm = np.linalg.norm(Xw, axis=0)
    absorbed = within_norm <= COLLINEARITY_RTOL * np.maximum(orig_norm, 1.0)
    dropped = [c for c, a in zip(dm.columns, absorbed) if a]
    keep_idx = [i for i in range(k) if not absorbed[i]]

    cols = [Xw[:, i] for i in keep_idx]
    labels = [dm.columns[i] for i in keep_idx]
    kept, coldrops, _ = filter_collinear(cols, labels)
    dropped.extend(coldrops)
    if not kept:
        raise DataError("no identifiable regressors: every column was "
                        "absorbed by the fixed effects")

    Xw_k = np.column_stack([cols[i] for i in kept])
    labels_k = [labels[i] for i in kept]
    k_kept = Xw_k.shape[1]
    k_total = k_kept + G_a
    if n <= k_total:
        raise DataError(f"need more rows ({n}) than columns plus absorbed "
                        f"groups ({k_total})")

    beta, xtx_inv = _qr_solve(Xw_k, yw)
    _, se, G = _sandwich(Xw_k, yw, beta, xtx_inv, c_codes, k_total=k_total)

    fitted = y_means[a_codes] + Xw_k @ beta
    tss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum((y - fitted) ** 2)) / tss if tss > 0 else 0.0
    return _assemble(labels_k, beta, se, df_t=G - 1, n=n, G=G,
                     n_individuals=G_a, r2=r2,
                     dropped=dm.dropped + dropped, model="fe")


def fit_spec(spec, df: pd.DataFrame) -> FitResult:
    """Build the design for a RegressionSpec over df and fit it."""
    from .design import build_design
    dm, y = build_design(spec, df)
    clusters = df[spec.cluster].to_numpy()
    if spec.absorb is not None:
        return fit_fe(dm, y, df[spec.absorb].to_numpy(), clusters)
    return fit_ols(dm, y, clusters)
