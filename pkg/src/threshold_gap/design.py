"""Design-matrix construction: dummy expansion, interactions, collinearity.

Terms are declared in order; a column that is exactly collinear with
earlier-declared columns is dropped (the later declaration loses) and
recorded, so specifications can name redundant variables on purpose and
still fit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError

COLLINEARITY_RTOL = 1e-8


@dataclass(frozen=True)
class Continuous:
    name: str


@dataclass(frozen=True)
class Dummies:
    name: str
    reference: Optional[object] = None  # None -> most frequent category


@dataclass(frozen=True)
class Interaction:
    left: "Term"
    right: "Term"


Term = Union[Continuous, Dummies, Interaction]


@dataclass(frozen=True)
class RegressionSpec:
    """Declarative regression description: outcome, ordered terms, grouping."""

    outcome: str
    terms: Tuple[Term, ...]
    cluster: str
    absorb: Optional[str] = None  # group variable for individual fixed effects
    sample: str = "all"

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))


@dataclass
class DesignMatrix:
    """Full-column-rank dense design with named columns and a drop report."""

    values: np.ndarray
    columns: List[str]
    dropped: List[str] = field(default_factory=list)
    basis: Optional[np.ndarray] = None  # orthonormal basis of kept columns

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]


def _column(df: pd.DataFrame, name: str) -> np.ndarray:
    if name not in df.columns:
        raise ConfigError(f"unknown variable name: {name!r}")
    return df[name].to_numpy(dtype=float)


def _realize(term: Term, df: pd.DataFrame) -> List[Tuple[str, np.ndarray]]:
    if isinstance(term, Continuous):
        return [(term.name, _column(df, term.name))]
    if isinstance(term, Dummies):
        if term.name not in df.columns:
            raise ConfigError(f"unknown variable name: {term.name!r}")
        col = df[term.name]
        counts = col.value_counts()
        cats = sorted(counts.index.tolist())
        if term.reference is not None:
            ref = term.reference
            if ref not in cats:
                raise ConfigError(
                    f"reference category {ref!r} not observed in {term.name!r}")
        else:
            top = counts.max()
            ref = sorted(c for c in cats if counts[c] == top)[0]
        return [(f"{term.name}={c}", (col == c).to_numpy(dtype=float))
                for c in cats if c != ref]
    if isinstance(term, Interaction):
        left = _realize(term.left, df)
        right = _realize(term.right, df)
        return [(f"{ln}:{rn}", lv * rv) for ln, lv in left for rn, rv in right]
    raise ConfigError(f"unsupported term: {term!r}")


def _orthonormalize(basis: Optional[np.ndarray], v: np.ndarray):
    """Residual of v against the basis; returns (residual, is_independent)."""
    nv = np.linalg.norm(v)
    if nv == 0.0:
        return None, False
    r = v
    if basis is not None and basis.shape[1] > 0:
        # re-orthogonalize once for numerical stability
        r = r - basis @ (basis.T @ r)
        r = r - basis @ (basis.T @ r)
    nr = np.linalg.norm(r)
    if nr <= COLLINEARITY_RTOL * nv:
        return None, False
    return r / nr, True


def filter_collinear(cols: Sequence[np.ndarray], labels: Sequence[str],
                     basis: Optional[np.ndarray] = None):
    """Sequentially keep columns independent of all earlier kept columns.

    Returns (kept_indices, dropped_labels, basis) where basis spans the kept
    columns plus any pre-existing basis passed in.
    """
    kept, dropped = [], []
    for i, (v, label) in enumerate(zip(cols, labels)):
        q, ok = _orthonormalize(basis, v)
        if not ok:
            dropped.append(label)
            continue
        kept.append(i)
        basis = q[:, None] if basis is None else np.column_stack([basis, q])
    return kept, dropped, basis


def build_design(spec: RegressionSpec,
                 df: pd.DataFrame) -> Tuple[DesignMatrix, np.ndarray]:
    """Expand the spec's terms over df into a full-rank design plus outcome."""
    if len(df) == 0:
        raise DataError("empty sample: no rows to build a design from")
    y = _column(df, spec.outcome)

    pairs: List[Tuple[str, np.ndarray]] = []
    if spec.absorb is None:
        pairs.append(("const", np.ones(len(df))))
    for term in spec.terms:
        pairs.extend(_realize(term, df))

    seen = set()
    cols, labels, dropped = [], [], []
    for label, v in pairs:
        if label in seen:
            dropped.append(label)  # duplicate declaration
            continue
        seen.add(label)
        cols.append(v)
        labels.append(label)

    kept, coldrops, basis = filter_collinear(cols, labels)
    dropped.extend(coldrops)
    values = np.column_stack([cols[i] for i in kept]) if kept \
        else np.empty((len(df), 0))
    dm = DesignMatrix(values=values,
                      columns=[labels[i] for i in kept],
                      dropped=dropped, basis=basis)
    return dm, y


def extend_design(dm: DesignMatrix, new_cols: Sequence[np.ndarray],
                  new_labels: Sequence[str]) -> DesignMatrix:
    """Append columns to an existing design, dropping collinear newcomers.

    Reuses the cached orthonormal basis, so a sweep can build its control
    block once and extend it per window cheaply.
    """
    if dm.basis is None:
        raise ConfigError("design has no cached basis; rebuild it first")
    kept, coldrops, basis = filter_collinear(new_cols, new_labels, dm.basis)
    values = dm.values
    if kept:
        values = np.column_stack([values] + [new_cols[i] for i in kept])
    return DesignMatrix(
        values=values,
        columns=dm.columns + [new_labels[i] for i in kept],
        dropped=dm.dropped + coldrops,
        basis=basis,
    )
