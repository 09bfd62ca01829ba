"""Named analysis recipes: DID fits, binned interactions, placebo sweeps.

Each recipe is a thin declarative layer over the design/fit engine: it
derives the flag columns it needs, declares terms in a deterministic order
(controls first, so redundant threshold-window main effects lose to the
start-bin dummies), and returns plain result objects that serialize to JSON
and CSV.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from .design import (Continuous, DesignMatrix, Dummies, Interaction,
                     RegressionSpec, build_design, extend_design)
from .errors import ConfigError
from .fit import FitResult, fit_fe, fit_ols, fit_spec
from .panel import PanelDataset, filter_population, interval_frame, start_bins

THRESHOLD = 200.0
DID_INTERACTION = "in_window:dg_ever"
FAC_INTERACTION = "first_after_crossing:dg_ever"

POPULATIONS = {
    "all": "all",
    "pre-init": "pre_initiation",
    "pre_initiation": "pre_initiation",
    "post-init": "post_initiation",
    "post_initiation": "post_initiation",
}


def worker_count() -> int:
    """Parallelism cap: THRESHOLD_GAP_THREADS env var, default 1."""
    raw = os.environ.get("THRESHOLD_GAP_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"THRESHOLD_GAP_THREADS must be an integer, "
                          f"got {raw!r}")


def _population(ds: PanelDataset, population: str) -> PanelDataset:
    try:
        which = POPULATIONS[population]
    except KeyError:
        raise ConfigError(f"unknown population {population!r}; "
                          f"expected one of {sorted(set(POPULATIONS))}")
    if which == "all":
        return ds
    return filter_population(ds, which)


def _frame(ds: PanelDataset) -> pd.DataFrame:
    df = interval_frame(ds)
    df["bin25"] = start_bins(df["start_cd4"].to_numpy(), 25.0)
    df["bin50"] = start_bins(df["start_cd4"].to_numpy(), 50.0)
    return df


def _ols_controls(df: pd.DataFrame, bin_col: str = "bin25",
                  poly: bool = False):
    """Pooled-OLS control block: fine start bins, year FE, demographics."""
    terms = [Dummies(bin_col, reference=int(df[bin_col].min()))]
    if poly:
        terms.append(Continuous("start_cd4"))
    terms += [
        Dummies("calendar_year", reference=int(df["calendar_year"].min())),
        Continuous("age"),
        Continuous("age_sq"),
        Dummies("education_years"),
        Continuous("female"),
        Dummies("road_distance_cat"),
    ]
    return terms


def _fe_controls(df: pd.DataFrame, bin_col: str = "bin50",
                 poly: bool = True):
    """Within-estimator control block: coarser bins plus a linear term."""
    terms = [Dummies(bin_col, reference=int(df[bin_col].min()))]
    if poly:
        terms.append(Continuous("start_cd4"))
    terms += [
        Dummies("calendar_year", reference=int(df["calendar_year"].min())),
        Continuous("age"),
        Continuous("age_sq"),
    ]
    return terms


def _window_columns(df: pd.DataFrame, window: Tuple[float, float]):
    lo, hi = window
    in_window = ((df["start_cd4"] >= lo) & (df["start_cd4"] < hi)).astype(float)
    return in_window


# ---------------------------------------------------------------------------
# DID
# ---------------------------------------------------------------------------

def run_did(ds: PanelDataset, window: Tuple[float, float] = (150.0, 250.0),
            population: str = "all", model: str = "ols",
            window_def: str = "start_in_window") -> FitResult:
    """Difference-in-differences fit of the threshold-window interaction.

    The window main effect is declared after the start-bin controls, so an
    aligned window is reported as dropped rather than silently absorbed;
    the interaction with DG receipt is the estimand.
    """
    lo, hi = window
    if not (0 <= lo < hi <= 600):
        raise ConfigError(f"window {window} outside [0, 600]")
    if model not in ("ols", "fe"):
        raise ConfigError(f"model must be 'ols' or 'fe', got {model!r}")
    if window_def not in ("start_in_window", "first_after_crossing"):
        raise ConfigError(f"unknown window_def {window_def!r}")

    df = _frame(_population(ds, population))
    df["in_window"] = _window_columns(df, window)

    if window_def == "start_in_window":
        main = Continuous("in_window")
        inter = Interaction(Continuous("in_window"), Continuous("dg_ever"))
    else:
        main = Continuous("first_after_crossing")
        inter = Interaction(Continuous("first_after_crossing"),
                            Continuous("dg_ever"))

    if model == "ols":
        terms = _ols_controls(df) + [Continuous("dg_ever"), main, inter]
        spec = RegressionSpec(outcome="annualized_change", terms=terms,
                              cluster="person_id", sample=population)
    else:
        terms = _fe_controls(df) + [Continuous("dg_ever"), main, inter]
        spec = RegressionSpec(outcome="annualized_change", terms=terms,
                              cluster="person_id", absorb="person_id",
                              sample=population)
    return fit_spec(spec, df)


# ---------------------------------------------------------------------------
# Binned profiles
# ---------------------------------------------------------------------------

@dataclass
class BinProfile:
    """Per-start-bin statistics (coefficients, means or percentiles)."""

    table: pd.DataFrame
    kind: str
    bin_width: float = 25.0

    def to_csv(self, path) -> None:
        self.table.to_csv(path, index=False, lineterminator="\n")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "bin_width": self.bin_width,
                "rows": self.table.to_dict(orient="records")}


def _bin_edges(b: int, width: float) -> Tuple[float, float]:
    lo = b * width
    hi = b * width + width
    if lo >= 500.0 - 1e-9:
        return 500.0, float("inf")
    return lo, hi


def run_binned_interactions(ds: PanelDataset,
                            outcome: str = "annualized_change") -> BinProfile:
    """Bin-by-bin DG interaction coefficients with 95% CIs.

    Fits outcome on start-bin dummies, the DG main effect, and bin-by-DG
    interactions, person-clustered and with no other controls. Interaction
    coefficients are relative to the reference (lowest) bin's DG gap; bins
    with no DG rows are reported absent.
    """
    if outcome not in ("annualized_change", "delta_days"):
        raise ConfigError(f"unsupported outcome {outcome!r}")
    df = _frame(ds)
    ref = int(df["bin25"].min())
    bins_term = Dummies("bin25", reference=ref)
    spec = RegressionSpec(
        outcome=outcome,
        terms=[bins_term, Continuous("dg_ever"),
               Interaction(bins_term, Continuous("dg_ever"))],
        cluster="person_id")
    res = fit_spec(spec, df)
    crit = stats.t.ppf(0.975, df=res.n_clusters - 1)

    rows = []
    counts = df.groupby("bin25").size()
    for b in sorted(df["bin25"].unique()):
        lo, hi = _bin_edges(b, 25.0)
        label = f"bin25={b}:dg_ever"
        if b == ref:
            rows.append(dict(bin=b, bin_lo=lo, bin_hi=hi, coef=0.0,
                             ci_lo=0.0, ci_hi=0.0, n=int(counts[b]),
                             present=True, note="reference"))
        elif label in res.coefficients:
            c, s = res.coefficients[label], res.robust_se[label]
            rows.append(dict(bin=b, bin_lo=lo, bin_hi=hi, coef=c,
                             ci_lo=c - crit * s, ci_hi=c + crit * s,
                             n=int(counts[b]), present=True, note=""))
        else:
            rows.append(dict(bin=b, bin_lo=lo, bin_hi=hi, coef=np.nan,
                             ci_lo=np.nan, ci_hi=np.nan, n=int(counts[b]),
                             present=False, note="no DG rows"))
    return BinProfile(table=pd.DataFrame(rows), kind=f"interaction:{outcome}")


def _bin_means_profile(df: pd.DataFrame) -> BinProfile:
    """Per-bin mean of annualized change with cluster-robust 95% CI."""
    bins = sorted(df["bin25"].unique())
    onehot = np.column_stack(
        [(df["bin25"] == b).to_numpy(dtype=float) for b in bins])
    dm = DesignMatrix(values=onehot, columns=[f"bin25={b}" for b in bins])
    res = fit_ols(dm, df["annualized_change"].to_numpy(dtype=float),
                  df["person_id"].to_numpy())
    crit = stats.t.ppf(0.975, df=res.n_clusters - 1)
    counts = df.groupby("bin25").size()
    rows = []
    for b in bins:
        lo, hi = _bin_edges(b, 25.0)
        c = res.coefficients[f"bin25={b}"]
        s = res.robust_se[f"bin25={b}"]
        rows.append(dict(bin=b, bin_lo=lo, bin_hi=hi, mean=c,
                         ci_lo=c - crit * s, ci_hi=c + crit * s,
                         n=int(counts[b])))
    return BinProfile(table=pd.DataFrame(rows), kind="means")


def _bin_percentiles_profile(df: pd.DataFrame) -> BinProfile:
    rows = []
    for b, grp in df.groupby("bin25"):
        lo, hi = _bin_edges(int(b), 25.0)
        v = grp["annualized_change"]
        rows.append(dict(bin=int(b), bin_lo=lo, bin_hi=hi,
                         median=v.median(),
                         p25=v.quantile(0.25), p75=v.quantile(0.75),
                         p10=v.quantile(0.10), p90=v.quantile(0.90),
                         n=len(v)))
    return BinProfile(table=pd.DataFrame(rows), kind="percentiles")


def run_bin_recovery_stats(ds: PanelDataset, split_initiation: bool = False):
    """Per-bin recovery means (cluster-robust CIs) and percentile spreads."""
    if not split_initiation:
        df = _frame(ds)
        return _bin_means_profile(df), _bin_percentiles_profile(df)
    out = {}
    for pop in ("pre_initiation", "post_initiation"):
        df = _frame(filter_population(ds, pop))
        out[pop] = (_bin_means_profile(df), _bin_percentiles_profile(df))
    return out


# ---------------------------------------------------------------------------
# Placebo-threshold sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepResult:
    """One row per independently fitted placebo window."""

    table: pd.DataFrame
    model: str
    population: str

    def to_csv(self, path) -> None:
        self.table.to_csv(path, index=False, lineterminator="\n")


def run_threshold_sweep(ds: PanelDataset, width: float = 100.0,
                        step: float = 10.0,
                        sweep_range: Tuple[float, float] = (0.0, 600.0),
                        model: str = "fe",
                        population: str = "post_initiation") -> SweepResult:
    """Refit the DID at shifted placebo windows across the whole support.

    Each window is a separate regression (the same FE or OLS form as
    ``run_did`` with only the window redefined). The control design is built once
    and extended with the two window columns per window.
    """
    lo, hi = sweep_range
    if lo % step or hi % step:
        raise ConfigError("sweep range bounds must be multiples of step")
    if model not in ("ols", "fe"):
        raise ConfigError(f"model must be 'ols' or 'fe', got {model!r}")

    df = _frame(_population(ds, population))
    if model == "fe":
        terms = _fe_controls(df) + [Continuous("dg_ever")]
        spec = RegressionSpec(outcome="annualized_change", terms=terms,
                              cluster="person_id", absorb="person_id")
    else:
        terms = _ols_controls(df) + [Continuous("dg_ever")]
        spec = RegressionSpec(outcome="annualized_change", terms=terms,
                              cluster="person_id")
    base, y = build_design(spec, df)
    clusters = df["person_id"].to_numpy()
    start = df["start_cd4"].to_numpy(dtype=float)
    dg = df["dg_ever"].to_numpy(dtype=float)

    starts = np.arange(lo, hi - width + step / 2, step)

    def fit_window(w: float) -> dict:
        in_win = ((start >= w) & (start < w + width)).astype(float)
        dm = extend_design(base, [in_win, in_win * dg],
                           ["in_window", DID_INTERACTION])
        if model == "fe":
            res = fit_fe(dm, y, clusters, clusters)
        else:
            res = fit_ols(dm, y, clusters)
        row = dict(window_lo=w, window_hi=w + width,
                   coef=np.nan, se=np.nan, t=np.nan, p=np.nan,
                   n_obs=res.n_obs,
                   contains_threshold=bool(w >= THRESHOLD - width
                                           and w <= THRESHOLD))
        if DID_INTERACTION in res.coefficients:
            row.update(coef=res.coefficients[DID_INTERACTION],
                       se=res.robust_se[DID_INTERACTION],
                       t=res.t_stat[DID_INTERACTION],
                       p=res.p_value[DID_INTERACTION])
        return row

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(fit_window, starts))
    else:
        rows = [fit_window(w) for w in starts]
    return SweepResult(table=pd.DataFrame(rows), model=model,
                       population=population)


# ---------------------------------------------------------------------------
# Time between tests (retesting-behavior column variants)
# ---------------------------------------------------------------------------

TIME_BETWEEN_COLUMNS = {
    1: ("ols", "all", "dg_main"),
    2: ("fe", "all", "qualified"),
    3: ("fe", "pre-init", "shopping"),
    4: ("fe", "post-init", "shopping"),
    5: ("fe", "all", "triple"),
    6: ("fe", "post-init", "triple"),
}


def run_time_between(ds: PanelDataset, column: int = 2) -> FitResult:
    """Test-frequency DID variants on the days-between-tests outcome.

    Column map:
    1 OLS/all DG main effect; 2 FE/all currently-qualified interaction;
    3-4 FE pre-/post-initiation 200-250 window interaction; 5-6 FE all/
    post-initiation first-after-crossing triple interaction with 200-250.
    """
    if column not in TIME_BETWEEN_COLUMNS:
        raise ConfigError(f"column must be 1..6, got {column}")
    model, population, flavor = TIME_BETWEEN_COLUMNS[column]
    df = _frame(_population(ds, population))
    df["qualified"] = (df["start_cd4"] < THRESHOLD).astype(float)
    df["win_200_250"] = _window_columns(df, (200.0, 250.0))

    dgi = Continuous("dg_ever")
    if flavor == "dg_main":
        extra = [dgi]
    elif flavor == "qualified":
        extra = [dgi, Continuous("qualified"),
                 Interaction(Continuous("qualified"), dgi)]
    elif flavor == "shopping":
        extra = [dgi, Continuous("win_200_250"),
                 Interaction(Continuous("win_200_250"), dgi)]
    else:  # triple
        fac = Continuous("first_after_crossing")
        win = Continuous("win_200_250")
        extra = [dgi, fac, win,
                 Interaction(fac, dgi), Interaction(fac, win),
                 Interaction(Interaction(fac, win), dgi)]

    if model == "ols":
        terms = _ols_controls(df, poly=True) + extra
        spec = RegressionSpec(outcome="delta_days", terms=terms,
                              cluster="person_id", sample=population)
    else:
        terms = _fe_controls(df, bin_col="bin25", poly=True) + extra
        spec = RegressionSpec(outcome="delta_days", terms=terms,
                              cluster="person_id", absorb="person_id",
                              sample=population)
    return fit_spec(spec, df)


# ---------------------------------------------------------------------------
# Law-change robustness (pre/post rule-change splits)
# ---------------------------------------------------------------------------

LAW_CHANGE_WINDOW = (pd.Timestamp("2003-01-01"), pd.Timestamp("2008-12-31"))


def _with_pre_law_flag(ds: PanelDataset, df: pd.DataFrame) -> pd.DataFrame:
    """dg_pre_law: DG recipients with activity recorded inside 2003-2008."""
    lo, hi = LAW_CHANGE_WINDOW
    full = interval_frame(ds)
    inside = (full["start_date"] >= lo) & (full["end_date"] <= hi)
    pre_ids = set(full.loc[inside & (full["dg_ever"] > 0), "person_id"])
    df = df.copy()
    df["dg_pre_law"] = df["person_id"].isin(pre_ids).astype(float) \
        * df["dg_ever"]
    return df


def run_law_change(ds: PanelDataset,
                   window: Tuple[float, float] = (150.0, 250.0)
                   ) -> Dict[str, FitResult]:
    """Pre- vs post-law-change robustness fits.

    Returns the DG-pre-law main-effect model, the window interaction on the
    2003-2008 restricted sample (OLS and FE), and the pooled triple
    interaction of window x DG x pre-law (OLS and FE).
    """
    results: Dict[str, FitResult] = {}
    dgi = Continuous("dg_ever")
    dgp = Continuous("dg_pre_law")

    # main effects, full sample
    df = _with_pre_law_flag(ds, _frame(ds))
    spec = RegressionSpec(
        outcome="annualized_change",
        terms=_ols_controls(df) + [dgi, dgp],
        cluster="person_id")
    results["main_effects_ols"] = fit_spec(spec, df)

    # restricted 2003-2008 sample, window x pre-law-DG
    sub = filter_population(ds, "date_window",
                            start=LAW_CHANGE_WINDOW[0],
                            end=LAW_CHANGE_WINDOW[1])
    dfr = _with_pre_law_flag(ds, _frame(sub))
    dfr["in_window"] = _window_columns(dfr, window)
    win = Continuous("in_window")
    spec = RegressionSpec(
        outcome="annualized_change",
        terms=_fe_controls(dfr) + [dgp, win, Interaction(win, dgp)],
        cluster="person_id", absorb="person_id")
    results["window_pre_law_fe"] = fit_spec(spec, dfr)
    spec = RegressionSpec(
        outcome="annualized_change",
        terms=_ols_controls(dfr) + [dgi, dgp, win, Interaction(win, dgp)],
        cluster="person_id")
    results["window_pre_law_ols"] = fit_spec(spec, dfr)

    # pooled triple interaction, full sample
    dfp = _with_pre_law_flag(ds, _frame(ds))
    dfp["in_window"] = _window_columns(dfp, window)
    win = Continuous("in_window")
    triple = [dgi, dgp, win, Interaction(win, dgi), Interaction(win, dgp)]
    spec = RegressionSpec(
        outcome="annualized_change",
        terms=_ols_controls(dfp) + triple,
        cluster="person_id")
    results["pooled_triple_ols"] = fit_spec(spec, dfp)
    spec = RegressionSpec(
        outcome="annualized_change",
        terms=_fe_controls(dfp) + triple,
        cluster="person_id", absorb="person_id")
    results["pooled_triple_fe"] = fit_spec(spec, dfp)
    return results
