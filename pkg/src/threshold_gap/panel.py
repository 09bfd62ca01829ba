"""Interval-level panel construction from raw person/observation inputs.

The unit of analysis is the interval between two sequential tests of the
running variable (CD4 count) for one person, carrying an annualized rate of
change plus the flags the downstream regressions need. Construction applies
the cohort rule (at least three observations per person) and percentile-based
outlier trimming; all drops are logged in the dataset provenance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError

DAYS_PER_YEAR = 365.25
DEFAULT_THRESHOLD = 200.0
DEFAULT_BIN_WIDTH = 25.0
TERMINAL_POOL_AT = 500.0  # start values >= this share one terminal bin

PERSON_COLUMNS = [
    "person_id", "dg_ever", "sex", "birth_year", "education_years",
    "road_distance_cat", "art_init_date",
]
OBSERVATION_COLUMNS = ["person_id", "date", "cd4"]
INTERVAL_COLUMNS = [
    "person_id", "start_date", "end_date", "start_cd4", "end_cd4",
    "delta_days", "delta_years", "annualized_change", "post_initiation",
    "calendar_year", "start_bin", "first_after_crossing",
]


@dataclass(frozen=True)
class PanelDataset:
    """Immutable interval-level dataset; every transform returns a new one."""

    persons: pd.DataFrame     # one row per person, indexed by person_id
    intervals: pd.DataFrame   # one row per interval
    provenance: dict = field(default_factory=dict)

    @property
    def n_intervals(self) -> int:
        return len(self.intervals)

    @property
    def n_persons(self) -> int:
        return self.intervals["person_id"].nunique()

    def with_provenance(self, key: str, entry) -> "PanelDataset":
        prov = dict(self.provenance)
        prov[key] = entry
        return replace(self, provenance=prov)

    def provenance_json(self) -> str:
        return json.dumps(self.provenance, indent=2, sort_keys=True, default=str)


# ---------------------------------------------------------------------------
# CSV input
# ---------------------------------------------------------------------------

def _read_csv(path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, dtype={"person_id": str})
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except pd.errors.ParserError as exc:
        raise DataError(f"malformed CSV {path}: {exc}") from exc


def load_observations(path) -> pd.DataFrame:
    """Read observations.csv (person_id,date,cd4; ISO-8601 dates)."""
    df = _read_csv(path)
    missing = [c for c in OBSERVATION_COLUMNS if c not in df.columns]
    if missing:
        raise DataError(f"observations file missing columns: {missing}")
    df["date"] = pd.to_datetime(df["date"], format="ISO8601")
    df["cd4"] = df["cd4"].astype(float)
    if (df["cd4"] < 0).any():
        bad = df.loc[df["cd4"] < 0, "person_id"].tolist()[:5]
        raise DataError(f"negative cd4 values for persons {bad}")
    return df[OBSERVATION_COLUMNS]


def load_persons(path) -> pd.DataFrame:
    """Read persons.csv; empty art_init_date means unknown initiation."""
    df = _read_csv(path)
    missing = [c for c in PERSON_COLUMNS if c not in df.columns]
    if missing:
        raise DataError(f"persons file missing columns: {missing}")
    df["dg_ever"] = df["dg_ever"].map(
        {1: True, 0: False, "1": True, "0": False,
         True: True, False: False, "true": True, "false": False})
    if df["dg_ever"].isna().any():
        raise DataError("dg_ever must be 0/1 or true/false for every person")
    if not df["sex"].isin(["female", "male"]).all():
        raise DataError("sex must be 'female' or 'male'")
    df["birth_year"] = df["birth_year"].astype(int)
    df["education_years"] = df["education_years"].astype(int)
    df["road_distance_cat"] = df["road_distance_cat"].astype(int)
    df["art_init_date"] = pd.to_datetime(df["art_init_date"], format="ISO8601",
                                         errors="coerce")
    if df["person_id"].duplicated().any():
        dupes = df.loc[df["person_id"].duplicated(), "person_id"].tolist()[:5]
        raise DataError(f"duplicate person_id in persons file: {dupes}")
    return df[PERSON_COLUMNS]


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def build_intervals(observations: pd.DataFrame,
                    persons: pd.DataFrame) -> PanelDataset:
    """Pair consecutive observations per person into annualized-change intervals.

    Persons with fewer than three observations are dropped. Duplicate
    (person_id, date) rows and observations for unknown persons are rejected.
    """
    obs = observations.copy()
    obs["date"] = pd.to_datetime(obs["date"])

    dup = obs.duplicated(subset=["person_id", "date"], keep=False)
    if dup.any():
        keys = (obs.loc[dup, ["person_id", "date"]]
                .drop_duplicates().head(10).to_records(index=False).tolist())
        raise DataError(f"duplicate (person_id, date) observations: {keys}")

    known = set(persons["person_id"])
    unknown = set(obs["person_id"]) - known
    if unknown:
        raise DataError(f"observations reference unknown persons: "
                        f"{sorted(unknown)[:10]}")

    pidx = persons.set_index("person_id")
    ages = obs["date"].dt.year.to_numpy() - \
        pidx.loc[obs["person_id"], "birth_year"].to_numpy()
    if ((ages < 10) | (ages > 110)).any():
        bad = obs.loc[(ages < 10) | (ages > 110), "person_id"].unique()[:5]
        raise DataError(f"implied age outside [10, 110] for persons {list(bad)}")

    obs = obs.sort_values(["person_id", "date"], kind="stable").reset_index(drop=True)
    counts = obs.groupby("person_id")["date"].transform("size")
    dropped_persons = int(obs.loc[counts < 3, "person_id"].nunique())
    obs = obs[counts >= 3].reset_index(drop=True)

    same_person = obs["person_id"].eq(obs["person_id"].shift(-1))
    start = obs[same_person.fillna(False)].reset_index(drop=True)
    end = obs.shift(-1)[same_person.fillna(False)].reset_index(drop=True)

    delta_days = (end["date"] - start["date"]).dt.days.astype(float)
    delta_years = delta_days / DAYS_PER_YEAR
    intervals = pd.DataFrame({
        "person_id": start["person_id"],
        "start_date": start["date"],
        "end_date": end["date"],
        "start_cd4": start["cd4"].astype(float),
        "end_cd4": end["cd4"].astype(float),
        "delta_days": delta_days,
        "delta_years": delta_years,
        "annualized_change": (end["cd4"] - start["cd4"]) / delta_years,
        "calendar_year": start["date"].dt.year.astype(int),
    })

    init = pidx["art_init_date"].reindex(intervals["person_id"]).to_numpy()
    intervals["post_initiation"] = np.where(
        pd.isna(init), False, intervals["start_date"].to_numpy() >= init)
    intervals["start_bin"] = -1
    intervals["first_after_crossing"] = False

    ds = PanelDataset(persons=pidx, intervals=intervals)
    return ds.with_provenance("build", {
        "persons_in": int(persons["person_id"].nunique()),
        "persons_dropped_lt3_obs": dropped_persons,
        "persons_retained": int(intervals["person_id"].nunique()),
        "intervals": len(intervals),
    })


# ---------------------------------------------------------------------------
# Trimming
# ---------------------------------------------------------------------------

def _nearest_rank_cutoffs(values: np.ndarray,
                          lower_pct: float, upper_pct: float):
    """Nearest-rank trim cutoffs over pooled values.

    Lower cutoff is the order statistic just past the bottom lower_pct share,
    upper cutoff the ceil(n*upper_pct/100)-th order statistic, so the bottom
    and top tails are removed symmetrically. Repeated trimming stabilizes
    once the implied tail rank floors to zero (e.g. a second 1/99 pass on
    fewer than 100 rows removes nothing).
    """
    srt = np.sort(values)
    n = len(srt)
    k_lo = min(int(math.floor(n * lower_pct / 100.0)), n - 1)
    k_hi = max(int(math.ceil(n * upper_pct / 100.0)), 1)
    return srt[k_lo], srt[k_hi - 1]


def trim_outliers(ds: PanelDataset, lower_pct: float = 1.0,
                  upper_pct: float = 99.0) -> PanelDataset:
    """Drop intervals with annualized change in the extreme percentile tails."""
    if lower_pct >= upper_pct:
        raise ConfigError(
            f"lower_pct ({lower_pct}) must be below upper_pct ({upper_pct})")
    if ds.n_intervals == 0:
        raise DataError("cannot trim an empty dataset")
    vals = ds.intervals["annualized_change"].to_numpy()
    lo, hi = _nearest_rank_cutoffs(vals, lower_pct, upper_pct)
    keep = (vals >= lo) & (vals <= hi)
    out = replace(ds, intervals=ds.intervals[keep].reset_index(drop=True))
    return out.with_provenance("trim", {
        "lower_pct": lower_pct,
        "upper_pct": upper_pct,
        "lower_cutoff": float(lo),
        "upper_cutoff": float(hi),
        "removed": int((~keep).sum()),
    })


# ---------------------------------------------------------------------------
# Annotation
# ---------------------------------------------------------------------------

def start_bins(values: np.ndarray, bin_width: float = DEFAULT_BIN_WIDTH) -> np.ndarray:
    """Width-`bin_width` bin index of each start value, pooled at >= 500."""
    terminal = int(TERMINAL_POOL_AT // bin_width)
    return np.minimum(np.floor(values / bin_width).astype(int), terminal)


def annotate_intervals(ds: PanelDataset, threshold: float = DEFAULT_THRESHOLD,
                       bin_width: float = DEFAULT_BIN_WIDTH) -> PanelDataset:
    """Attach start-value bins and the first-after-crossing flag.

    The flag marks the interval whose start observation is the person's first
    ever above the threshold, provided an earlier sub-threshold observation
    exists. Repeat upward crossings are counted in provenance but not flagged.
    """
    if bin_width <= 0:
        raise ConfigError("bin_width must be positive")
    iv = ds.intervals.sort_values(["person_id", "start_date"],
                                  kind="stable").reset_index(drop=True)
    iv["start_bin"] = start_bins(iv["start_cd4"].to_numpy(), bin_width)

    above = iv["start_cd4"].to_numpy() > threshold
    above_s = pd.Series(above, index=iv.index)
    n_above_so_far = above_s.groupby(iv["person_id"]).cumsum()
    is_first_obs = ~iv["person_id"].duplicated()
    iv["first_after_crossing"] = above & (n_above_so_far.to_numpy() == 1) \
        & (~is_first_obs.to_numpy())

    # upward crossing = sub-threshold start followed by an above-threshold start
    prev_below = (~above_s).groupby(iv["person_id"]).shift(1, fill_value=False)
    crossing = above & prev_below.to_numpy().astype(bool)
    crossings_per_person = pd.Series(crossing).groupby(iv["person_id"]).sum()
    repeat = int((crossings_per_person > 1).sum())

    out = replace(ds, intervals=iv)
    return out.with_provenance("annotate", {
        "threshold": threshold,
        "bin_width": bin_width,
        "flagged_first_after_crossing": int(iv["first_after_crossing"].sum()),
        "persons_with_repeat_crossings": repeat,
    })


# ---------------------------------------------------------------------------
# Population filters
# ---------------------------------------------------------------------------

def filter_population(ds: PanelDataset, which: str,
                      start=None, end=None) -> PanelDataset:
    """Restrict to a named subpopulation of intervals.

    'post_initiation' keeps post-ART intervals; 'pre_initiation' keeps the
    complement among persons with a known initiation date; 'date_window'
    keeps intervals with both endpoints inside [start, end].
    """
    iv = ds.intervals
    if which == "all":
        keep = pd.Series(True, index=iv.index)
    elif which == "post_initiation":
        keep = iv["post_initiation"].astype(bool)
    elif which == "pre_initiation":
        has_init = ds.persons["art_init_date"].notna()
        known = iv["person_id"].map(has_init).fillna(False).astype(bool)
        keep = ~iv["post_initiation"].astype(bool) & known
    elif which == "date_window":
        if start is None or end is None:
            raise ConfigError("date_window filter requires start and end dates")
        start = pd.Timestamp(start)
        end = pd.Timestamp(end)
        keep = (iv["start_date"] >= start) & (iv["end_date"] <= end)
    else:
        raise ConfigError(f"unknown population filter: {which!r}")

    out = replace(ds, intervals=iv[keep].reset_index(drop=True))
    return out.with_provenance(f"filter_{which}", {
        "kept": int(keep.sum()),
        "removed": int((~keep).sum()),
    })


# ---------------------------------------------------------------------------
# Analysis frame
# ---------------------------------------------------------------------------

def interval_frame(ds: PanelDataset) -> pd.DataFrame:
    """Intervals joined with person covariates plus derived regressors."""
    iv = ds.intervals.reset_index(drop=True)
    p = ds.persons.reindex(iv["person_id"])
    df = iv.copy()
    df["dg_ever"] = p["dg_ever"].to_numpy().astype(float)
    df["sex"] = p["sex"].to_numpy()
    df["female"] = (p["sex"].to_numpy() == "female").astype(float)
    df["education_years"] = p["education_years"].to_numpy()
    df["road_distance_cat"] = p["road_distance_cat"].to_numpy()
    df["age"] = (iv["calendar_year"].to_numpy()
                 - p["birth_year"].to_numpy()).astype(float)
    df["age_sq"] = df["age"] ** 2
    return df


def write_intervals_csv(ds: PanelDataset, path) -> None:
    iv = ds.intervals.copy()
    iv["start_date"] = iv["start_date"].dt.strftime("%Y-%m-%d")
    iv["end_date"] = iv["end_date"].dt.strftime("%Y-%m-%d")
    iv["post_initiation"] = iv["post_initiation"].astype(int)
    iv["first_after_crossing"] = iv["first_after_crossing"].astype(int)
    iv[INTERVAL_COLUMNS].to_csv(path, index=False, lineterminator="\n")
