import numpy as np
import pandas as pd
import pytest

from threshold_gap.panel import (PanelDataset, annotate_intervals,
                                 build_intervals, trim_outliers)
from threshold_gap.synthgen import SimConfig, generate_panel


def make_persons(rows):
    """rows: list of (person_id, dg_ever) or full dicts."""
    out = []
    for r in rows:
        if isinstance(r, dict):
            d = dict(person_id=r["person_id"], dg_ever=r.get("dg_ever", 0),
                     sex=r.get("sex", "female"),
                     birth_year=r.get("birth_year", 1970),
                     education_years=r.get("education_years", 8),
                     road_distance_cat=r.get("road_distance_cat", 0),
                     art_init_date=r.get("art_init_date", pd.NaT))
        else:
            pid, dg = r
            d = dict(person_id=pid, dg_ever=dg, sex="female",
                     birth_year=1970, education_years=8,
                     road_distance_cat=0, art_init_date=pd.NaT)
        out.append(d)
    df = pd.DataFrame(out)
    df["art_init_date"] = pd.to_datetime(df["art_init_date"])
    return df


def make_observations(rows):
    """rows: list of (person_id, day_offset_or_date, cd4)."""
    recs = []
    for pid, when, cd4 in rows:
        if isinstance(when, (int, np.integer)):
            when = pd.Timestamp("2005-01-01") + pd.Timedelta(days=int(when))
        recs.append(dict(person_id=pid, date=pd.Timestamp(when),
                         cd4=float(cd4)))
    return pd.DataFrame(recs)


def intervals_only_dataset(values, person_ids=None):
    """A PanelDataset whose intervals carry given annualized_change values."""
    values = np.asarray(values, dtype=float)
    n = len(values)
    pids = person_ids if person_ids is not None \
        else [f"q{i // 3:04d}" for i in range(n)]
    start = pd.to_datetime("2005-01-01") + pd.to_timedelta(
        np.arange(n), unit="D")
    iv = pd.DataFrame({
        "person_id": pids,
        "start_date": start,
        "end_date": start + pd.Timedelta(days=365),
        "start_cd4": np.full(n, 180.0),
        "end_cd4": np.full(n, 180.0) + values * (365 / 365.25),
        "delta_days": np.full(n, 365.0),
        "delta_years": np.full(n, 365 / 365.25),
        "annualized_change": values,
        "calendar_year": np.full(n, 2005),
        "post_initiation": np.ones(n, dtype=bool),
        "start_bin": np.full(n, 7),
        "first_after_crossing": np.zeros(n, dtype=bool),
    })
    persons = make_persons(sorted({(p, 0) for p in pids})).set_index(
        "person_id")
    return PanelDataset(persons=persons, intervals=iv)


def build_annotated(observations, persons, trim=False):
    ds = build_intervals(observations, persons)
    if trim:
        ds = trim_outliers(ds)
    return annotate_intervals(ds)


@pytest.fixture(scope="session")
def sim_small_raw():
    cfg = SimConfig(n_individuals=900, seed=11)
    return generate_panel(cfg)


@pytest.fixture(scope="session")
def sim_small(sim_small_raw):
    persons, observations, _ = sim_small_raw
    pers = persons.copy()
    pers["art_init_date"] = pd.to_datetime(pers["art_init_date"],
                                           errors="coerce")
    pers["dg_ever"] = pers["dg_ever"].astype(bool)
    obs = observations.copy()
    obs["date"] = pd.to_datetime(obs["date"])
    ds = build_intervals(obs, pers)
    ds = trim_outliers(ds)
    return annotate_intervals(ds)
