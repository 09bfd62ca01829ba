"""Deterministic synthetic cohort generator with injectable manipulation.

Generates persons and dated CD4 observations in the exact CSV schemas the
panel builder consumes, plus a truth table holding, per generated interval,
the expected recovery rate and whether the manipulation offset was applied.
Everything is a pure function of the config (including the seed), with a
per-person substream so generation order cannot change the output.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import optimize
from scipy import stats as sps

from .errors import ConfigError
from .panel import DAYS_PER_YEAR, start_bins

BASE_DATE = pd.Timestamp("2003-01-01")
HORIZON = pd.Timestamp("2012-12-31")
LAW_CHANGE_END = pd.Timestamp("2008-12-31")
MIN_GAP_DAYS = 30.0
FEMALE_FRACTION = 0.71
AGE_BOUNDS = (16.0, 90.0)
DG_AGE = (40.0, 13.0)       # group mean / sd of age at entry
NON_DG_AGE = (30.0, 12.0)
DG_EDUC = (5.5, 4.3)
NON_DG_EDUC = (8.4, 3.9)
START_CD4_RANGE = (10.0, 330.0)
VISITS_RANGE = (3, 9)
INIT_VISIT_MAX = 1          # ART initiation at visit 0 or 1

# Linear decline through (37.5, 215): recovery fastest when sickest,
# reaching zero at the 500-cell plateau.
DEFAULT_RECOVERY_CURVE = ((0.0, 215.0 * 500.0 / 462.5), (500.0, 0.0),
                          (700.0, 0.0))


@dataclass
class SimConfig:
    """Full parameterization of the synthetic cohort generator."""

    n_individuals: int = 8000
    dg_fraction: float = 0.18
    visit_gap_mean_days: float = 320.0
    visit_gap_sd_days: float = 245.0
    recovery_curve: Sequence[Tuple[float, float]] = DEFAULT_RECOVERY_CURVE
    pre_init_drift: float = -40.0
    noise_sd: float = 5.0
    delta: float = -30.0
    manipulation_window: Tuple[float, float] = (150.0, 250.0)
    qualified_gap_shift_days: float = 17.0
    era_effect: Optional[float] = None  # pre-2008 delta multiplier
    seed: Optional[int] = None

    def __post_init__(self):
        self.recovery_curve = tuple((float(c), float(r))
                                    for c, r in self.recovery_curve)
        self.manipulation_window = (float(self.manipulation_window[0]),
                                    float(self.manipulation_window[1]))
        self.validate()

    def validate(self) -> None:
        if self.n_individuals <= 0:
            raise ConfigError("n_individuals must be positive")
        if not 0.0 <= self.dg_fraction <= 1.0:
            raise ConfigError("dg_fraction must be in [0, 1]")
        if self.visit_gap_sd_days < 0 or self.noise_sd < 0:
            raise ConfigError("standard deviations must be non-negative")
        if self.visit_gap_mean_days <= MIN_GAP_DAYS:
            raise ConfigError(f"visit_gap_mean_days must exceed the "
                              f"{MIN_GAP_DAYS:.0f}-day minimum gap")
        lo, hi = self.manipulation_window
        if lo >= hi:
            raise ConfigError("manipulation_window must be a [lo, hi) pair")
        xs = [c for c, _ in self.recovery_curve]
        rs = [r for _, r in self.recovery_curve]
        if sorted(xs) != xs:
            raise ConfigError("recovery_curve anchors must be sorted by CD4")
        if any(b > a for a, b in zip(rs, rs[1:])):
            raise ConfigError("recovery_curve must be non-increasing")
        if self.pre_init_drift >= 0:
            raise ConfigError("pre_init_drift must be negative")

    @classmethod
    def from_json(cls, path) -> "SimConfig":
        with open(path) as fh:
            raw = json.load(fh)
        return cls(**raw)

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(asdict(self), indent=indent)


def _truncated_loc(target: float, sd: float, lo: float,
                   hi: float = np.inf) -> float:
    """Location for a truncated normal whose truncated mean hits target."""
    if sd == 0:
        return target

    def gap(mu):
        return sps.truncnorm.mean((lo - mu) / sd, (hi - mu) / sd,
                                  loc=mu, scale=sd) - target

    return float(optimize.brentq(gap, target - 6 * sd, target + 6 * sd,
                                 xtol=1e-10))


def _draw_truncated(gen: np.random.Generator, loc: float, sd: float,
                    lo: float, hi: float = np.inf) -> float:
    if sd == 0:
        return loc
    while True:
        x = gen.normal(loc, sd)
        if lo <= x <= hi:
            return x


def evaluate_curve(curve, cd4) -> np.ndarray:
    xs = np.array([c for c, _ in curve])
    rs = np.array([r for _, r in curve])
    return np.interp(cd4, xs, rs)


def generate_panel(config: SimConfig):
    """Simulate the cohort; returns (persons, observations, truth) frames."""
    if config.seed is None:
        raise ConfigError("simulation requires an explicit seed")
    config.validate()

    gap_loc = _truncated_loc(config.visit_gap_mean_days,
                             config.visit_gap_sd_days, MIN_GAP_DAYS)
    age_loc_dg = _truncated_loc(DG_AGE[0], DG_AGE[1], *AGE_BOUNDS)
    age_loc_non = _truncated_loc(NON_DG_AGE[0], NON_DG_AGE[1], *AGE_BOUNDS)
    win_lo, win_hi = config.manipulation_window
    era = 1.0 if config.era_effect is None else float(config.era_effect)
    horizon_day = (HORIZON - BASE_DATE).days
    law_end_day = (LAW_CHANGE_END - BASE_DATE).days

    persons: List[dict] = []
    obs_pid: List[str] = []
    obs_day: List[int] = []
    obs_cd4: List[float] = []
    truth: List[dict] = []

    for i in range(config.n_individuals):
        gen = np.random.default_rng(
            np.random.SeedSequence(entropy=config.seed, spawn_key=(i,)))
        pid = f"p{i:06d}"
        dg = bool(gen.random() < config.dg_fraction)
        age_loc, age_sd = (age_loc_dg, DG_AGE[1]) if dg \
            else (age_loc_non, NON_DG_AGE[1])
        age0 = _draw_truncated(gen, age_loc, age_sd, *AGE_BOUNDS)
        sex = "female" if gen.random() < FEMALE_FRACTION else "male"
        edu_mean, edu_sd = DG_EDUC if dg else NON_DG_EDUC
        educ = int(np.clip(round(gen.normal(edu_mean, edu_sd)), 0, 20))
        road = int(gen.integers(0, 5))
        n_visits = int(gen.integers(VISITS_RANGE[0], VISITS_RANGE[1] + 1))
        first_day = int(gen.integers(0, 731))
        init_idx = min(int(gen.integers(0, INIT_VISIT_MAX + 1)), n_visits - 1)
        cd4 = float(gen.uniform(*START_CD4_RANGE))

        first_date = BASE_DATE + pd.Timedelta(days=first_day)
        persons.append(dict(
            person_id=pid, dg_ever=int(dg), sex=sex,
            birth_year=int(first_date.year - round(age0)),
            education_years=educ, road_distance_cat=road,
            art_init_date=None,  # filled once the initiation visit is reached
        ))
        day = first_day
        days_i = [day]
        cd4_i = [cd4]

        for j in range(1, n_visits):
            qualified = cd4 < 200.0
            gap = _draw_truncated(gen, gap_loc, config.visit_gap_sd_days,
                                  MIN_GAP_DAYS)
            shift = config.qualified_gap_shift_days if (dg and qualified) \
                else 0.0
            gap = max(gap + shift, 1.0)
            gap_days = float(round(gap))
            next_day = day + int(gap_days)
            if next_day > horizon_day:
                break

            post = (j - 1) >= init_idx
            rate = float(evaluate_curve(config.recovery_curve, cd4)) if post \
                else config.pre_init_drift
            eligible = bool(dg and post and win_lo <= cd4 < win_hi)
            offset = config.delta * (era if day <= law_end_day else 1.0) \
                if eligible else 0.0
            manip = offset != 0.0
            rate += offset
            eps = gen.normal(0.0, config.noise_sd) if config.noise_sd > 0 \
                else 0.0
            end_cd4 = max(cd4 + (rate + eps) * gap_days / DAYS_PER_YEAR, 0.0)

            truth.append(dict(
                person_id=pid, obs_index=j - 1,
                start_date=(BASE_DATE + pd.Timedelta(days=day)),
                start_cd4=cd4, expected_rate=rate, manipulated=int(manip),
                noise=eps, gap_days=gap_days, gap_shift=shift,
                qualified=int(qualified), post_initiation=int(post),
                dg_ever=int(dg),
            ))
            day = next_day
            cd4 = end_cd4
            days_i.append(day)
            cd4_i.append(cd4)

        obs_pid.extend([pid] * len(days_i))
        obs_day.extend(days_i)
        obs_cd4.extend(cd4_i)
        # initiation date: the init_idx-th visit, when it was realized
        persons[-1]["art_init_date"] = (
            (BASE_DATE + pd.Timedelta(days=days_i[init_idx]))
            .strftime("%Y-%m-%d") if init_idx < len(days_i) else "")

    persons_df = pd.DataFrame(persons)
    observations_df = pd.DataFrame({
        "person_id": obs_pid,
        "date": [(BASE_DATE + pd.Timedelta(days=d)).strftime("%Y-%m-%d")
                 for d in obs_day],
        "cd4": obs_cd4,
    })
    truth_df = pd.DataFrame(truth)
    truth_df["start_date"] = truth_df["start_date"].dt.strftime("%Y-%m-%d")
    return persons_df, observations_df, truth_df


def describe_truth(truth: pd.DataFrame) -> dict:
    """Ground-truth summary: the quantities the detectors try to estimate."""
    out = {
        "n_intervals": int(len(truth)),
        "manipulation_prevalence": float(truth["manipulated"].mean()),
        "mean_expected_rate": float(truth["expected_rate"].mean()),
    }
    # bin profile over post-initiation rows, where the curve applies
    post = truth[truth["post_initiation"] == 1]
    bins = start_bins(post["start_cd4"].to_numpy(), 25.0)
    out["expected_rate_by_bin"] = {
        int(b): float(m) for b, m in
        post.groupby(bins)["expected_rate"].mean().items()
    }
    qual = truth["qualified"].astype(bool)
    dg = truth["dg_ever"].astype(bool)
    out["gap_mean_by_qualification"] = {
        "qualified": float(truth.loc[qual, "gap_days"].mean())
        if qual.any() else None,
        "not_qualified": float(truth.loc[~qual, "gap_days"].mean())
        if (~qual).any() else None,
    }
    # compare within qualified rows so visit-censoring hits both groups alike
    if (qual & dg).any() and (qual & ~dg).any():
        out["realized_gap_shift"] = (
            float(truth.loc[qual & dg, "gap_days"].mean())
            - float(truth.loc[qual & ~dg, "gap_days"].mean()))
    else:
        out["realized_gap_shift"] = 0.0
    return out
