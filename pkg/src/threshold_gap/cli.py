"""Command-line entry point: every pipeline stage as a subcommand.

Exit codes: 0 success, 1 data error, 2 configuration/usage error. All file
outputs are written atomically (temp file + rename) into the --out
directory, and every random quantity flows through an explicit --seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats

from . import density as density_mod
from . import panel, recipes
from .errors import ConfigError, DataError
from .synthgen import SimConfig, describe_truth, generate_panel


# ---------------------------------------------------------------------------
# atomic output helpers
# ---------------------------------------------------------------------------

def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_csv(df: pd.DataFrame, path: Path) -> None:
    _atomic_write_text(path, df.to_csv(index=False, lineterminator="\n"))


# ---------------------------------------------------------------------------
# shared pipeline
# ---------------------------------------------------------------------------

def _add_input_args(sp) -> None:
    sp.add_argument("--observations", required=True,
                    help="observations.csv path")
    sp.add_argument("--persons", required=True, help="persons.csv path")
    sp.add_argument("--out", default=".", help="output directory")
    sp.add_argument("--threshold", type=float, default=200.0)
    sp.add_argument("--bin-width", type=float, default=25.0)
    sp.add_argument("--trim-lower", type=float, default=1.0)
    sp.add_argument("--trim-upper", type=float, default=99.0)
    sp.add_argument("--no-trim", action="store_true",
                    help="skip percentile trimming")


def _build_dataset(args) -> panel.PanelDataset:
    obs = panel.load_observations(args.observations)
    pers = panel.load_persons(args.persons)
    ds = panel.build_intervals(obs, pers)
    if not args.no_trim:
        ds = panel.trim_outliers(ds, args.trim_lower, args.trim_upper)
    return panel.annotate_intervals(ds, threshold=args.threshold,
                                    bin_width=args.bin_width)


def _parse_window(text: str):
    try:
        lo, hi = text.split(":")
        return float(lo), float(hi)
    except ValueError:
        raise ConfigError(f"window must look like 'lo:hi', got {text!r}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_simulate(args) -> int:
    cfg = SimConfig.from_json(args.config) if args.config else SimConfig()
    cfg.seed = args.seed
    persons, observations, truth = generate_panel(cfg)
    out = Path(args.out)
    _atomic_write_csv(persons, out / "persons.csv")
    _atomic_write_csv(observations, out / "observations.csv")
    _atomic_write_csv(truth, out / "truth.csv")
    summary = describe_truth(truth)
    _atomic_write_text(out / "truth_summary.json",
                       json.dumps(summary, indent=2, sort_keys=True))
    print(f"wrote {len(persons)} persons / {len(observations)} observations "
          f"to {out}")
    return 0


def _cmd_intervals(args) -> int:
    ds = _build_dataset(args)
    out = Path(args.out)
    tmp = out / "intervals.csv"
    out.mkdir(parents=True, exist_ok=True)
    fd, tmppath = tempfile.mkstemp(dir=out, prefix="intervals.csv.")
    os.close(fd)
    panel.write_intervals_csv(ds, tmppath)
    os.replace(tmppath, tmp)
    _atomic_write_text(out / "provenance.json", ds.provenance_json())
    print(f"wrote {ds.n_intervals} intervals for {ds.n_persons} persons")
    return 0


def _welch(a: np.ndarray, b: np.ndarray):
    t, p = stats.ttest_ind(a, b, equal_var=False)
    return float(a.mean() - b.mean()), float(p)


def _cmd_describe(args) -> int:
    ds = _build_dataset(args)
    df = panel.interval_frame(ds)
    first = df.sort_values(["person_id", "start_date"],
                           kind="stable").groupby("person_id").head(1)
    person_vars = {
        "age": first["age"], "female": first["female"],
        "education_years": first["education_years"].astype(float),
    }
    interval_vars = {
        "cd4_change": df["end_cd4"] - df["start_cd4"],
        "days_between": df["delta_days"],
        "annualized_change": df["annualized_change"],
    }
    dg_p = first["dg_ever"] > 0
    dg_i = df["dg_ever"] > 0

    rows = {}
    for name, series in person_vars.items():
        v = series.to_numpy(dtype=float)
        diff, p = _welch(v[dg_p.to_numpy()], v[~dg_p.to_numpy()])
        rows[name] = _describe_row(v, dg_p.to_numpy(), diff, p)
    for name, series in interval_vars.items():
        v = series.to_numpy(dtype=float)
        diff, p = _welch(v[dg_i.to_numpy()], v[~dg_i.to_numpy()])
        rows[name] = _describe_row(v, dg_i.to_numpy(), diff, p)
    summary = {
        "variables": rows,
        "n_intervals": ds.n_intervals,
        "n_intervals_dg": int(dg_i.sum()),
        "n_persons": ds.n_persons,
        "n_persons_dg": int(dg_p.sum()),
    }
    _atomic_write_text(Path(args.out) / "describe.json",
                       json.dumps(summary, indent=2, sort_keys=True))
    print(_format_describe(summary))
    return 0


def _describe_row(v, dg_mask, diff, p):
    return {
        "all": {"mean": float(v.mean()), "sd": float(v.std(ddof=1))},
        "non_dg": {"mean": float(v[~dg_mask].mean()),
                   "sd": float(v[~dg_mask].std(ddof=1))},
        "dg": {"mean": float(v[dg_mask].mean()),
               "sd": float(v[dg_mask].std(ddof=1))},
        "difference": diff,
        "p_value": p,
    }


def _format_describe(summary: dict) -> str:
    lines = [f"{'':20}{'all':>16}{'non-DG':>16}{'DG':>16}"
             f"{'diff (p)':>18}"]
    for name, row in summary["variables"].items():
        lines.append(
            f"{name:20}"
            f"{row['all']['mean']:>8.2f} ({row['all']['sd']:.1f})"
            f"{row['non_dg']['mean']:>9.2f} ({row['non_dg']['sd']:.1f})"
            f"{row['dg']['mean']:>9.2f} ({row['dg']['sd']:.1f})"
            f"{row['difference']:>10.2f} ({row['p_value']:.3f})")
    lines.append(f"intervals: {summary['n_intervals']} "
                 f"(DG {summary['n_intervals_dg']})   "
                 f"persons: {summary['n_persons']} "
                 f"(DG {summary['n_persons_dg']})")
    return "\n".join(lines)


def _cmd_did(args) -> int:
    ds = _build_dataset(args)
    res = recipes.run_did(ds, window=_parse_window(args.window),
                          population=args.population, model=args.model,
                          window_def=args.window_def)
    stem = f"did_{args.population.replace('-', '_')}_{args.model}"
    _atomic_write_text(Path(args.out) / f"{stem}.json", res.to_json())
    print(res.format_table())
    return 0


def _cmd_binned(args) -> int:
    ds = _build_dataset(args)
    prof = recipes.run_binned_interactions(ds, outcome=args.outcome)
    stem = f"binned_{args.outcome}"
    out = Path(args.out)
    _atomic_write_csv(prof.table, out / f"{stem}.csv")
    _atomic_write_text(out / f"{stem}.json",
                       json.dumps(prof.to_dict(), indent=2, default=str))
    means, pcts = recipes.run_bin_recovery_stats(ds)
    _atomic_write_csv(means.table, out / "bin_means.csv")
    _atomic_write_csv(pcts.table, out / "bin_percentiles.csv")
    print(prof.table.to_string(index=False))
    return 0


def _cmd_sweep(args) -> int:
    ds = _build_dataset(args)
    lo, hi = _parse_window(args.range)
    sw = recipes.run_threshold_sweep(ds, width=args.width, step=args.step,
                                     sweep_range=(lo, hi), model=args.model,
                                     population=args.population)
    stem = f"sweep_{args.population.replace('-', '_')}_{args.model}"
    _atomic_write_csv(sw.table, Path(args.out) / f"{stem}.csv")
    print(sw.table.to_string(index=False))
    return 0


def _cmd_time_between(args) -> int:
    ds = _build_dataset(args)
    res = recipes.run_time_between(ds, column=args.column)
    model, population, _ = recipes.TIME_BETWEEN_COLUMNS[args.column]
    stem = (f"time_between_col{args.column}_"
            f"{population.replace('-', '_')}_{model}")
    _atomic_write_text(Path(args.out) / f"{stem}.json", res.to_json())
    print(res.format_table())
    return 0


def _cmd_law_change(args) -> int:
    ds = _build_dataset(args)
    results = recipes.run_law_change(ds)
    out = Path(args.out)
    for name, res in results.items():
        _atomic_write_text(out / f"law_change_{name}.json", res.to_json())
        print(f"== {name} ==")
        print(res.format_table())
    return 0


def _cmd_density(args) -> int:
    ds = _build_dataset(args)
    if args.source == "intervals":
        df = panel.interval_frame(ds)
        values = df["start_cd4"].to_numpy(dtype=float)
        dg = df["dg_ever"].to_numpy() > 0
    else:
        obs = panel.load_observations(args.observations)
        pers = panel.load_persons(args.persons).set_index("person_id")
        values = obs["cd4"].to_numpy(dtype=float)
        dg = pers["dg_ever"].reindex(obs["person_id"]).to_numpy().astype(bool)

    out = Path(args.out)
    hist_rows = []
    vrange = (0.0, float(np.ceil(values.max() / args.hist_width))
              * args.hist_width)
    for group, mask in [("dg", dg), ("non_dg", ~dg)]:
        counts, edges = density_mod.build_histogram(values[mask],
                                                    args.hist_width, vrange)
        for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
            hist_rows.append(dict(bin_lo=lo, bin_hi=hi, count=int(c),
                                  group=group))
    _atomic_write_csv(pd.DataFrame(hist_rows), out / "histogram.csv")

    group_mask = {"dg": dg, "non-dg": ~dg,
                  "all": np.ones(len(values), bool)}[args.group]
    res = density_mod.mccrary_test(values[group_mask], cutoff=args.cutoff,
                                   bin_size=args.bin_size,
                                   bandwidth=args.bandwidth)
    _atomic_write_text(out / f"density_{args.group.replace('-', '_')}.json",
                       res.to_json())
    print(f"log-density jump at {args.cutoff:g}: theta={res.theta:.4f} "
          f"se={res.se:.4f} z={res.z:.2f} p={res.p:.4f}")
    print("note: the Cattaneo-Jansson-Ma density test is not implemented; "
          "see the rddensity package for that estimator")
    return 0


# ---------------------------------------------------------------------------
# parser / dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="threshold-gap",
        description="Threshold-manipulation detection toolkit for "
                    "longitudinal running-variable panels")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="generate a synthetic cohort")
    sp.add_argument("--config", help="SimConfig JSON file")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", default=".", help="output directory")
    sp.set_defaults(func=_cmd_simulate)

    sp = sub.add_parser("intervals", help="build + trim + annotate intervals")
    _add_input_args(sp)
    sp.set_defaults(func=_cmd_intervals)

    sp = sub.add_parser("describe", help="group descriptives with t-tests")
    _add_input_args(sp)
    sp.set_defaults(func=_cmd_describe)

    sp = sub.add_parser("did", help="threshold-window DID fit")
    _add_input_args(sp)
    sp.add_argument("--window", default="150:250")
    sp.add_argument("--model", choices=["ols", "fe"], default="ols")
    sp.add_argument("--population",
                    choices=["all", "pre-init", "post-init"], default="all")
    sp.add_argument("--window-def",
                    choices=["start_in_window", "first_after_crossing"],
                    default="start_in_window")
    sp.set_defaults(func=_cmd_did)

    sp = sub.add_parser("binned", help="bin-by-bin interaction profile")
    _add_input_args(sp)
    sp.add_argument("--outcome",
                    choices=["annualized_change", "delta_days"],
                    default="annualized_change")
    sp.set_defaults(func=_cmd_binned)

    sp = sub.add_parser("sweep", help="placebo-threshold sweep")
    _add_input_args(sp)
    sp.add_argument("--model", choices=["ols", "fe"], default="fe")
    sp.add_argument("--population",
                    choices=["all", "pre-init", "post-init"],
                    default="post-init")
    sp.add_argument("--width", type=float, default=100.0)
    sp.add_argument("--step", type=float, default=10.0)
    sp.add_argument("--range", default="0:600")
    sp.set_defaults(func=_cmd_sweep)

    sp = sub.add_parser("time-between", help="time-between-tests DID")
    _add_input_args(sp)
    sp.add_argument("--column", type=int, choices=range(1, 7), default=2)
    sp.set_defaults(func=_cmd_time_between)

    sp = sub.add_parser("law-change", help="pre/post law-change robustness")
    _add_input_args(sp)
    sp.set_defaults(func=_cmd_law_change)

    sp = sub.add_parser("density", help="histograms + density discontinuity")
    _add_input_args(sp)
    sp.add_argument("--cutoff", type=float, default=200.0)
    sp.add_argument("--bandwidth", type=float, default=50.0)
    sp.add_argument("--bin-size", type=float, default=None)
    sp.add_argument("--hist-width", type=float, default=25.0)
    sp.add_argument("--group", choices=["dg", "non-dg", "all"], default="dg")
    sp.add_argument("--source", choices=["intervals", "observations"],
                    default="intervals")
    sp.set_defaults(func=_cmd_density)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
