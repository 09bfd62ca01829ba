import json
from pathlib import Path

import pandas as pd
import pytest

from threshold_gap.cli import main


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("simdata")
    cfg = out / "cfg.json"
    cfg.write_text(json.dumps({"n_individuals": 700}))
    assert main(["simulate", "--config", str(cfg), "--seed", "7",
                 "--out", str(out)]) == 0
    return out


def run_sub(data_dir, tmp_path, *args):
    return main([args[0],
                 "--observations", str(data_dir / "observations.csv"),
                 "--persons", str(data_dir / "persons.csv"),
                 "--out", str(tmp_path), *args[1:]])


class TestSimulate:
    def test_outputs_exist(self, data_dir):
        for name in ("persons.csv", "observations.csv", "truth.csv",
                     "truth_summary.json"):
            assert (data_dir / name).exists()

    def test_seed_is_required(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["simulate", "--out", str(tmp_path)])
        assert exc.value.code == 2

    def test_same_seed_byte_identical(self, data_dir, tmp_path_factory):
        again = tmp_path_factory.mktemp("again")
        cfg = again / "cfg.json"
        cfg.write_text(json.dumps({"n_individuals": 700}))
        assert main(["simulate", "--config", str(cfg), "--seed", "7",
                     "--out", str(again)]) == 0
        for name in ("persons.csv", "observations.csv", "truth.csv"):
            assert (again / name).read_bytes() == \
                (data_dir / name).read_bytes()

    def test_bad_config_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"n_individuals": -5}))
        assert main(["simulate", "--config", str(cfg), "--seed", "1",
                     "--out", str(tmp_path)]) == 2
        assert "configuration error" in capsys.readouterr().err


class TestSubcommands:
    def test_intervals(self, data_dir, tmp_path):
        assert run_sub(data_dir, tmp_path, "intervals") == 0
        iv = pd.read_csv(tmp_path / "intervals.csv")
        assert {"person_id", "annualized_change",
                "start_bin"} <= set(iv.columns)
        prov = json.loads((tmp_path / "provenance.json").read_text())
        assert "trim" in prov and "annotate" in prov

    def test_describe(self, data_dir, tmp_path):
        assert run_sub(data_dir, tmp_path, "describe") == 0
        summary = json.loads((tmp_path / "describe.json").read_text())
        assert "age" in summary["variables"]
        assert summary["variables"]["age"]["dg"]["mean"] > \
            summary["variables"]["age"]["non_dg"]["mean"]

    def test_did(self, data_dir, tmp_path):
        assert run_sub(data_dir, tmp_path, "did", "--model", "fe",
                       "--population", "post-init") == 0
        res = json.loads((tmp_path / "did_post_init_fe.json").read_text())
        assert "in_window:dg_ever" in res["coefficients"]

    def test_binned(self, data_dir, tmp_path):
        assert run_sub(data_dir, tmp_path, "binned") == 0
        tbl = pd.read_csv(tmp_path / "binned_annualized_change.csv")
        assert {"bin", "coef", "ci_lo", "ci_hi"} <= set(tbl.columns)
        assert (tmp_path / "bin_means.csv").exists()
        assert (tmp_path / "bin_percentiles.csv").exists()

    def test_sweep_has_51_rows(self, data_dir, tmp_path):
        assert run_sub(data_dir, tmp_path, "sweep", "--model", "fe",
                       "--population", "post-init") == 0
        tbl = pd.read_csv(tmp_path / "sweep_post_init_fe.csv")
        assert len(tbl) == 51

    def test_time_between(self, data_dir, tmp_path):
        assert run_sub(data_dir, tmp_path, "time-between",
                       "--column", "2") == 0
        out = json.loads(
            (tmp_path / "time_between_col2_all_fe.json").read_text())
        assert "qualified:dg_ever" in out["coefficients"]

    def test_law_change(self, data_dir, tmp_path):
        assert run_sub(data_dir, tmp_path, "law-change") == 0
        assert (tmp_path / "law_change_pooled_triple_ols.json").exists()

    def test_density(self, data_dir, tmp_path, capsys):
        assert run_sub(data_dir, tmp_path, "density",
                       "--group", "all") == 0
        hist = pd.read_csv(tmp_path / "histogram.csv")
        assert list(hist.columns) == ["bin_lo", "bin_hi", "count", "group"]
        res = json.loads((tmp_path / "density_all.json").read_text())
        assert res["z"] == pytest.approx(res["theta"] / res["se"])
        assert "Cattaneo" in capsys.readouterr().out


class TestExitCodes:
    def test_missing_input_file_exits_1(self, tmp_path, capsys):
        code = main(["describe",
                     "--observations", str(tmp_path / "none.csv"),
                     "--persons", str(tmp_path / "none.csv"),
                     "--out", str(tmp_path)])
        assert code == 1
        assert "data error" in capsys.readouterr().err

    def test_unknown_subcommand_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["did", "--bogus"])
        assert exc.value.code == 2

    def test_bad_window_exits_2(self, data_dir, tmp_path, capsys):
        assert run_sub(data_dir, tmp_path, "did",
                       "--window", "oops") == 2

    def test_malformed_data_exits_1(self, tmp_path, capsys):
        (tmp_path / "observations.csv").write_text(
            "person_id,date,cd4\na,2005-01-01,-4\n")
        (tmp_path / "persons.csv").write_text(
            "person_id,dg_ever,sex,birth_year,education_years,"
            "road_distance_cat,art_init_date\na,1,female,1970,8,0,\n")
        assert run_sub(tmp_path, tmp_path, "intervals") == 1
        assert "negative cd4" in capsys.readouterr().err


def test_determinism_across_thread_settings(data_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("THRESHOLD_GAP_THREADS", "1")
    one = tmp_path / "one"
    assert run_sub(data_dir, one, "sweep") == 0
    monkeypatch.setenv("THRESHOLD_GAP_THREADS", "8")
    eight = tmp_path / "eight"
    assert run_sub(data_dir, eight, "sweep") == 0
    assert (one / "sweep_post_init_fe.csv").read_bytes() == \
        (eight / "sweep_post_init_fe.csv").read_bytes()
