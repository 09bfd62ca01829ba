import numpy as np
import pandas as pd
import pytest

from threshold_gap.design import (Continuous, Dummies, Interaction,
                                  RegressionSpec, build_design,
                                  extend_design, filter_collinear)
from threshold_gap.errors import ConfigError


@pytest.fixture
def df():
    rng = np.random.default_rng(3)
    n = 120
    return pd.DataFrame({
        "y": rng.normal(size=n),
        "x": rng.normal(size=n),
        "cat3": rng.choice(["a", "b", "c"], size=n, p=[0.5, 0.3, 0.2]),
        "flag": rng.integers(0, 2, size=n).astype(float),
        "pid": rng.integers(0, 20, size=n).astype(str),
    })


def spec_of(terms, absorb=None):
    return RegressionSpec(outcome="y", terms=terms, cluster="pid",
                          absorb=absorb)


class TestDummies:
    def test_three_categories_two_columns_plus_intercept(self, df):
        dm, _ = build_design(spec_of([Dummies("cat3")]), df)
        assert dm.columns[0] == "const"
        assert len(dm.columns) == 3  # const + 2 dummies
        # most frequent category 'a' is the reference
        assert set(dm.columns[1:]) == {"cat3=b", "cat3=c"}
        # adding back the reference indicator makes rows sum to 1 + const
        ref = (df["cat3"] == "a").to_numpy(dtype=float)
        np.testing.assert_allclose(dm.values[:, 1:].sum(axis=1) + ref, 1.0)

    def test_explicit_reference(self, df):
        dm, _ = build_design(spec_of([Dummies("cat3", reference="c")]), df)
        assert set(dm.columns[1:]) == {"cat3=a", "cat3=b"}

    def test_unobserved_reference_rejected(self, df):
        with pytest.raises(ConfigError):
            build_design(spec_of([Dummies("cat3", reference="zz")]), df)

    def test_tied_frequency_reference_is_smallest(self):
        d = pd.DataFrame({"y": np.zeros(4), "c": ["b", "b", "a", "a"],
                          "pid": list("wxyz")})
        dm, _ = build_design(
            RegressionSpec(outcome="y", terms=[Dummies("c")],
                           cluster="pid"), d)
        assert dm.columns[1:] == ["c=b"]


class TestCollinearity:
    def test_duplicate_column_dropped_and_reported(self, df):
        dm, _ = build_design(
            spec_of([Continuous("x"), Continuous("x")]), df)
        assert dm.columns == ["const", "x"]
        assert dm.dropped == ["x"]

    def test_later_declared_column_loses(self, df):
        df = df.copy()
        df["x2"] = 2.0 * df["x"]
        dm, _ = build_design(
            spec_of([Continuous("x"), Continuous("x2")]), df)
        assert "x" in dm.columns and "x2" in dm.dropped

    def test_window_collinear_with_aligned_bins(self):
        rng = np.random.default_rng(4)
        n = 400
        d = pd.DataFrame({
            "y": rng.normal(size=n),
            "start_cd4": rng.uniform(0, 500, size=n),
            "dg": rng.integers(0, 2, size=n).astype(float),
            "pid": rng.integers(0, 50, size=n).astype(str),
        })
        d["bin25"] = np.floor(d["start_cd4"] / 25).astype(int)
        d["in_window"] = ((d["start_cd4"] >= 150)
                          & (d["start_cd4"] < 250)).astype(float)
        terms = [Dummies("bin25", reference=0), Continuous("dg"),
                 Continuous("in_window"),
                 Interaction(Continuous("in_window"), Continuous("dg"))]
        dm, _ = build_design(
            RegressionSpec(outcome="y", terms=terms, cluster="pid"), d)
        assert "in_window" in dm.dropped
        assert "in_window:dg" in dm.columns

    def test_filter_collinear_basis_reuse(self):
        rng = np.random.default_rng(9)
        a, b = rng.normal(size=50), rng.normal(size=50)
        kept, dropped, basis = filter_collinear([a, b], ["a", "b"])
        assert kept == [0, 1] and not dropped
        # a column inside span(a, b) is rejected against the cached basis
        kept2, dropped2, _ = filter_collinear([0.3 * a - b, rng.normal(size=50)],
                                              ["lin", "new"], basis=basis)
        assert dropped2 == ["lin"] and kept2 == [1]


class TestBuildDesign:
    def test_interaction_labels_and_values(self, df):
        dm, _ = build_design(
            spec_of([Interaction(Continuous("x"), Continuous("flag"))]), df)
        assert "x:flag" in dm.columns
        j = dm.columns.index("x:flag")
        np.testing.assert_allclose(dm.values[:, j],
                                   (df["x"] * df["flag"]).to_numpy())

    def test_unknown_variable_rejected(self, df):
        with pytest.raises(ConfigError):
            build_design(spec_of([Continuous("nope")]), df)

    def test_empty_sample_rejected(self, df):
        with pytest.raises(Exception):
            build_design(spec_of([Continuous("x")]), df.iloc[:0])

    def test_no_intercept_when_absorbing(self, df):
        dm, _ = build_design(spec_of([Continuous("x")], absorb="pid"), df)
        assert "const" not in dm.columns

    def test_deterministic_column_order(self, df):
        s = spec_of([Dummies("cat3"), Continuous("x")])
        dm1, _ = build_design(s, df)
        dm2, _ = build_design(s, df)
        assert dm1.columns == dm2.columns
        np.testing.assert_array_equal(dm1.values, dm2.values)


class TestExtendDesign:
    def test_extension_matches_upfront_build(self, df):
        base, y = build_design(spec_of([Continuous("x")]), df)
        win = df["flag"].to_numpy(dtype=float)
        ext = extend_design(base, [win, win * df["x"].to_numpy()],
                            ["flag", "flag:x"])
        full, _ = build_design(
            spec_of([Continuous("x"), Continuous("flag"),
                     Interaction(Continuous("flag"), Continuous("x"))]), df)
        assert ext.columns == full.columns
        np.testing.assert_allclose(ext.values, full.values)

    def test_extension_detects_collinearity_with_base(self, df):
        base, _ = build_design(spec_of([Continuous("x")]), df)
        ext = extend_design(base, [3.0 * df["x"].to_numpy()], ["x3"])
        assert "x3" in ext.dropped
