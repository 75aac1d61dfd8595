from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rsate.data import (CovariateSchema, DataValidationError, ParseError, SchemaError,
                        StudyDataset, concat, difference_in_means, load_dataset, nn_match,
                        save_dataset, validate)
from rsate.models import PreconditionError
from rsate.sim import DgpConfig, generate_trial, true_rsate

from conftest import make_dataset

SCHEMA = CovariateSchema(("X1", "X2"), ("U",))


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestLoadDataset:
    def test_three_rows(self, tmp_path):
        p = _write(tmp_path, "R,A,Y,X1,X2,U\n1,1,2.0,0.1,0.2,1.0\n1,0,1.0,0.3,0.4,2.0\n0,1,3.0,0.5,0.6,\n")
        ds = load_dataset(p, SCHEMA)
        assert (ds.n_target, ds.n_aux) == (2, 1)
        assert np.isnan(ds.u[2, 0])
        assert ds.records[2].u is None

    def test_missing_column(self, tmp_path):
        p = _write(tmp_path, "R,A,X1,X2,U\n1,1,0.1,0.2,1.0\n")
        with pytest.raises(SchemaError, match="'Y'"):
            load_dataset(p, SCHEMA)

    def test_non_numeric_cell_names_row(self, tmp_path):
        p = _write(tmp_path, "R,A,Y,X1,X2,U\n1,1,abc,0.1,0.2,1.0\n")
        with pytest.raises(ParseError, match="row 2"):
            load_dataset(p, SCHEMA)

    def test_target_row_without_u(self, tmp_path):
        p = _write(tmp_path, "R,A,Y,X1,X2,U\n1,1,2.0,0.1,0.2,NA\n")
        with pytest.raises(DataValidationError):
            load_dataset(p, SCHEMA)

    def test_missing_shared_covariate_dropped(self, tmp_path):
        p = _write(tmp_path, "R,A,Y,X1,X2,U\n1,1,2.0,0.1,0.2,1.0\n1,0,1.0,,0.4,2.0\n0,1,3.0,0.5,0.6,\n")
        ds = load_dataset(p, SCHEMA)
        assert ds.n == 2 and ds.dropped_rows == 1

    def test_comment_lines_skipped(self, tmp_path):
        p = _write(tmp_path, "# config: {}\nR,A,Y,X1,X2,U\n1,1,2.0,0.1,0.2,1.0\n")
        assert load_dataset(p, SCHEMA).n == 1

    def test_power_shaped_counts(self, tmp_path):
        rng = np.random.default_rng(0)
        schema = CovariateSchema(tuple(f"X{k}" for k in range(1, 8)), ("F",))
        region = np.r_[np.ones(69, int), np.zeros(276, int)]
        ds = StudyDataset.from_arrays(region, rng.integers(0, 2, 345), rng.normal(size=345),
                                      rng.normal(size=(345, 7)),
                                      np.where(region[:, None] == 1, 1.0, np.nan), schema=schema)
        p = tmp_path / "power.csv"
        save_dataset(ds, p)
        back = load_dataset(p, schema)
        assert (back.n, back.n_target) == (345, 69)

    def test_roundtrip_is_exact(self, tmp_path, small_dataset):
        p = tmp_path / "rt.csv"
        save_dataset(small_dataset, p, ["config: {}"])
        back = load_dataset(p, small_dataset.schema)
        np.testing.assert_array_equal(back.outcome, small_dataset.outcome)
        np.testing.assert_array_equal(back.x, small_dataset.x)
        np.testing.assert_array_equal(np.isnan(back.u), np.isnan(small_dataset.u))


class TestValidate:
    def test_valid(self, small_dataset):
        assert validate(small_dataset) == []

    def test_target_row_without_u(self):
        ds = make_dataset([1, 1, 0], [1, 0, 1], [1.0, 2.0, 3.0], [0.0, 1.0, 2.0], [1.0, np.nan, np.nan])
        problems = validate(ds)
        assert len(problems) == 1 and "row 1" in problems[0]

    def test_no_target_controls(self):
        ds = make_dataset([1, 1, 0], [1, 1, 0], [1.0, 2.0, 3.0], [0.0, 1.0, 2.0])
        assert "no target controls" in validate(ds)


class TestNnMatch:
    def test_nearest(self):
        ds = make_dataset([1, 1, 0, 0, 0], [1, 1, 1, 1, 1], np.zeros(5), np.zeros(5))
        out = nn_match(ds, 1, score=[0.2, 0.8, 0.21, 0.79, 0.5])
        assert list(out.ids) == [0, 1, 2, 3]

    def test_support_trimming(self):
        ds = make_dataset([1, 1, 0, 0], [0, 0, 0, 0], np.zeros(4), np.zeros(4))
        out = nn_match(ds, 2, score=[0.1, 0.8, 0.95, 0.5])
        assert 2 not in out.ids and 3 in out.ids

    def test_ties_go_to_lower_index(self):
        ds = make_dataset([1, 1, 0, 0, 0], [0, 0, 0, 0, 0], np.zeros(5), np.zeros(5))
        out = nn_match(ds, 1, score=[0.5, 0.5, 0.5, 0.5, 0.5])
        assert list(out.ids) == [0, 1, 2, 3]

    def test_power_shaped_retains_ratio_times_target(self):
        rng = np.random.default_rng(4)
        region = np.r_[np.ones(69, int), np.zeros(576, int)]
        A = np.r_[np.r_[np.ones(39, int), np.zeros(30, int)], rng.integers(0, 2, 576)]
        X = rng.normal(size=(645, 3)) + 0.3 * region[:, None]
        ds = make_dataset(region, A, rng.normal(size=645), X)
        out = nn_match(ds, 4)
        assert out.n_target == 69
        assert out.n_aux == 276

    def test_bad_ratio(self, small_dataset):
        with pytest.raises(PreconditionError):
            nn_match(small_dataset, 0)


class TestDifferenceInMeans:
    def test_hand_example(self):
        ds = make_dataset([1, 1, 1, 1], [1, 1, 0, 0], [2.0, 4.0, 1.0, 3.0], np.zeros(4))
        est = difference_in_means(ds)
        assert est.tau_hat == pytest.approx(1.0)
        assert est.se == pytest.approx(np.sqrt(2 / 2 + 2 / 2))

    def test_identical_arms(self):
        ds = make_dataset([1, 1, 1, 1], [1, 1, 0, 0], [2.0, 3.0, 2.0, 3.0], np.zeros(4))
        assert difference_in_means(ds).tau_hat == 0.0

    def test_auxiliary_rows_ignored(self):
        ds = make_dataset([1, 1, 0, 0], [1, 0, 1, 0], [2.0, 1.0, 50.0, -50.0], np.zeros(4))
        assert difference_in_means(ds).tau_hat == pytest.approx(1.0)

    def test_single_row_arm_flagged(self):
        ds = make_dataset([1, 1, 1], [1, 0, 0], [2.0, 1.0, 3.0], np.zeros(3))
        assert "single_row_arm_1" in difference_in_means(ds).flags

    def test_unbiased_over_replicates(self):
        cfg = DgpConfig()
        tau, _ = true_rsate(cfg, 400_000, seed=1)
        est = np.array([difference_in_means(generate_trial(cfg, (7, r)).dataset).tau_hat
                        for r in range(500)])
        assert abs(est.mean() - tau) < 3 * est.std(ddof=1) / np.sqrt(500)

    @given(st.integers(0, 10_000), st.floats(-5, 5))
    def test_shift_equivariance(self, seed, c):
        rng = np.random.default_rng(seed)
        A = np.r_[0, 1, rng.integers(0, 2, 10)]
        y = rng.normal(size=12)
        ds = make_dataset(np.ones(12, int), A, y, np.zeros(12))
        shifted = make_dataset(np.ones(12, int), A, y + c * A, np.zeros(12))
        assert difference_in_means(shifted).tau_hat == pytest.approx(
            difference_in_means(ds).tau_hat + c, abs=1e-9)


def test_concat_preserves_rows(small_dataset):
    a = small_dataset.subset(np.arange(10))
    b = small_dataset.subset(np.arange(10, 20))
    joined = concat([a, b])
    np.testing.assert_array_equal(joined.outcome, small_dataset.outcome[:20])


def test_dataset_is_immutable(small_dataset):
    with pytest.raises(ValueError):
        small_dataset.outcome[0] = 1.0
