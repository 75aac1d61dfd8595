from __future__ import annotations

import math

import numpy as np
import pytest

from rsate.csb import CsbConfig
from rsate.seeds import rng_for
from rsate.sim import (DgpConfig, FrtSettings, MethodSpec, MultiRegionConfig,
                       generate_multiregion_trial, generate_trial,
                       _target_draws, multiregion_true_rsate, run_replications,
                       sampling_probability, signal_ratio, true_rsate)


class TestGenerator:
    def test_default_sizes(self):
        ds = generate_trial(DgpConfig(), 0).dataset
        assert int(ds.is_target.sum()) == 600
        assert int((~ds.is_target).sum()) == 1000

    def test_u_only_in_target(self, small_dataset):
        assert np.all(np.isfinite(small_dataset.u[small_dataset.is_target]))
        assert np.all(np.isnan(small_dataset.u[~small_dataset.is_target]))

    def test_deterministic(self):
        a = generate_trial(DgpConfig(n_target=50, n_aux=60), 9).dataset
        b = generate_trial(DgpConfig(n_target=50, n_aux=60), 9).dataset
        np.testing.assert_array_equal(a.outcome, b.outcome)
        c = generate_trial(DgpConfig(n_target=50, n_aux=60), 10).dataset
        assert not np.array_equal(a.outcome, c.outcome)

    def test_rho_zero_has_no_biased_records(self):
        tr = generate_trial(DgpConfig(n_target=50, n_aux=200, rho=0.0), 1)
        assert not tr.biased.any()

    def test_biased_fraction(self):
        tr = generate_trial(DgpConfig(n_target=50, n_aux=200, rho=0.3), 1)
        assert tr.biased_unit.sum() == 60

    def test_control_only_bias_labels(self):
        tr = generate_trial(DgpConfig(n_target=50, n_aux=400, bias_arms="control-only"), 2)
        ds = tr.dataset
        assert not np.any(tr.biased & (ds.treatment == 1))
        assert np.any(tr.biased & (ds.treatment == 0))

    def test_bias_shift_recovered_by_regression(self):
        cfg = DgpConfig(n_target=50, n_aux=20_000, b0=6.0, b1=10.0)
        tr = generate_trial(cfg, 4)
        ds = tr.dataset
        aux0 = (~ds.is_target) & (ds.treatment == 0)
        c, bx, _ = cfg.coefficients(0)
        X = ds.x[aux0]
        # residual from the X part, regressed on the bias label
        resid = ds.outcome[aux0] - c - X @ bx
        flag = tr.biased_unit[aux0].astype(float)
        Z = np.column_stack([np.ones(flag.size), flag])
        coef, *_ = np.linalg.lstsq(Z, resid, rcond=None)
        # unbiased rows carry alpha0 * U with E[U] = 2
        assert coef[1] == pytest.approx(-6.0 - 2 * cfg.alpha0, abs=0.3)

    def test_sampling_probability_in_unit_interval(self):
        X = np.random.default_rng(0).normal(size=(100, 2))
        p = sampling_probability(DgpConfig(), X)
        assert np.all((p > 0) & (p < 1))

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            DgpConfig(rho=1.5)
        with pytest.raises(ValueError):
            DgpConfig(covariate_scenario="nope")
        with pytest.raises(ValueError):
            DgpConfig.from_dict({"n_target": 10, "bogus": 1})

    def test_dict_roundtrip(self):
        cfg = DgpConfig(eta1=(0.1, 0.2), alpha0=1.5)
        assert DgpConfig.from_dict(cfg.to_dict()) == cfg


class TestOracles:
    def test_true_rsate_constant_effect(self):
        val, se = true_rsate(DgpConfig(constant_effect=0.4), n_mc=1000)
        assert val == pytest.approx(0.4, abs=1e-12)
        assert se == pytest.approx(0.0, abs=1e-12)

    def test_true_rsate_closed_form(self):
        cfg = DgpConfig()
        val, se = true_rsate(cfg, n_mc=400_000, seed=1)
        # effect is 3 + X1 + X2 + (alpha1 - alpha0) U; average over the target law
        W = _target_draws(cfg, 400_000, rng_for(99))
        alt = 3 + W[:, 0].mean() + W[:, 1].mean() + 0.5 * W[:, 2].mean()
        assert val == pytest.approx(alt, abs=5 * se + 0.01)

    def test_signal_ratio_sentinel(self):
        r, flags = signal_ratio(DgpConfig(alpha0=0.0), n_mc=1000)
        assert math.isinf(r) and flags == ("u_has_no_signal",)

    def test_signal_ratio_decreases_with_alpha0(self):
        vals = [signal_ratio(DgpConfig(alpha0=a), n_mc=50_000)[0] for a in (0.1, 0.5, 1.5)]
        assert vals[0] > vals[1] > vals[2]

    def test_multiregion_generator(self):
        tr = generate_multiregion_trial(MultiRegionConfig(), 0)
        counts = {r: int(np.sum(tr.dataset.region == r)) for r in (1, 2, 3)}
        assert counts == {1: 300, 2: 400, 3: 400}
        val, se = multiregion_true_rsate(MultiRegionConfig(), n_mc=50_000)
        assert math.isfinite(val) and se > 0


class TestReplications:
    def test_smoke_and_reference(self, tmp_path):
        grid = [DgpConfig(n_target=60, n_aux=80)]
        methods = [MethodSpec("NB-AllCov"), MethodSpec("FB-IVW"),
                   MethodSpec("CSB-IVW", CsbConfig(L=3))]
        t = run_replications(grid, methods, 3, seed=2, n_mc=2000,
                             checkpoint_dir=tmp_path / "ck")
        nb = t.get("NB-AllCov", scenario=0)
        assert nb.mse_pct == 100.0 and nb.n_rep == 3 and nb.n_fail == 0
        assert 0 <= t.get("CSB-IVW").coverage <= 1
        assert (tmp_path / "ck" / "scenario_0.json").exists()
        again = run_replications(grid, methods, 3, seed=2, n_mc=2000,
                                 checkpoint_dir=tmp_path / "ck")
        assert again.to_csv() == t.to_csv()

    def test_frt_column(self):
        grid = [DgpConfig(n_target=40, n_aux=40, constant_effect=0.0)]
        t = run_replications(grid, [MethodSpec("NB-AllCov")], 2, frt=FrtSettings(B=9),
                             seed=1, n_mc=100)
        assert 0 <= t.get("NB-AllCov").frt_rejection <= 1

    def test_workers_do_not_change_table(self):
        grid = [DgpConfig(n_target=40, n_aux=50)]
        methods = [MethodSpec("NB-AllCov"), MethodSpec("FB-Xonly")]
        a = run_replications(grid, methods, 4, seed=3, n_mc=500, workers=1)
        b = run_replications(grid, methods, 4, seed=3, n_mc=500, workers=2)
        assert a.to_csv() == b.to_csv()

    def test_too_few_replicates(self):
        with pytest.raises(ValueError):
            run_replications([DgpConfig()], [MethodSpec("NB-AllCov")], 1)
