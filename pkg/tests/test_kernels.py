from __future__ import annotations

import os
import subprocess
import sys

import numpy as np
import pytest

from rsate import kernels
from rsate.conformal import fold_labels
from rsate.csb import CsbConfig, KernelInputs, bootstrap_plan
from rsate.estimators import DesignPropensity
from rsate.sim import DgpConfig, generate_trial

NUMBA = kernels.IMPLEMENTATIONS["numba"]
NUMPY = kernels.IMPLEMENTATIONS["numpy"]
CFG = CsbConfig(L=3)
COMMON = (CFG.use_u, CFG.clip_eps, CFG.max_iter, CFG.tol)


@pytest.fixture(scope="module")
def inputs():
    ds = generate_trial(DgpConfig(n_target=80, n_aux=120), 5).dataset
    return KernelInputs.build(ds, DesignPropensity())


def _folds(inp, seed=0):
    m0 = int(np.sum(inp.R & (inp.A == 0)))
    m1 = int(np.sum(inp.R & (inp.A == 1)))
    return fold_labels(m0, 5, seed, 0), fold_labels(m1, 5, seed, 1)


def _close(a, b, tol=1e-8):
    if isinstance(a, tuple):
        for x, y in zip(a, b):
            _close(x, y, tol)
        return
    np.testing.assert_allclose(np.asarray(a, dtype=float), np.asarray(b, dtype=float),
                               rtol=tol, atol=tol)


class TestBackendsAgree:
    @pytest.mark.parametrize("use_u", [True, False])
    def test_arm_theta_grid(self, inputs, use_u):
        rng = np.random.default_rng(0)
        n = inputs.R.shape[0]
        pi = np.clip(rng.uniform(0.2, 0.8, n), 0.05, 0.95)
        pv = rng.uniform(0, 1, n)
        grid = np.asarray(CFG.grid)
        for arm in (0, 1):
            args = (inputs.Z, inputs.V, inputs.R, inputs.A, inputs.Y, pi, inputs.g_t,
                    inputs.g_a, pv, arm, grid, use_u, CFG.clip_eps, CFG.max_iter, CFG.tol)
            _close(NUMBA["arm_theta_grid"](*args), NUMPY["arm_theta_grid"](*args))

    def test_resample_thetas(self, inputs):
        f0, f1 = _folds(inputs)
        ident = np.arange(inputs.R.shape[0], dtype=np.int64)
        args = (inputs.Z, inputs.V, inputs.R, inputs.A, inputs.Y, inputs.g_t, inputs.g_a,
                ident, f0, f1, 5, 5, np.asarray(CFG.grid), *COMMON)
        _close(NUMBA["resample_thetas"](*args), NUMPY["resample_thetas"](*args))

    def test_bootstrap_thetas(self, inputs):
        rows, b0, b1 = bootstrap_plan(inputs.strata, inputs.A, inputs.R, CFG.L, 5, 5, 3)
        args = (inputs.Z, inputs.V, inputs.R, inputs.A, inputs.Y, inputs.g_t, inputs.g_a,
                rows, b0, b1, 5, 5, np.asarray(CFG.grid), *COMMON)
        _close(NUMBA["bootstrap_thetas"](*args), NUMPY["bootstrap_thetas"](*args))

    def test_grid_top_is_no_borrowing(self, inputs):
        f0, f1 = _folds(inputs)
        ident = np.arange(inputs.R.shape[0], dtype=np.int64)
        theta, nbs, _ = NUMPY["resample_thetas"](
            inputs.Z, inputs.V, inputs.R, inputs.A, inputs.Y, inputs.g_t, inputs.g_a,
            ident, f0, f1, 5, 5, np.asarray(CFG.grid), *COMMON)
        np.testing.assert_allclose(theta[:, -1], nbs, rtol=0, atol=1e-12)


class TestBackendSwitch:
    def _backend(self, flag):
        env = dict(os.environ)
        env.pop("RSATE_DISABLE_NUMBA", None)
        if flag is not None:
            env["RSATE_DISABLE_NUMBA"] = flag
        out = subprocess.run([sys.executable, "-c", "from rsate import kernels; print(kernels.BACKEND)"],
                             env=env, capture_output=True, text=True, check=True)
        return out.stdout.strip()

    def test_default_is_numba(self):
        assert self._backend(None) == "numba"

    @pytest.mark.parametrize("flag", ["1", "true", "YES"])
    def test_flag_selects_numpy(self, flag):
        assert self._backend(flag) == "numpy"

    def test_other_values_keep_numba(self):
        assert self._backend("0") == "numba"
