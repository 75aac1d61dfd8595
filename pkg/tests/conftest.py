from __future__ import annotations

import sys

import numpy as np
import pytest
from hypothesis import settings

from rsate.data import CovariateSchema, StudyDataset
from rsate.sim import DgpConfig, generate_trial

settings.register_profile("rsate", max_examples=40, deadline=None)
settings.load_profile("rsate")

SMALL = DgpConfig(n_target=150, n_aux=250)


@pytest.fixture(scope="session")
def small_trial():
    return generate_trial(SMALL, 11)


@pytest.fixture(scope="session")
def small_dataset(small_trial):
    return small_trial.dataset


def make_dataset(region, treatment, outcome, x, u=None, shared=None, target_only=None):
    """Dataset from plain lists with generic column names."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    shared = shared or tuple(f"X{k + 1}" for k in range(x.shape[1]))
    if u is not None:
        u = np.asarray(u, dtype=float)
        if u.ndim == 1:
            u = u[:, None]
        target_only = target_only or tuple(f"U{k + 1}" for k in range(u.shape[1]))
    schema = CovariateSchema(shared_names=shared, target_only_names=target_only or ())
    return StudyDataset.from_arrays(region, treatment, outcome, x, u, schema=schema)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        out = mod.RESULTS[k]
        src = ", cached" if out.cached else ""
        terminalreporter.write_line(f"criterion {k}: {'PASS' if out.passed else 'FAIL'} "
                                    f"{out.summary} [{out.seconds:.1f}s{src}]")
