"""Shared fixtures: the bundled case study and small hand-checkable systems."""

from __future__ import annotations

import numpy as np
import pytest

from mmgrobust.cli import bundled_config_path
from mmgrobust.domain import config_from_dict, load_config_file

LOOSE_DG = {"a_g": 5, "b_g": 70, "p_min": 0, "p_max": 1, "r_up": 1, "r_dn": 1, "R_up": 1, "R_dn": 1}


def two_mg_doc(gamma_buy=200.0, gamma_sell=10.0, tau=0.0, alpha=1.0, T=1, **market):
    """Seller A (one DG, no load) and buyer B (0.5 MW load, no generation), no uncertainty."""
    return {
        "horizon": {"T": T, "dt": 1.0},
        "market": {
            "gamma_buy": {"mean": gamma_buy},
            "gamma_sell": {"mean": gamma_sell},
            "tau": tau, "alpha": alpha, "eps": 0.005, "lambda0": "mean", "p0": 0.5, **market,
        },
        "mgs": [
            {"id": "A", "p_pso_max": 1.5, "dgs": [dict(LOOSE_DG)], "demand": {"mean": 0.0}},
            {"id": "B", "p_pso_max": 1.5, "demand": {"mean": 0.5}},
        ],
    }


def single_mg_doc(demand=0.5, gamma_buy=200.0, gamma_sell=10.0, T=1, dg=None, **market):
    return {
        "horizon": {"T": T, "dt": 1.0},
        "market": {"gamma_buy": {"mean": gamma_buy}, "gamma_sell": {"mean": gamma_sell}, **market},
        "mgs": [{"id": "solo", "p_pso_max": 1.5, "dgs": [dict(dg or LOOSE_DG)], "demand": {"mean": demand}}],
    }


@pytest.fixture(scope="session")
def case_config():
    return load_config_file(bundled_config_path())


@pytest.fixture
def two_mg():
    return config_from_dict(two_mg_doc())


def brute_force_two_dg(resolution=1e-4):
    """Grid search of min 5p1^2+70p1+5p2^2+100p2 s.t. p1+p2=0.5, p>=0."""
    p1 = np.arange(0.0, 0.5 + resolution / 2, resolution)
    p2 = 0.5 - p1
    obj = 5 * p1**2 + 70 * p1 + 5 * p2**2 + 100 * p2
    i = int(np.argmin(obj))
    return p1[i], p2[i], obj[i]


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS, key=lambda k: (int(k.split()[1].rstrip("abcd")), k)):
        ok, detail = RESULTS[key]
        terminalreporter.write_line(f"{key}: {'PASS' if ok else 'FAIL'} - {detail}")
