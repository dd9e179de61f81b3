import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmgrobust.domain import config_from_dict, expand_bounds
from mmgrobust.scenarios import (build_orthogonal_array, deterministic_scenarios, realize_scenarios,
                                 scenarios_to_csv)
from conftest import two_mg_doc

# scenario design of the four-microgrid case: PSO, MG1..MG4
TABLE_I = np.array([
    [+1, +1, +1, +1, +1],
    [+1, +1, +1, -1, -1],
    [+1, -1, -1, +1, +1],
    [+1, -1, -1, -1, -1],
    [-1, +1, -1, +1, -1],
    [-1, +1, -1, -1, +1],
    [-1, -1, +1, +1, -1],
    [-1, -1, +1, -1, +1],
])


def pair_counts(oa, i, j):
    return {(a, b): int(np.sum((oa[:, i] == a) & (oa[:, j] == b))) for a in (1, -1) for b in (1, -1)}


def test_five_factor_design_matches_table():
    oa = build_orthogonal_array(5)
    assert oa.shape == (8, 5)
    np.testing.assert_array_equal(oa, TABLE_I)
    assert tuple(oa[0]) == (1, 1, 1, 1, 1)
    assert tuple(oa[4]) == (-1, 1, -1, 1, -1)


def test_single_factor_column():
    assert build_orthogonal_array(1)[:, 0].tolist() == [1, 1, 1, 1, -1, -1, -1, -1]


@pytest.mark.parametrize("i, j", list(itertools.combinations(range(7), 2)))
def test_every_column_pair_is_orthogonal(i, j):
    oa = build_orthogonal_array(7)
    assert pair_counts(oa, i, j) == {(1, 1): 2, (1, -1): 2, (-1, 1): 2, (-1, -1): 2}


@pytest.mark.parametrize("k", range(1, 8))
def test_columns_are_balanced_and_eight_rows(k):
    oa = build_orthogonal_array(k)
    assert oa.shape == (8, k)
    assert np.all(oa.sum(axis=0) == 0)


@pytest.mark.parametrize("k", [0, 8, 12])
def test_unsupported_factor_count(k):
    with pytest.raises(ValueError, match="L8"):
        build_orthogonal_array(k)


def test_row_two_realization(case_config):
    scen = realize_scenarios(case_config)
    assert scen.H == 8
    s = scen.scenarios[2]  # levels (+1, +1, +1, -1, -1)
    mg3 = case_config.mgs[2]
    mean_d = np.asarray(mg3.demand.mean)
    np.testing.assert_allclose(s.demand[2], 0.9 * mean_d)
    # MG3 carries PV in the bundled case; it follows the wind convention
    np.testing.assert_allclose(s.pv[2][0], 1.1 * np.asarray(mg3.pv[0].mean))
    np.testing.assert_allclose(s.gamma_buy, 1.05 * np.asarray(case_config.market.gamma_buy.mean))
    np.testing.assert_allclose(s.gamma_sell, 1.05 * np.asarray(case_config.market.gamma_sell.mean))
    # MG1 is at +1: high demand, low PV
    np.testing.assert_allclose(s.demand[0], 1.1 * np.asarray(case_config.mgs[0].demand.mean))
    np.testing.assert_allclose(s.pv[0][0], 0.8 * np.asarray(case_config.mgs[0].pv[0].mean))


def test_base_case_uses_means(case_config):
    s0 = realize_scenarios(case_config).scenarios[0]
    assert s0.h == 0
    for m, mg in enumerate(case_config.mgs):
        np.testing.assert_array_equal(s0.demand[m], mg.demand.mean)
    np.testing.assert_array_equal(s0.gamma_buy, case_config.market.gamma_buy.mean)


def test_zero_deviation_scenarios_equal_base(two_mg):
    scen = realize_scenarios(two_mg)
    base = scen.scenarios[0]
    for s in scen.scenarios[1:]:
        np.testing.assert_array_equal(s.demand, base.demand)
        np.testing.assert_array_equal(s.gamma_buy, base.gamma_buy)


def test_every_value_inside_its_interval(case_config):
    scen = realize_scenarios(case_config)
    for m, mg in enumerate(case_config.mgs):
        up, down = expand_bounds(mg.demand, "demand")
        for s in scen.scenarios:
            assert np.all(s.demand[m] <= up + 1e-12) and np.all(s.demand[m] >= down - 1e-12)
            for i, unit in enumerate(mg.res):
                low, high = expand_bounds(unit, "res")
                series = (s.wind[m][i] if i < len(mg.wind) else s.pv[m][i - len(mg.wind)])
                assert np.all(series >= low - 1e-12) and np.all(series <= high + 1e-12)


@given(st.floats(0, 0.3), st.floats(0, 0.3))
def test_realization_is_monotone_in_deviation(small, extra):
    def demand_levels(dev):
        doc = two_mg_doc()
        doc["mgs"][1]["demand"] = {"mean": 0.5, "dev_plus": dev, "dev_minus": dev}
        scen = realize_scenarios(config_from_dict(doc))
        return np.array([s.demand[1, 0] for s in scen.scenarios[1:]]), scen.levels[:, 2]

    d1, lv = demand_levels(small)
    d2, _ = demand_levels(small + extra)
    assert np.all(d2[lv > 0] >= d1[lv > 0])
    assert np.all(d2[lv < 0] <= d1[lv < 0])


def test_wrong_column_count(case_config):
    with pytest.raises(ValueError, match="columns"):
        realize_scenarios(case_config, build_orthogonal_array(3))


def test_levels_must_be_plus_or_minus_one(case_config):
    bad = np.array(build_orthogonal_array(5))
    bad[0, 0] = 0
    with pytest.raises(ValueError):
        realize_scenarios(case_config, bad)


def test_deterministic_set_has_only_the_base(case_config):
    det = deterministic_scenarios(case_config)
    assert det.H == 0 and det.gamma_buy().shape == (24, 1)


def test_scenarios_are_read_only(case_config):
    s = realize_scenarios(case_config).scenarios[1]
    with pytest.raises(ValueError):
        s.demand[0, 0] = 3.0


def test_csv_dump_covers_every_scenario_and_hour(case_config):
    text = scenarios_to_csv(case_config, realize_scenarios(case_config))
    lines = text.strip().splitlines()
    assert lines[0] == "h,t,quantity,value"
    # two prices plus demand and one renewable unit per MG
    assert len(lines) - 1 == 9 * 24 * (2 + 4 * 2)
