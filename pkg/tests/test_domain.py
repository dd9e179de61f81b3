import copy

import numpy as np
import pytest
import yaml
from hypothesis import given
from hypothesis import strategies as st

from mmgrobust.domain import (ConfigError, UncertainSeries, config_from_dict, dump_config, expand_bounds,
                              load_config, load_config_file)
from conftest import single_mg_doc, two_mg_doc


def test_case_study_linear_dg_costs(case_config):
    assert [mg.dgs[0].b_g for mg in case_config.mgs] == [90, 70, 80, 100]
    assert case_config.M == 4
    assert case_config.horizon.T == 24


def test_case_study_shared_parameters(case_config):
    for mg in case_config.mgs:
        d = mg.dgs[0]
        assert (d.a_g, d.p_min, d.p_max, d.R_up, d.R_dn, d.r_up, d.r_dn) == (5, 0, 1, 0.5, 0.5, 0.3, 0.3)
        assert mg.p_pso_max == 1.5
    ess = case_config.mgs[1].esses[0]
    assert (ess.B_e, ess.eta_c, ess.pc_max, ess.soc_min, ess.soc_max, ess.soc_ref) == (2, 0.97, 0.8, 0.1, 0.9, 0.4)
    flex = case_config.mgs[0].flex
    assert flex.a_fd == 20 and flex.rd_max == (0.4,) * 24 and flex.e_shed == 1.0
    assert case_config.market.tau == 5.0


def test_percentage_deviations_become_absolute(case_config):
    dem = case_config.mgs[0].demand
    np.testing.assert_allclose(dem.dev_plus, 0.1 * np.asarray(dem.mean))
    pv = case_config.mgs[0].pv[0]
    np.testing.assert_allclose(pv.dev_minus, 0.2 * np.asarray(pv.mean))


def test_sell_price_above_buy_price_is_rejected():
    doc = single_mg_doc()
    doc["market"]["gamma_sell"] = {"mean": 250.0}
    with pytest.raises(ConfigError, match="gamma_sell"):
        config_from_dict(doc)


def test_price_bands_crossing_only_at_a_level_are_rejected():
    doc = single_mg_doc(gamma_buy=100.0, gamma_sell=99.0)
    doc["market"]["gamma_sell"]["dev_plus"] = 5.0
    with pytest.raises(ConfigError):
        config_from_dict(doc)


def test_minimal_single_hour_system_is_valid():
    cfg = config_from_dict(single_mg_doc())
    assert cfg.M == 1 and cfg.horizon.T == 1
    assert cfg.mgs[0].esses == () and cfg.mgs[0].flex is None


@pytest.mark.parametrize("path, value, where", [
    (("market", "p0"), 1.5, "market.p0"),
    (("market", "p0"), 0.0, "market.p0"),
    (("market", "alpha"), 0.0, "market.alpha"),
    (("market", "tau"), -1.0, "market.tau"),
    (("horizon", "T"), 0, "horizon.T"),
])
def test_invariant_violations_name_their_path(path, value, where):
    doc = single_mg_doc()
    doc[path[0]][path[1]] = value
    with pytest.raises(ConfigError) as err:
        config_from_dict(doc)
    assert err.value.path == where


def test_ess_soc_order_is_checked():
    doc = single_mg_doc()
    doc["mgs"][0]["esses"] = [{"a_e": 1, "B_e": 1, "eta_c": 0.9, "eta_d": 0.9, "pc_max": 1, "pd_max": 1,
                               "soc_min": 0.5, "soc_max": 0.9, "soc_ref": 0.3}]
    with pytest.raises(ConfigError, match="esses"):
        config_from_dict(doc)


def test_unknown_device_entry_is_rejected():
    doc = single_mg_doc()
    doc["mgs"][0]["dgs"][0]["colour"] = "red"
    with pytest.raises(ConfigError, match="unknown"):
        config_from_dict(doc)


def test_malformed_yaml_is_a_config_error():
    with pytest.raises(ConfigError, match="malformed"):
        load_config("horizon: [1, 2\n")


def test_missing_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config_file(tmp_path / "nope.yaml")


def test_demand_bounds():
    up, down = expand_bounds(UncertainSeries((1.0,), (0.1,), (0.1,)), "demand")
    assert up[0] == pytest.approx(1.1) and down[0] == pytest.approx(0.9)


def test_wind_plus_level_is_the_generation_dip():
    plus, minus = expand_bounds(UncertainSeries((0.5,), (0.05,), (0.10,)), "res")
    assert plus[0] == pytest.approx(0.40) and minus[0] == pytest.approx(0.55)


def test_price_band_five_percent():
    hi, lo = expand_bounds(UncertainSeries.from_percent([100.0], 5, 5), "price")
    assert hi[0] == pytest.approx(105) and lo[0] == pytest.approx(95)


def test_unknown_series_kind():
    with pytest.raises(ValueError):
        expand_bounds(UncertainSeries((1.0,), (0.0,), (0.0,)), "voltage")


series = st.integers(1, 6).flatmap(lambda T: st.tuples(
    st.lists(st.floats(0, 10), min_size=T, max_size=T),
    st.lists(st.floats(0, 2), min_size=T, max_size=T),
    st.lists(st.floats(0, 2), min_size=T, max_size=T),
))


@given(series)
def test_bounds_bracket_the_mean_and_are_pure(data):
    s = UncertainSeries(*(tuple(x) for x in data))
    up, down = expand_bounds(s, "demand")
    assert np.all(down <= np.asarray(s.mean)) and np.all(np.asarray(s.mean) <= up)
    plus, minus = expand_bounds(s, "res")
    assert np.all(minus >= plus)
    again = expand_bounds(s, "demand")
    assert np.array_equal(up, again[0]) and np.array_equal(down, again[1])


def test_round_trip(case_config):
    again = load_config(dump_config(case_config))
    assert again == case_config


def test_round_trip_of_list_lambda0():
    doc = two_mg_doc(T=2, lambda0=[80.0, 90.0])
    doc["market"]["gamma_buy"] = {"mean": [200.0, 200.0]}
    cfg = config_from_dict(doc)
    assert load_config(dump_config(cfg)) == cfg


def test_scalar_caps_are_broadcast():
    doc = copy.deepcopy(single_mg_doc(T=3))
    doc["mgs"][0]["flex"] = {"a_fd": 1, "rd_max": 0.2, "cd_max": [0.1, 0.2, 0.3], "e_shed": 0.5}
    cfg = config_from_dict(doc)
    assert cfg.mgs[0].flex.rd_max == (0.2, 0.2, 0.2)
    assert cfg.mgs[0].flex.cd_max == (0.1, 0.2, 0.3)


def test_replace_market_revalidates(case_config):
    assert case_config.replace_market(p0=0.3).market.p0 == 0.3
    with pytest.raises(ConfigError):
        case_config.replace_market(p0=2.0)


def test_bundled_file_is_plain_yaml(case_config):
    from mmgrobust.cli import bundled_config_path

    doc = yaml.safe_load(bundled_config_path().read_text())
    assert set(doc) == {"horizon", "market", "mgs"}
