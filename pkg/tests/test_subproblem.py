import dataclasses

import numpy as np
import pytest

from mmgrobust.domain import config_from_dict
from mmgrobust.scenarios import deterministic_scenarios, realize_scenarios
from mmgrobust.subproblem import (MgVariables, MicrogridOperator, SubproblemInfeasible, audit_constraints,
                                  build_mg_problem, cost_breakdown, dispatch_rows, regrouped_expected_cost,
                                  solve_mg)
from conftest import single_mg_doc


def flat(scen, value):
    return np.full((scen.T, scen.H + 1), float(value))


def independent_variable_count(mg, T, S):
    """Count columns straight from the device list."""
    G, E = len(mg.dgs), len(mg.esses)
    flex = mg.flex is not None and (max(mg.flex.rd_max) > 0 or max(mg.flex.cd_max) > 0)
    per_scenario = G + 3 * E + 2 * flex + 2  # dg, charge/discharge/soc, redispatch/curtail, buy/sell
    per_hour = 2 * G + 6 * E + 2 * flex  # hi/lo envelopes
    return T * S * per_scenario + T * per_hour


@pytest.fixture(scope="module")
def case_scen(case_config):
    return realize_scenarios(case_config)


@pytest.fixture(scope="module")
def isolated(case_config, case_scen):
    gb, gs = case_scen.gamma_buy(), case_scen.gamma_sell()
    return [solve_mg(mg, case_scen, m, gb, gs, 0.5) for m, mg in enumerate(case_config.mgs)]


def test_variable_count_of_storage_microgrid(case_config, case_scen):
    mg = case_config.mgs[1]
    prob, _ = build_mg_problem(mg, case_scen, 1, flat(case_scen, 100), flat(case_scen, 50), 0.5)
    assert prob.n == 24 * 9 * (1 + 2 + 1 + 2) + 24 * (2 + 2 + 4) == 1488
    assert prob.n == independent_variable_count(mg, 24, 9)


@pytest.mark.parametrize("m", range(4))
def test_variable_count_of_every_case_microgrid(case_config, case_scen, m):
    mg = case_config.mgs[m]
    prob, _ = build_mg_problem(mg, case_scen, m, flat(case_scen, 100), flat(case_scen, 50), 0.5)
    assert prob.n == independent_variable_count(mg, 24, 9)
    assert len(prob.var_names) == prob.n


def test_generator_serves_load_when_grid_is_dear():
    cfg = config_from_dict(single_mg_doc(demand=0.5))
    scen = realize_scenarios(cfg)
    d = solve_mg(cfg.mgs[0], scen, 0, flat(scen, 200), flat(scen, 10), 0.5)
    np.testing.assert_allclose(d.vars.dg_power, 0.5, atol=1e-6)
    np.testing.assert_allclose(d.vars.buy, 0.0, atol=1e-6)
    np.testing.assert_allclose(d.vars.sell, 0.0, atol=1e-6)


def grid_search_export(beta_sell, beta_buy=200.0, demand=0.5, step=1e-4):
    P = np.arange(0.0, 1.0 + step / 2, step)
    trade = P - demand
    cost = 5 * P**2 + 70 * P + np.where(trade < 0, -trade * beta_buy, -trade * beta_sell)
    return P[int(np.argmin(cost))]


def test_generator_exports_when_sale_price_is_high():
    cfg = config_from_dict(single_mg_doc(demand=0.5))
    scen = realize_scenarios(cfg)
    d = solve_mg(cfg.mgs[0], scen, 0, flat(scen, 200), flat(scen, 80), 0.5)
    assert d.vars.dg_power[0, 0, 0] == pytest.approx(grid_search_export(80.0), abs=1e-4)
    assert d.vars.dg_power[0, 0, 0] == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_allclose(d.vars.sell, 0.5, atol=1e-6)


def test_interior_export_matches_marginal_cost():
    cfg = config_from_dict(single_mg_doc(demand=0.5))
    scen = realize_scenarios(cfg)
    d = solve_mg(cfg.mgs[0], scen, 0, flat(scen, 200), flat(scen, 78), 0.5)
    assert d.vars.dg_power[0, 0, 0] == pytest.approx(grid_search_export(78.0), abs=1e-4)
    assert d.vars.dg_power[0, 0, 0] == pytest.approx(0.8, abs=1e-6)


def test_idle_microgrid_costs_nothing():
    cfg = config_from_dict(single_mg_doc(demand=0.0))
    scen = realize_scenarios(cfg)
    d = solve_mg(cfg.mgs[0], scen, 0, flat(scen, 0.0), flat(scen, 0.0), 0.5)
    assert np.max(np.abs(d.vars.dg_power)) <= 1e-6
    assert abs(d.cost_expected) <= 1e-6


def bare_vars(buy):
    buy = np.asarray(buy, float)
    T, S = buy.shape
    z = np.zeros((T, S))
    e3 = np.zeros((0, T, S))
    e2 = np.zeros((0, T))
    return MgVariables(dg_power=e3, ess_charge=e3, ess_discharge=e3, soc=e3, load_rd=z, load_cd=z, buy=buy,
                       sell=z.copy(), dg_hi=e2, dg_lo=e2, soc_hi=e2, soc_lo=e2, chg_hi=e2, chg_lo=e2,
                       dis_hi=e2, dis_lo=e2, rd_lo=np.zeros(T), cd_hi=np.zeros(T))


def test_reserve_cost_of_three_scenario_set():
    mg = config_from_dict(single_mg_doc()).mgs[0]
    v = bare_vars([[10.0, 12.0, 14.0]])
    ones = np.ones((1, 3))
    C_E, C_R, C_exp, C = cost_breakdown(dataclasses.replace(v, dg_power=np.zeros((1, 1, 3))), mg, ones, 0 * ones, 0.5)
    assert C_E == pytest.approx(10.0)
    assert C_R == pytest.approx(3.0)
    assert C_exp == pytest.approx(11.5)


def test_reserve_cost_is_zero_when_scenarios_equal_base():
    mg = config_from_dict(single_mg_doc()).mgs[0]
    v = dataclasses.replace(bare_vars([[7.0, 7.0, 7.0]]), dg_power=np.zeros((1, 1, 3)))
    assert cost_breakdown(v, mg, np.ones((1, 3)), np.zeros((1, 3)), 0.3)[1] == 0.0


def test_expected_cost_combination():
    # C_E = 100 and C_R = 40 at p0 = 0.5; hourly costs (100, 120, 160, 140, 140, ...) averaging 140
    hourly = np.array([[100.0, 120.0, 160.0]])
    assert regrouped_expected_cost(hourly, 0.5) == pytest.approx(100 + 0.5 * 40)


@pytest.mark.parametrize("m", range(4))
def test_original_constraints_hold_on_solution(case_config, case_scen, isolated, m):
    worst = audit_constraints(case_config.mgs[m], case_scen, m, isolated[m].vars)
    assert max(worst.values()) <= 1e-6, worst


def test_audit_detects_a_ramp_violation(case_config, case_scen, isolated):
    v = dataclasses.replace(isolated[0].vars, dg_power=isolated[0].vars.dg_power.copy())
    v.dg_power[0, 5, 3] = v.dg_power[0, 4, :].min() + 0.9
    worst = audit_constraints(case_config.mgs[0], case_scen, 0, v)
    assert worst["dg_ramp"] > 0.3


@pytest.mark.parametrize("m", range(4))
def test_no_simultaneous_buying_and_selling(isolated, m):
    v = isolated[m].vars
    assert np.max(v.buy * v.sell) <= 1e-8


@pytest.mark.parametrize("m", [0, 3])
def test_flexible_load_invariants(case_config, isolated, m):
    v, flex = isolated[m].vars, case_config.mgs[m].flex
    assert abs(v.load_rd[:, 0].sum() - v.load_cd[:, 0].sum()) <= 1e-6
    shed = (v.load_cd.max(axis=1) - v.load_rd.min(axis=1)).sum()
    assert shed <= flex.e_shed + 1e-6


@pytest.mark.parametrize("m", [1, 2])
def test_terminal_state_of_charge(case_config, isolated, m):
    v, ess = isolated[m].vars, case_config.mgs[m].esses[0]
    assert v.soc[0, -1, 0] == pytest.approx(ess.soc_ref, abs=1e-6)
    assert np.all(v.soc[0, -1, 1:] >= 0.8 * ess.soc_ref - 1e-6)
    assert np.all(v.soc[0, -1, 1:] <= 1.2 * ess.soc_ref + 1e-6)


@pytest.mark.parametrize("m", range(4))
def test_envelopes_bound_every_scenario(isolated, m):
    v = isolated[m].vars
    assert np.all(v.dg_hi + 1e-7 >= v.dg_power.max(axis=2))
    assert np.all(v.dg_lo - 1e-7 <= v.dg_power.min(axis=2))
    if v.soc.size:
        assert np.all(v.soc_hi + 1e-7 >= v.soc.max(axis=2))
        assert np.all(v.soc_lo - 1e-7 <= v.soc.min(axis=2))
        assert np.all(v.chg_hi + 1e-7 >= v.ess_charge.max(axis=2))
        assert np.all(v.dis_lo - 1e-7 <= v.ess_discharge.min(axis=2))


@pytest.mark.parametrize("m", range(4))
def test_expected_cost_identities(isolated, m):
    d = isolated[m]
    assert d.cost_expected == pytest.approx(d.cost_energy + 0.5 * d.cost_reserve, rel=1e-6)
    assert d.cost_expected == pytest.approx(regrouped_expected_cost(d.hourly_cost, 0.5), rel=1e-6)
    assert d.cost_expected == pytest.approx(d.qp.objective, rel=1e-6, abs=1e-6)


@pytest.mark.parametrize("m", range(4))
def test_qp_certificate(isolated, m):
    assert isolated[m].qp.status == "optimal"
    assert isolated[m].qp.kkt.max <= 1e-6


def test_deterministic_ramp_is_plain_difference(case_config):
    det = deterministic_scenarios(case_config)
    d = solve_mg(case_config.mgs[0], det, 0, det.gamma_buy(), det.gamma_sell(), 0.5)
    P = d.vars.dg_power[0, :, 0]
    assert np.all(np.abs(np.diff(P)) <= 0.5 + 1e-6)
    # with one scenario the envelopes only have to bracket the dispatch
    assert np.all(d.vars.dg_hi[0] >= P - 1e-7) and np.all(d.vars.dg_lo[0] <= P + 1e-7)
    assert d.vars.dg_power.shape == (1, 24, 1)
    assert d.cost_reserve == 0.0


def test_base_weight_one_drops_reserve_term(case_config, case_scen):
    gb, gs = case_scen.gamma_buy(), case_scen.gamma_sell()
    d = solve_mg(case_config.mgs[1], case_scen, 1, gb, gs, 1.0)
    assert d.cost_expected == pytest.approx(d.cost_energy, rel=1e-9)
    assert d.qp.objective == pytest.approx(d.cost_energy, rel=1e-6)


def test_operator_reuses_model_across_prices(case_config, case_scen):
    op = MicrogridOperator(case_config.mgs[2], case_scen, 2, 0.5)
    gb, gs = case_scen.gamma_buy(), case_scen.gamma_sell()
    first = op.solve(gb, gs)
    second = op.solve(gb + 1.0, gs + 1.0)
    fresh = solve_mg(case_config.mgs[2], case_scen, 2, gb + 1.0, gs + 1.0, 0.5)
    assert first.qp.status == second.qp.status == "optimal"
    assert second.cost_expected == pytest.approx(fresh.cost_expected, rel=1e-6)


def test_uncoverable_demand_is_infeasible():
    cfg = config_from_dict(single_mg_doc(demand=3.0))
    scen = realize_scenarios(cfg)
    with pytest.raises(SubproblemInfeasible) as err:
        solve_mg(cfg.mgs[0], scen, 0, flat(scen, 200), flat(scen, 10), 0.5)
    assert err.value.mg_id == "solo"
    assert err.value.families


def test_inverted_generator_limits_fail_at_build():
    cfg = config_from_dict(single_mg_doc())
    dg = dataclasses.replace(cfg.mgs[0].dgs[0], p_min=0.8, p_max=0.2)
    mg = dataclasses.replace(cfg.mgs[0], dgs=(dg,))
    scen = realize_scenarios(cfg)
    with pytest.raises(SubproblemInfeasible, match="p_min"):
        build_mg_problem(mg, scen, 0, flat(scen, 200), flat(scen, 10), 0.5)


@pytest.mark.parametrize("shape", [(1, 2), (2, 9)])
def test_price_shape_is_checked(shape):
    cfg = config_from_dict(single_mg_doc())
    scen = realize_scenarios(cfg)
    with pytest.raises(ValueError, match="shape"):
        build_mg_problem(cfg.mgs[0], scen, 0, np.zeros(shape), np.zeros(shape), 0.5)


def test_p0_outside_range_is_rejected():
    cfg = config_from_dict(single_mg_doc())
    scen = realize_scenarios(cfg)
    with pytest.raises(ValueError, match="p0"):
        build_mg_problem(cfg.mgs[0], scen, 0, flat(scen, 200), flat(scen, 10), 0.0)


def test_dispatch_rows_cover_all_devices(isolated):
    rows = list(dispatch_rows(isolated[1]))
    devices = {r[2] for r in rows}
    assert {"dg[0]", "ess[0].charge", "ess[0].discharge", "ess[0].soc", "pso.buy", "pso.sell"} <= devices
    assert len(rows) == 24 * 9 * len(devices)
