"""Pooled system-wide dispatch, used as the reference solution for market clearing.

All microgrid blocks go into one QP together with a grid arc per hour and
scenario. A coupling row balances the microgrids' net purchases against the
grid exchange, and its multiplier is the system price that the distributed
market should reproduce.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .domain import MmgConfig
from .market import MarketOutcome, pso_income
from .qp import DEFAULT_TOL, QpProblem, QpSolution, QpSolver
from .scenarios import ScenarioSet
from .subproblem import MgDispatch, MgVariables, _net_trades, build_mg_problem, cost_breakdown, scenario_weights


class CentralInfeasible(RuntimeError):
    def __init__(self, families: dict[str, float]):
        self.families = families
        top = ", ".join(f"{k} ({v:.0%})" for k, v in list(families.items())[:3])
        super().__init__(f"centralized problem is infeasible; binding constraint families: {top}")


@dataclass
class CentralOutcome:
    dispatches: list[MgDispatch]
    grid_buy: np.ndarray  # (T, S)
    grid_sell: np.ndarray
    objective: float
    prices: np.ndarray  # coupling multiplier per (t, h) in $/MWh
    duals: np.ndarray  # raw multiplier of the coupling rows (weight and sign included)
    weights: np.ndarray
    p0: float
    tau: float
    include_fees: bool
    gamma_buy: np.ndarray
    gamma_sell: np.ndarray
    qp: QpSolution

    @property
    def trades(self) -> np.ndarray:
        """Net purchase per MG, shape ``(M, T, S)``."""
        return np.stack([d.trade_schedule for d in self.dispatches])

    @property
    def pso_income(self) -> np.ndarray:
        buy = np.stack([d.vars.buy for d in self.dispatches])
        sell = np.stack([d.vars.sell for d in self.dispatches])
        return pso_income(buy, sell, self.tau)

    def system_cost_split(self) -> tuple[float, float, float]:
        """System ``(C_E, C_R, C_exp)`` of local costs plus grid settlement (plus fees)."""
        hourly = sum(d.local_hourly_cost for d in self.dispatches)
        hourly = hourly + self.gamma_buy * self.grid_buy - self.gamma_sell * self.grid_sell
        if self.include_fees:
            hourly = hourly + self.pso_income
        C_E = float(hourly[:, 0].sum())
        H = hourly.shape[1] - 1
        C_R = float((hourly[:, 1:].mean(axis=1) - hourly[:, 0]).sum()) if H else 0.0
        return C_E, C_R, C_E + (1.0 - self.p0) * C_R


def solve_centralized(config: MmgConfig, scen: ScenarioSet, include_fees: bool | None = None,
                      grid_cap: float | None = None, tol: float = DEFAULT_TOL) -> CentralOutcome:
    """Solve the pooled dispatch of all microgrids with a shared grid connection.

    Parameters
    ----------
    include_fees
        Charge the service fee on every microgrid trade. Defaults to ``True``
        whenever the configured fee is positive.
    grid_cap
        Optional upper bound (MW) on grid import and export per hour and
        scenario; unbounded by default.
    """
    mk = config.market
    tau, p0 = mk.tau, mk.p0
    if include_fees is None:
        include_fees = tau > 0
    T, S = scen.T, scen.H + 1
    w = scenario_weights(scen.H, p0)
    gb, gs = scen.gamma_buy(), scen.gamma_sell()
    fee = tau if include_fees else 0.0
    bb = np.full((T, S), fee)
    bs = np.full((T, S), -fee)

    blocks, indices, offsets = [], [], []
    off = 0
    for m, mg in enumerate(config.mgs):
        pb, idx = build_mg_problem(mg, scen, m, bb, bs, p0, config.horizon.dt)
        blocks.append(pb)
        indices.append(idx)
        offsets.append(off)
        off += pb.n
    n_mg = off
    n = n_mg + 2 * T * S
    nb = n_mg + np.arange(T * S).reshape(T, S)
    ns = n_mg + T * S + np.arange(T * S).reshape(T, S)

    Q = sp.block_diag([b.Q for b in blocks] + [sp.csc_matrix((2 * T * S, 2 * T * S))], format="csc")
    c = np.concatenate([b.c for b in blocks] + [(w[None, :] * gb).ravel(), -(w[None, :] * gs).ravel()])

    pad = lambda A: sp.hstack([A, sp.csc_matrix((A.shape[0], 2 * T * S))])  # noqa: E731
    A_eq_mg = pad(sp.block_diag([b.A_eq for b in blocks]))
    A_in_mg = pad(sp.block_diag([b.A_in for b in blocks]))

    # coupling: grid_buy - grid_sell - sum_m (buy_m - sell_m) = 0
    rows, cols, vals = [], [], []
    for t in range(T):
        for h in range(S):
            r = t * S + h
            rows += [r, r]
            cols += [nb[t, h], ns[t, h]]
            vals += [1.0, -1.0]
            for idx, o in zip(indices, offsets):
                rows += [r, r]
                cols += [o + idx.buy[t, h], o + idx.sell[t, h]]
                vals += [-1.0, 1.0]
    A_cpl = sp.csc_matrix((vals, (rows, cols)), shape=(T * S, n))

    grid_cols = np.concatenate([nb.ravel(), ns.ravel()])
    k = grid_cols.size
    A_grid = sp.csc_matrix((-np.ones(k), (np.arange(k), grid_cols)), shape=(k, n))
    b_grid = np.zeros(k)
    grid_labels = ["grid_bounds"] * k
    if grid_cap is not None:
        A_grid = sp.vstack([A_grid, sp.csc_matrix((np.ones(k), (np.arange(k), grid_cols)), shape=(k, n))])
        b_grid = np.concatenate([b_grid, np.full(k, float(grid_cap))])
        grid_labels += ["grid_capacity"] * k

    eq_labels = [f"{mg.id}:{lab}" for mg, b in zip(config.mgs, blocks) for lab in b.eq_labels]
    in_labels = [f"{mg.id}:{lab}" for mg, b in zip(config.mgs, blocks) for lab in b.in_labels]
    problem = QpProblem.create(
        Q, c,
        A_eq=sp.vstack([A_eq_mg, A_cpl], format="csc"),
        b_eq=np.concatenate([b.b_eq for b in blocks] + [np.zeros(T * S)]),
        A_in=sp.vstack([A_in_mg, A_grid], format="csc"),
        b_in=np.concatenate([b.b_in for b in blocks] + [b_grid]),
        eq_labels=eq_labels + ["coupling"] * (T * S),
        in_labels=in_labels + grid_labels,
        check=False,
    )
    sol = QpSolver(problem, tol=tol).solve()
    if sol.status == "infeasible":
        raise CentralInfeasible(sol.infeasible_families)
    if sol.status != "optimal":
        raise RuntimeError(f"centralized QP stopped with status {sol.status} (KKT residual {sol.kkt.max:.2e})")

    nu = sol.duals_eq[-T * S:].reshape(T, S)
    prices = -nu / w[None, :]
    dispatches = []
    for m, (mg, idx, o, blk) in enumerate(zip(config.mgs, indices, offsets, blocks)):
        v = MgVariables.from_x(sol.x[o:o + blk.n], idx)
        # each microgrid faces the system price plus or minus the fee
        mb, ms = prices + tau, prices - tau
        _net_trades(v, mb, ms)
        C_E, C_R, C_exp, C = cost_breakdown(v, mg, mb, ms, p0)
        dispatches.append(MgDispatch(mg.id, v, C_E, C_R, C_exp, C, mb, ms, None))
    grid_buy = sol.x[nb].copy()
    grid_sell = sol.x[ns].copy()
    both = np.minimum(grid_buy, grid_sell)
    grid_buy -= both
    grid_sell -= both
    return CentralOutcome(dispatches, grid_buy, grid_sell, sol.objective, prices, nu, w, p0, tau,
                          include_fees, gb, gs, sol)


@dataclass(frozen=True)
class GapMetrics:
    objective_gap: float  # relative, market dual value against the pooled optimum
    trade_deviation: float  # MW, largest net-trade difference over MGs, hours, scenarios
    price_deviation: float  # $/MWh
    primal_gap: float = float("nan")  # relative, physical cost of the market's last iterate


def duality_gap(central: CentralOutcome, market: MarketOutcome) -> GapMetrics:
    """Compare a market outcome with the pooled solution of the same system.

    The objective gap uses the market's dual value, which converges to the
    pooled optimum as the prices do. The physical cost of the last iterate
    also carries the residual imbalance (up to ``eps`` MW per hour and
    scenario) and is reported separately as ``primal_gap``.
    """
    tm, tc = market.trades, central.trades
    if tm.shape != tc.shape:
        raise ValueError(f"trade schedules differ in shape: market {tm.shape}, central {tc.shape}")
    pm = market.final_prices.lambda_eq
    if pm.shape != central.prices.shape:
        raise ValueError("price arrays differ in shape")
    obj_c = central.objective
    scale = max(1.0, abs(obj_c))
    gap = abs(market.dual_objective - obj_c) / scale
    primal = abs(market.objective - obj_c) / scale
    return GapMetrics(gap, float(np.max(np.abs(tm - tc))), float(np.max(np.abs(pm - central.prices))), primal)

