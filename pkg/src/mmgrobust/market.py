"""Iterative market clearing between microgrid operators and the power-sharing coordinator.

Each iteration the coordinator posts trading prices for every hour and
scenario, every microgrid operator answers with its optimal trade schedule,
and the coordinator moves the internal price along the aggregate imbalance
(a projected sub-gradient step on the dual of the coupling constraint).
Prices are kept inside the grid price band; whatever imbalance remains at a
band edge is settled with the main grid.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .domain import MmgConfig
from .scenarios import ScenarioSet, deterministic_scenarios
from .subproblem import MgDispatch, MicrogridOperator, scenario_weights

log = logging.getLogger(__name__)

STALL_WINDOW = 5
STALL_RTOL = 1e-6


def subgradient_step(lam, net_bid, alpha: float):
    """Move the price up by ``alpha`` per MW of excess demand."""
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    return lam + alpha * net_bid


def clamp_and_settle(lambda_next, gamma_buy, gamma_sell, net_bid):
    """Project the price onto ``[gamma_sell, gamma_buy]`` and settle the rest with the grid.

    Works elementwise on scalars or arrays. Returns ``(lambda_eq, grid_buy,
    grid_sell)``: at the upper edge the coordinator imports the net bid, at
    the lower edge it exports the surplus, and in between nothing is traded
    with the grid.
    """
    lambda_next = np.asarray(lambda_next, float)
    gamma_buy = np.broadcast_to(np.asarray(gamma_buy, float), lambda_next.shape)
    gamma_sell = np.broadcast_to(np.asarray(gamma_sell, float), lambda_next.shape)
    net_bid = np.broadcast_to(np.asarray(net_bid, float), lambda_next.shape)
    if np.any(gamma_buy <= gamma_sell):
        raise ValueError("grid buy price must exceed grid sell price")
    top = lambda_next >= gamma_buy
    bottom = ~top & (lambda_next <= gamma_sell)
    lam = np.where(top, gamma_buy, np.where(bottom, gamma_sell, lambda_next))
    grid_buy = np.where(top, net_bid, 0.0)
    grid_sell = np.where(bottom, -net_bid, 0.0)
    if lam.ndim == 0:
        return float(lam), float(grid_buy), float(grid_sell)
    return lam, grid_buy, grid_sell


def pso_income(buy, sell, tau: float):
    """Service-fee income ``tau * sum_m (buy_m + sell_m)``.

    ``buy`` and ``sell`` carry the microgrid on their leading axis, so
    ``(M, T, S)`` inputs give income per ``(t, h)``; scalars are taken as
    totals.
    """
    buy = np.asarray(buy, float)
    sell = np.asarray(sell, float)
    if np.any(buy < -1e-9) or np.any(sell < -1e-9):
        raise ValueError("trade volumes must be nonnegative")
    gross = buy + sell
    if gross.ndim:
        gross = gross.sum(axis=0)
    return tau * gross


@dataclass
class PriceState:
    """Coordinator prices per ``(t, h)``."""

    lam: np.ndarray  # internal multiplier before projection
    lambda_eq: np.ndarray  # clamped market equilibrium price
    beta_buy: np.ndarray
    beta_sell: np.ndarray

    @classmethod
    def from_lambda(cls, lam, lambda_eq, tau: float) -> "PriceState":
        lambda_eq = np.asarray(lambda_eq, float)
        return cls(np.asarray(lam, float).copy(), lambda_eq.copy(), lambda_eq + tau, lambda_eq - tau)


@dataclass
class IterationRecord:
    k: int
    net_bid: np.ndarray  # (T, S) aggregate purchase of all MGs
    grid_settlement: np.ndarray  # (T, S) grid_buy - grid_sell
    mismatch: float
    system_objective: float
    max_price_change: float
    dual_objective: float = float("nan")


@dataclass
class MarketOutcome:
    converged: bool
    iterations: list[IterationRecord]
    final_prices: PriceState
    dispatches: list[MgDispatch]
    grid_buy: np.ndarray  # (T, S)
    grid_sell: np.ndarray
    pso_income: np.ndarray  # (T, S)
    p0: float
    tau: float
    weights: np.ndarray
    gamma_buy: np.ndarray
    gamma_sell: np.ndarray
    stalled: bool = False
    diverging: bool = False
    message: str = ""
    price_history: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def num_iterations(self) -> int:
        return len(self.iterations)

    @property
    def objective(self) -> float:
        """Expected social cost of the final iteration."""
        return self.iterations[-1].system_objective if self.iterations else float("nan")

    @property
    def dual_objective(self) -> float:
        """Lagrangian value at the prices of the final iteration.

        Every operator's expected bill at the posted prices, summed. Inside
        the grid price band this is the dual function of the pooled problem,
        a lower bound on its optimum that is insensitive to the small
        residual imbalance left at termination.
        """
        return self.iterations[-1].dual_objective if self.iterations else float("nan")

    @property
    def final_mismatch(self) -> float:
        return self.iterations[-1].mismatch if self.iterations else float("inf")

    @property
    def trades(self) -> np.ndarray:
        """Net purchase per MG, shape ``(M, T, S)``."""
        return np.stack([d.trade_schedule for d in self.dispatches])

    def pso_income_split(self) -> tuple[float, float, float]:
        """Base-case income, average scenario excess, and p0-weighted expectation."""
        return _split(self.pso_income, self.p0)


def _split(hourly: np.ndarray, p0: float) -> tuple[float, float, float]:
    base = float(hourly[:, 0].sum())
    H = hourly.shape[1] - 1
    excess = float((hourly[:, 1:].mean(axis=1) - hourly[:, 0]).sum()) if H else 0.0
    return base, excess, base + (1.0 - p0) * excess


def initial_lambda(config: MmgConfig, scen: ScenarioSet, lambda0=None) -> np.ndarray:
    """Starting price per ``(t, h)`` from a mode name, a number or an hourly list."""
    gb, gs = scen.gamma_buy(), scen.gamma_sell()
    spec = config.market.lambda0 if lambda0 is None else lambda0
    if isinstance(spec, str):
        modes = {"mean": 0.5 * (gb + gs), "buy": gb, "sell": gs}
        if spec not in modes:
            raise ValueError(f"unknown lambda0 mode {spec!r}; use mean, buy, sell, a number or a list")
        return modes[spec].copy()
    arr = np.asarray(spec, float)
    if arr.ndim == 0:
        return np.full(gb.shape, float(arr))
    if arr.shape == (scen.T,):
        return np.repeat(arr[:, None], gb.shape[1], axis=1)
    if arr.shape == gb.shape:
        return arr.copy()
    raise ValueError(f"lambda0 must be scalar, length {scen.T}, or shape {gb.shape}; got {arr.shape}")


def system_objective(dispatches: list[MgDispatch], grid_buy, grid_sell, gamma_buy, gamma_sell,
                     weights: np.ndarray, tau: float) -> float:
    """Expected social cost: local device costs, grid settlement and service fees."""
    total = 0.0
    for d in dispatches:
        total += float((d.local_hourly_cost @ weights).sum())
        total += tau * float(((d.vars.buy + d.vars.sell) @ weights).sum())
    total += float(((gamma_buy * grid_buy - gamma_sell * grid_sell) @ weights).sum())
    return total


def _solve_all(operators, beta_buy, beta_sell, pool):
    if pool is None:
        return [op.bid(beta_buy, beta_sell) for op in operators]
    return list(pool.map(lambda op: op.bid(beta_buy, beta_sell), operators))


def clear_market(config: MmgConfig, scen: ScenarioSet, *, alpha: float | None = None,
                 eps: float | None = None, lambda0=None, max_iter: int | None = None,
                 projected: bool = True, workers: int = 1, operators=None) -> MarketOutcome:
    """Run the sub-gradient clearing loop until the grid absorbs every imbalance.

    Parameters
    ----------
    config, scen
        System description and its scenario set.
    alpha, eps, lambda0, max_iter
        Overrides for the corresponding market parameters.
    projected
        Carry the clamped price to the next iteration (default). With
        ``False`` the unclamped multiplier is carried instead.
    workers
        Threads used to solve the microgrid problems of one iteration.
    operators
        Pre-built :class:`MicrogridOperator` objects to reuse (their warm
        starts carry over).

    Returns
    -------
    MarketOutcome
        ``converged`` is set when the largest per-``(t, h)`` imbalance not
        covered by the grid is below ``eps`` and the prices the bids were
        computed at agree with the settled prices to ``alpha * eps``.
    """
    mk = config.market
    alpha = mk.alpha if alpha is None else alpha
    eps = mk.eps if eps is None else eps
    max_iter = mk.max_iter if max_iter is None else max_iter
    if alpha <= 0 or eps <= 0 or max_iter < 1:
        raise ValueError("alpha and eps must be > 0 and max_iter >= 1")
    tau, p0 = mk.tau, mk.p0
    dt = config.horizon.dt
    gb, gs = scen.gamma_buy(), scen.gamma_sell()
    if np.any(gb <= gs):
        raise ValueError("grid buy price must exceed grid sell price in every scenario and hour")
    w = scenario_weights(scen.H, p0)
    if operators is None:
        operators = [MicrogridOperator(mg, scen, m, p0, dt) for m, mg in enumerate(config.mgs)]

    lam0 = initial_lambda(config, scen, lambda0)
    lam_eq = np.clip(lam0, gs, gb)
    state = PriceState.from_lambda(lam0, lam_eq, tau)
    records: list[IterationRecord] = []
    history: list[np.ndarray] = []
    converged = stalled = diverging = False
    message = ""
    amp_prev, persist = None, 0

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for k in range(1, max_iter + 1):
            dispatches = _solve_all(operators, state.beta_buy, state.beta_sell, pool)
            net = sum(d.trade_schedule for d in dispatches)
            base = state.lambda_eq if projected else state.lam
            lam_next = subgradient_step(base, net, alpha)
            lam_eq, grid_buy, grid_sell = clamp_and_settle(lam_next, gb, gs, net)
            settle = grid_buy - grid_sell
            mismatch = float(np.max(np.abs(net - settle)))
            change = float(np.max(np.abs(lam_eq - state.lambda_eq)))
            obj = system_objective(dispatches, grid_buy, grid_sell, gb, gs, w, tau)
            dual = float(sum(d.cost_expected for d in dispatches))
            records.append(IterationRecord(k, net, settle, mismatch, obj, change, dual))
            history.append(lam_eq)
            state = PriceState.from_lambda(lam_next, lam_eq, tau)
            log.debug("iteration %d: mismatch %.4g MW, objective %.6g", k, mismatch, obj)

            if mismatch < eps and change <= alpha * eps + 1e-12:
                converged = True
                message = f"converged after {k} iterations"
                break

            # price steps that keep reversing without shrinking point to a step size past
            # the stability limit
            if k % STALL_WINDOW == 0 and k >= 2 * STALL_WINDOW:
                amp = max(r.max_price_change for r in records[-STALL_WINDOW:])
                steps = np.diff(np.stack(history[-STALL_WINDOW - 1:]), axis=0)
                big = np.abs(steps) > alpha * eps
                reversing = bool(np.any((steps[1:] * steps[:-1] < 0) & big[1:] & big[:-1]))
                if reversing and amp_prev is not None and amp >= 0.99 * amp_prev:
                    persist += 1
                else:
                    persist = 0
                amp_prev = amp
                if persist >= 3 and not diverging:
                    diverging = True
                    log.warning("prices oscillate without damping (step %.3g $/MWh); consider a smaller alpha "
                                "(now %g)", amp, alpha)
            if len(records) > STALL_WINDOW:
                objs = [r.system_objective for r in records[-STALL_WINDOW - 1:]]
                ref = max(1.0, abs(objs[-1]))
                if max(objs) - min(objs) < STALL_RTOL * ref and mismatch >= eps and change < 1e-9:
                    stalled = True
                    message = (f"stalled at iteration {k}: objective unchanged over {STALL_WINDOW} iterations "
                               f"with mismatch {mismatch:.3g} MW")
                    break
        else:
            message = f"no convergence within {max_iter} iterations (mismatch {records[-1].mismatch:.3g} MW)"
    finally:
        if pool is not None:
            pool.shutdown()

    if not converged:
        log.warning(message)
    buy = np.stack([d.vars.buy for d in dispatches])
    sell = np.stack([d.vars.sell for d in dispatches])
    return MarketOutcome(
        converged=converged, iterations=records, final_prices=state, dispatches=dispatches,
        grid_buy=grid_buy, grid_sell=grid_sell, pso_income=pso_income(buy, sell, tau),
        p0=p0, tau=tau, weights=w, gamma_buy=gb, gamma_sell=gs, stalled=stalled,
        diverging=diverging, message=message, price_history=history,
    )


def clear_deterministic(config: MmgConfig, **kwargs) -> MarketOutcome:
    """Clear the market on the mean forecast alone."""
    return clear_market(config, deterministic_scenarios(config), **kwargs)


def run_isolated(config: MmgConfig, scen: ScenarioSet) -> list[MgDispatch]:
    """Solve each microgrid once at the grid prices, without coordination."""
    gb, gs = scen.gamma_buy(), scen.gamma_sell()
    p0, dt = config.market.p0, config.horizon.dt
    return [MicrogridOperator(mg, scen, m, p0, dt).solve(gb, gs) for m, mg in enumerate(config.mgs)]
