"""Robust day-ahead dispatch QP of a single microgrid.

Decision variables live on a ``(t, h)`` grid (hour, scenario) plus per-hour
envelope variables that bound each scenario-indexed quantity from above and
below. The envelopes turn the max/min robust ramp, SOC and load-shedding
limits into linear constraints.

Objective (p0 weighting of the base case against the scenario average)::

    sum_t [ w_0 C_0(t) + sum_{h>0} w_h C_h(t) ],   w_0 = p0, w_h = (1 - p0) / H

which equals ``C_E + (1 - p0) C_R``. With a single scenario (H = 0) the
base case has weight 1.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .domain import MgConfig
from .qp import DEFAULT_TOL, QpProblem, QpSolution, QpSolver
from .scenarios import ScenarioSet

log = logging.getLogger(__name__)


class SubproblemInfeasible(RuntimeError):
    def __init__(self, mg_id: str, families: dict[str, float] | None = None, detail: str = ""):
        self.mg_id = mg_id
        self.families = families or {}
        top = ", ".join(f"{k} ({v:.0%})" for k, v in list(self.families.items())[:3])
        msg = f"microgrid {mg_id!r} dispatch problem is infeasible"
        if top:
            msg += f"; binding constraint families: {top}"
        if detail:
            msg += f"; {detail}"
        super().__init__(msg)


def scenario_weights(H: int, p0: float) -> np.ndarray:
    if H == 0:
        return np.ones(1)
    return np.concatenate([[p0], np.full(H, (1.0 - p0) / H)])


@dataclass
class MgIndex:
    """Column indices of every decision variable (-1 where absent)."""

    dg: np.ndarray  # (G, T, S)
    chg: np.ndarray  # (E, T, S)
    dis: np.ndarray
    soc: np.ndarray
    rd: np.ndarray  # (T, S)
    cd: np.ndarray
    buy: np.ndarray
    sell: np.ndarray
    dg_hi: np.ndarray  # (G, T)
    dg_lo: np.ndarray
    soc_hi: np.ndarray  # (E, T)
    soc_lo: np.ndarray
    chg_hi: np.ndarray
    chg_lo: np.ndarray
    dis_hi: np.ndarray
    dis_lo: np.ndarray
    rd_lo: np.ndarray  # (T,)
    cd_hi: np.ndarray
    has_flex: bool


@dataclass
class MgVariables:
    dg_power: np.ndarray
    ess_charge: np.ndarray
    ess_discharge: np.ndarray
    soc: np.ndarray
    load_rd: np.ndarray
    load_cd: np.ndarray
    buy: np.ndarray
    sell: np.ndarray
    dg_hi: np.ndarray
    dg_lo: np.ndarray
    soc_hi: np.ndarray
    soc_lo: np.ndarray
    chg_hi: np.ndarray
    chg_lo: np.ndarray
    dis_hi: np.ndarray
    dis_lo: np.ndarray
    rd_lo: np.ndarray
    cd_hi: np.ndarray

    @classmethod
    def from_x(cls, x: np.ndarray, idx: MgIndex) -> "MgVariables":
        def take(ix):
            out = np.where(ix >= 0, x[np.maximum(ix, 0)], 0.0) if ix.size else np.zeros(ix.shape)
            return out

        return cls(**{name: take(getattr(idx, key)) for name, key in _FIELD_MAP.items()})


_FIELD_MAP = {
    "dg_power": "dg", "ess_charge": "chg", "ess_discharge": "dis", "soc": "soc",
    "load_rd": "rd", "load_cd": "cd", "buy": "buy", "sell": "sell",
    "dg_hi": "dg_hi", "dg_lo": "dg_lo", "soc_hi": "soc_hi", "soc_lo": "soc_lo",
    "chg_hi": "chg_hi", "chg_lo": "chg_lo", "dis_hi": "dis_hi", "dis_lo": "dis_lo",
    "rd_lo": "rd_lo", "cd_hi": "cd_hi",
}


@dataclass
class MgDispatch:
    mg_id: str
    vars: MgVariables
    cost_energy: float
    cost_reserve: float
    cost_expected: float
    hourly_cost: np.ndarray  # (T, S), C_h(t)
    beta_buy: np.ndarray
    beta_sell: np.ndarray
    qp: QpSolution | None = None

    @property
    def trade_schedule(self) -> np.ndarray:
        """Net purchase (buy - sell) per ``(t, h)``."""
        return self.vars.buy - self.vars.sell

    @property
    def local_hourly_cost(self) -> np.ndarray:
        """Hourly cost excluding trade payments."""
        return self.hourly_cost - (self.beta_buy * self.vars.buy - self.beta_sell * self.vars.sell)


class _Builder:
    def __init__(self):
        self.n = 0
        self.names: dict[tuple, int] = {}
        self.eq: list[tuple[list[int], list[float], float, str]] = []
        self.ineq: list[tuple[list[int], list[float], float, str]] = []
        self.qi: list[int] = []
        self.qj: list[int] = []
        self.qv: list[float] = []

    def var(self, key: tuple) -> int:
        self.names[key] = self.n
        self.n += 1
        return self.n - 1

    def le(self, cols, vals, rhs, label):
        self.ineq.append((cols, vals, rhs, label))

    def equal(self, cols, vals, rhs, label):
        self.eq.append((cols, vals, rhs, label))

    def quad(self, cols, coef):
        """Add ``coef * (sum x_cols)^2`` to the 1/2 x'Qx objective."""
        for i in cols:
            for j in cols:
                self.qi.append(i)
                self.qj.append(j)
                self.qv.append(2.0 * coef)

    @staticmethod
    def _mat(rows, n):
        ri, ci, vi, b, labels = [], [], [], [], []
        for r, (cols, vals, rhs, label) in enumerate(rows):
            ri.extend([r] * len(cols))
            ci.extend(cols)
            vi.extend(vals)
            b.append(rhs)
            labels.append(label)
        A = sp.csc_matrix((vi, (ri, ci)), shape=(len(rows), n))
        return A, np.asarray(b, float), labels

    def problem(self, c: np.ndarray) -> QpProblem:
        n = self.n
        Q = sp.csc_matrix((self.qv, (self.qi, self.qj)), shape=(n, n))
        A_eq, b_eq, eq_labels = self._mat(self.eq, n)
        A_in, b_in, in_labels = self._mat(self.ineq, n)
        return QpProblem(Q, c, A_eq, b_eq, A_in, b_in, self.names, eq_labels, in_labels)


def _check_prices(beta: np.ndarray, T: int, S: int, name: str) -> np.ndarray:
    if beta is None:
        raise ValueError(f"{name} prices are missing")
    beta = np.asarray(beta, float)
    if beta.shape != (T, S):
        raise ValueError(f"{name} must have shape {(T, S)} (hours x scenarios), got {beta.shape}")
    if not np.all(np.isfinite(beta)):
        raise ValueError(f"{name} contains non-finite prices")
    return beta


def build_mg_problem(mg: MgConfig, scen: ScenarioSet, m: int, beta_buy, beta_sell, p0: float,
                     dt: float = 1.0) -> tuple[QpProblem, MgIndex]:
    """Assemble the robust dispatch QP of microgrid ``m`` at trading prices ``beta_*[t, h]``."""
    T, H = scen.T, scen.H
    S = H + 1
    if not 0 < p0 <= 1:
        raise ValueError("p0 must lie in (0, 1]")
    beta_buy = _check_prices(beta_buy, T, S, "beta_buy")
    beta_sell = _check_prices(beta_sell, T, S, "beta_sell")
    for g, d in enumerate(mg.dgs):
        if d.p_min > d.p_max:
            raise SubproblemInfeasible(mg.id, {"dg_bounds": 1.0}, f"DG {g} has p_min > p_max")
    for e, s in enumerate(mg.esses):
        if H and max(0.8 * s.soc_ref, s.soc_min) > min(1.2 * s.soc_ref, s.soc_max) + 1e-12:
            raise SubproblemInfeasible(mg.id, {"soc_terminal_band": 1.0}, f"ESS {e} terminal band is empty")

    w = scenario_weights(H, p0)
    G, E = len(mg.dgs), len(mg.esses)
    flex = mg.flex
    has_flex = flex is not None and (max(flex.rd_max) > 0 or max(flex.cd_max) > 0)
    net_load = np.stack([s.net_load(m) for s in scen.scenarios], axis=1)  # (T, S)
    lv = np.array([scen.mg_level(m, h) for h in range(S)])

    b = _Builder()
    dg = np.array([[[b.var(("dg", g, t, h)) for h in range(S)] for t in range(T)] for g in range(G)], int).reshape(G, T, S)
    chg = np.array([[[b.var(("chg", e, t, h)) for h in range(S)] for t in range(T)] for e in range(E)], int).reshape(E, T, S)
    dis = np.array([[[b.var(("dis", e, t, h)) for h in range(S)] for t in range(T)] for e in range(E)], int).reshape(E, T, S)
    soc = np.array([[[b.var(("soc", e, t, h)) for h in range(S)] for t in range(T)] for e in range(E)], int).reshape(E, T, S)
    if has_flex:
        rd = np.array([[b.var(("rd", t, h)) for h in range(S)] for t in range(T)], int)
        cd = np.array([[b.var(("cd", t, h)) for h in range(S)] for t in range(T)], int)
    else:
        rd = cd = np.full((T, S), -1, int)
    buy = np.array([[b.var(("buy", t, h)) for h in range(S)] for t in range(T)], int)
    sell = np.array([[b.var(("sell", t, h)) for h in range(S)] for t in range(T)], int)
    dg_hi = np.array([[b.var(("dg_hi", g, t)) for t in range(T)] for g in range(G)], int).reshape(G, T)
    dg_lo = np.array([[b.var(("dg_lo", g, t)) for t in range(T)] for g in range(G)], int).reshape(G, T)
    env = {}
    for key in ("soc_hi", "soc_lo", "chg_hi", "chg_lo", "dis_hi", "dis_lo"):
        env[key] = np.array([[b.var((key, e, t)) for t in range(T)] for e in range(E)], int).reshape(E, T)
    if has_flex:
        rd_lo = np.array([b.var(("rd_lo", t)) for t in range(T)], int)
        cd_hi = np.array([b.var(("cd_hi", t)) for t in range(T)], int)
    else:
        rd_lo = cd_hi = np.full(T, -1, int)

    c = np.zeros(b.n)

    # costs
    for t in range(T):
        for h in range(S):
            for g, d in enumerate(mg.dgs):
                b.quad([dg[g, t, h]], w[h] * d.a_g)
                c[dg[g, t, h]] += w[h] * d.b_g
            for e, s in enumerate(mg.esses):
                b.quad([chg[e, t, h], dis[e, t, h]], w[h] * s.a_e)
            if has_flex:
                b.quad([rd[t, h], cd[t, h]], w[h] * flex.a_fd)
            c[buy[t, h]] += w[h] * beta_buy[t, h]
            c[sell[t, h]] -= w[h] * beta_sell[t, h]

    # power balance
    for t in range(T):
        for h in range(S):
            cols = list(dg[:, t, h]) + list(dis[:, t, h]) + list(chg[:, t, h]) + [buy[t, h], sell[t, h]]
            vals = [1.0] * G + [1.0] * E + [-1.0] * E + [1.0, -1.0]
            if has_flex:
                cols += [rd[t, h], cd[t, h]]
                vals += [-1.0, 1.0]
            b.equal(cols, vals, net_load[t, h], "power_balance")

    # diesel generators
    for g, d in enumerate(mg.dgs):
        for t in range(T):
            for h in range(S):
                # per-scenario output limits follow from the envelope rows
                # below together with the envelope bounds
                if h:
                    b.le([dg[g, t, h], dg[g, t, 0]], [1.0, -1.0], d.r_up, "dg_reserve")
                    b.le([dg[g, t, 0], dg[g, t, h]], [1.0, -1.0], d.r_dn, "dg_reserve")
                b.le([dg[g, t, h], dg_hi[g, t]], [1.0, -1.0], 0.0, "dg_envelope")
                b.le([dg_lo[g, t], dg[g, t, h]], [1.0, -1.0], 0.0, "dg_envelope")
            b.le([dg_hi[g, t]], [1.0], d.p_max, "dg_bounds")
            b.le([dg_lo[g, t]], [-1.0], -d.p_min, "dg_bounds")
            if t:
                b.le([dg_hi[g, t], dg_lo[g, t - 1]], [1.0, -1.0], d.R_up, "dg_ramp")
                b.le([dg_hi[g, t - 1], dg_lo[g, t]], [1.0, -1.0], d.R_dn, "dg_ramp")

    # energy storage
    for e, s in enumerate(mg.esses):
        k = dt / s.B_e
        kc, kd = k * s.eta_c, k / s.eta_d
        term_lo, term_hi = max(0.8 * s.soc_ref, s.soc_min), min(1.2 * s.soc_ref, s.soc_max)
        sh, sl = env["soc_hi"][e], env["soc_lo"][e]
        ch, cl = env["chg_hi"][e], env["chg_lo"][e]
        dh, dl = env["dis_hi"][e], env["dis_lo"][e]
        for t in range(T):
            for h in range(S):
                # power and SOC limits per scenario are implied by the
                # envelope rows and the envelope bounds; omitting the
                # duplicates keeps the active sets nondegenerate
                if h == 0:
                    b.le([soc[e, t, h], sh[t]], [1.0, -1.0], 0.0, "ess_envelope")
                    b.le([sl[t], soc[e, t, h]], [1.0, -1.0], 0.0, "ess_envelope")
                b.le([chg[e, t, h], ch[t]], [1.0, -1.0], 0.0, "ess_envelope")
                b.le([cl[t], chg[e, t, h]], [1.0, -1.0], 0.0, "ess_envelope")
                b.le([dis[e, t, h], dh[t]], [1.0, -1.0], 0.0, "ess_envelope")
                b.le([dl[t], dis[e, t, h]], [1.0, -1.0], 0.0, "ess_envelope")
                if h:
                    # scenario SOC sits on the envelope side its reserve direction drives it to
                    target = sl[t] if lv[h] > 0 else sh[t]
                    b.equal([soc[e, t, h], target], [1.0, -1.0], 0.0, "soc_envelope_attainment")
            b.le([sh[t]], [1.0], s.soc_max, "soc_bounds")
            b.le([sl[t]], [-1.0], -s.soc_min, "soc_bounds")
            b.le([ch[t]], [1.0], s.pc_max, "ess_power")
            b.le([cl[t]], [-1.0], 0.0, "ess_power")
            b.le([dh[t]], [1.0], s.pd_max, "ess_power")
            b.le([dl[t]], [-1.0], 0.0, "ess_power")
            # base-case SOC recursion, starting from the reference SOC
            cols = [soc[e, t, 0], chg[e, t, 0], dis[e, t, 0]]
            vals = [1.0, -kc, kd]
            rhs = s.soc_ref if t == 0 else 0.0
            if t:
                cols.append(soc[e, t - 1, 0])
                vals.append(-1.0)
            b.equal(cols, vals, rhs, "soc_recursion")
            # robust SOC envelopes
            cols = [sh[t], ch[t], dl[t]]
            vals = [-1.0, kc, -kd]
            if t:
                cols.append(sh[t - 1])
                vals.append(1.0)
            b.le(cols, vals, -s.soc_ref if t == 0 else 0.0, "soc_envelope_recursion")
            cols = [sl[t], cl[t], dh[t]]
            vals = [1.0, -kc, kd]
            if t:
                cols.append(sl[t - 1])
                vals.append(-1.0)
            b.le(cols, vals, s.soc_ref if t == 0 else 0.0, "soc_envelope_recursion")
        b.equal([soc[e, T - 1, 0]], [1.0], s.soc_ref, "soc_terminal")
        for h in range(1, S):
            b.le([soc[e, T - 1, h]], [1.0], term_hi, "soc_terminal_band")
            b.le([soc[e, T - 1, h]], [-1.0], -term_lo, "soc_terminal_band")

    # dispatchable load
    if has_flex:
        for t in range(T):
            for h in range(S):
                b.le([rd[t, h]], [1.0], flex.rd_max[t], "load_caps")
                b.le([rd[t, h]], [-1.0], 0.0, "load_caps")
                b.le([cd[t, h]], [1.0], flex.cd_max[t], "load_caps")
                b.le([cd[t, h]], [-1.0], 0.0, "load_caps")
                b.le([rd_lo[t], rd[t, h]], [1.0, -1.0], 0.0, "load_envelope")
                b.le([cd[t, h], cd_hi[t]], [1.0, -1.0], 0.0, "load_envelope")
            b.le([rd_lo[t]], [1.0], flex.rd_max[t], "load_envelope")
            b.le([rd_lo[t]], [-1.0], 0.0, "load_envelope")
            b.le([cd_hi[t]], [1.0], flex.cd_max[t], "load_envelope")
            b.le([cd_hi[t]], [-1.0], 0.0, "load_envelope")
        b.equal(list(rd[:, 0]) + list(cd[:, 0]), [1.0] * T + [-1.0] * T, 0.0, "load_neutrality")
        b.le(list(cd_hi) + list(rd_lo), [dt] * T + [-dt] * T, flex.e_shed, "shed_budget")

    # trades with the PSO
    for t in range(T):
        for h in range(S):
            for col in (buy[t, h], sell[t, h]):
                b.le([col], [1.0], mg.p_pso_max, "trade_capacity")
                b.le([col], [-1.0], 0.0, "trade_capacity")

    idx = MgIndex(dg=dg, chg=chg, dis=dis, soc=soc, rd=rd, cd=cd, buy=buy, sell=sell,
                  dg_hi=dg_hi, dg_lo=dg_lo, rd_lo=rd_lo, cd_hi=cd_hi, has_flex=has_flex, **env)
    return b.problem(c), idx


def trade_cost_vector(base_c: np.ndarray, idx: MgIndex, w: np.ndarray, beta_buy, beta_sell) -> np.ndarray:
    """Cost vector of ``base_c`` with the trade entries repriced."""
    c = base_c.copy()
    c[idx.buy] = w[None, :] * beta_buy
    c[idx.sell] = -w[None, :] * beta_sell
    return c


def cost_breakdown(v: MgVariables, mg: MgConfig, beta_buy, beta_sell, p0: float) -> tuple[float, float, float, np.ndarray]:
    """Return ``(C_E, C_R, C_exp, C[t, h])`` for a solved dispatch.

    ``C_E`` is the base-case cost, ``C_R`` the average excess of the
    uncertainty scenarios over the base case, ``C_exp = C_E + (1 - p0) C_R``.
    """
    beta_buy = np.asarray(beta_buy, float)
    beta_sell = np.asarray(beta_sell, float)
    C = beta_buy * v.buy - beta_sell * v.sell
    for g, d in enumerate(mg.dgs):
        P = v.dg_power[g]
        C = C + d.a_g * P**2 + d.b_g * P
    for e, s in enumerate(mg.esses):
        C = C + s.a_e * (v.ess_charge[e] + v.ess_discharge[e]) ** 2
    if mg.flex is not None:
        C = C + mg.flex.a_fd * (v.load_rd + v.load_cd) ** 2
    C_E = float(C[:, 0].sum())
    H = C.shape[1] - 1
    C_R = float((C[:, 1:].mean(axis=1) - C[:, 0]).sum()) if H else 0.0
    return C_E, C_R, C_E + (1.0 - p0) * C_R, C


def regrouped_expected_cost(hourly_cost: np.ndarray, p0: float) -> float:
    """``sum_t [p0 C_0 + (1 - p0)/H sum_{h>0} C_h]`` (base case only when H = 0)."""
    H = hourly_cost.shape[1] - 1
    return float((hourly_cost @ scenario_weights(H, p0)).sum())


class MicrogridOperator:
    """Holds one microgrid's private model; answers price signals with dispatches.

    Only trade quantities need to leave this object, which keeps device
    parameters local to the operator.
    """

    def __init__(self, mg: MgConfig, scen: ScenarioSet, m: int, p0: float, dt: float = 1.0,
                 tol: float = DEFAULT_TOL):
        self.mg, self.scen, self.m, self.p0, self.dt = mg, scen, m, p0, dt
        S = scen.H + 1
        zeros = np.zeros((scen.T, S))
        self.problem, self.index = build_mg_problem(mg, scen, m, zeros, zeros, p0, dt)
        self.weights = scenario_weights(scen.H, p0)
        self._base_c = self.problem.c.copy()
        self.solver = QpSolver(self.problem, tol=tol)
        self._last: QpSolution | None = None

    def solve(self, beta_buy, beta_sell) -> MgDispatch:
        T, S = self.scen.T, self.scen.H + 1
        beta_buy = _check_prices(beta_buy, T, S, "beta_buy")
        beta_sell = _check_prices(beta_sell, T, S, "beta_sell")
        self.solver.update_cost(trade_cost_vector(self._base_c, self.index, self.weights, beta_buy, beta_sell))
        sol = self.solver.solve(warm=self._last)
        if sol.status == "infeasible":
            raise SubproblemInfeasible(self.mg.id, sol.infeasible_families)
        if sol.status != "optimal":
            raise RuntimeError(f"microgrid {self.mg.id!r}: QP stopped with status {sol.status} "
                               f"(KKT residual {sol.kkt.max:.2e})")
        self._last = sol
        v = MgVariables.from_x(sol.x, self.index)
        _net_trades(v, beta_buy, beta_sell)
        _audit_exclusivity(self.mg.id, v, beta_buy, beta_sell)
        worst = {k: x for k, x in audit_constraints(self.mg, self.scen, self.m, v, self.dt).items() if x > 1e-6}
        if worst:
            log.warning("%s: dispatch violates %s", self.mg.id,
                        ", ".join(f"{k} by {x:.2g}" for k, x in worst.items()))
        C_E, C_R, C_exp, C = cost_breakdown(v, self.mg, beta_buy, beta_sell, self.p0)
        return MgDispatch(self.mg.id, v, C_E, C_R, C_exp, C, beta_buy, beta_sell, sol)

    # message-passing face used by the coordinator
    def bid(self, beta_buy, beta_sell) -> MgDispatch:
        return self.solve(beta_buy, beta_sell)


def _net_trades(v: MgVariables, beta_buy, beta_sell) -> None:
    # with beta_buy >= beta_sell netting simultaneous buy/sell never raises cost
    ok = beta_buy >= beta_sell
    both = np.minimum(v.buy, v.sell)
    both = np.where(ok, both, 0.0)
    v.buy = v.buy - both
    v.sell = v.sell - both


def _audit_exclusivity(mg_id: str, v: MgVariables, beta_buy, beta_sell, thr: float = 1e-6) -> None:
    if v.ess_charge.size:
        sim = np.minimum(v.ess_charge, v.ess_discharge)
        if sim.max() > thr:
            e, t, h = np.unravel_index(np.argmax(sim), sim.shape)
            log.warning("%s: ESS %d charges and discharges simultaneously at t=%d h=%d (%.3g MW)",
                        mg_id, e, t, h, sim.max())


def audit_constraints(mg: MgConfig, scen: ScenarioSet, m: int, v: MgVariables, dt: float = 1.0) -> dict[str, float]:
    """Largest violation of each original constraint family, evaluated on the dispatch.

    The robust ramp, SOC and shedding limits are checked in their max/min
    form over scenarios, without the envelope variables the QP uses, so a
    zero result confirms that the linear model is exact at this dispatch.
    Returns ``{family: violation}`` with nonpositive values meaning satisfied.
    """
    T, S = v.buy.shape
    net_load = np.stack([s.net_load(m) for s in scen.scenarios], axis=1)
    out: dict[str, float] = {}

    def note(name, viol):
        viol = np.asarray(viol, float)
        if viol.size:
            out[name] = max(out.get(name, -np.inf), float(viol.max()))

    supply = v.dg_power.sum(axis=0) + v.ess_discharge.sum(axis=0) - v.ess_charge.sum(axis=0)
    note("power_balance", np.abs(supply + v.buy - v.sell - v.load_rd + v.load_cd - net_load))
    for g, d in enumerate(mg.dgs):
        P = v.dg_power[g]
        note("dg_bounds", np.maximum(P - d.p_max, d.p_min - P))
        note("dg_reserve", np.maximum(P[:, 1:] - P[:, :1] - d.r_up, P[:, :1] - P[:, 1:] - d.r_dn))
        if T > 1:
            note("dg_ramp", P[1:].max(axis=1) - P[:-1].min(axis=1) - d.R_up)
            note("dg_ramp", P[:-1].max(axis=1) - P[1:].min(axis=1) - d.R_dn)
    for e, s in enumerate(mg.esses):
        Pc, Pd, E = v.ess_charge[e], v.ess_discharge[e], v.soc[e]
        kc, kd = dt * s.eta_c / s.B_e, dt / (s.eta_d * s.B_e)
        note("ess_power", np.maximum.reduce([Pc - s.pc_max, Pd - s.pd_max, -Pc, -Pd]))
        note("soc_bounds", np.maximum(E - s.soc_max, s.soc_min - E))
        prev0 = np.concatenate([[s.soc_ref], E[:-1, 0]])
        note("soc_recursion", np.abs(E[:, 0] - prev0 - kc * Pc[:, 0] + kd * Pd[:, 0]))
        prev_hi = np.concatenate([[s.soc_ref], E[:-1].max(axis=1)])
        prev_lo = np.concatenate([[s.soc_ref], E[:-1].min(axis=1)])
        note("soc_robust", prev_hi + kc * Pc.max(axis=1) - kd * Pd.min(axis=1) - E.max(axis=1))
        note("soc_robust", E.min(axis=1) - prev_lo - kc * Pc.min(axis=1) + kd * Pd.max(axis=1))
        note("soc_terminal", abs(E[-1, 0] - s.soc_ref))
        if S > 1:
            lo, hi = max(0.8 * s.soc_ref, s.soc_min), min(1.2 * s.soc_ref, s.soc_max)
            note("soc_terminal_band", np.maximum(E[-1, 1:] - hi, lo - E[-1, 1:]))
    if mg.flex is not None:
        rd_max = np.asarray(mg.flex.rd_max)[:, None]
        cd_max = np.asarray(mg.flex.cd_max)[:, None]
        note("load_caps", np.maximum.reduce([v.load_rd - rd_max, v.load_cd - cd_max, -v.load_rd, -v.load_cd]))
        note("load_neutrality", abs(float(v.load_rd[:, 0].sum() - v.load_cd[:, 0].sum())))
        note("shed_budget", dt * float((v.load_cd.max(axis=1) - v.load_rd.min(axis=1)).sum()) - mg.flex.e_shed)
    note("trade_capacity", np.maximum.reduce([v.buy - mg.p_pso_max, v.sell - mg.p_pso_max, -v.buy, -v.sell]))
    return out


def solve_mg(mg: MgConfig, scen: ScenarioSet, m: int, beta_buy, beta_sell, p0: float,
             dt: float = 1.0) -> MgDispatch:
    """Build and solve microgrid ``m``'s robust dispatch at fixed trading prices."""
    return MicrogridOperator(mg, scen, m, p0, dt).solve(beta_buy, beta_sell)


def dispatch_rows(d: MgDispatch):
    """Yield ``(t, h, device, value)`` rows for CSV output (1-based hours)."""
    v = d.vars
    T, S = v.buy.shape
    for t in range(T):
        for h in range(S):
            for g in range(v.dg_power.shape[0]):
                yield t + 1, h, f"dg[{g}]", v.dg_power[g, t, h]
            for e in range(v.ess_charge.shape[0]):
                yield t + 1, h, f"ess[{e}].charge", v.ess_charge[e, t, h]
                yield t + 1, h, f"ess[{e}].discharge", v.ess_discharge[e, t, h]
                yield t + 1, h, f"ess[{e}].soc", v.soc[e, t, h]
            yield t + 1, h, "load.redispatch", v.load_rd[t, h]
            yield t + 1, h, "load.curtail", v.load_cd[t, h]
            yield t + 1, h, "pso.buy", v.buy[t, h]
            yield t + 1, h, "pso.sell", v.sell[t, h]
