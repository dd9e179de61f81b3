"""Convex QP solver: operator splitting (ADMM) with active-set polishing.

Problems are in the standard form::

    minimize    1/2 x'Qx + c'x
    subject to  A_eq x  = b_eq
                A_in x <= b_in

The splitting iteration follows the usual OSQP scheme on the stacked
constraint matrix ``l <= A x <= u``. Once it has settled, the active set it
suggests is refined by a primal-dual active-set loop that solves the
equality-constrained KKT system directly, which gives multipliers accurate
to machine precision. Matrices are kept in scipy sparse format.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Hashable, Literal, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

Status = Literal["optimal", "infeasible", "iteration-limit"]

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 20000


class QpError(ValueError):
    """Malformed QP: dimension mismatch or non-convex cost matrix."""


def _csc(M, shape) -> sp.csc_matrix:
    if M is None:
        return sp.csc_matrix(shape)
    out = sp.csc_matrix(M, dtype=float)
    return out


@dataclass
class QpProblem:
    Q: sp.csc_matrix
    c: np.ndarray
    A_eq: sp.csc_matrix
    b_eq: np.ndarray
    A_in: sp.csc_matrix
    b_in: np.ndarray
    var_names: dict[Hashable, int] = field(default_factory=dict)
    eq_labels: Sequence[str] | None = None
    in_labels: Sequence[str] | None = None

    @classmethod
    def create(cls, Q, c, A_eq=None, b_eq=None, A_in=None, b_in=None, var_names=None,
               eq_labels=None, in_labels=None, check: bool = True) -> "QpProblem":
        c = np.asarray(c, dtype=float).ravel()
        n = c.size
        b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float).ravel()
        b_in = np.zeros(0) if b_in is None else np.asarray(b_in, dtype=float).ravel()
        prob = cls(
            Q=_csc(Q, (n, n)), c=c,
            A_eq=_csc(A_eq, (b_eq.size, n)), b_eq=b_eq,
            A_in=_csc(A_in, (b_in.size, n)), b_in=b_in,
            var_names=dict(var_names or {}), eq_labels=eq_labels, in_labels=in_labels,
        )
        if check:
            prob.validate()
        return prob

    @property
    def n(self) -> int:
        return self.c.size

    def validate(self, psd_tol: float = 1e-9) -> None:
        n = self.n
        if self.Q.shape != (n, n):
            raise QpError(f"Q has shape {self.Q.shape}, expected {(n, n)}")
        for name, A, b in (("eq", self.A_eq, self.b_eq), ("in", self.A_in, self.b_in)):
            if A.shape != (b.size, n):
                raise QpError(f"A_{name} has shape {A.shape}, expected {(b.size, n)}")
            if not np.all(np.isfinite(b)):
                raise QpError(f"b_{name} has non-finite entries")
        scale = max(1.0, abs(self.Q).max() if self.Q.nnz else 0.0)
        asym = abs(self.Q - self.Q.T)
        if asym.nnz and asym.max() > psd_tol * scale:
            raise QpError("Q is not symmetric")
        # eigen-check each connected block of Q separately
        if self.Q.nnz:
            ncomp, lab = connected_components(self.Q != 0, directed=False)
            order = np.argsort(lab, kind="stable")
            bounds = np.searchsorted(lab[order], np.arange(ncomp + 1))
            Qr = self.Q.tocsr()
            for k in range(ncomp):
                idx = order[bounds[k]:bounds[k + 1]]
                if idx.size == 1:
                    lo = Qr[idx[0], idx[0]]
                else:
                    lo = np.linalg.eigvalsh(Qr[idx][:, idx].toarray()).min()
                if lo < -psd_tol * scale:
                    raise QpError(f"Q is not positive semidefinite (eigenvalue {lo:.3g})")

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.Q @ x) + self.c @ x)

    def with_cost(self, c: np.ndarray) -> "QpProblem":
        return QpProblem(self.Q, np.asarray(c, float), self.A_eq, self.b_eq, self.A_in, self.b_in,
                         self.var_names, self.eq_labels, self.in_labels)


@dataclass(frozen=True)
class KktResiduals:
    stationarity: float
    primal_eq: float
    primal_in: float
    dual_feasibility: float
    complementarity: float

    @property
    def max(self) -> float:
        return max(self.stationarity, self.primal_eq, self.primal_in,
                   self.dual_feasibility, self.complementarity)


@dataclass
class QpSolution:
    x: np.ndarray
    duals_eq: np.ndarray
    duals_in: np.ndarray
    objective: float
    status: Status
    kkt: KktResiduals
    iterations: int = 0
    polished: bool = False
    active: np.ndarray | None = None  # bool mask over inequality rows
    infeasible_families: dict[str, float] | None = None

    def value(self, problem: QpProblem, key: Hashable) -> float:
        return float(self.x[problem.var_names[key]])


def kkt_residuals(problem: QpProblem, x, duals_eq, duals_in) -> KktResiduals:
    """Max-norm KKT residuals of a primal/dual point.

    Stationarity uses ``Qx + c + A_eq' nu + A_in' mu``; complementarity is
    ``max |mu_i (A_in x - b_in)_i|``.
    """
    x = np.asarray(x, float)
    nu = np.asarray(duals_eq, float)
    mu = np.asarray(duals_in, float)
    grad = problem.Q @ x + problem.c + problem.A_eq.T @ nu + problem.A_in.T @ mu
    req = problem.A_eq @ x - problem.b_eq
    rin = problem.A_in @ x - problem.b_in

    def nrm(v):
        return float(np.max(np.abs(v))) if v.size else 0.0

    return KktResiduals(
        stationarity=nrm(grad),
        primal_eq=nrm(req),
        primal_in=float(max(rin.max(), 0.0)) if rin.size else 0.0,
        dual_feasibility=float(max(-mu.min(), 0.0)) if mu.size else 0.0,
        complementarity=nrm(mu * rin),
    )


def dual_objective(problem: QpProblem, x, duals_eq, duals_in) -> float:
    """Lagrange dual value, valid when ``x`` satisfies stationarity."""
    x = np.asarray(x, float)
    return float(-0.5 * x @ (problem.Q @ x) - problem.b_eq @ duals_eq - problem.b_in @ duals_in)


def dump_problem(problem: QpProblem, path) -> None:
    """Write the problem matrices to a plain-text file for external checking."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# n={problem.n} m_eq={problem.b_eq.size} m_in={problem.b_in.size}\n")
        for name in ("Q", "A_eq", "A_in"):
            M = getattr(problem, name).tocoo()
            fh.write(f"[{name}] {M.shape[0]} {M.shape[1]} {M.nnz}\n")
            for i, j, v in zip(M.row, M.col, M.data):
                fh.write(f"{i} {j} {v:.17g}\n")
        for name in ("c", "b_eq", "b_in"):
            v = getattr(problem, name)
            fh.write(f"[{name}] {v.size}\n")
            fh.write(" ".join(f"{a:.17g}" for a in v) + "\n")
        fh.write("[var_names]\n")
        for k, i in problem.var_names.items():
            fh.write(f"{i} {k!r}\n")


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------


class QpSolver:
    """Reusable solver for a fixed constraint set.

    The linear cost may be swapped with :meth:`update_cost` without
    refactoring; factorizations of polished KKT systems are cached by active
    set, which makes repeated solves with slowly varying prices cheap.
    """

    sigma = 1e-6
    relax = 1.6
    rho0 = 0.1
    ruiz_iter = 15
    polish_delta = 1e-9
    polish_refine = 8
    pdas_iter = 30
    check_every = 25

    def __init__(self, problem: QpProblem, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER):
        if tol <= 0:
            raise QpError("tol must be > 0")
        self.problem = problem
        self.tol = tol
        self.max_iter = max_iter
        self.n = problem.n
        self.m_eq = problem.b_eq.size
        self.m = self.m_eq + problem.b_in.size
        A = sp.vstack([problem.A_eq, problem.A_in], format="csc")
        self.A = A
        self.l = np.concatenate([problem.b_eq, np.full(problem.b_in.size, -np.inf)])
        self.u = np.concatenate([problem.b_eq, problem.b_in])
        self._scale()
        self._kkt_cache: OrderedDict[bytes, object] = OrderedDict()
        self._admm_lu = None
        self._admm_rho = None

    # -- scaling -----------------------------------------------------------

    def _scale(self) -> None:
        n, m = self.n, self.m
        P = self.problem.Q.tocsc()
        A = self.A
        D = np.ones(n)
        E = np.ones(m)
        Ps, As = P.copy(), A.copy()
        for _ in range(self.ruiz_iter):
            col_p = _col_inf_norm(Ps)
            col_a = _col_inf_norm(As)
            d = np.maximum(col_p, col_a)
            d = 1.0 / np.sqrt(np.clip(d, 1e-4, 1e4))
            d[np.maximum(col_p, col_a) == 0] = 1.0
            e = _row_inf_norm(As)
            e = np.where(e == 0, 1.0, 1.0 / np.sqrt(np.clip(e, 1e-4, 1e4)))
            Dm, Em = sp.diags(d), sp.diags(e)
            Ps = (Dm @ Ps @ Dm).tocsc()
            As = (Em @ As @ Dm).tocsc()
            D *= d
            E *= e
        self.D, self.E = D, E
        self.Ps, self.As = Ps, As
        self.ls = np.where(np.isfinite(self.l), E * self.l, -np.inf)
        self.us = np.where(np.isfinite(self.u), E * self.u, np.inf)
        self.eq_rows = np.isfinite(self.l) & (np.abs(self.u - self.l) < 1e-12)
        self._set_cost(self.problem.c)

    def _set_cost(self, c: np.ndarray) -> None:
        self.c = np.asarray(c, float)
        qs = self.D * self.c
        pmax = np.max(_col_inf_norm(self.Ps)) if self.Ps.nnz else 0.0
        qmax = np.max(np.abs(qs)) if qs.size else 0.0
        avg = max(pmax, qmax)
        self.cs = 1.0 / np.clip(avg, 1e-4, 1e4) if avg > 0 else 1.0
        self.qs = self.cs * qs

    def update_cost(self, c: np.ndarray) -> None:
        c = np.asarray(c, float)
        if c.shape != (self.n,):
            raise QpError(f"cost vector has shape {c.shape}, expected {(self.n,)}")
        old_cs = self.cs
        self.problem = self.problem.with_cost(c)
        self._set_cost(c)
        if self.cs != old_cs:
            self._admm_lu = None  # P scaling changed

    # -- ADMM --------------------------------------------------------------

    def _factor_admm(self, rho: np.ndarray):
        n = self.n
        Pcs = self.cs * self.Ps
        K = sp.bmat([[Pcs + self.sigma * sp.eye(n), self.As.T],
                     [self.As, -sp.diags(1.0 / rho)]], format="csc")
        self._admm_lu = spla.splu(K)
        self._admm_rho = rho.copy()

    def _rho_vec(self, rho: float) -> np.ndarray:
        r = np.full(self.m, rho)
        r[self.eq_rows] = 1e3 * rho
        return r

    def _admm(self, x, z, y, start_iter: int, max_iter: int, eps: float, rho: float):
        n = self.n
        P = self.cs * self.Ps
        A, AT = self.As, self.As.T.tocsc()
        q = self.qs
        rv = self._rho_vec(rho)
        if self._admm_lu is None or not np.array_equal(self._admm_rho, rv):
            self._factor_admm(rv)
        Dinv, Einv = 1.0 / self.D, 1.0 / self.E
        k = start_iter
        for k in range(start_iter, max_iter):
            rhs = np.concatenate([self.sigma * x - q, z - y / rv])
            sol = self._admm_lu.solve(rhs)
            xt = sol[:n]
            zt = z + (sol[n:] - y) / rv
            x_new = self.relax * xt + (1 - self.relax) * x
            zr = self.relax * zt + (1 - self.relax) * z
            z_new = np.clip(zr + y / rv, self.ls, self.us)
            y_new = y + rv * (zr - z_new)
            dy = y_new - y
            x, z, y = x_new, z_new, y_new
            if (k + 1) % self.check_every:
                continue
            Ax = A @ x
            Px = P @ x
            ATy = AT @ y
            r_prim = _inf(Einv * (Ax - z))
            r_dual = _inf(Dinv * (Px + q + ATy)) / self.cs
            eps_p = eps + eps * max(_inf(Einv * Ax), _inf(Einv * z))
            eps_d = eps + eps * max(_inf(Dinv * Px), _inf(Dinv * ATy), _inf(Dinv * q)) / self.cs
            if r_prim <= eps_p and r_dual <= eps_d:
                return x, z, y, k + 1, "converged", rho
            if self._primal_infeasible(dy):
                return x, z, dy, k + 1, "infeasible", rho
            # adaptive step size
            num = r_prim / max(_inf(Einv * Ax), _inf(Einv * z), 1e-12)
            den = r_dual * self.cs / max(_inf(Dinv * Px), _inf(Dinv * ATy), _inf(Dinv * q), 1e-12)
            new_rho = float(np.clip(rho * np.sqrt(num / max(den, 1e-12)), 1e-6, 1e6))
            if new_rho > 5 * rho or new_rho < rho / 5:
                rho = new_rho
                rv = self._rho_vec(rho)
                self._factor_admm(rv)
        return x, z, y, max_iter, "max-iter", rho

    def _primal_infeasible(self, dy: np.ndarray, eps: float = 1e-5) -> bool:
        Edy = self.E * dy
        norm = _inf(Edy)
        if norm < 1e-10:
            return False
        if _inf(self.D * (self.As.T @ dy)) > eps * norm:
            return False
        pos, neg = dy > eps * norm * 1e-3, dy < -eps * norm * 1e-3
        if np.any(pos & ~np.isfinite(self.us)) or np.any(neg & ~np.isfinite(self.ls)):
            return False
        val = self.us[pos] @ dy[pos] + self.ls[neg] @ dy[neg]
        return bool(val < -eps * norm)

    # -- polishing -----------------------------------------------------------

    def _kkt_factor(self, active: np.ndarray):
        key = np.packbits(active).tobytes()
        lu = self._kkt_cache.get(key)
        if lu is not None:
            self._kkt_cache.move_to_end(key)
            return lu
        n = self.n
        pb = self.problem
        AS = sp.vstack([pb.A_eq, pb.A_in[active]], format="csc")
        ms = AS.shape[0]
        d = self.polish_delta
        if ms:
            K = sp.bmat([[pb.Q + d * sp.eye(n), AS.T], [AS, -d * sp.eye(ms)]], format="csc")
            Kexact = sp.bmat([[pb.Q, AS.T], [AS, sp.csc_matrix((ms, ms))]], format="csc")
        else:
            K = (pb.Q + d * sp.eye(n)).tocsc()
            Kexact = pb.Q.tocsc()
        try:
            lu = (spla.splu(K), Kexact, AS)
        except RuntimeError:
            lu = None
        self._kkt_cache[key] = lu
        if len(self._kkt_cache) > 8:
            self._kkt_cache.popitem(last=False)
        return lu

    def _solve_active(self, active: np.ndarray, x0: np.ndarray, nu0=None, mu0=None):
        """Solve the equality-constrained QP on ``active`` by proximal refinement.

        Each pass solves the regularized KKT system centred on the previous
        iterate, so dependent active rows or free directions of ``Q`` cannot
        blow up the duals. Starting from the multiplier estimates ``nu0`` and
        ``mu0`` selects, among non-unique multipliers, the ones closest to them.
        """
        fac = self._kkt_factor(active)
        if fac is None:
            return None
        lu, K, AS = fac
        n = self.n
        pb = self.problem
        d = self.polish_delta
        rhs = np.concatenate([-pb.c, pb.b_eq, pb.b_in[active]])
        scale = max(1.0, _inf(rhs))
        y0 = np.zeros(rhs.size - n)
        if nu0 is not None:
            y0[:self.m_eq] = nu0
        if mu0 is not None:
            y0[self.m_eq:] = mu0[active]
        sol = np.concatenate([x0, y0])
        for _ in range(self.polish_refine):
            prev = sol
            sol = lu.solve(rhs + d * np.concatenate([sol[:n], -sol[n:]]))
            if not np.all(np.isfinite(sol)):
                return None
            if _inf(K @ sol - rhs) < 1e-13 * scale or _inf(sol - prev) < 1e-13 * scale:
                break
        x = sol[:n]
        nu = sol[n:n + self.m_eq]
        mu = np.zeros(pb.b_in.size)
        mu[active] = sol[n + self.m_eq:]
        return x, nu, mu

    def _consistent(self, active: np.ndarray, out) -> bool:
        """Whether the active rows were met, i.e. the active system had a solution."""
        if out is None:
            return False
        pb = self.problem
        x = out[0]
        r_eq = _inf(pb.A_eq @ x - pb.b_eq)
        r_in = _inf(pb.A_in[active] @ x - pb.b_in[active]) if active.any() else 0.0
        scale = max(1.0, _inf(pb.b_eq), _inf(pb.b_in[np.isfinite(pb.b_in)]) if pb.b_in.size else 0.0)
        return max(r_eq, r_in) <= 1e-8 * scale

    def _pdas(self, active: np.ndarray, x0: np.ndarray, nu0=None, mu0=None):
        """Primal-dual active-set refinement starting from ``active``.

        Violated rows are added and rows with negative multipliers dropped, all
        at once. When the enlarged set over-determines the system, the
        additions are halved (most violated first) until it is solvable again.
        """
        pb = self.problem
        thr = 0.1 * self.tol
        best = None
        seen = set()
        out = self._solve_active(active, x0, nu0, mu0)
        if not self._consistent(active, out):
            return None
        for _ in range(self.pdas_iter):
            x, nu, mu = out
            kkt = kkt_residuals(pb, x, nu, mu)
            if best is None or kkt.max < best[3].max:
                best = (x, nu, mu, kkt, active.copy())
            if kkt.max <= self.tol:
                return best
            slack = pb.A_in @ x - pb.b_in
            drop = active & (mu < -thr)
            add_idx = np.flatnonzero(~active & (slack > thr))
            if not drop.any() and not add_idx.size:
                return best
            add_idx = add_idx[np.argsort(-slack[add_idx], kind="stable")]
            k = add_idx.size
            while True:
                new = active.copy()
                new[add_idx[:k]] = True
                new[drop] = False
                key = np.packbits(new).tobytes()
                cand = None if key in seen else self._solve_active(new, x, nu, np.maximum(mu, 0.0))
                if cand is not None and self._consistent(new, cand):
                    break
                if k <= 1:
                    return best
                k //= 2
            seen.add(key)
            active, out = new, cand
        return best

    # -- driver --------------------------------------------------------------

    def _package(self, x, nu, mu, status, iters, polished, active) -> QpSolution:
        pb = self.problem
        return QpSolution(x=x, duals_eq=nu, duals_in=mu, objective=pb.objective(x), status=status,
                          kkt=kkt_residuals(pb, x, nu, mu), iterations=iters, polished=polished,
                          active=active)

    def solve(self, warm: QpSolution | None = None) -> QpSolution:
        pb = self.problem
        m_in = pb.b_in.size
        if warm is not None and warm.active is not None and warm.active.shape == (m_in,):
            best = self._pdas(warm.active.copy(), warm.x, warm.duals_eq, warm.duals_in)
            if best is not None and best[3].max <= self.tol:
                x, nu, mu, _, act = best
                return self._package(x, nu, mu, "optimal", 0, True, act)

        D, E = self.D, self.E
        if warm is not None and warm.x.shape == (self.n,):
            x = warm.x / D
            z = np.clip(self.As @ x, self.ls, self.us)
            y = self.cs * np.concatenate([warm.duals_eq, warm.duals_in]) / E
        else:
            x = np.zeros(self.n)
            z = np.clip(np.zeros(self.m), self.ls, self.us)
            y = np.zeros(self.m)

        it, eps, rho = 0, 1e-3, self.rho0
        while it < self.max_iter:
            x, z, y, it, flag, rho = self._admm(x, z, y, it, self.max_iter, eps, rho)
            xu = D * x
            yu = E * y / self.cs
            if flag == "infeasible":
                # y holds the certificate direction here
                sol = self._package(xu, np.zeros(self.m_eq), np.zeros(m_in), "infeasible", it, False, None)
                sol.infeasible_families = self._blame(E * y)
                return sol
            ys = y[self.m_eq:]
            slack_s = self.us[self.m_eq:] - z[self.m_eq:]
            active = ys > slack_s
            best = self._pdas(active, xu, yu[:self.m_eq], np.maximum(yu[self.m_eq:], 0.0))
            if best is not None and best[3].max <= self.tol:
                x_, nu, mu, _, act = best
                return self._package(x_, nu, mu, "optimal", it, True, act)
            mu_u = np.maximum(yu[self.m_eq:], 0.0)
            sol = self._package(xu, yu[:self.m_eq], mu_u, "optimal", it, False, active)
            if sol.kkt.max <= self.tol:
                return sol
            if flag == "max-iter":
                break
            eps = max(eps * 0.1, 1e-10)
        mu_u = np.maximum(E[self.m_eq:] * y[self.m_eq:] / self.cs, 0.0)
        return self._package(D * x, E[:self.m_eq] * y[:self.m_eq] / self.cs, mu_u,
                             "iteration-limit", it, False, None)

    def _blame(self, y: np.ndarray) -> dict[str, float]:
        """Share of the infeasibility certificate carried by each constraint family."""
        pb = self.problem
        labels = list(pb.eq_labels or ["eq"] * self.m_eq) + list(pb.in_labels or ["in"] * pb.b_in.size)
        weights: dict[str, float] = {}
        tot = np.abs(y).sum() or 1.0
        for lab, v in zip(labels, np.abs(y)):
            weights[lab] = weights.get(lab, 0.0) + float(v / tot)
        return dict(sorted(weights.items(), key=lambda kv: -kv[1]))


def solve_qp(problem: QpProblem, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
             warm: QpSolution | None = None) -> QpSolution:
    """Solve ``problem``; ``status == "optimal"`` guarantees ``kkt.max <= tol``."""
    return QpSolver(problem, tol=tol, max_iter=max_iter).solve(warm)


def _inf(v: np.ndarray) -> float:
    return float(np.max(np.abs(v))) if v.size else 0.0


def _col_inf_norm(M: sp.csc_matrix) -> np.ndarray:
    if M.shape[0] == 0:
        return np.zeros(M.shape[1])
    return np.asarray(abs(M).max(axis=0).todense()).ravel()


def _row_inf_norm(M) -> np.ndarray:
    if M.shape[1] == 0:
        return np.zeros(M.shape[0])
    return np.asarray(abs(M).max(axis=1).todense()).ravel()
