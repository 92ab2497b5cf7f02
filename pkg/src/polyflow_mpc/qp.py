"""Dense convex QP solver based on ADMM operator splitting.

Solves::

    minimize    0.5 z' Hq z + g' z
    subject to  G z <= bound
                E z  = e

The iteration follows the OSQP splitting (Stellato et al.) on the stacked
constraint matrix ``[G; E]`` with Ruiz equilibration, over-relaxation,
adaptive penalty and an active-set polishing step that turns a moderately
accurate ADMM iterate into a high-accuracy KKT point.

Many problems that share ``Hq``, ``G`` and ``E`` but differ in ``g``, ``bound``
and ``e`` can be solved together with :func:`solve_qp_batch`; every problem keeps
its own penalty and termination state.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class QpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    MAX_ITER = "max_iter"


@dataclass
class QpSettings:
    eps_p: float = 1e-8
    eps_d: float = 1e-8
    rho: float = 1.0
    max_iter: int = 20_000
    alpha: float = 1.6
    sigma: float = 1e-6
    adapt_interval: int = 25
    check_interval: int = 10
    eps_infeas: float = 1e-4
    polish: bool = True
    polish_threshold: float = 1e-2
    polish_fallback_after: int = 1000
    infeas_margin: float = 1e-6
    scaling_iter: int = 15


@dataclass
class QpProblem:
    Hq: np.ndarray
    g: np.ndarray
    G: np.ndarray | None = None
    bound: np.ndarray | None = None
    E: np.ndarray | None = None
    e: np.ndarray | None = None
    constant: float = 0.0

    def __post_init__(self):
        self.Hq = np.atleast_2d(np.asarray(self.Hq, dtype=float))
        p = self.Hq.shape[0]
        if self.Hq.shape != (p, p):
            raise ValueError("Hq must be square")
        self.Hq = 0.5 * (self.Hq + self.Hq.T)
        self.g = np.asarray(self.g, dtype=float).reshape(p)
        if self.G is None:
            self.G = np.zeros((0, p))
            self.bound = np.zeros(0)
        self.G = np.asarray(self.G, dtype=float).reshape(-1, p)
        self.bound = np.asarray(self.bound, dtype=float).reshape(self.G.shape[0])
        if self.E is None:
            self.E = np.zeros((0, p))
            self.e = np.zeros(0)
        self.E = np.asarray(self.E, dtype=float).reshape(-1, p)
        self.e = np.asarray(self.e, dtype=float).reshape(self.E.shape[0])
        for name in ("Hq", "g", "G", "bound", "E", "e"):
            if np.isnan(getattr(self, name)).any():
                raise ValueError(f"NaN in QP data {name}")

    @property
    def p(self) -> int:
        return self.Hq.shape[0]

    def objective(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ self.Hq @ z + self.g @ z + self.constant)


@dataclass
class QpSolution:
    z: np.ndarray
    status: QpStatus
    objective: float
    primal_residual: float
    dual_residual: float
    iterations: int
    y_ineq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    y_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    polished: bool = False

    @property
    def optimal(self) -> bool:
        return self.status is QpStatus.OPTIMAL


def solve_qp(prob: QpProblem, settings: QpSettings | None = None, warm_start=None) -> QpSolution:
    """Solve a single QP; ``warm_start`` is an initial primal guess for z."""
    ws = None if warm_start is None else np.asarray(warm_start, dtype=float)[None, :]
    return solve_qp_batch(
        prob.Hq, prob.G, prob.E, prob.g[None], prob.bound[None], prob.e[None], settings, warm_start=ws
    )[0]


def solve_qp_batch(Hq, G, E, g, bound, e=None, settings=None, warm_start=None) -> list[QpSolution]:
    """Solve problems sharing (Hq, G, E); ``g``, ``bound``, ``e`` carry one row per problem."""
    settings = settings or QpSettings()
    Hq = np.atleast_2d(np.asarray(Hq, dtype=float))
    Hq = 0.5 * (Hq + Hq.T)
    p = Hq.shape[0]
    G = np.zeros((0, p)) if G is None else np.asarray(G, dtype=float).reshape(-1, p)
    E = np.zeros((0, p)) if E is None else np.asarray(E, dtype=float).reshape(-1, p)
    g = np.atleast_2d(np.asarray(g, dtype=float))
    nb = g.shape[0]
    bound = np.asarray(bound, dtype=float).reshape(nb, G.shape[0])
    e = np.zeros((nb, 0)) if e is None else np.asarray(e, dtype=float).reshape(nb, E.shape[0])
    for arr in (Hq, G, E, g, bound, e):
        if np.isnan(arr).any():
            raise ValueError("NaN in QP data")
    return _Admm(Hq, G, E, g, bound, e, settings).run(warm_start)


def _ruiz(P, A, iters):
    """Symmetric equilibration of the KKT matrix [[P, A'], [A, 0]]."""
    n, m = P.shape[0], A.shape[0]
    D = np.ones(n)
    Es = np.ones(m)
    Ps, As = P.copy(), A.copy()
    for _ in range(iters):
        col_x = np.maximum(np.abs(Ps).max(axis=0, initial=0.0), np.abs(As).max(axis=0, initial=0.0))
        col_z = np.abs(As).max(axis=1, initial=0.0)
        dx = 1.0 / np.sqrt(_clip_norm(col_x))
        dz = 1.0 / np.sqrt(_clip_norm(col_z))
        D *= dx
        Es *= dz
        Ps = dx[:, None] * Ps * dx[None, :]
        As = dz[:, None] * As * dx[None, :]
    return D, Es


def _clip_norm(v):
    v = v.copy()
    v[v < 1e-4] = 1.0
    return np.minimum(v, 1e4)


class _Admm:
    def __init__(self, Hq, G, E, g, bound, e, settings: QpSettings):
        self.s = settings
        self.n = Hq.shape[0]
        self.q_ineq = G.shape[0]
        self.P0 = Hq
        self.A0 = np.vstack([G, E])
        self.q0 = g
        nb = g.shape[0]
        self.l0 = np.hstack([np.full((nb, G.shape[0]), -np.inf), e])
        self.u0 = np.hstack([bound, e])
        self.is_eq = np.r_[np.zeros(G.shape[0], bool), np.ones(E.shape[0], bool)]

        D, Es = _ruiz(Hq, self.A0, settings.scaling_iter)
        P = D[:, None] * Hq * D[None, :]
        qs = g * D
        cost_norm = max(np.abs(P).max(axis=0, initial=0.0).mean() if self.n else 0.0, np.abs(qs).max(initial=0.0))
        c = 1.0 / float(_clip_norm(np.array([cost_norm]))[0])
        self.D, self.Es, self.c = D, Es, c
        self.P = c * P
        self.A = Es[:, None] * self.A0 * D[None, :]
        self.q = c * qs
        self.l = self.l0 * Es
        self.u = self.u0 * Es
        self.rho_scale = np.where(self.is_eq, 1e3, 1.0)
        self.AtA_in = self.A.T @ (self.rho_scale[:, None] * self.A)

    # -- linear system ---------------------------------------------------
    def _kkt_inv(self, rho):
        K = self.P[None] + self.s.sigma * np.eye(self.n)[None] + rho[:, None, None] * self.AtA_in[None]
        return np.linalg.inv(K)

    def run(self, warm_start):
        s = self.s
        nb = self.q.shape[0]
        n, m = self.n, self.A.shape[0]
        x = np.zeros((nb, n))
        if warm_start is not None:
            x = np.asarray(warm_start, dtype=float).reshape(nb, n) / self.D
        z = x @ self.A.T
        z = np.clip(z, self.l, self.u)
        y = np.zeros((nb, m))
        rho = np.full(nb, s.rho)
        Kinv = self._kkt_inv(rho)

        results: list[QpSolution | None] = [None] * nb
        idx = np.arange(nb)
        last_polish = np.full(nb, np.inf)
        last_polish_it = np.zeros(nb)
        q, l, u = self.q, self.l, self.u
        it = 0
        while idx.size and it < s.max_iter:
            it += 1
            x_prev, y_prev = x, y
            rv = rho[:, None] * self.rho_scale[None, :]
            rhs = s.sigma * x - q + (rv * z - y) @ self.A
            xt = np.einsum("bij,bj->bi", Kinv, rhs)
            zt = xt @ self.A.T
            x = s.alpha * xt + (1 - s.alpha) * x
            zr = s.alpha * zt + (1 - s.alpha) * z
            z = np.clip(zr + y / rv, l, u)
            y = y + rv * (zr - z)

            if it % s.check_interval and it != s.max_iter:
                continue
            done = np.zeros(idx.size, bool)
            prim, dual, xs, ys = self._residuals(x, z, y, q)
            for j in range(idx.size):
                b = idx[j]
                if prim[j] <= s.eps_p and dual[j] <= s.eps_d:
                    results[b] = self._make(b, xs[j], ys[j], QpStatus.OPTIMAL, it)
                    done[j] = True
                    continue
                if self._primal_infeasible(y[j] - y_prev[j], l[j], u[j]):
                    results[b] = self._make(b, xs[j], ys[j], QpStatus.INFEASIBLE, it)
                    done[j] = True
                    continue
                if self._dual_infeasible(x[j] - x_prev[j], q[j], l[j], u[j]):
                    results[b] = self._make(b, xs[j], ys[j], QpStatus.UNBOUNDED, it)
                    done[j] = True
                    continue
                if s.polish:
                    scale = max(prim[j], dual[j])
                    if scale <= s.polish_threshold and (scale < 0.5 * last_polish[b] or it - last_polish_it[b] >= 100):
                        last_polish[b] = scale
                        last_polish_it[b] = it
                        deep = it >= s.polish_fallback_after
                        pol = self._polish(b, xs[j], z[j] / self.Es, ys[j], it, deep)
                        if pol is not None:
                            results[b] = pol
                            done[j] = True
            if it == s.max_iter:
                for j in np.flatnonzero(~done):
                    results[idx[j]] = self._make(idx[j], xs[j], ys[j], QpStatus.MAX_ITER, it)
                break
            if done.any():
                keep = ~done
                idx, x, z, y, rho, Kinv = idx[keep], x[keep], z[keep], y[keep], rho[keep], Kinv[keep]
                q, l, u = q[keep], l[keep], u[keep]
            if idx.size and it % s.adapt_interval == 0:
                rho, Kinv = self._adapt_rho(x, z, y, q, rho, Kinv)
        return results

    # -- helpers ------------------------------------------------------------
    def _unscale(self, x, y):
        return x * self.D, y * self.Es / self.c

    def _residuals(self, x, z, y, q):
        Ax = x @ self.A.T
        prim = np.abs((Ax - z) / self.Es).max(axis=1, initial=0.0)
        dual_vec = x @ self.P.T + q + y @ self.A
        dual = np.abs(dual_vec / (self.c * self.D)).max(axis=1, initial=0.0)
        xs, ys = self._unscale(x, y)
        return prim, dual, xs, ys

    def _adapt_rho(self, x, z, y, q, rho, Kinv):
        Ax = x @ self.A.T
        Px = x @ self.P.T
        Aty = y @ self.A
        eps = 1e-30
        prim = np.abs(Ax - z).max(axis=1, initial=0.0)
        dual = np.abs(Px + q + Aty).max(axis=1, initial=0.0)
        pn = np.maximum(np.abs(Ax).max(axis=1, initial=0.0), np.abs(z).max(axis=1, initial=0.0))
        dn = np.maximum.reduce([np.abs(Px).max(axis=1, initial=0.0), np.abs(Aty).max(axis=1, initial=0.0),
                                np.abs(q).max(axis=1, initial=0.0)])
        ratio = np.sqrt((prim / (pn + eps) + eps) / (dual / (dn + eps) + eps))
        new_rho = np.clip(rho * ratio, 1e-6, 1e6)
        change = (new_rho > 5 * rho) | (new_rho < 0.2 * rho)
        if change.any():
            rho = np.where(change, new_rho, rho)
            Kinv = Kinv.copy()
            Kinv[change] = self._kkt_inv(rho[change])
        return rho, Kinv

    def _primal_infeasible(self, dy, l, u):
        # certificate in unscaled variables: A0' dy = 0, u' dy+ + l' dy- < 0
        dyu = dy * self.Es
        norm = np.abs(dyu).max(initial=0.0)
        if norm <= 1e-12:
            return False
        tol = self.s.eps_infeas * norm
        if np.abs(dyu @ self.A0).max(initial=0.0) > tol:
            return False
        neg = dyu < 0
        lu = l / self.Es
        if np.any(neg & ~np.isfinite(lu) & (dyu < -tol)):
            return False
        uu = u / self.Es
        support = uu @ np.maximum(dyu, 0) + np.where(np.isfinite(lu), lu, 0.0) @ np.minimum(dyu, 0)
        return support < -tol

    def _dual_infeasible(self, dx, q, l, u):
        dxu = dx * self.D
        norm = np.abs(dxu).max(initial=0.0)
        if norm <= 1e-12:
            return False
        tol = self.s.eps_infeas * norm
        if np.abs(self.P0 @ dxu).max(initial=0.0) > tol:
            return False
        if (q / self.c / self.D) @ dxu > -tol:
            return False
        Adx = self.A0 @ dxu
        upper_ok = np.where(np.isfinite(u / self.Es), Adx <= tol, True)
        lower_ok = np.where(np.isfinite(l / self.Es), Adx >= -tol, True)
        return bool(np.all(upper_ok & lower_ok))

    def _make(self, b, x, y, status, it, polished=False):
        prim, dual = self._true_residuals(b, x, y)
        obj = float(0.5 * x @ self.P0 @ x + self.q0[b] @ x)
        return QpSolution(
            z=x.copy(),
            status=status,
            objective=obj,
            primal_residual=prim,
            dual_residual=dual,
            iterations=it,
            y_ineq=y[: self.q_ineq].copy(),
            y_eq=y[self.q_ineq:].copy(),
            polished=polished,
        )

    def _true_residuals(self, b, x, y):
        Ax = self.A0 @ x
        viol = np.maximum(Ax - self.u0[b], 0) + np.maximum(self.l0[b] - Ax, 0)
        prim = float(viol.max(initial=0.0))
        dual = float(np.abs(self.P0 @ x + self.q0[b] + self.A0.T @ y).max(initial=0.0))
        return prim, dual

    def _polish(self, b, x, z, y, it, deep=True):
        """Turn an approximate ADMM iterate into an exact KKT point.

        First the active set is guessed from (z, y) as in OSQP. If that guess
        does not verify, a primal active-set method is run from ``x`` on bounds
        relaxed just enough to make ``x`` feasible; its final working set is
        then solved against the true bounds. When the relaxation misleads it,
        the method is restarted from a feasible point found by a phase-one LP.
        A phase-one optimum with violation above ``infeas_margin`` is returned
        as an infeasibility certificate.
        """
        up = self.u0[b]
        ineq = ~self.is_eq
        guess = ((up - z < y) & ineq) | self.is_eq
        sol = self._solve_on(b, guess)
        if sol is not None:
            return self._make(b, *sol, QpStatus.OPTIMAL, it, polished=True)
        if not deep:
            return None
        starts = [x]
        ph1 = _phase_one(self.A0, up, self.is_eq, x)
        if ph1 is not None:
            if ph1[1] > self.s.infeas_margin * max(1.0, np.abs(up).max(initial=1.0)):
                return self._make(b, x, y, QpStatus.INFEASIBLE, it)
            starts.append(ph1[0])
        for x_start in starts:
            res = _active_set_refine(self.P0, self.q0[b], self.A0, up, self.is_eq, x_start)
            if res is None:
                continue
            sol = self._solve_on(b, res[0])
            if sol is not None:
                return self._make(b, *sol, QpStatus.OPTIMAL, it, polished=True)
        return None

    def _solve_on(self, b, work):
        up = self.u0[b]
        act = np.flatnonzero(work)
        n, k = self.n, act.size
        Aa = self.A0[act]
        K = np.zeros((n + k, n + k))
        K[:n, :n] = self.P0
        K[:n, n:] = Aa.T
        K[n:, :n] = Aa
        xp = np.linalg.lstsq(K, np.r_[-self.q0[b], up[act]], rcond=None)[0][:n]
        Ax = self.A0 @ xp
        yp = self._nnls_multipliers(xp, Ax, b)
        prim, dual = self._true_residuals(b, xp, yp)
        if prim <= self.s.eps_p and dual <= self.s.eps_d:
            return xp, yp
        return None

    def _nnls_multipliers(self, x, Ax, b):
        from scipy.optimize import nnls

        up = self.u0[b]
        ineq = ~self.is_eq
        slack = up - Ax
        act = np.flatnonzero(ineq & (slack <= 10 * self.s.eps_p * max(1.0, np.abs(up[ineq]).max(initial=1.0))))
        eq = np.flatnonzero(self.is_eq)
        grad = self.P0 @ x + self.q0[b]
        M = np.hstack([self.A0[act].T, self.A0[eq].T, -self.A0[eq].T])
        y = np.zeros(self.A0.shape[0])
        if M.shape[1] == 0:
            return y
        lam, _ = nnls(M, -grad, maxiter=20 * M.shape[1] + 100)
        y[act] = lam[: act.size]
        y[eq] = lam[act.size: act.size + eq.size] - lam[act.size + eq.size:]
        return y


@dataclass
class KktReport:
    passed: bool
    stationarity: float
    complementarity: float
    primal_violation: float
    dual_violation: float


def kkt_check(prob: QpProblem, sol: QpSolution, tol: float = 1e-6) -> KktReport:
    """Verify the KKT conditions at ``sol.z``.

    Multipliers are reconstructed from scratch: inequality rows within ``tol``
    of their bound are treated as active and the stationarity system is solved
    by non-negative least squares over those rows together with the equalities.
    """
    from scipy.optimize import nnls

    z = np.asarray(sol.z, dtype=float)
    slack = prob.bound - prob.G @ z
    primal = max(float(np.maximum(-slack, 0).max(initial=0.0)),
                 float(np.abs(prob.E @ z - prob.e).max(initial=0.0)))
    grad = prob.Hq @ z + prob.g
    active = np.flatnonzero(slack <= tol * max(1.0, np.abs(prob.bound).max(initial=1.0)))
    Ga = prob.G[active]
    # equality multipliers are free: split into +/- parts for NNLS
    M = np.hstack([Ga.T, prob.E.T, -prob.E.T])
    if M.shape[1]:
        lam, _ = nnls(M, -grad, maxiter=50 * M.shape[1] + 100)
    else:
        lam = np.zeros(0)
    y_in = np.zeros(prob.G.shape[0])
    y_in[active] = lam[: active.size]
    nu = lam[active.size: active.size + prob.E.shape[0]] - lam[active.size + prob.E.shape[0]:]
    stat = float(np.abs(grad + prob.G.T @ y_in + prob.E.T @ nu).max(initial=0.0))
    comp = float(np.abs(y_in * slack).max(initial=0.0))
    dual_viol = float(np.maximum(-y_in, 0).max(initial=0.0))
    passed = stat <= tol and comp <= tol and primal <= tol and dual_viol <= tol
    return KktReport(passed, stat, comp, primal, dual_viol)


def _null_space(M, n):
    if M.shape[0] == 0:
        return np.eye(n)
    _, sv, Vt = np.linalg.svd(M)
    r = int(np.sum(sv > 1e-12 * max(1.0, sv[0])))
    return Vt[r:].T


def _active_set_refine(P, q, A, u, is_eq, x0, max_iter=None):
    """Primal active-set method for min 0.5x'Px + q'x s.t. A x <= u (rows in ``is_eq`` fixed).

    Bounds are relaxed to max(u, A x0) so that ``x0`` is feasible. Returns the
    final working set as a boolean mask together with the final iterate, or
    None if the iteration cap is hit.
    """
    n = P.shape[0]
    x = np.asarray(x0, dtype=float).copy()
    ub = np.maximum(u, A @ x)
    work = is_eq.copy()
    max_iter = max_iter or 4 * (n + A.shape[0])
    for _ in range(max_iter):
        grad = P @ x + q
        Z = _null_space(A[work], n)
        gtol = 1e-12 * max(1.0, np.abs(q).max(initial=0.0), np.abs(grad).max(initial=0.0))
        ray = False
        if Z.shape[1] and np.abs(Z.T @ grad).max() > gtol:
            Hr = Z.T @ P @ Z
            gr = Z.T @ grad
            pz = np.linalg.lstsq(Hr, -gr, rcond=1e-14)[0]
            if np.abs(Hr @ pz + gr).max(initial=0.0) > 1e-9 * max(1.0, np.abs(gr).max(initial=0.0)):
                # reduced Hessian is singular along -gr: follow the descent ray to the nearest constraint
                pz = -gr
                ray = True
            p = Z @ pz
        else:
            p = np.zeros(n)
        scale = max(1.0, np.abs(x).max(initial=0.0))
        if np.abs(p).max(initial=0.0) <= 1e-13 * scale:
            act = np.flatnonzero(work)
            lam = np.linalg.lstsq(A[act].T, -grad, rcond=None)[0]
            lam_in = np.where(is_eq[act], np.inf, lam)
            if lam_in.size == 0 or lam_in.min() >= -1e-12:
                return work, x
            work[act[int(np.argmin(lam_in))]] = False
            continue
        Ap = A @ p
        slack = ub - A @ x
        cand = (~work) & (Ap > 1e-14 * np.abs(p).max())
        step = np.inf if ray else 1.0
        block = -1
        if cand.any():
            ratios = np.where(cand, np.maximum(slack, 0.0) / np.where(cand, Ap, 1.0), np.inf)
            block = int(np.argmin(ratios))
            if ratios[block] < step:
                step = ratios[block]
            else:
                block = -1
        x = x + step * p
        if block >= 0:
            work[block] = True
        elif not np.isfinite(step) or np.abs(p).max() * step > 1e12 * scale:
            return None
    return None


def _phase_one(A, u, is_eq, x0):
    """min t s.t. A x - t <= u (equalities split), t >= 0, started from ``x0``.

    Returns (x, t) at the phase-one optimum, or None if the active-set
    iteration fails. t > 0 at a verified optimum certifies infeasibility.
    """
    n = A.shape[1]
    rows = np.vstack([A, -A[is_eq]])
    rhs = np.concatenate([u, -u[is_eq]])
    Ap = np.vstack([np.hstack([rows, -np.ones((rows.shape[0], 1))]), np.r_[np.zeros(n), -1.0][None]])
    up = np.r_[rhs, 0.0]
    t0 = max(0.0, float(np.max(rows @ x0 - rhs, initial=0.0)))
    q = np.r_[np.zeros(n), 1.0]
    res = _active_set_refine(np.zeros((n + 1, n + 1)), q, Ap, up, np.zeros(up.size, bool), np.r_[x0, t0])
    if res is None:
        return None
    xt = res[1]
    return xt[:n], float(xt[-1])
