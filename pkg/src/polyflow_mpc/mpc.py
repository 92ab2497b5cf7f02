"""Lifted linear MPC in condensed form, closed-loop simulation and domain scans."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .dynamics import DiscreteSystem
from .lifting import LiftedModel
from .lincontrol import (
    ConstraintSpec,
    DareSolution,
    InvariantSet,
    check_observability,
    max_invariant_set,
    solve_dare,
)
from .qp import QpProblem, QpSettings, QpStatus, solve_qp, solve_qp_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MpcSpec:
    model: LiftedModel
    horizon: int
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    terminal_set: InvariantSet | None
    constraints: ConstraintSpec
    K: np.ndarray | None = None

    def __post_init__(self):
        n, m, nt = self.model.n, self.model.m, self.model.n_lift
        if np.shape(self.Q) != (n, n) or np.shape(self.R) != (m, m) or np.shape(self.P) != (nt, nt):
            raise ValueError("MPC weights do not match the model dimensions")
        if self.terminal_set is not None and self.terminal_set.polytope.d != nt:
            raise ValueError("terminal set must live in the lifted space")

    @cached_property
    def condensed(self) -> "CondensedMpc":
        return CondensedMpc(self)


def design_mpc(model: LiftedModel, constraints: ConstraintSpec, horizon: int = 10, Q=None, R=None,
               terminal: bool = True, k_max: int = 200, dare: DareSolution | None = None) -> MpcSpec:
    """LQR terminal weight from the DARE and the maximal invariant terminal set."""
    Q = np.eye(model.n) if Q is None else np.atleast_2d(np.asarray(Q, dtype=float))
    R = 0.1 * np.eye(model.m) if R is None else np.atleast_2d(np.asarray(R, dtype=float))
    check_observability(model.A, model.C)
    if dare is None:
        dare = solve_dare(model.A, model.B, model.C.T @ Q @ model.C, R)
    tset = None
    if terminal:
        tset = max_invariant_set(model.A, model.B, dare.K, model.C, constraints.state_set, constraints.input_set,
                                 k_max=k_max)
    return MpcSpec(model, horizon, Q, R, dare.P, tset, constraints, dare.K)


class CondensedMpc:
    """Input-only QP data: 0.5 z'Hq z + (Gc x~0)'z + x~0'Hc x~0, G z <= b0 - Fb x~0.

    ``Gc``, ``Hc`` and ``Fb`` document the structure; :meth:`data` evaluates them accurately.
    """

    def __init__(self, spec: MpcSpec):
        mdl = spec.model
        A, B, C = mdl.A, mdl.B, mdl.C
        N, nt, m = spec.horizon, mdl.n_lift, mdl.m
        # free response Phi_i = A^i and forced response Gamma_i (block row i)
        Phi = [np.eye(nt)]
        for _ in range(N):
            Phi.append(A @ Phi[-1])
        AkB = [B]
        for _ in range(N - 1):
            AkB.append(A @ AkB[-1])
        Gam = [np.zeros((nt, N * m)) for _ in range(N + 1)]
        for i in range(1, N + 1):
            for j in range(i):
                Gam[i][:, j * m:(j + 1) * m] = AkB[i - 1 - j]
        Qs = C.T @ spec.Q @ C
        H = np.kron(np.eye(N), spec.R)
        Gc = np.zeros((N * m, nt))
        Hc = np.zeros((nt, nt))
        for i in range(N + 1):
            W = spec.P if i == N else Qs
            H += Gam[i].T @ W @ Gam[i]
            Gc += Gam[i].T @ W @ Phi[i]
            Hc += Phi[i].T @ W @ Phi[i]
        self.Hq = 2 * H
        self.Gc = 2 * Gc
        self.Hc = Hc

        X, U = spec.constraints.state_set, spec.constraints.input_set
        rows, b0, Fb = [], [], []
        for i in range(N):
            rows.append(X.H @ C @ Gam[i])
            b0.append(X.h)
            Fb.append(X.H @ C @ Phi[i])
        Iu = np.eye(N * m)
        for i in range(N):
            rows.append(U.H @ Iu[i * m:(i + 1) * m])
            b0.append(U.h)
            Fb.append(np.zeros((U.H.shape[0], nt)))
        if spec.terminal_set is not None:
            Tf = spec.terminal_set.polytope
            rows.append(Tf.H @ Gam[N])
            b0.append(Tf.h)
            Fb.append(Tf.H @ Phi[N])
        self.G = np.vstack(rows)
        self.b0 = np.concatenate(b0)
        self.Fb = np.vstack(Fb)
        self.Phi = np.stack(Phi)
        self.Gam = np.stack(Gam)
        self.WGam = np.stack([(spec.P if i == N else Qs) @ Gam[i] for i in range(N + 1)])
        self.W = np.stack([Qs] * N + [spec.P])
        self.spec = spec

    def data(self, lifted_x0):
        """Gradient, constraint bound and constant term for a batch of lifted initial states.

        The free response A^i x~0 is rolled out as vectors: for badly scaled
        lifts (large ||A^i|| and ||P||) contracting the precomputed Gc, Hc and
        Fb loses many digits to cancellation.
        """
        z0 = np.atleast_2d(np.asarray(lifted_x0, dtype=float))
        spec = self.spec
        A, C, N = spec.model.A, spec.model.C, spec.horizon
        X, U = spec.constraints.state_set, spec.constraints.input_set
        free = [z0]
        for _ in range(N):
            free.append(free[-1] @ A.T)
        g = 2 * sum(free[i] @ self.WGam[i] for i in range(N + 1))
        const = sum(np.einsum("bi,ij,bj->b", free[i], self.W[i], free[i]) for i in range(N + 1))
        HC = X.H @ C
        parts = [X.h[None] - free[i] @ HC.T for i in range(N)]
        parts += [np.broadcast_to(U.h, (len(z0), U.h.size))] * N
        if spec.terminal_set is not None:
            Tf = spec.terminal_set.polytope
            parts.append(Tf.h[None] - free[N] @ Tf.H.T)
        return g, np.hstack(parts), const

    def qp(self, lifted_x0) -> QpProblem:
        g, bound, const = self.data(lifted_x0)
        return QpProblem(self.Hq, g[0], self.G, bound[0], constant=float(const[0]))

    def predict(self, lifted_x0, u_seq) -> np.ndarray:
        z = np.asarray(u_seq, dtype=float).ravel()
        free = [np.asarray(lifted_x0, dtype=float)]
        for _ in range(self.spec.horizon):
            free.append(self.spec.model.A @ free[-1])
        return np.array(free) + np.einsum("ijk,k->ij", self.Gam, z)


def build_condensed_qp(spec: MpcSpec, x) -> QpProblem:
    """Condensed QP over the input sequence for the plant state ``x``."""
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.model.n,):
        raise ValueError(f"state must have shape ({spec.model.n},)")
    if not spec.constraints.state_set.contains(x):
        log.debug("state %s outside X; the QP decides feasibility", x)
    return spec.condensed.qp(spec.model.lift(x))


@dataclass
class MpcSolution:
    u_seq: np.ndarray
    predicted: np.ndarray
    cost: float
    status: QpStatus
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status is QpStatus.OPTIMAL


def rollout(model: LiftedModel, lifted_x0, u_seq) -> np.ndarray:
    out = [np.asarray(lifted_x0, dtype=float)]
    for u in u_seq:
        out.append(model.A @ out[-1] + model.B @ u)
    return np.array(out)


def mpc_step(spec: MpcSpec, x, warm_start=None, settings: QpSettings | None = None) -> MpcSolution:
    prob = build_condensed_qp(spec, x)
    sol = solve_qp(prob, settings, warm_start=warm_start)
    N, m = spec.horizon, spec.model.m
    u_seq = sol.z.reshape(N, m)
    lifted = spec.model.lift(np.asarray(x, dtype=float))
    return MpcSolution(u_seq, rollout(spec.model, lifted, u_seq), prob.objective(sol.z), sol.status, sol.iterations)


def shift_warm_start(u_seq: np.ndarray) -> np.ndarray:
    return np.vstack([u_seq[1:], u_seq[-1:]]).ravel()


@dataclass
class ClosedLoopRun:
    states: np.ndarray
    inputs: np.ndarray
    statuses: list
    lq_cost: float
    terminated: str
    lost_step: int | None = None
    final_input: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def completed(self) -> bool:
        return self.terminated == "completed"


def lq_cost(states, inputs, Q, R) -> float:
    states = np.atleast_2d(states)
    inputs = np.atleast_2d(inputs)
    return float(np.einsum("ti,ij,tj->", states, Q, states) + np.einsum("ti,ij,tj->", inputs, R, inputs))


def run_closed_loop(plant: DiscreteSystem, spec: MpcSpec, x0, T: int = 100,
                    settings: QpSettings | None = None, warm_start: bool = True) -> ClosedLoopRun:
    """Receding-horizon control of the true plant from ``x0`` for T steps.

    The cost sums t = 0..T with u(T) taken from one extra MPC solve. The run
    stops at the first infeasible QP; the cost then covers executed steps only.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    x = np.asarray(x0, dtype=float)
    states = [x]
    inputs = []
    statuses = []
    ws = None
    for t in range(T + 1):
        sol = mpc_step(spec, x, warm_start=ws if warm_start else None, settings=settings)
        statuses.append(sol.status.value)
        if not sol.optimal:
            st = np.array(states[: t + 1])
            inp = np.array(inputs).reshape(-1, spec.model.m)
            cost = lq_cost(st[: len(inp)], inp, spec.Q, spec.R) if len(inp) else 0.0
            return ClosedLoopRun(st, inp, statuses, cost, "lost_feasibility", t)
        u = sol.u_seq[0]
        if t == T:
            st = np.array(states)
            inp = np.array(inputs).reshape(-1, spec.model.m)
            cost = lq_cost(st, np.vstack([inp, u]), spec.Q, spec.R)
            return ClosedLoopRun(st, inp, statuses, cost, "completed", None, u)
        inputs.append(u)
        x = plant.step(x, u)
        if not np.all(np.isfinite(x)):
            raise RuntimeError(f"plant state became non-finite at step {t + 1}")
        states.append(x)
        ws = shift_warm_start(sol.u_seq)
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# feasible domain


@dataclass(frozen=True)
class GridSpec:
    axes: tuple  # ((lo, hi, count), ...)

    @classmethod
    def over_box(cls, box, count: int) -> "GridSpec":
        lo, hi = box.box_bounds()
        return cls(tuple((float(a), float(b), int(count)) for a, b in zip(lo, hi)))

    def coords(self):
        return [np.linspace(lo, hi, cnt) for lo, hi, cnt in self.axes]

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.coords(), indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=-1)

    @property
    def shape(self):
        return tuple(a[2] for a in self.axes)


@dataclass
class FeasibleDomainScan:
    grid: GridSpec
    mask: np.ndarray
    model_tag: str
    statuses: np.ndarray | None = None

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def solve_many(spec: MpcSpec, xs, settings: QpSettings | None = None, chunk: int = 4096):
    """Solve the MPC problem at many states at once (shared condensed matrices)."""
    cm = spec.condensed
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    g, bound, _ = cm.data(spec.model.lift(xs))
    out = []
    for s in range(0, len(xs), chunk):
        out.extend(solve_qp_batch(cm.Hq, cm.G, None, g[s:s + chunk], bound[s:s + chunk], settings=settings))
    return out


def scan_feasible_domain(spec: MpcSpec, grid: GridSpec, model_tag: str = "model",
                         settings: QpSettings | None = None, jobs: int = 1,
                         retry_factor: int = 5) -> FeasibleDomainScan:
    """Feasibility of the lifted MPC problem on every grid point.

    Grid points are solved as one batch; each problem leaves the batch as
    soon as it is certified optimal or infeasible.
    """
    if spec.model.n != 2 or len(grid.axes) != 2:
        raise ValueError("feasible-domain scans are defined for two-dimensional states")
    pts = grid.points()
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        parts = np.array_split(pts, jobs)
        with ProcessPoolExecutor(jobs) as ex:
            sols = [s for part in ex.map(_solve_part, [(spec, p, settings) for p in parts]) for s in part]
    else:
        sols = solve_many(spec, pts, settings)
    # stagnated cells get one individual retry with a larger budget
    base = settings or QpSettings()
    retry = replace(base, max_iter=retry_factor * base.max_iter)
    for i, s in enumerate(sols):
        if s.status is QpStatus.MAX_ITER:
            sols[i] = solve_many(spec, pts[i:i + 1], retry)[0]
    status = np.array([s.status.value for s in sols]).reshape(grid.shape)
    return FeasibleDomainScan(grid, status == QpStatus.OPTIMAL.value, model_tag, status)


def _solve_part(args):
    spec, pts, settings = args
    return solve_many(spec, pts, settings)


def lqr_controller(model: LiftedModel, dare: DareSolution):
    """u = K T(x)."""
    K = dare.K

    def controller(x):
        return K @ model.lift(np.asarray(x, dtype=float))

    return controller


def simulate_feedback(plant: DiscreteSystem, controller, x0, T: int) -> np.ndarray:
    xs = [np.asarray(x0, dtype=float)]
    for _ in range(T):
        xs.append(plant.step(xs[-1], controller(xs[-1])))
    return np.array(xs)
