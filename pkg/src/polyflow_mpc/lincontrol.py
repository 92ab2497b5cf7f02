"""Polytopes, the discrete algebraic Riccati equation and maximal invariant sets."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .qp import QpSettings, QpStatus, solve_qp_batch

log = logging.getLogger(__name__)

CONTAINS_TOL = 1e-9


@dataclass(frozen=True)
class Polytope:
    """H-representation {x : H x <= h}."""

    H: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        h = np.asarray(self.h, dtype=float).reshape(H.shape[0])
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "h", h)

    @property
    def d(self) -> int:
        return self.H.shape[1]

    @classmethod
    def from_box(cls, lower, upper) -> "Polytope":
        lower = np.asarray(lower, dtype=float).ravel()
        upper = np.asarray(upper, dtype=float).ravel()
        d = lower.size
        H = np.vstack([np.eye(d), -np.eye(d)])
        return cls(H, np.r_[upper, -lower])

    def contains(self, x, tol: float = CONTAINS_TOL):
        """Membership test; ``x`` may be a single point or an (M, d) array."""
        x = np.asarray(x, dtype=float)
        return np.all(x @ self.H.T <= self.h + tol, axis=-1)

    def normalized(self) -> "Polytope":
        norms = np.linalg.norm(self.H, axis=1)
        keep = norms > 1e-12
        return Polytope(self.H[keep] / norms[keep, None], self.h[keep] / norms[keep])

    def box_bounds(self):
        """Return (lower, upper) if this polytope is an axis-aligned box."""
        lo = np.full(self.d, -np.inf)
        hi = np.full(self.d, np.inf)
        for row, b in zip(self.H, self.h):
            nz = np.flatnonzero(row)
            if nz.size != 1:
                raise ValueError("polytope is not an axis-aligned box")
            j = nz[0]
            if row[j] > 0:
                hi[j] = min(hi[j], b / row[j])
            else:
                lo[j] = max(lo[j], b / row[j])
        return lo, hi

    def to_dict(self) -> dict:
        return {"H": self.H.tolist(), "h": self.h.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Polytope":
        return cls(np.array(d["H"], dtype=float).reshape(len(d["h"]), -1), d["h"])


@dataclass(frozen=True)
class ConstraintSpec:
    state_set: Polytope
    input_set: Polytope

    def to_dict(self) -> dict:
        return {"state_set": self.state_set.to_dict(), "input_set": self.input_set.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ConstraintSpec":
        return cls(Polytope.from_dict(d["state_set"]), Polytope.from_dict(d["input_set"]))


def pest_constraints() -> ConstraintSpec:
    """|x1| <= 0.5, -0.2 <= x2 <= 0.8, |u| <= 0.2 in shifted coordinates."""
    return ConstraintSpec(Polytope.from_box([-0.5, -0.2], [0.5, 0.8]), Polytope.from_box([-0.2], [0.2]))


# ---------------------------------------------------------------------------
# Riccati


class DareNotConverged(RuntimeError):
    def __init__(self, iterations, residual):
        super().__init__(f"DARE iteration did not converge in {iterations} iterations (last step {residual:.3e})")
        self.iterations = iterations
        self.residual = residual


@dataclass(frozen=True)
class DareSolution:
    P: np.ndarray
    K: np.ndarray
    iterations: int
    residual: float


def dare_defect(A, B, Qlift, R, P) -> float:
    BtPA = B.T @ P @ A
    rhs = A.T @ P @ A - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA) + Qlift
    return float(np.abs(rhs - P).max())


def solve_dare(A, B, Qlift, R, tol: float = 1e-10, max_iter: int = 10_000) -> DareSolution:
    """Fixed-point Riccati iteration started from P = Qlift.

    Stops when ||P_{j+1} - P_j||_inf <= tol * max(1, ||P_j||_inf), or when the step
    falls to the float64 resolution of one Riccati update, which is
    ~eps * ||A||^2 ||P||; badly scaled lifts never reach an absolute 1e-10.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Qlift = np.atleast_2d(np.asarray(Qlift, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if np.any(np.linalg.eigvalsh(0.5 * (R + R.T)) <= 0):
        raise ValueError("R must be positive definite")
    a2 = np.abs(A).sum(axis=1).max() ** 2 if A.size else 0.0
    q_norm = np.abs(Qlift).max(initial=0.0)
    P = 0.5 * (Qlift + Qlift.T)
    step = np.inf
    for it in range(1, max_iter + 1):
        BtPA = B.T @ P @ A
        P_new = A.T @ P @ A - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA) + Qlift
        P_new = 0.5 * (P_new + P_new.T)
        step = float(np.abs(P_new - P).max())
        p_norm = float(np.abs(P).max())
        P = P_new
        if not np.isfinite(step):
            break
        floor = 100 * np.finfo(float).eps * (a2 * p_norm + q_norm)
        if step <= max(tol * max(1.0, p_norm), floor):
            K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
            return DareSolution(P, K, it, dare_defect(A, B, Qlift, R, P))
    raise DareNotConverged(max_iter, step)


def spectral_radius(M) -> float:
    M = np.atleast_2d(M)
    return float(np.abs(np.linalg.eigvals(M)).max()) if M.size else 0.0


def observability_rank(A, C, tol: float = 1e-8) -> int:
    n = A.shape[0]
    blocks = [C]
    for _ in range(n - 1):
        blocks.append(blocks[-1] @ A)
    O = np.vstack(blocks)
    s = np.linalg.svd(O, compute_uv=False)
    return int(np.sum(s > tol * max(s[0], 1.0))) if s.size else 0


def check_observability(A, C, tol: float = 1e-8) -> bool:
    """Warn (not raise) when (C, A) is numerically unobservable."""
    r = observability_rank(A, C, tol)
    if r < A.shape[0]:
        warnings.warn(f"(C, A) is not observable: rank {r} < {A.shape[0]}", RuntimeWarning, stacklevel=2)
        return False
    return True


# ---------------------------------------------------------------------------
# LP oracle

LP_REG = 1e-9
LP_SETTINGS = QpSettings(eps_p=1e-9, eps_d=1e-9, max_iter=20_000, eps_infeas=1e-6)


class LpError(RuntimeError):
    pass


RANK_TOL = 1e-10


def lp_max_batch(C, P: Polytope, bound_shift=None, reg: float = LP_REG, settings: QpSettings | None = None):
    """Maximize each row c of ``C`` over P; returns (values, argmaxes).

    ``bound_shift`` (rows, q) optionally perturbs the right-hand side per problem.
    The LP is solved in whitened coordinates y = S V'x from the thin SVD
    H = U S V', where the constraint matrix U has orthonormal columns. This
    keeps the optimizer at moderate norm even when P is very elongated, so the
    QP min -c'x + reg ||y||^2 stays close to the LP. Raises :class:`LpError`
    on infeasibility, on unboundedness, or when the dual certificate does not
    close the gap.
    """
    settings = settings or LP_SETTINGS
    C = np.atleast_2d(np.asarray(C, dtype=float))
    nb = C.shape[0]
    h = np.broadcast_to(P.h, (nb, P.H.shape[0])).copy()
    if bound_shift is not None:
        h = h + bound_shift
    U, sv, Vt = np.linalg.svd(P.H, full_matrices=False)
    r = int(np.sum(sv > RANK_TOL * sv[0])) if sv.size and sv[0] > 0 else 0
    U, sv, Vt = U[:, :r], sv[:r], Vt[:r]
    outside = np.linalg.norm(C - (C @ Vt.T) @ Vt, axis=1)
    if np.any(outside > 1e-9 * np.maximum(1.0, np.linalg.norm(C, axis=1))):
        raise LpError("LP unbounded: objective leaves the constraint row space")
    Cy = (C @ Vt.T) / sv
    sols = solve_qp_batch(2 * reg * np.eye(r), U, None, -Cy, h, settings=settings)
    values = np.empty(nb)
    args = np.empty((nb, P.d))
    for i, s in enumerate(sols):
        if s.status is QpStatus.INFEASIBLE:
            raise LpError("infeasible polytope in LP")
        if s.status is QpStatus.UNBOUNDED:
            raise LpError("LP unbounded")
        if s.status is not QpStatus.OPTIMAL:
            raise LpError(f"LP solve failed: {s.status.value}")
        val = float(Cy[i] @ s.z)
        # dual of max c'y s.t. Uy <= h: min h'lam, U'lam = c, lam >= 0
        lam = s.y_ineq
        scale = max(1.0, np.abs(Cy[i]).max())
        dual_res = np.abs(U.T @ lam - Cy[i]).max()
        gap = float(h[i] @ lam - val)
        reg_term = 2 * reg * float(s.z @ s.z)
        if dual_res > 1e-6 * scale + 2 * reg * np.abs(s.z).max() or abs(gap) > 1e-7 * max(1.0, abs(val)) + reg_term:
            raise LpError(f"LP dual check failed (gap {gap:.2e}, dual residual {dual_res:.2e})")
        values[i] = val
        args[i] = Vt.T @ (s.z / sv)
    return values, args


def lp_max(c, P: Polytope):
    """Maximize c'x over the polytope P; returns (value, argmax)."""
    v, x = lp_max_batch(np.asarray(c, dtype=float)[None], P)
    return float(v[0]), x[0]


# ---------------------------------------------------------------------------
# maximal invariant set


class InvariantSetError(RuntimeError):
    pass


@dataclass(frozen=True)
class InvariantSet:
    polytope: Polytope
    determinedness: int

    def contains(self, x, tol: float = CONTAINS_TOL):
        return self.polytope.contains(x, tol)

    def to_dict(self) -> dict:
        return {"polytope": self.polytope.to_dict(), "determinedness": self.determinedness}

    @classmethod
    def from_dict(cls, d: dict) -> "InvariantSet":
        return cls(Polytope.from_dict(d["polytope"]), int(d["determinedness"]))


def _in_rowspace(rows: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Whether each row lies in the span of ``basis`` rows (orthonormal)."""
    resid = rows - (rows @ basis.T) @ basis
    return np.linalg.norm(resid, axis=1) <= 1e-9 * np.maximum(1.0, np.linalg.norm(rows, axis=1))


def _orth_rows(M: np.ndarray) -> np.ndarray:
    if M.size == 0:
        return np.zeros((0, M.shape[1]))
    _, s, Vt = np.linalg.svd(M, full_matrices=False)
    r = int(np.sum(s > RANK_TOL * s[0])) if s.size and s[0] > 0 else 0
    return Vt[:r]


def _normalize_rows(H, h):
    norms = np.linalg.norm(H, axis=1)
    keep = norms > 1e-12
    if np.any(~keep & (h < 0)):
        raise InvariantSetError("constraint with zero row and negative bound: origin not admissible")
    return H[keep] / norms[keep, None], h[keep] / norms[keep]


def remove_redundant_rows(P: Polytope, slack: float = 1e-8) -> Polytope:
    """Drop duplicate and LP-certified redundant inequalities (rows normalized first)."""
    H, h = _normalize_rows(P.H, P.h)
    # exact duplicates: keep the tightest bound
    order = np.lexsort((h,) + tuple(np.round(H, 10).T))
    Hs, hs = H[order], h[order]
    keep = np.ones(len(hs), bool)
    for i in range(1, len(hs)):
        if np.abs(Hs[i] - Hs[i - 1]).max() <= 1e-10:
            keep[i] = False
    H, h = Hs[keep], hs[keep]
    q = len(h)
    if q <= 1:
        return Polytope(H, h)
    candidates = []
    for i in range(q):
        others = np.delete(H, i, axis=0)
        if _in_rowspace(H[i : i + 1], _orth_rows(others))[0]:
            candidates.append(i)
    redundant = np.zeros(q, bool)
    if candidates:
        cand = np.array(candidates)
        shift = np.zeros((cand.size, q))
        shift[np.arange(cand.size), cand] = 1.0
        vals, _ = lp_max_batch(H[cand], Polytope(H, h), bound_shift=shift)
        redundant[cand] = vals <= h[cand] + slack
    return Polytope(H[~redundant], h[~redundant])


def max_invariant_set(A, B, K, C, X: Polytope, U: Polytope | None, k_max: int = 200,
                      slack: float = 1e-8) -> InvariantSet:
    """Maximal constraint-admissible invariant set of x+ = (A + BK) x (Gilbert-Tan).

    Constraints C (A+BK)^t x in X and K (A+BK)^t x in U are accumulated for
    t = 0, 1, ... until every candidate row of the next step is redundant.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    K = np.asarray(K, dtype=float).reshape(B.shape[1], A.shape[0])
    C = np.asarray(C, dtype=float).reshape(-1, A.shape[0])
    Acl = A + B @ K
    rho = spectral_radius(Acl)
    if rho >= 1.0:
        raise InvariantSetError(f"closed loop A+BK is not strictly stable (spectral radius {rho:.6f})")
    rows = [X.H @ C]
    bnds = [X.h]
    if U is not None:
        rows.append(U.H @ K)
        bnds.append(U.h)
    R0 = np.vstack(rows)
    h0 = np.concatenate(bnds)
    if np.any(h0 <= 0):
        raise InvariantSetError("origin must lie in the interior of X and U")

    H, h = _normalize_rows(R0, h0)
    Rt = R0
    for t in range(1, k_max + 1):
        Rt = Rt @ Acl
        cand_H, cand_h = _normalize_rows(Rt, h0)
        if cand_H.shape[0] == 0:
            k_star = t - 1
            break
        basis = _orth_rows(H)
        inspan = _in_rowspace(cand_H, basis)
        redundant = np.zeros(cand_H.shape[0], bool)
        if inspan.any():
            vals, _ = lp_max_batch(cand_H[inspan], Polytope(H, h))
            redundant[inspan] = vals <= cand_h[inspan] + slack
        log.debug("Gilbert-Tan step %d: %d/%d candidates redundant", t, redundant.sum(), redundant.size)
        if redundant.all():
            k_star = t - 1
            break
        # all rows of the step are kept while accumulating so that each output stays bounded
        H = np.vstack([H, cand_H])
        h = np.concatenate([h, cand_h])
    else:
        raise InvariantSetError(f"Gilbert-Tan did not terminate within k_max={k_max} steps")
    return InvariantSet(remove_redundant_rows(Polytope(H, h), slack), k_star)
