"""Linear embeddings: polyflow approximation and EDMD with pluggable bases."""
from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import DiscreteSystem, input_jacobians, iterates, jacobian_linearization, make_system, stacked_basis
from .lincontrol import ConstraintSpec, Polytope

SCHEMA_VERSION = 1


class RankDeficientWarning(UserWarning):
    """Least-squares regressor is rank deficient; the minimum-norm solution is used."""


# ---------------------------------------------------------------------------
# bases


class Basis:
    """A lifting map T: R^n -> R^dim whose first n outputs are the raw state."""

    n: int
    dim: int

    def __call__(self, x) -> np.ndarray:
        raise NotImplementedError

    @property
    def C(self) -> np.ndarray:
        return np.hstack([np.eye(self.n), np.zeros((self.n, self.dim - self.n))])

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class StateBasis(Basis):
    n: int

    @property
    def dim(self):
        return self.n

    def __call__(self, x):
        return np.asarray(x, dtype=float).copy()

    def to_dict(self):
        return {"family": "state", "n": self.n}


@dataclass(frozen=True)
class PolyflowBasis(Basis):
    """[x; f^1(x,0); ...; f^k(x,0)], optionally reduced by a selection matrix V."""

    system: DiscreteSystem
    k: int
    V: np.ndarray | None = None

    @property
    def n(self):
        return self.system.n

    @property
    def dim(self):
        return self.system.n * (self.k + 1) if self.V is None else self.V.shape[0]

    def __call__(self, x):
        F = stacked_basis(self.system, x, self.k)
        return F if self.V is None else F @ self.V.T

    def to_dict(self):
        return {
            "family": "polyflow",
            "k": self.k,
            "system": self.system.to_dict(),
            "V": None if self.V is None else self.V.tolist(),
        }


def monomial_exponents(n: int, degree: int) -> np.ndarray:
    """All exponent vectors s with 1 <= |s| <= degree, degree-1 terms first in state order."""
    exps = []
    for deg in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(n), deg):
            e = np.zeros(n, dtype=int)
            for j in combo:
                e[j] += 1
            exps.append(e)
    return np.array(exps, dtype=int).reshape(-1, n)


@dataclass(frozen=True)
class MonomialBasis(Basis):
    n: int
    degree: int

    @property
    def exponents(self):
        return monomial_exponents(self.n, self.degree)

    @property
    def dim(self):
        return len(self.exponents)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.prod(x[..., None, :] ** self.exponents, axis=-1)

    def to_dict(self):
        return {"family": "monomial", "n": self.n, "degree": self.degree}


def thin_plate(r):
    r = np.asarray(r, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = r**2 * np.log(r)
    return np.where(r > 0, out, 0.0)


@dataclass(frozen=True)
class RbfBasis(Basis):
    """Thin-plate radial functions ||x - c||^2 log ||x - c||, with the state prepended."""

    centers: np.ndarray
    include_state: bool = True

    @property
    def n(self):
        return self.centers.shape[1]

    @property
    def dim(self):
        return len(self.centers) + (self.n if self.include_state else 0)

    @property
    def C(self):
        if not self.include_state:
            raise ValueError("RBF basis without the state block has no linear state extraction")
        return super().C

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x[..., None, :] - self.centers, axis=-1)
        g = thin_plate(r)
        return np.concatenate([x, g], axis=-1) if self.include_state else g

    def to_dict(self):
        return {"family": "rbf", "centers": self.centers.tolist(), "include_state": self.include_state}


def basis_from_dict(d: dict) -> Basis:
    fam = d["family"]
    if fam == "state":
        return StateBasis(int(d["n"]))
    if fam == "polyflow":
        sys = make_system(d["system"]["name"], d["system"]["params"])
        V = None if d.get("V") is None else np.array(d["V"], dtype=float)
        return PolyflowBasis(sys, int(d["k"]), V)
    if fam == "monomial":
        return MonomialBasis(int(d["n"]), int(d["degree"]))
    if fam == "rbf":
        return RbfBasis(np.array(d["centers"], dtype=float), bool(d.get("include_state", True)))
    raise ValueError(f"unknown basis family {fam!r}")


# ---------------------------------------------------------------------------
# samples


@dataclass(frozen=True)
class SampleSet:
    points: np.ndarray
    seed: int
    inputs: np.ndarray | None = None
    next_states: np.ndarray | None = None

    def __len__(self):
        return len(self.points)


def sample_box(box: Polytope, M: int, rng: np.random.Generator) -> np.ndarray:
    lo, hi = box.box_bounds()
    return rng.uniform(lo, hi, size=(M, lo.size))


def sample_states(constraints: ConstraintSpec, M: int, seed: int) -> SampleSet:
    """Uniform samples over the state box."""
    rng = np.random.default_rng(seed)
    return SampleSet(sample_box(constraints.state_set, M, rng), seed)


def sample_snapshots(sys: DiscreteSystem, constraints: ConstraintSpec, M: int, seed: int) -> SampleSet:
    """Triples (x_i, u_i, f(x_i, u_i)) with x_i uniform on X and u_i uniform on U."""
    rng = np.random.default_rng(seed)
    x = sample_box(constraints.state_set, M, rng)
    u = sample_box(constraints.input_set, M, rng)
    return SampleSet(x, seed, u, sys.step(x, u))


# ---------------------------------------------------------------------------
# models


def _residual_stats(res: np.ndarray) -> dict:
    norms = np.linalg.norm(res, axis=-1)
    return {"rms": float(np.sqrt(np.mean(norms**2))), "max": float(norms.max())}


def _lstsq(X, Y, what):
    sol, _, rank, _ = np.linalg.lstsq(X, Y, rcond=None)
    if rank < X.shape[1]:
        warnings.warn(f"{what}: regressor rank {rank} < {X.shape[1]}; minimum-norm solution", RankDeficientWarning,
                      stacklevel=3)
    return sol, rank


@dataclass(frozen=True)
class PolyflowFit:
    k: int
    alphas: list  # alpha_0 ... alpha_k, each n x n
    b_vecs: list  # D_u f^ell(0,0) for ell = 1 ... k+1, each n x m
    residual: dict = field(default_factory=dict)
    rank: int | None = None

    @property
    def alpha_row(self) -> np.ndarray:
        return np.hstack(self.alphas)


@dataclass
class LiftedModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    basis: Basis
    residual: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        nt = self.A.shape[0]
        if self.A.shape != (nt, nt) or self.B.shape[0] != nt or self.C.shape[1] != nt:
            raise ValueError("inconsistent lifted model dimensions")

    @property
    def n_lift(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.C.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def lift(self, x) -> np.ndarray:
        return self.basis(x)

    def predict(self, x0, inputs) -> np.ndarray:
        """Open-loop state predictions C x~_t for t = 0..len(inputs)."""
        z = self.lift(x0)
        out = [self.C @ z]
        for u in np.atleast_2d(inputs):
            z = self.A @ z + self.B @ u
            out.append(self.C @ z)
        return np.array(out)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "C": self.C.tolist(),
            "basis": self.basis.to_dict(),
            "residual": self.residual,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LiftedModel":
        A = np.array(d["A"], dtype=float)
        B = np.array(d["B"], dtype=float).reshape(A.shape[0], -1)
        C = np.array(d["C"], dtype=float).reshape(-1, A.shape[0])
        return cls(A, B, C, basis_from_dict(d["basis"]), d.get("residual", {}), d.get("meta", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "LiftedModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_polyflow(sys: DiscreteSystem, samples: SampleSet, k: int, h: float = 1e-5) -> PolyflowFit:
    """Least-squares coefficients alpha_0..alpha_k of f^{k+1}(x,0) ~ sum alpha_l f^l(x,0)."""
    if k < 0:
        raise ValueError("k must be non-negative")
    n = sys.n
    M = len(samples)
    if M < n * (k + 1):
        raise ValueError(f"need at least {n * (k + 1)} samples, got {M}")
    its = iterates(sys, samples.points, k + 1)
    F = np.concatenate(its[:-1], axis=-1)
    Y = its[-1]
    W, rank = _lstsq(F, Y, "polyflow fit")
    alpha_row = W.T
    alphas = [alpha_row[:, l * n:(l + 1) * n] for l in range(k + 1)]
    return PolyflowFit(k, alphas, input_jacobians(sys, k, h), _residual_stats(Y - F @ W), rank)


def polyflow_objective(sys: DiscreteSystem, samples: SampleSet, fit: PolyflowFit) -> float:
    its = iterates(sys, samples.points, fit.k + 1)
    F = np.concatenate(its[:-1], axis=-1)
    return float(np.sum((its[-1] - F @ fit.alpha_row.T) ** 2))


def companion_matrices(fit: PolyflowFit):
    n = fit.alphas[0].shape[0]
    k = fit.k
    nt = n * (k + 1)
    A = np.zeros((nt, nt))
    A[: n * k, n:] = np.eye(n * k)
    A[n * k:, :] = fit.alpha_row
    B = np.vstack(fit.b_vecs)
    C = np.hstack([np.eye(n), np.zeros((n, n * k))])
    return A, B, C


def remove_redundancy(values: np.ndarray, n: int, tol: float = 1e-10):
    """Select linearly independent basis components from sampled values (M x p).

    The first ``n`` components (the raw state) are always kept. Returns the
    selection matrix V (n_lift x p) and n_lift; singular values below
    ``tol * sigma_max`` are treated as zero.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    values = np.asarray(values, dtype=float)
    p = values.shape[1]
    smax = np.linalg.svd(values, compute_uv=False)[0]
    cut = tol * smax
    head = values[:, :n]
    s_head = np.linalg.svd(head, compute_uv=False)
    if s_head.size < n or s_head[-1] <= cut:
        raise ValueError("state components are linearly dependent; cannot build C")
    keep = list(range(n))
    Qh, _ = np.linalg.qr(head)
    rest = values[:, n:] - Qh @ (Qh.T @ values[:, n:])
    if rest.shape[1]:
        import scipy.linalg

        _, Rr, piv = scipy.linalg.qr(rest, mode="economic", pivoting=True)
        s_rest = np.linalg.svd(rest, compute_uv=False)
        r = int(np.sum(s_rest > cut))
        keep += sorted(int(j) + n for j in piv[:r])
    V = np.eye(p)[keep]
    return V, len(keep)


def assemble_polyflow_model(sys: DiscreteSystem, fit: PolyflowFit, samples: SampleSet | None = None,
                            rank_tol: float | None = None, meta: dict | None = None) -> LiftedModel:
    """Block-companion lifted model of a polyflow fit.

    When ``samples`` and ``rank_tol`` are given, redundant components of the
    basis are removed and the model is projected onto the retained ones.
    """
    A, B, C = companion_matrices(fit)
    basis = PolyflowBasis(sys, fit.k)
    meta = {"family": "polyflow", "k": fit.k, **(meta or {})}
    if samples is not None and rank_tol is not None:
        F = basis(samples.points)
        V, nt = remove_redundancy(F, sys.n, rank_tol)
        if nt < F.shape[1]:
            W = np.linalg.lstsq(F @ V.T, F, rcond=None)[0].T
            A, B = V @ A @ W, V @ B
            C = np.hstack([np.eye(sys.n), np.zeros((sys.n, nt - sys.n))])
            basis = PolyflowBasis(sys, fit.k, V)
    residual = {"nilpotency": fit.residual}
    return LiftedModel(A, B, C, basis, residual, meta)


def fit_edmd(basis: Basis, sys: DiscreteSystem, snapshots: SampleSet, meta: dict | None = None) -> LiftedModel:
    """Least-squares (A, B) minimizing sum ||T(x+) - A T(x) - B u||^2."""
    if snapshots.inputs is None or snapshots.next_states is None:
        raise ValueError("EDMD needs snapshot triples")
    Tx = basis(snapshots.points)
    Ty = basis(snapshots.next_states)
    U = snapshots.inputs
    nt, m = Tx.shape[1], U.shape[1]
    if len(snapshots) < nt + m:
        raise ValueError(f"need at least {nt + m} snapshots, got {len(snapshots)}")
    Z = np.hstack([Tx, U])
    W, _ = _lstsq(Z, Ty, "EDMD fit")
    A = W[:nt].T
    B = W[nt:].T
    res = Ty - Z @ W
    residual = {"lifted": _residual_stats(res), "state": _residual_stats(res[:, : basis.n])}
    return LiftedModel(A, B, basis.C, basis, residual, {"family": "edmd", **basis.to_dict(), **(meta or {})})


def jacobian_model(sys: DiscreteSystem, h: float = 1e-5) -> LiftedModel:
    A, B = jacobian_linearization(sys, h=h)
    return LiftedModel(A, B, np.eye(sys.n), StateBasis(sys.n), {}, {"family": "jacobian"})


@dataclass(frozen=True)
class NilpotencyReport:
    rms: float
    max: float
    affine_rms: float
    affine_max: float


def nilpotency_residual(sys: DiscreteSystem, fit: PolyflowFit, test: SampleSet) -> NilpotencyReport:
    """Out-of-sample defect of the nilpotency relation and of input-affineness.

    The affineness defect is max over ell = 1..k+1 of
    ||f^ell(x,u) - f^ell(x,0) - b_ell u|| on the sampled (x, u) pairs.
    """
    its0 = iterates(sys, test.points, fit.k + 1)
    F = np.concatenate(its0[:-1], axis=-1)
    nil = _residual_stats(its0[-1] - F @ fit.alpha_row.T)
    if test.inputs is None:
        return NilpotencyReport(nil["rms"], nil["max"], 0.0, 0.0)
    itsu = iterates(sys, test.points, fit.k + 1, u=test.inputs)
    defects = np.stack(
        [np.linalg.norm(itsu[l] - its0[l] - test.inputs @ fit.b_vecs[l - 1].T, axis=-1) for l in range(1, fit.k + 2)]
    )
    worst = defects.max(axis=0)
    return NilpotencyReport(nil["rms"], nil["max"], float(np.sqrt(np.mean(worst**2))), float(worst.max()))


def sweep_polyflow_degree(sys: DiscreteSystem, samples: SampleSet, tol: float, k_max: int = 10) -> PolyflowFit:
    """Smallest k whose training residual (max norm) is at most ``tol``."""
    for k in range(k_max + 1):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RankDeficientWarning)
            fit = fit_polyflow(sys, samples, k)
        if fit.residual["max"] <= tol:
            return fit
    raise ValueError(f"no polyflow degree <= {k_max} reaches residual {tol}")
