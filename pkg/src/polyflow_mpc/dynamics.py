"""Discrete-time nonlinear control systems and their iterated maps.

All ``step`` functions broadcast over leading axes: ``x`` may be ``(n,)`` or
``(M, n)`` and ``u`` correspondingly ``(m,)`` or ``(M, m)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class DiscreteSystem:
    """x(t+1) = step(x(t), u(t)) with state dimension n and input dimension m."""

    n: int
    m: int
    step_fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    name: str = "system"
    params: dict = field(default_factory=dict)

    def _check(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.shape[-1:] != (self.n,):
            raise ValueError(f"{self.name}: state must have last dimension {self.n}, got {x.shape}")
        if u.shape[-1:] != (self.m,):
            raise ValueError(f"{self.name}: input must have last dimension {self.m}, got {u.shape}")
        return x, u

    def step(self, x, u) -> np.ndarray:
        x, u = self._check(x, u)
        return np.asarray(self.step_fn(x, u), dtype=float)

    def to_dict(self) -> dict:
        return {"name": self.name, "params": _jsonable(self.params)}


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------
# iterated maps


def iterate_map(sys: DiscreteSystem, x, u, ell: int) -> np.ndarray:
    """Return f^ell(x, u): x for ell=0, f(x, u) for ell=1, then repeated f(., 0)."""
    if ell < 0:
        raise ValueError("ell must be non-negative")
    x, u = sys._check(x, u)
    if ell == 0:
        return x.copy()
    y = sys.step(x, u)
    zero = np.zeros_like(u)
    for _ in range(ell - 1):
        y = sys.step(y, zero)
    return y


def iterates(sys: DiscreteSystem, x, k: int, u=None) -> list[np.ndarray]:
    """Forward recursion [f^0(x,u), ..., f^k(x,u)] in one pass (u defaults to 0)."""
    x = np.asarray(x, dtype=float)
    if u is None:
        u = np.zeros(x.shape[:-1] + (sys.m,))
    x, u = sys._check(x, u)
    out = [x.copy()]
    if k >= 1:
        out.append(sys.step(x, u))
        zero = np.zeros_like(u)
        for _ in range(k - 1):
            out.append(sys.step(out[-1], zero))
    return out


def stacked_basis(sys: DiscreteSystem, x, k: int) -> np.ndarray:
    """Polyflow basis [x; f^1(x,0); ...; f^k(x,0)] of length n(k+1)."""
    if k < 0:
        raise ValueError("k must be non-negative")
    return np.concatenate(iterates(sys, x, k), axis=-1)


def jacobian_linearization(sys: DiscreteSystem, x0=None, u0=None, h: float = 1e-5):
    """Central finite-difference Jacobians (df/dx, df/du) at (x0, u0)."""
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.zeros(sys.n) if x0 is None else np.asarray(x0, dtype=float)
    u0 = np.zeros(sys.m) if u0 is None else np.asarray(u0, dtype=float)
    A = np.empty((sys.n, sys.n))
    B = np.empty((sys.n, sys.m))
    for j in range(sys.n):
        e = np.zeros(sys.n)
        e[j] = h
        A[:, j] = (sys.step(x0 + e, u0) - sys.step(x0 - e, u0)) / (2 * h)
    for j in range(sys.m):
        e = np.zeros(sys.m)
        e[j] = h
        B[:, j] = (sys.step(x0, u0 + e) - sys.step(x0, u0 - e)) / (2 * h)
    return A, B


def input_jacobians(sys: DiscreteSystem, k: int, h: float = 1e-5) -> list[np.ndarray]:
    """D_u f^ell(0, 0) for ell = 1..k+1 by central differences."""
    x0 = np.zeros(sys.n)
    out = []
    for ell in range(1, k + 2):
        b = np.empty((sys.n, sys.m))
        for j in range(sys.m):
            e = np.zeros(sys.m)
            e[j] = h
            b[:, j] = (iterate_map(sys, x0, e, ell) - iterate_map(sys, x0, -e, ell)) / (2 * h)
        out.append(b)
    return out


# ---------------------------------------------------------------------------
# benchmark systems

PEST_DEFAULTS = {"r": 0.5, "c": 0.2, "kappa": 2.0, "d": 0.2}


def pest_model(r: float = 0.5, c: float = 0.2, kappa: float = 2.0, d: float = 0.2) -> DiscreteSystem:
    """Valuable/pest population model shifted to the equilibrium (v, p, a) = (1, 0.2, 0.2).

    Coordinates are x1 = v - 1, x2 = p - 0.2, u = a - 0.2.
    """
    step = _PestStep(float(r), float(c), float(kappa), float(d))
    return DiscreteSystem(2, 1, step, name="pest", params={"r": r, "c": c, "kappa": kappa, "d": d})


@dataclass(frozen=True)
class _PestStep:
    r: float
    c: float
    kappa: float
    d: float

    def __call__(self, x, u):
        r, c, kappa, d = self.r, self.c, self.kappa, self.d
        v = x[..., 0] + 1.0
        p = x[..., 1] + 0.2
        a = u[..., 0] + 0.2
        v_next = v + c * v * (1.0 - v / kappa) - r * v * p
        p_next = d * p + v * p - a * p
        return np.stack([v_next - 1.0, p_next - 0.2], axis=-1)


def linear_system(A, B) -> DiscreteSystem:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    return DiscreteSystem(A.shape[0], B.shape[1], _LinearStep(A, B), name="linear", params={"A": A, "B": B})


@dataclass(frozen=True)
class _LinearStep:
    A: np.ndarray
    B: np.ndarray

    def __call__(self, x, u):
        return x @ self.A.T + u @ self.B.T


@dataclass(frozen=True)
class Polynomial:
    """Vector polynomial R^d -> R^p as a list of (exponent multi-index, coefficient vector)."""

    exponents: np.ndarray  # (terms, d) non-negative ints
    coefficients: np.ndarray  # (terms, p)

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        # (..., terms)
        mono = np.prod(s[..., None, :] ** self.exponents, axis=-1)
        return mono @ self.coefficients

    @classmethod
    def from_terms(cls, terms, dim_in: int, dim_out: int) -> "Polynomial":
        if not terms:
            return cls(np.zeros((0, dim_in), dtype=int), np.zeros((0, dim_out)))
        exps = np.array([t[0] for t in terms], dtype=int).reshape(-1, dim_in)
        coefs = np.array([t[1] for t in terms], dtype=float).reshape(-1, dim_out)
        return cls(exps, coefs)

    @property
    def degree(self) -> int:
        return int(self.exponents.sum(axis=1).max()) if len(self.exponents) else 0


def immersible_block_system(A1, A2, B1, phi_terms) -> DiscreteSystem:
    """x1+ = A1 x1 + phi(x2) + B1 u, x2+ = A2 x2 with polynomial phi.

    ``phi_terms`` is a list of ``(exponent multi-index over x2, coefficient vector over x1)``.
    """
    A1 = np.atleast_2d(np.asarray(A1, dtype=float))
    A2 = np.atleast_2d(np.asarray(A2, dtype=float))
    n1, n2 = A1.shape[0], A2.shape[0]
    B1 = np.asarray(B1, dtype=float).reshape(n1, -1)
    phi = Polynomial.from_terms(phi_terms, n2, n1)
    step = _BlockStep(A1, A2, B1, phi)
    params = {
        "A1": A1,
        "A2": A2,
        "B1": B1,
        "phi_terms": [[list(map(int, e)), list(map(float, c))] for e, c in zip(phi.exponents, phi.coefficients)],
    }
    return DiscreteSystem(n1 + n2, B1.shape[1], step, name="immersible_block", params=params)


@dataclass(frozen=True)
class _BlockStep:
    A1: np.ndarray
    A2: np.ndarray
    B1: np.ndarray
    phi: Polynomial

    def __call__(self, x, u):
        n1 = self.A1.shape[0]
        x1 = x[..., :n1]
        x2 = x[..., n1:]
        return np.concatenate([x1 @ self.A1.T + self.phi(x2) + u @ self.B1.T, x2 @ self.A2.T], axis=-1)


def demo_block_system() -> DiscreteSystem:
    """Four-state immersible block system with a quadratic coupling term."""
    return immersible_block_system(
        A1=[[0.9, 0.3], [0.0, 1.05]],
        A2=[[0.7, 0.2], [-0.1, 0.6]],
        B1=[[0.0], [1.0]],
        phi_terms=[([1, 1], [0.5, 0.0]), ([2, 0], [0.0, 0.3])],
    )


def demo_linear_system() -> DiscreteSystem:
    return linear_system([[1.0, 0.1], [-0.05, 0.95]], [[0.0], [0.1]])


_REGISTRY = {
    "pest": lambda p: pest_model(**{**PEST_DEFAULTS, **p}),
    "linear": lambda p: linear_system(p["A"], p["B"]) if p else demo_linear_system(),
    "immersible_block": lambda p: immersible_block_system(p["A1"], p["A2"], p["B1"], p["phi_terms"])
    if p
    else demo_block_system(),
}


def make_system(name: str, params: dict | None = None) -> DiscreteSystem:
    """Construct a registered system by name (``pest``, ``linear``, ``immersible_block``)."""
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown system {name!r}; choose from {sorted(_REGISTRY)}") from None
    return factory(dict(params or {}))


def registered_systems() -> list[str]:
    return sorted(_REGISTRY)
