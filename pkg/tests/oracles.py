"""Independent reference computations used by the test-suite."""
import itertools

import numpy as np
from scipy.optimize import linprog


def qp_by_enumeration(H, g, G, b, tol=1e-9):
    """Exact minimizer of 0.5 z'Hz + g'z s.t. Gz <= b (H positive definite) by active-set enumeration."""
    p = len(g)
    best = None
    for k in range(0, min(p, len(b)) + 1):
        for S in itertools.combinations(range(len(b)), k):
            S = list(S)
            K = np.block([[H, G[S].T], [G[S], np.zeros((k, k))]])
            try:
                sol = np.linalg.solve(K, np.r_[-g, b[S]])
            except np.linalg.LinAlgError:
                continue
            z, lam = sol[:p], sol[p:]
            if np.all(G @ z <= b + tol) and np.all(lam >= -tol):
                f = 0.5 * z @ H @ z + g @ z
                if best is None or f < best[0]:
                    best = (f, z)
    return None if best is None else best[1]


def random_qp(rng):
    p = int(rng.integers(1, 5))
    q = int(rng.integers(1, 7))
    M = rng.normal(size=(p, p))
    H = M.T @ M + 1e-3 * np.eye(p)
    g = rng.normal(size=p) * 3
    G = rng.normal(size=(q, p))
    b = rng.uniform(0.1, 1, size=q)
    return H, g, G, b


def lp_max_linprog(c, H, h):
    res = linprog(-np.asarray(c), A_ub=H, b_ub=h, bounds=[(None, None)] * H.shape[1], method="highs")
    assert res.status == 0, res.message
    return -res.fun


def qp_feasible(G, b):
    res = linprog(np.zeros(G.shape[1]), A_ub=G, b_ub=b, bounds=[(None, None)] * G.shape[1], method="highs")
    return res.status == 0
