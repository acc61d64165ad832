"""Small dense equality + box constrained quadratic programming.

Solves ``min 0.5 x'Hx + g'x  s.t.  A x = b,  lo <= x <= hi`` for strictly
convex H by direct KKT factorization plus an active-set loop on the bounds.
Problem sizes here are tiny (<= a few dozen variables), so exactness and
diagnosability win over generality.
"""

from __future__ import annotations

import numpy as np


class InfeasibleProblem(RuntimeError):
    """The constraint set is inconsistent or unreachable within the bounds."""


def _solve_kkt(h, g, a, b, free, x_fixed):
    """Solve the equality-constrained subproblem with non-free vars pinned."""
    nf = int(free.sum())
    m = a.shape[0]
    rhs_top = -(g[free] + h[np.ix_(free, ~free)] @ x_fixed[~free])
    kkt = np.zeros((nf + m, nf + m))
    kkt[:nf, :nf] = h[np.ix_(free, free)]
    rhs = np.zeros(nf + m)
    rhs[:nf] = rhs_top
    if m:
        af = a[:, free]
        kkt[:nf, nf:] = af.T
        kkt[nf:, :nf] = af
        rhs[nf:] = b - a[:, ~free] @ x_fixed[~free]
    # lstsq tolerates redundant (rank-deficient) equality rows
    sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    x = x_fixed.copy()
    x[free] = sol[:nf]
    lam = sol[nf:]
    return x, lam


def solve_box_qp(
    hess: np.ndarray,
    grad: np.ndarray,
    a_eq: np.ndarray | None,
    b_eq: np.ndarray | None,
    lower: np.ndarray,
    upper: np.ndarray,
    feas_tol: float = 1e-9,
    max_iter: int = 200,
) -> np.ndarray:
    """Active-set solve; raises InfeasibleProblem with a diagnostic on failure."""
    h = np.asarray(hess, dtype=float)
    g = np.asarray(grad, dtype=float)
    n = len(g)
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    if a_eq is None or len(a_eq) == 0:
        a = np.zeros((0, n))
        b = np.zeros(0)
    else:
        a = np.atleast_2d(np.asarray(a_eq, dtype=float))
        b = np.atleast_1d(np.asarray(b_eq, dtype=float))
    if np.any(lo > hi + feas_tol):
        raise InfeasibleProblem("empty box: lower bound exceeds upper bound")
    scale = max(1.0, float(np.abs(b).max()) if b.size else 1.0)

    at_lo = np.zeros(n, dtype=bool)
    at_hi = np.zeros(n, dtype=bool)
    for _ in range(max_iter):
        free = ~(at_lo | at_hi)
        x_fixed = np.where(at_lo, lo, np.where(at_hi, hi, 0.0))
        if free.any():
            x, lam = _solve_kkt(h, g, a, b, free, x_fixed)
        else:
            x, lam = x_fixed, np.zeros(a.shape[0])
        if a.shape[0]:
            resid = float(np.abs(a @ x - b).max())
            if resid > feas_tol * scale:
                raise InfeasibleProblem(
                    f"equality constraints unreachable (residual {resid:.3e}); "
                    f"active bounds: {int(at_lo.sum())} low / {int(at_hi.sum())} high"
                )
        # clamp the worst bound violation, if any
        below = np.where(free, lo - x, -np.inf)
        above = np.where(free, x - hi, -np.inf)
        worst_b = int(np.argmax(below))
        worst_a = int(np.argmax(above))
        if below[worst_b] > feas_tol or above[worst_a] > feas_tol:
            if below[worst_b] >= above[worst_a]:
                at_lo[worst_b] = True
            else:
                at_hi[worst_a] = True
            continue
        # check bound multipliers; release the worst violator
        grad_l = h @ x + g + (a.T @ lam if a.shape[0] else 0.0)
        release = -1
        worst = -feas_tol
        for i in range(n):
            if at_lo[i] and grad_l[i] < worst:
                worst = grad_l[i]
                release = i
            elif at_hi[i] and -grad_l[i] < worst:
                worst = -grad_l[i]
                release = i
        if release >= 0:
            at_lo[release] = False
            at_hi[release] = False
            continue
        return np.clip(x, lo, hi)
    raise InfeasibleProblem(f"active-set loop did not settle in {max_iter} iterations")
