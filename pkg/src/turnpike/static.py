"""Turnpike-static problem: minimize f0(x, u) subject to f(x, u) = 0 and g(x, u) = d.

The first-order conditions are solved by damped Newton on the KKT map::

    F(x, u, px, py) = (H_x, H_u, f(x, u), g(x, u) - d)

whose Jacobian is the bordered matrix ``[[E1, E2^T], [E2, 0]]`` with ``E1``
the Hessian of H in (x, u) and ``E2 = [[f_x, f_u], [g_x, g_u]]``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .calculus import first_derivatives, hamiltonian_gradient, hamiltonian_hessian
from .errors import AssumptionViolated, NoConvergence, SingularKKT, TurnpikeError
from .problems import ProblemDef, eval_rhs

TOL_STATIC = 1e-10
MAX_ITER = 100
INTERIOR_MARGIN = 1e-8


@dataclass(frozen=True)
class SteadyState:
    x: np.ndarray
    u: np.ndarray
    px: np.ndarray
    py: np.ndarray
    d: np.ndarray
    static_cost: float
    kkt_residual: float
    iterations: int = 0

    def to_dict(self):
        return {
            "x": self.x.tolist(), "u": self.u.tolist(),
            "px": self.px.tolist(), "py": self.py.tolist(),
            "d": self.d.tolist(), "static_cost": float(self.static_cost),
            "kkt_residual": float(self.kkt_residual), "iterations": int(self.iterations),
        }

    def y_bar(self, t, y0):
        """Turnpike y-trajectory ``y0 + t d`` on a time grid; shape ``(p, len(t))``."""
        return np.asarray(y0, dtype=float)[:, None] + np.outer(self.d, np.atleast_1d(t))


def _split(problem, z):
    n, m = problem.n, problem.m
    return z[:n], z[n:n + m], z[n + m:2 * n + m], z[2 * n + m:]


def kkt_residual(problem: ProblemDef, d, z) -> np.ndarray:
    x, u, px, py = _split(problem, z)
    Hx, Hu = hamiltonian_gradient(problem, x, u, px, py)
    fx, gx = eval_rhs(problem, x, u)
    return np.concatenate([Hx, Hu, fx, gx - d])


def kkt_jacobian(problem: ProblemDef, x, u, px, py) -> np.ndarray:
    """Bordered KKT matrix ``[[E1, E2^T], [E2, 0]]`` in the unknown order (x, u, px, py)."""
    fx, fu, gx, gu, _, _ = first_derivatives(problem, x, u)
    Hxx, Hxu, Huu = hamiltonian_hessian(problem, x, u, px, py)
    E1 = np.block([[Hxx, Hxu], [Hxu.T, Huu]])
    E2 = np.block([[fx, fu], [gx, gu]])
    k = problem.n + problem.p
    return np.block([[E1, E2.T], [E2, np.zeros((k, k))]])


def solve_static(problem: ProblemDef, d, guess=None, tol: float = TOL_STATIC,
                 max_iter: int = MAX_ITER) -> SteadyState:
    """Solve the turnpike-static KKT system for the y-rate ``d``.

    Parameters
    ----------
    problem : ProblemDef
    d : array_like
        Prescribed rate ``(y1 - y0) / T``, length ``p`` (empty when ``p = 0``).
    guess : tuple, optional
        Starting point ``(x, u, px, py)``; defaults to the problem's own guess.

    Raises
    ------
    SingularKKT
        The KKT Jacobian is numerically singular.
    NoConvergence
        The residual did not reach ``tol`` within ``max_iter`` iterations.
    AssumptionViolated
        The steady control is not strictly inside the control box.
    """
    d = np.asarray(d, dtype=float).reshape(problem.p)
    if guess is None:
        guess = problem.static_guess
    z = np.concatenate([np.asarray(g, dtype=float).ravel() for g in guess])
    if z.size != 2 * problem.n + problem.m + problem.p:
        raise ValueError("guess has the wrong dimension")
    if not np.all(np.isfinite(z)):
        raise ValueError("guess must be finite")

    F = kkt_residual(problem, d, z)
    res = np.max(np.abs(F))
    it = 0
    while res > tol:
        if it >= max_iter:
            raise NoConvergence(f"{problem.name}: static Newton stalled at residual {res:.3e}",
                                residual=res, iterations=it)
        J = kkt_jacobian(problem, *_split(problem, z))
        try:
            lu = scipy.linalg.lu_factor(J, check_finite=True)
        except (ValueError, scipy.linalg.LinAlgError) as exc:
            raise SingularKKT(f"{problem.name}: KKT factorization failed ({exc})") from None
        if np.min(np.abs(np.diag(lu[0]))) <= 1e-14 * max(1.0, np.max(np.abs(J))):
            raise SingularKKT(f"{problem.name}: singular KKT Jacobian")
        step = -scipy.linalg.lu_solve(lu, F)
        norm0 = np.linalg.norm(F)
        s = 1.0
        for _ in range(30):
            trial = z + s * step
            try:
                Ft = kkt_residual(problem, d, trial)
            except TurnpikeError:
                Ft = None
            if Ft is not None and np.linalg.norm(Ft) < (1 - 1e-4 * s) * norm0:
                break
            s *= 0.5
        else:
            raise NoConvergence(f"{problem.name}: static line search failed at residual {res:.3e}",
                                residual=res, iterations=it)
        z, F = trial, Ft
        res = np.max(np.abs(F))
        it += 1

    x, u, px, py = (a.copy() for a in _split(problem, z))
    lo, hi = problem.control_lo, problem.control_hi
    if np.any(u - lo < INTERIOR_MARGIN) or np.any(hi - u < INTERIOR_MARGIN):
        raise AssumptionViolated(f"{problem.name}: steady control {u} is not interior to the control box",
                                 which="interior")
    _, dy = eval_rhs(problem, x, u)
    return SteadyState(x=x, u=u, px=px, py=py, d=dy, static_cost=float(problem.f0(x, u)),
                       kkt_residual=float(res), iterations=it)


def is_local_min(problem: ProblemDef, steady: SteadyState, tol: float = 1e-9) -> bool:
    """Second-order check: the Hessian of H is negative definite on the constraint tangent space."""
    J = kkt_jacobian(problem, steady.x, steady.u, steady.px, steady.py)
    k = problem.n + problem.m
    E1, E2 = J[:k, :k], J[k:, :k]
    Z = scipy.linalg.null_space(E2) if E2.size else np.eye(k)
    if Z.shape[1] == 0:
        return True
    red = Z.T @ E1 @ Z
    return bool(np.max(np.linalg.eigvalsh(0.5 * (red + red.T))) < -tol)


def default_grid(problem: ProblemDef, num: int = 41, bracket=(-2.0, 2.0)):
    """Tensor grid of ``num`` equispaced x-values per coordinate; other unknowns from the problem guess."""
    _, u, px, py = problem.static_guess
    axis = np.linspace(bracket[0], bracket[1], num)
    return [(np.array(pt), u, px, py) for pt in itertools.product(axis, repeat=problem.n)]


def multistart_static(problem: ProblemDef, d, grid=None, minima_only: bool = True,
                      dedup_tol: float = 1e-6) -> list:
    """Run :func:`solve_static` from every guess and return the distinct solutions.

    Guesses may be full tuples ``(x, u, px, py)`` or bare x-vectors. With
    ``minima_only`` the KKT points failing the second-order test (saddles and
    maxima of the static cost) are discarded. The result is sorted by static
    cost, ties broken by x in lexicographic order.
    """
    if grid is None:
        grid = default_grid(problem)
    grid = list(grid)
    if not grid:
        raise ValueError("multistart grid is empty")
    _, u0, px0, py0 = problem.static_guess
    found = []
    for guess in grid:
        if not isinstance(guess, tuple):
            guess = (np.atleast_1d(np.asarray(guess, dtype=float)), u0, px0, py0)
        try:
            st = solve_static(problem, d, guess)
        except TurnpikeError:
            continue
        if minima_only and not is_local_min(problem, st):
            continue
        if any(np.max(np.abs(st.x - other.x)) <= dedup_tol for other in found):
            continue
        found.append(st)
    if not found:
        raise NoConvergence(f"{problem.name}: no multistart guess converged", iterations=len(grid))
    return sorted(found, key=lambda s: (s.static_cost, tuple(s.x)))
