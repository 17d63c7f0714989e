"""Finite differences, Hamiltonian evaluation and pointwise maximization over the control box.

All helpers accept batched arguments: ``x`` of shape ``(n, *batch)`` etc.
The Hamiltonian uses the normal multiplier ``p0 = -1``::

    H = <px, f(x, u)> + <py, g(x, u)> - f0(x, u)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import MaximizationStalled, NonConcaveHamiltonian, NonFiniteDerivative
from .problems import ProblemDef, eval_rhs

EPS = np.finfo(float).eps

PG_TOL = 1e-10
MAX_ITER = 50


@dataclass(frozen=True)
class FdScheme:
    """Central-difference scheme.

    ``order`` is ``"first_central"`` (Jacobians, step ``eps**(1/3)``) or
    ``"second_central"`` (Hessians from function values, step ``eps**(1/4)``).
    The step along coordinate ``i`` is ``base_step * max(1, |z_i|)``.
    """

    order: str = "first_central"
    base_step: Optional[float] = None

    def __post_init__(self):
        if self.order not in ("first_central", "second_central"):
            raise ValueError(f"unknown FD order {self.order!r}")
        if self.base_step is None:
            object.__setattr__(self, "base_step", EPS ** (1 / 3) if self.order == "first_central" else EPS**0.25)
        if not self.base_step > 0:
            raise ValueError("base_step must be positive")

    def steps(self, z):
        return self.base_step * np.maximum(1.0, np.abs(z))


FIRST = FdScheme("first_central")
SECOND = FdScheme("second_central")


def fd_jacobian(fn, z, scheme: FdScheme = FIRST) -> np.ndarray:
    """Central-difference Jacobian of ``fn: R^k -> R^l`` at ``z``; returns ``(l, k)``."""
    z = np.asarray(z, dtype=float).ravel()
    h = scheme.steps(z)
    cols = []
    for i in range(z.size):
        zp, zm = z.copy(), z.copy()
        zp[i] += h[i]
        zm[i] -= h[i]
        # the actually representable step makes affine maps exact
        width = zp[i] - zm[i]
        with np.errstate(all="ignore"):
            fp = np.atleast_1d(np.asarray(fn(zp), dtype=float))
            fm = np.atleast_1d(np.asarray(fn(zm), dtype=float))
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NonFiniteDerivative(f"non-finite evaluation while differencing coordinate {i}")
        cols.append((fp - fm) / width)
    if not cols:
        out = np.atleast_1d(np.asarray(fn(z), dtype=float))
        return np.zeros((out.size, 0))
    return np.stack(cols, axis=1)


def hamiltonian(problem: ProblemDef, x, px, py, u):
    """``<px, f> + <py, g> - f0``, vectorized over trailing batch axes."""
    x, px, py, u = (np.asarray(a, dtype=float) for a in (x, px, py, u))
    dx, dy = eval_rhs(problem, x, u)
    return np.sum(px * dx, axis=0) + np.sum(py * dy, axis=0) - problem.f0(x, u)


# ---------------------------------------------------------------------------
# batched first and second derivatives


def _batched_fd(fn, z, k0, k1, scheme):
    """Differentiate ``fn(z)`` (any leading shape, trailing batch) w.r.t. rows k0:k1 of z."""
    h = scheme.steps(z[k0:k1])
    out = []
    for i in range(k1 - k0):
        zp, zm = z.copy(), z.copy()
        zp[k0 + i] += h[i]
        zm[k0 + i] -= h[i]
        width = zp[k0 + i] - zm[k0 + i]
        with np.errstate(all="ignore"):
            d = (np.asarray(fn(zp)) - np.asarray(fn(zm))) / width
        if not np.all(np.isfinite(d)):
            raise NonFiniteDerivative("non-finite finite-difference derivative")
        out.append(d)
    return out


def first_derivatives(problem: ProblemDef, x, u, scheme: FdScheme = FIRST):
    """Return ``(f_x, f_u, g_x, g_u, f0_x, f0_u)`` with trailing batch axes."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if problem.jac is not None:
        return problem.jac(x, u)
    n, p, m = problem.n, problem.p, problem.m
    z = np.concatenate([x, u], axis=0)

    def fg(zz):
        xx, uu = zz[:n], zz[n:]
        return np.concatenate([problem.f(xx, uu), problem.g(xx, uu), problem.f0(xx, uu)[None]], axis=0)

    cols = _batched_fd(fg, z, 0, n + m, scheme)
    D = np.stack(cols, axis=1) if cols else np.zeros((n + p + 1, 0) + x.shape[1:])
    return (D[:n, :n], D[:n, n:], D[n:n + p, :n], D[n:n + p, n:], D[n + p, :n], D[n + p, n:])


def _tmul(A, v):
    """``A^T v`` over the leading two axes, batched over the rest."""
    return (A * v[:, None]).sum(axis=0)


def hamiltonian_gradient(problem, x, u, px, py, jac=None):
    """``(H_x, H_u)`` from first derivatives (optionally precomputed ``jac``)."""
    fx, fu, gx, gu, f0x, f0u = first_derivatives(problem, x, u) if jac is None else jac
    Hx = _tmul(fx, px) - f0x
    Hu = _tmul(fu, px) - f0u
    if problem.p:
        Hx = Hx + _tmul(gx, py)
        Hu = Hu + _tmul(gu, py)
    return Hx, Hu


def hamiltonian_hessian(problem, x, u, px, py, scheme: Optional[FdScheme] = None):
    """``(H_xx, H_xu, H_uu)`` with trailing batch axes.

    Uses the analytic ``hess`` when present, otherwise central differences of
    the gradient (analytic or itself finite-differenced).
    """
    x, u, px, py = (np.asarray(a, dtype=float) for a in (x, u, px, py))
    if problem.hess is not None:
        return problem.hess(x, u, px, py, -1.0)
    n = problem.n
    if scheme is None:
        scheme = FIRST if problem.jac is not None else SECOND
    z = np.concatenate([x, u], axis=0)

    def grad(zz):
        Hx, Hu = hamiltonian_gradient(problem, zz[:n], zz[n:], px, py)
        return np.concatenate([Hx, Hu], axis=0)

    cols = _batched_fd(grad, z, 0, z.shape[0], scheme)
    D = np.stack(cols, axis=1)
    D = 0.5 * (D + np.swapaxes(D, 0, 1))
    return D[:n, :n], D[:n, n:], D[n:, n:]


# ---------------------------------------------------------------------------
# maximization of H over the control box


def _hamiltonian_value(problem, x, u, px, py):
    with np.errstate(all="ignore"):
        dx, dy = problem.f(x, u), problem.g(x, u)
        val = np.sum(px * dx, axis=0) - problem.f0(x, u)
        if problem.p:
            val = val + np.sum(py * dy, axis=0)
    return np.where(np.isfinite(val), val, -np.inf)


def _check_concave(problem, wmax):
    if np.any(wmax >= 0):
        raise NonConcaveHamiltonian(
            f"{problem.name}: H_uu not negative definite on free directions "
            f"(max eigenvalue {np.max(wmax):.3e})")


def _quadratic_argmax(problem, x, px, py, u, lo, hi):
    """Exact maximizer when H is a concave quadratic in u (one Newton step, then clip).

    Clipping is exact for a scalar control or an unbounded box. Returns None
    when the step produced non-finite values, leaving the iterative path to report.
    """
    jac = first_derivatives(problem, x, u)
    _, G = hamiltonian_gradient(problem, x, u, px, py, jac)
    Huu = hamiltonian_hessian(problem, x, u, px, py)[2]
    m = problem.m
    if m == 1:
        _check_concave(problem, Huu[0, 0])
        out = u - G / Huu[0, 0]
    else:
        Hb = np.moveaxis(Huu, (0, 1), (-2, -1))
        _check_concave(problem, np.linalg.eigvalsh(Hb)[..., -1])
        step = np.linalg.solve(Hb, np.moveaxis(G, 0, -1)[..., None])[..., 0]
        out = u - np.moveaxis(step, -1, 0)
    if not np.all(np.isfinite(out)):
        return None
    return np.clip(out, lo, hi)


def maximize_hamiltonian(problem: ProblemDef, x, px, py, u_init, return_jac: bool = False):
    """Local maximizer of ``u -> H(x, px, py, u)`` over the control box.

    Projected Newton from ``u_init`` (clipped into the box). Blocked
    coordinates (on a bound with the gradient pointing outward) are held
    fixed; the Newton system is solved on the free coordinates, followed by
    backtracking on ``H`` along the projected path.

    Batched: ``x`` is ``(n, *batch)`` and ``u_init`` is ``(m, *batch)``.

    Returns
    -------
    u : ndarray
        Maximizer, same shape as ``u_init``.
    jac : tuple, optional
        First derivatives at the returned point (when ``return_jac``).

    Raises
    ------
    NonConcaveHamiltonian
        The free-direction Hessian at the returned point is not negative definite.
    MaximizationStalled
        No convergence within the iteration cap.
    """
    x, px, py = (np.asarray(a, dtype=float) for a in (x, px, py))
    lo = problem.control_lo.reshape((-1,) + (1,) * (np.ndim(u_init) - 1))
    hi = problem.control_hi.reshape(lo.shape)
    u = np.clip(np.array(u_init, dtype=float), lo, hi)
    m = problem.m
    batch = u.shape[1:]
    if m == 0:
        return (u, first_derivatives(problem, x, u)) if return_jac else u

    if problem.argmax_u is not None:
        out = np.clip(np.broadcast_to(problem.argmax_u(x, px, py), u.shape), lo, hi)
        if np.all(np.isfinite(out)):
            return (out, first_derivatives(problem, x, out)) if return_jac else out

    if problem.quadratic_u and (m == 1 or not (np.any(np.isfinite(lo)) or np.any(np.isfinite(hi)))):
        out = _quadratic_argmax(problem, x, px, py, u, lo, hi)
        if out is not None:
            return (out, first_derivatives(problem, x, out)) if return_jac else out

    H0 = None
    for it in range(MAX_ITER + 1):
        jac = first_derivatives(problem, x, u)
        _, G = hamiltonian_gradient(problem, x, u, px, py, jac)
        if not np.all(np.isfinite(G)):
            raise NonFiniteDerivative("non-finite Hamiltonian gradient")
        blocked = ((u <= lo) & (G < 0)) | ((u >= hi) & (G > 0))
        pg = np.where(blocked, 0.0, G)
        Huu = hamiltonian_hessian(problem, x, u, px, py)[2]
        free = ~blocked
        done = np.max(np.abs(pg), axis=0) <= PG_TOL
        if m == 1:
            wmax = np.where(free[0], Huu[0, 0], -1.0)
            if np.all(done):
                _check_concave(problem, wmax)
                return (u, jac) if return_jac else u
            if it == MAX_ITER:
                break
            wneg = -np.maximum(np.abs(wmax), 1e-8 * (1.0 + np.abs(wmax)))
            d = np.where(free, -pg / wneg, 0.0)
        else:
            # batch axes first for the linear algebra: (B, m, m)
            Hb = np.moveaxis(Huu, (0, 1), (-2, -1)).reshape(-1, m, m)
            fb = free.reshape(m, -1).T
            Hr = np.where(fb[:, :, None] & fb[:, None, :], Hb, 0.0)
            Hr = Hr - np.eye(m) * (~fb)[:, :, None]
            w, Q = np.linalg.eigh(0.5 * (Hr + np.swapaxes(Hr, 1, 2)))
            wmax = w.max(axis=1)
            if np.all(done):
                _check_concave(problem, wmax)
                return (u, jac) if return_jac else u
            if it == MAX_ITER:
                break
            # Newton direction with eigenvalues flipped/floored so that it ascends
            wneg = -np.maximum(np.abs(w), 1e-8 * (1.0 + np.abs(w).max(axis=1, keepdims=True)))
            step = np.einsum("bij,bj,bkj,bk->bi", Q, 1.0 / wneg, Q, pg.reshape(m, -1).T)
            d = np.where(free, -step.T.reshape((m,) + batch), 0.0)
        d = np.where(done, 0.0, d)
        if H0 is None:
            H0 = _hamiltonian_value(problem, x, u, px, py)
        s = np.ones(batch)
        accepted = np.array(done, copy=True)
        u_new, H_new = u.copy(), np.array(H0, copy=True)
        for _ in range(40):
            trial = np.clip(u + s * d, lo, hi)
            Ht = _hamiltonian_value(problem, x, trial, px, py)
            ok = Ht >= H0 + 1e-4 * np.sum(G * (trial - u), axis=0)
            # near the optimum the gain drops below the rounding of H; take
            # short steps that do not lose more than that
            short = np.max(np.abs(trial - u), axis=0) <= 1e-6 * (1.0 + np.max(np.abs(u), axis=0))
            ok = (ok | (short & (Ht >= H0 - 4 * EPS * (1.0 + np.abs(H0))))) & ~accepted
            u_new = np.where(ok, trial, u_new)
            H_new = np.where(ok, Ht, H_new)
            accepted |= ok
            if np.all(accepted):
                break
            s = np.where(accepted, s, 0.5 * s)
        moved = np.max(np.abs(u_new - u), axis=0)
        tiny = moved <= 1e-13 * (1.0 + np.max(np.abs(u), axis=0))
        u, H0 = u_new, H_new
        if np.all(tiny | done):
            _check_concave(problem, wmax)
            jac = first_derivatives(problem, x, u)
            return (u, jac) if return_jac else u
    raise MaximizationStalled(
        f"{problem.name}: Hamiltonian maximization did not converge in {MAX_ITER} iterations "
        f"(projected gradient {np.max(np.abs(pg)):.3e})")
