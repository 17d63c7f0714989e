"""Indirect shooting on the extremal system.

The extremal system is integrated in the variables ``z = (x, y, px)`` with
``py`` constant::

    x' = f(x, u),  y' = g(x, u),  px' = -H_x(x, px, py, u)

where ``u`` maximizes ``H`` pointwise. The integrator is batched over
columns so that a Newton residual and all its finite-difference columns
(and all shooting segments) are propagated in a single pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.integrate

from .calculus import hamiltonian, hamiltonian_gradient, maximize_hamiltonian
from .errors import (ConfigError, IllConditioned, IntegrationBlowup, InternalContractViolation,
                     NoConvergence, TurnpikeError)
from .problems import ProblemDef

TOL_BVP = 1e-9
FD_REL = 1e-7
# single shooting differences a map whose rounding noise is amplified by e^{nu T}
FD_REL_SINGLE = 1e-5
COND_MAX = 1e12
MAX_HALVINGS = 8
SEGMENT_SPAN = 16.0


@dataclass
class ExtremalTrajectory:
    t: np.ndarray
    x: np.ndarray   # (n, N+1)
    y: np.ndarray   # (p, N+1)
    px: np.ndarray  # (n, N+1)
    py: np.ndarray  # (p,)
    u: np.ndarray   # (m, N+1)
    H: np.ndarray
    cost: float
    meta: dict = field(default_factory=dict)

    @property
    def T(self):
        return float(self.t[-1])

    @property
    def N(self):
        return self.t.size - 1


def default_steps(T: float) -> int:
    return int(max(500, math.ceil(25 * T)))


def default_segments(T: float) -> int:
    """Smallest even segment count keeping each segment at most ``SEGMENT_SPAN`` long."""
    return max(2, 2 * math.ceil(T / (2 * SEGMENT_SPAN)))


# ---------------------------------------------------------------------------
# batched RK4


def _rhs(problem, Z, py, u_warm):
    n, p = problem.n, problem.p
    x, px = Z[:n], Z[n + p:]
    u, jac = maximize_hamiltonian(problem, x, px, py, u_warm, return_jac=True)
    Hx, _ = hamiltonian_gradient(problem, x, u, px, py, jac)
    with np.errstate(all="ignore"):
        dZ = np.concatenate([problem.f(x, u), problem.g(x, u), -Hx], axis=0)
    return dZ, u


def _propagate(problem, Z0, py, h, steps, u0, store=False, t0=0.0):
    """RK4 with a signed step ``h`` per column. Returns the final (Z, u) or the full paths."""
    Z = np.array(Z0, dtype=float)
    u = np.array(u0, dtype=float)
    Zs, us = ([Z.copy()], []) if store else (None, None)
    comp = np.zeros_like(Z)
    k = 0
    err = np.seterr(all="ignore")
    try:
        k1, u = _rhs(problem, Z, py, u)
        for k in range(steps):
            if store:
                us.append(u)
            k2, u2 = _rhs(problem, Z + 0.5 * h * k1, py, u)
            k3, u3 = _rhs(problem, Z + 0.5 * h * k2, py, u2)
            k4, u4 = _rhs(problem, Z + h * k3, py, u3)
            # compensated update: rounding of the state is re-injected next step,
            # which matters because it is amplified by e^{nu T} along the flow
            inc = (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4) - comp
            Znew = Z + inc
            comp = (Znew - Z) - inc
            Z = Znew
            if not np.all(np.isfinite(Z)):
                raise IntegrationBlowup("state became non-finite", t=t0 + (k + 1) * float(np.max(np.abs(h))))
            k1, u = _rhs(problem, Z, py, u4)
            if store:
                Zs.append(Z)
    except IntegrationBlowup:
        raise
    except TurnpikeError as exc:
        t = t0 + k * float(np.max(np.abs(h)))
        raise IntegrationBlowup(f"{type(exc).__name__} at t~{t:.6g}: {exc}", t=t) from exc
    finally:
        np.seterr(**err)
    if store:
        us.append(u)
        return np.stack(Zs), np.stack(us)
    return Z, u


def _assemble(problem, t, Zpath, upath, py, meta):
    n, p = problem.n, problem.p
    x, y, px = Zpath[:n], Zpath[n:n + p], Zpath[n + p:]
    pyb = np.broadcast_to(py[:, None], (p, t.size))
    H = hamiltonian(problem, x, px, pyb, upath)
    cost = float(scipy.integrate.simpson(problem.f0(x, upath), x=t))
    return ExtremalTrajectory(t=t, x=x, y=y, px=px, py=np.array(py, dtype=float), u=upath, H=H,
                              cost=cost, meta=meta)


def _u_start(problem, batch):
    u0 = problem.static_guess[1] if problem.static_guess is not None else np.zeros(problem.m)
    u0 = np.clip(np.asarray(u0, dtype=float), problem.control_lo, problem.control_hi)
    return np.broadcast_to(u0.reshape(-1, 1), (problem.m, batch)).copy()


def integrate_extremal(problem: ProblemDef, x0, y0, px0, py, T: float, N: int,
                       direction: str = "forward", u_init=None) -> ExtremalTrajectory:
    """Integrate the extremal system with classical RK4 on ``N`` equal steps.

    ``direction="backward"`` starts from the given data at ``t = T`` and
    integrates down to ``t = 0``; the returned grid is always increasing.

    Raises
    ------
    IntegrationBlowup
        Maximization or dynamics failed; the failing time is attached.
    """
    if N < 10:
        raise ValueError("N must be at least 10")
    if direction not in ("forward", "backward"):
        raise ValueError(f"unknown direction {direction!r}")
    n, p = problem.n, problem.p
    Z0 = np.concatenate([np.ravel(x0), np.ravel(y0), np.ravel(px0)]).astype(float).reshape(-1, 1)
    if Z0.shape[0] != 2 * n + p:
        raise ValueError("initial data has the wrong dimension")
    py = np.asarray(py, dtype=float).reshape(p)
    u0 = _u_start(problem, 1) if u_init is None else np.asarray(u_init, dtype=float).reshape(-1, 1)
    sign = 1.0 if direction == "forward" else -1.0
    h = np.array([sign * T / N])
    Zs, us = _propagate(problem, Z0, py[:, None], h, N, u0, store=True)
    Zs, us = Zs[:, :, 0].T, us[:, :, 0].T
    if sign < 0:
        Zs, us = Zs[:, ::-1], us[:, ::-1]
    t = np.linspace(0.0, T, N + 1)
    return _assemble(problem, t, Zs, us, py, {"method": "integrate", "direction": direction})


# ---------------------------------------------------------------------------
# turnpike initialization


def turnpike_init(steady, split, x0, T: float, y0, y1, R=None):
    """Initial adjoint guess ``(px0, py)`` from the hyperbolic splitting at the turnpike.

    ``px0 = p̄x + E- (x0 - x̄) - (E+ - E-) H4 R^-1 δ`` and ``py = p̄y + R^-1 δ``
    with ``δ = (y1 - y0)/T - d̄``. When the steady state was computed for the
    rate ``(y1 - y0)/T`` the correction vanishes; ``R`` is only needed otherwise.
    """
    x0 = np.asarray(x0, dtype=float)
    px0 = steady.px + split.Eminus @ (x0 - steady.x)
    py = np.array(steady.py, dtype=float)
    if steady.d.size:
        delta = (np.asarray(y1, dtype=float) - np.asarray(y0, dtype=float)) / T - steady.d
        if np.any(np.abs(delta) > 1e-12 * (1 + np.abs(steady.d))):
            if R is None:
                raise ValueError("R is required when the steady rate differs from the target rate")
            dpy = np.linalg.solve(R, delta)
            py = py + dpy
            px0 = px0 - (split.Eplus - split.Eminus) @ split.H4 @ dpy
    return px0, py


def _turnpike_data(problem, T):
    from .hyperbolic import linearize, solve_are
    from .static import solve_static

    steady = solve_static(problem, problem.rate(T))
    bundle = linearize(problem, steady)
    split = solve_are(bundle)
    return steady, bundle, split


# ---------------------------------------------------------------------------
# Newton with batched forward-difference Jacobians


def _newton(fun, s0, tol, max_iter, name, fd_rel=FD_REL):
    """Damped Newton on ``fun`` (maps ``(k, B)`` unknowns to ``(k, B)`` residuals).

    Every evaluation point is propagated together with its forward-difference
    columns, so an accepted line-search trial already carries the next
    Jacobian. Converged when ``|S|_inf <= tol``, or when the Newton
    correction is at the rounding level of the unknowns (the residual then
    sits at its floating-point floor, which long horizons amplify by
    ``e^{nu T}``).
    """
    eps = np.finfo(float).eps

    def with_columns(s):
        h = fd_rel * np.maximum(1.0, np.abs(s))
        S = np.concatenate([s[:, None], s[:, None] + np.diag(h)], axis=1)
        Rall = fun(S)
        if Rall.shape[0] != s.size:
            raise InternalContractViolation(f"{Rall.shape[0]} residuals for {s.size} unknowns")
        J = (Rall[:, 1:] - Rall[:, :1]) / (S[:, 1:].diagonal() - s)[None, :]
        return Rall[:, 0], J

    s = np.array(s0, dtype=float)
    r, J = with_columns(s)
    history = []
    for it in range(max_iter + 1):
        res = float(np.max(np.abs(r))) if r.size else 0.0
        history.append(res)
        if res <= tol:
            return s, {"residual": res, "iterations": it, "converged_by": "residual", "history": history}
        if it == max_iter:
            break
        cond = np.linalg.cond(J)
        if not np.isfinite(cond) or cond > COND_MAX:
            raise IllConditioned(
                f"{name}: shooting Jacobian condition {cond:.3e} exceeds {COND_MAX:.0e}; "
                "use bidirectional shooting for long horizons")
        delta = -np.linalg.solve(J, r)
        if np.max(np.abs(delta)) <= 64 * eps * max(1.0, np.max(np.abs(s))):
            return s, {"residual": res, "iterations": it, "converged_by": "precision", "history": history}
        lam = 1.0
        for _ in range(MAX_HALVINGS + 1):
            trial = s + lam * delta
            try:
                rt, Jt = with_columns(trial)
                ok = np.max(np.abs(rt)) < res
            except IntegrationBlowup:
                ok = False
            if ok:
                break
            lam *= 0.5
        else:
            raise NoConvergence(f"{name}: line search failed at residual {res:.3e}", residual=res, iterations=it)
        s, r, J = trial, rt, Jt
    raise NoConvergence(f"{name}: no convergence in {max_iter} iterations (residual {res:.3e})",
                        residual=res, iterations=max_iter)


def _check_shootable(problem):
    if not np.all(problem.x0_fixed):
        raise ConfigError(f"{problem.name}: shooting needs every x(0) coordinate fixed")


def solve_shooting_single(problem: ProblemDef, T: float, N: int | None = None, init="turnpike",
                          tol: float = TOL_BVP, max_iter: int = 30,
                          fd_rel: float = FD_REL_SINGLE) -> ExtremalTrajectory:
    """Single shooting on ``(px0, py)`` with residuals at ``t = T``.

    Residual rows: fixed x(T) coordinates minus targets, ``px_i(T)`` for free
    coordinates, and ``y(T) - y1``.

    Raises
    ------
    IllConditioned
        The shooting Jacobian is too ill-conditioned (long horizons).
    NoConvergence
        Newton stagnated.
    """
    _check_shootable(problem)
    n, p = problem.n, problem.p
    N = default_steps(T) if N is None else int(N)
    x0 = problem.x0_values()
    y0, y1 = problem.y0, problem.y1(T)
    fixed1, target1 = problem.x1_fixed, problem.x1_values()
    meta = {"method": "shooting", "T": float(T), "N": N}
    if isinstance(init, str):
        steady, bundle, split = _turnpike_data(problem, T)
        px0, py = turnpike_init(steady, split, x0, T, y0, y1, bundle.R if p else None)
    else:
        px0, py = (np.asarray(a, dtype=float).ravel() for a in init)

    paths = {}  # base-column path of every evaluation, keyed by the unknowns

    def fun(S):
        B = S.shape[1]
        Z0 = np.concatenate([np.repeat(x0[:, None], B, 1), np.repeat(y0[:, None], B, 1), S[:n]], axis=0)
        pyb = S[n:]
        Zp, up = _propagate(problem, Z0, pyb, np.full(B, T / N), N, _u_start(problem, B), store=True)
        paths.clear()
        paths[S[:, 0].tobytes()] = (Zp[:, :, 0].T, up[:, :, 0].T)
        Z = Zp[-1]
        xT, yT, pxT = Z[:n], Z[n:n + p], Z[n + p:]
        rx = np.where(fixed1[:, None], xT - np.nan_to_num(target1)[:, None], pxT)
        return np.concatenate([rx, yT - y1[:, None]], axis=0)

    s, info = _newton(fun, np.concatenate([px0, py]), tol, max_iter, f"{problem.name} single shooting",
                      fd_rel=fd_rel)
    meta.update(info)
    key = s.tobytes()
    if key in paths:
        Zpath, upath = paths[key]
        return _assemble(problem, np.linspace(0.0, T, N + 1), Zpath, upath, s[n:], meta)
    traj = integrate_extremal(problem, x0, y0, s[:n], s[n:], T, N)
    traj.meta = meta
    return traj


def solve_shooting_bidirectional(problem: ProblemDef, T: float, N: int | None = None, init="turnpike",
                                 segments: int | None = None, tol: float = TOL_BVP,
                                 max_iter: int = 30) -> ExtremalTrajectory:
    """Bidirectional multiple shooting matched at ``T/2``.

    The horizon is cut into ``segments`` (even) pieces of equal length. The
    left half is integrated forward from ``t = 0``, the right half backward
    from ``t = T``; interior nodes carry the full state ``(x, y, px)`` as
    unknowns, and the two halves are matched at the midpoint. With two
    segments this is plain forward/backward matching at ``T/2``.

    Unknowns: ``px(0)``, ``py``, ``px(T)``, the free coordinates of ``x(T)``
    and the interior node states. Residuals: continuity at every interior
    node and at the midpoint, plus ``px_i(T) = 0`` on free coordinates.
    """
    _check_shootable(problem)
    n, p, m = problem.n, problem.p, problem.m
    segments = default_segments(T) if segments is None else int(segments)
    if segments < 2 or segments % 2:
        raise ConfigError("segment count must be even and at least 2")
    k = segments // 2
    N = default_steps(T) if N is None else int(N)
    N = segments * math.ceil(N / segments)
    spn = N // segments
    q = 2 * n + p
    x0 = problem.x0_values()
    y0, y1 = problem.y0, problem.y1(T)
    fixed1, target1 = problem.x1_fixed, problem.x1_values()
    free1 = ~fixed1
    nfree = int(free1.sum())
    nodes = np.linspace(0.0, T, segments + 1)
    n_int = segments - 2  # interior nodes excluding the midpoint
    n_unk = n + p + n + nfree + n_int * q
    n_res = n_int * q + q + nfree
    if n_unk != n_res:
        raise InternalContractViolation(f"{n_unk} unknowns but {n_res} residuals")
    # interior node indices: left 1..k-1, right k+1..2k-1
    left_nodes = list(range(1, k))
    right_nodes = list(range(k + 1, segments))

    def unpack(S):
        px0, py = S[:n], S[n:n + p]
        pxT = S[n + p:2 * n + p]
        xTfree = S[2 * n + p:2 * n + p + nfree]
        rest = S[2 * n + p + nfree:].reshape(n_int, q, S.shape[1])
        return px0, py, pxT, xTfree, rest

    def starts(S):
        """Start states of all segments, ordered left segments 1..k then right segments k+1..2k."""
        B = S.shape[1]
        px0, py, pxT, xTfree, rest = unpack(S)
        xT = np.repeat(np.nan_to_num(target1)[:, None], B, 1)
        xT[free1] = xTfree
        Z = [np.concatenate([np.repeat(x0[:, None], B, 1), np.repeat(y0[:, None], B, 1), px0], axis=0)]
        Z += [rest[i] for i in range(k - 1)]                      # left interior nodes, forward starts
        Z += [rest[k - 1 + i] for i in range(k - 1)]              # right interior nodes k+1..2k-1, backward starts
        Z += [np.concatenate([xT, np.repeat(y1[:, None], B, 1), pxT], axis=0)]
        return Z, py

    def fun(S):
        B = S.shape[1]
        Z, py = starts(S)
        Zb = np.concatenate(Z, axis=1)            # (q, segments * B)
        pyb = np.tile(py, segments)
        h = np.concatenate([np.full(k * B, T / N), np.full(k * B, -T / N)])
        end, _ = _propagate(problem, Zb, pyb, h, spn, _u_start(problem, segments * B))
        ends = [end[:, j * B:(j + 1) * B] for j in range(segments)]
        res = []
        # forward segment j (1-based) ends at node j; must equal the start of segment j+1
        for j in range(1, k):
            res.append(ends[j - 1] - Z[j])
        # backward segment starting at node j ends at node j-1 (j = k+2..2k); match the start there
        for idx, j in enumerate(range(k + 2, segments + 1)):
            res.append(ends[k + idx + 1] - Z[k + idx])
        # midpoint: forward segment k vs backward segment from node k+1
        res.append(ends[k - 1] - ends[k])
        px0, py_, pxT, _, _ = unpack(S)
        if nfree:
            res.append(pxT[free1])
        return np.concatenate(res, axis=0)

    meta = {"method": "shooting2", "T": float(T), "N": N, "segments": segments}
    if isinstance(init, str):
        steady, bundle, split = _turnpike_data(problem, T)
        px0, py = turnpike_init(steady, split, x0, T, y0, y1, bundle.R if p else None)
        xT = np.where(fixed1, np.nan_to_num(target1), steady.x)
        # near t = T the relevant invariant subspace of the backward flow is the graph of E+
        pxT = steady.px + split.Eplus @ (xT - steady.x)
        interior = []
        for j in left_nodes + right_nodes:
            interior.append(np.concatenate([steady.x, y0 + nodes[j] * steady.d, steady.px]))
        s0 = np.concatenate([px0, py, pxT, xT[free1]] + interior)
    else:
        s0 = np.asarray(init, dtype=float).ravel()
        if s0.size != n_unk:
            raise ValueError(f"explicit bidirectional init needs {n_unk} values")

    s, info = _newton(fun, s0, tol, max_iter, f"{problem.name} bidirectional shooting")
    meta.update(info)

    # rebuild the trajectory segment by segment on the global grid
    Z, py = starts(s[:, None])
    Zb = np.concatenate(Z, axis=1)
    h = np.concatenate([np.full(k, T / N), np.full(k, -T / N)])
    Zs, us = _propagate(problem, Zb, np.tile(py, segments), h, spn, _u_start(problem, segments), store=True)
    Zfull = np.empty((q, N + 1))
    ufull = np.empty((m, N + 1))
    for j in range(segments):
        path, up = Zs[:, :, j].T, us[:, :, j].T
        if j < k:
            Zfull[:, j * spn:(j + 1) * spn + 1] = path
            ufull[:, j * spn:(j + 1) * spn + 1] = up
        else:
            # backward segment starting at node j+1; skip the midpoint node owned by the left half
            lo_node = j * spn
            sl = slice(lo_node + (1 if j == k else 0), (j + 1) * spn + 1)
            Zfull[:, sl] = path[:, ::-1][:, (1 if j == k else 0):]
            ufull[:, sl] = up[:, ::-1][:, (1 if j == k else 0):]
    t = np.linspace(0.0, T, N + 1)
    return _assemble(problem, t, Zfull, ufull, np.asarray(py).ravel(), meta)
