"""Direct transcription and an augmented Lagrangian NLP solver.

The horizon is cut into ``N`` intervals. With ``Z = (x, y)`` and ``F = (f, g)``
and a control ``U_i`` held constant on interval ``i``, the dynamics become
the trapezoidal defects::

    c_i = Z_{i+1} - Z_i - dt/2 (F(Z_i, U_i) + F(Z_{i+1}, U_i)),   i = 0..N-1

and the objective is ``sum_i dt/2 (f0(X_i, U_i) + f0(X_{i+1}, U_i))``.
Fixed boundary coordinates are extra equality rows; state and control
boxes are simple bounds.

Public decision layout: ``[Z_0, ..., Z_N, U_0, ..., U_{N-1}]``. Internally
the solver interleaves ``(Z_0, U_0, Z_1, U_1, ..., Z_N)`` so that the
Hessian of the augmented Lagrangian is banded.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .calculus import hamiltonian, hamiltonian_hessian
from .errors import AdjointInconsistent, InvalidParams, NoConvergence, Unbounded
from .problems import ProblemDef
from .shooting import ExtremalTrajectory


@dataclass
class NLPOptions:
    rho0: float = 1e3
    rho_factor: float = 10.0
    violation_decrease: float = 0.25
    tol_constraint: float = 1e-7
    tol_pg: float = 1e-6
    max_outer: int = 30
    max_inner: int = 5000
    inner: str = "newton"  # or "spg"
    unbounded: float = -1e12


@dataclass
class DiscretizedNLP:
    problem: ProblemDef
    T: float
    N: int
    lower: np.ndarray        # public layout
    upper: np.ndarray
    bnd_index: np.ndarray    # public indices of fixed boundary coordinates
    bnd_value: np.ndarray
    perm: np.ndarray = field(repr=False)  # internal position -> public index

    @property
    def dt(self):
        return self.T / self.N

    @property
    def q(self):
        return self.problem.n + self.problem.p

    @property
    def m(self):
        return self.problem.m

    @property
    def n_vars(self):
        return (self.N + 1) * self.q + self.N * self.m

    @property
    def n_eq(self):
        return self.N * self.q + self.bnd_index.size

    def split(self, v):
        """Public vector -> ``(Z (q, N+1), U (m, N))``."""
        k = (self.N + 1) * self.q
        return v[:k].reshape(self.N + 1, self.q).T, v[k:].reshape(self.N, self.m).T

    def join(self, Z, U):
        return np.concatenate([np.asarray(Z).T.ravel(), np.asarray(U).T.ravel()])

    def objective(self, v):
        Z, U = self.split(v)
        n = self.problem.n
        f0 = self.problem.f0
        return float(0.5 * self.dt * np.sum(f0(Z[:n, :-1], U) + f0(Z[:n, 1:], U)))

    def constraints(self, v):
        """Defects (row-major by interval) followed by the boundary rows."""
        Z, U = self.split(v)
        return np.concatenate([_defects(self.problem, Z, U, self.dt).T.ravel(),
                               v[self.bnd_index] - self.bnd_value])


def _F(problem, Z, U):
    n = problem.n
    x = Z[:n]
    return np.concatenate([problem.f(x, U), problem.g(x, U)], axis=0)


def _defects(problem, Z, U, dt):
    return Z[:, 1:] - Z[:, :-1] - 0.5 * dt * (_F(problem, Z[:, :-1], U) + _F(problem, Z[:, 1:], U))


def default_mesh(problem: ProblemDef, T: float) -> int:
    """``max(1000, 50 T)`` intervals; one per unit of the independent variable for the runner."""
    if problem.name == "runner":
        return max(20, int(round(T)))
    return int(max(1000, math.ceil(50 * T)))


def transcribe(problem: ProblemDef, T: float, N: int) -> DiscretizedNLP:
    if N < 20:
        raise InvalidParams("direct transcription needs N >= 20")
    if not T > 0:
        raise InvalidParams("T must be positive")
    n, p, m = problem.n, problem.p, problem.m
    q = n + p
    inf = np.inf
    zlo = np.full(q, -inf) if problem.state_lo is None else np.asarray(problem.state_lo, dtype=float)
    zhi = np.full(q, inf) if problem.state_hi is None else np.asarray(problem.state_hi, dtype=float)
    lower = np.concatenate([np.tile(zlo, N + 1), np.tile(problem.control_lo, N)])
    upper = np.concatenate([np.tile(zhi, N + 1), np.tile(problem.control_hi, N)])
    idx, val = [], []
    x0v, x1v = problem.x0_values(), problem.x1_values()
    for i in range(n):
        if problem.x0_fixed[i]:
            idx.append(i)
            val.append(x0v[i])
    for j in range(p):
        idx.append(n + j)
        val.append(problem.y0[j])
    for i in range(n):
        if problem.x1_fixed[i]:
            idx.append(N * q + i)
            val.append(x1v[i])
    y1 = problem.y1(T)
    for j in range(p):
        idx.append(N * q + n + j)
        val.append(y1[j])
    # internal interleaved order (Z_0, U_0, Z_1, U_1, ..., Z_N)
    s = q + m
    perm = np.empty((N + 1) * q + N * m, dtype=int)
    for i in range(N + 1):
        perm[i * s:i * s + q] = np.arange(i * q, (i + 1) * q)
        if i < N:
            perm[i * s + q:(i + 1) * s] = (N + 1) * q + np.arange(i * m, (i + 1) * m)
    return DiscretizedNLP(problem=problem, T=float(T), N=int(N), lower=lower, upper=upper,
                          bnd_index=np.array(idx, dtype=int), bnd_value=np.array(val, dtype=float), perm=perm)


# ---------------------------------------------------------------------------
# augmented Lagrangian pieces in the internal (banded) ordering


class _ALModel:
    def __init__(self, nlp: DiscretizedNLP):
        self.nlp = nlp
        pr = nlp.problem
        self.n, self.p, self.m, self.q = pr.n, pr.p, pr.m, nlp.q
        self.s = self.q + self.m
        self.ell = self.s + self.q
        self.N = nlp.N
        self.dt = nlp.dt
        inv = np.empty_like(nlp.perm)
        inv[nlp.perm] = np.arange(nlp.perm.size)
        self.inv = inv
        self.bnd = inv[nlp.bnd_index]
        self.lo = nlp.lower[nlp.perm]
        self.hi = nlp.upper[nlp.perm]
        self.kd = self.ell - 1
        self.offsets = np.arange(self.N) * self.s

    def unpack(self, w):
        N, s, q = self.N, self.s, self.q
        body = w[:N * s].reshape(N, s)
        Z = np.concatenate([body[:, :q], w[N * s:][None, :]], axis=0).T
        U = body[:, q:].T
        return Z, U

    def constraints(self, w):
        Z, U = self.unpack(w)
        return _defects(self.nlp.problem, Z, U, self.dt), w[self.bnd] - self.nlp.bnd_value

    def value(self, w, lam_d, lam_b, rho):
        Z, U = self.unpack(w)
        pr = self.nlp.problem
        with np.errstate(all="ignore"):
            J = 0.5 * self.dt * np.sum(pr.f0(Z[:self.n, :-1], U) + pr.f0(Z[:self.n, 1:], U))
            cd = _defects(pr, Z, U, self.dt)
        cb = w[self.bnd] - self.nlp.bnd_value
        val = J + np.sum(lam_d * cd) + lam_b @ cb + 0.5 * rho * (np.sum(cd * cd) + cb @ cb)
        return float(val) if np.isfinite(val) else np.inf

    def derivatives(self, w, lam_d, lam_b, rho, hess=True):
        """Value, gradient and (optionally) the upper band of the Hessian of the AL."""
        pr = self.nlp.problem
        n, p, m, q, s, ell, N, dt = self.n, self.p, self.m, self.q, self.s, self.ell, self.N, self.dt
        Z, U = self.unpack(w)
        xa, xb = Z[:n, :-1], Z[:n, 1:]
        fx_a, fu_a, gx_a, gu_a, f0x_a, f0u_a = _jac(pr, xa, U)
        fx_b, fu_b, gx_b, gu_b, f0x_b, f0u_b = _jac(pr, xb, U)
        cd = _defects(pr, Z, U, dt)
        cb = w[self.bnd] - self.nlp.bnd_value
        mu = lam_d + rho * cd                     # (q, N)
        J = 0.5 * dt * np.sum(pr.f0(xa, U) + pr.f0(xb, U))
        val = float(J + np.sum(lam_d * cd) + lam_b @ cb + 0.5 * rho * (np.sum(cd * cd) + cb @ cb))

        # local defect Jacobian blocks, (q, ell, N)
        Fz_a = np.zeros((q, q, N))
        Fz_a[:n, :n], Fz_a[n:, :n] = fx_a, gx_a
        Fz_b = np.zeros((q, q, N))
        Fz_b[:n, :n], Fz_b[n:, :n] = fx_b, gx_b
        Fu = np.concatenate([fu_a + fu_b, gu_a + gu_b], axis=0)
        eye = np.eye(q)[:, :, None]
        Jl = np.concatenate([-eye - 0.5 * dt * Fz_a, -0.5 * dt * Fu, eye - 0.5 * dt * Fz_b], axis=1)

        # local gradient, (ell, N)
        gl = np.einsum("ilk,ik->lk", Jl, mu)
        gl[:n] += 0.5 * dt * f0x_a
        gl[q:s] += 0.5 * dt * (f0u_a + f0u_b)
        gl[s:s + n] += 0.5 * dt * f0x_b
        grad = np.zeros(w.size)
        # first s local entries are owned by interval i; the last q belong to Z_{i+1}
        grad[:N * s] += gl[:s].T.ravel()
        grad[s:N * s + q] += np.pad(gl[s:].T, ((0, 0), (0, m))).ravel()[:N * s - s + q]
        grad[self.bnd] += lam_b + rho * cb
        if not hess:
            return val, grad, None

        # Hessian: rho Jl^T Jl + second-order terms
        Hl = rho * np.einsum("iak,ibk->abk", Jl, Jl)
        w0 = 0.5 * dt
        Hxx_a, Hxu_a, Huu_a = _phi_hess(pr, xa, U, -w0 * mu[:n], -w0 * mu[n:], w0)
        Hxx_b, Hxu_b, Huu_b = _phi_hess(pr, xb, U, -w0 * mu[:n], -w0 * mu[n:], w0)
        Hl[:n, :n] += Hxx_a
        Hl[:n, q:s] += Hxu_a
        Hl[q:s, :n] += np.swapaxes(Hxu_a, 0, 1)
        Hl[q:s, q:s] += Huu_a + Huu_b
        Hl[s:s + n, s:s + n] += Hxx_b
        Hl[s:s + n, q:s] += Hxu_b
        Hl[q:s, s:s + n] += np.swapaxes(Hxu_b, 0, 1)

        kd = self.kd
        ab = np.zeros((kd + 1, w.size))
        for a in range(ell):
            for b in range(a, ell):
                ab[kd + a - b, self.offsets + b] += Hl[a, b]
        ab[kd, self.bnd] += rho
        return val, grad, ab

    def pg(self, w, grad):
        return float(np.max(np.abs(np.clip(w - grad, self.lo, self.hi) - w)))


def _jac(problem, x, U):
    from .calculus import first_derivatives
    return first_derivatives(problem, x, U)


def _phi_hess(problem, x, U, wf, wg, w0):
    """Second derivatives of ``<wf, f> + <wg, g> + w0 f0`` at each column."""
    if problem.hess is not None:
        return problem.hess(x, U, wf, wg, w0)
    # H uses p0 = -1; rescale so that -w0 plays the role of the f0 weight
    scale = w0
    Hxx, Hxu, Huu = hamiltonian_hessian(problem, x, U, -wf / scale, -wg / scale)
    return -scale * Hxx, -scale * Hxu, -scale * Huu


# ---------------------------------------------------------------------------
# inner solvers


def _band_matvec(ab, d):
    """``H @ d`` for a symmetric matrix in upper banded storage."""
    kd = ab.shape[0] - 1
    out = ab[kd] * d
    for k in range(1, kd + 1):
        band = ab[kd - k, k:]
        out[:-k] += band * d[k:]
        out[k:] += band * d[:-k]
    return out


def _restrict(ab, free):
    """Decouple the fixed variables: zero their off-diagonal band entries, positive diagonal."""
    kd = ab.shape[0] - 1
    ab = ab.copy()
    fixed = ~free
    if np.any(fixed):
        for k in range(1, kd + 1):
            cols = np.arange(k, ab.shape[1])
            kill = fixed[cols] | fixed[cols - k]
            ab[kd - k, cols[kill]] = 0.0
        dg = ab[kd, fixed]
        ab[kd, fixed] = np.where(dg > 1e-12, dg, 1.0)
    return ab


def _shifted_solve(ab, rhs, tau):
    """Solve ``(H + tau I) d = rhs``, raising tau until the banded Cholesky succeeds."""
    kd = ab.shape[0] - 1
    diag = ab[kd].copy()
    floor = 1e-10 * max(1e-12, float(np.max(np.abs(diag))))
    for _ in range(60):
        trial = ab.copy()
        trial[kd] = diag + tau
        try:
            return scipy.linalg.solveh_banded(trial, rhs, lower=False, check_finite=False), tau
        except np.linalg.LinAlgError:
            tau = max(floor, 10 * tau)
    raise np.linalg.LinAlgError("could not regularize the Newton system")


def _inner_newton(model, w, lam_d, lam_b, rho, tol, max_iter, unbounded):
    """Projected Newton with a Levenberg-Marquardt shift on the free variables.

    Variables at a bound with the gradient pushing outward are held fixed
    (Bertsekas' active set). The shift ``tau`` adapts to the ratio of actual
    to predicted decrease, so early iterates stay near the initial guess and
    the solution keeps the basin of the initialization.
    """
    lo, hi = model.lo, model.hi
    val, grad, ab = model.derivatives(w, lam_d, lam_b, rho)
    pgn = model.pg(w, grad)
    tau = 0.0
    it = 0
    for it in range(max_iter):
        if pgn <= tol:
            break
        if val < unbounded:
            raise Unbounded(f"augmented Lagrangian below {unbounded:g}")
        eps_act = min(1e-3, pgn)
        active = ((w <= lo + eps_act) & (grad > 0)) | ((w >= hi - eps_act) & (grad < 0))
        H = _restrict(ab, ~active)
        step_ok = False
        for _ in range(60):
            d, tau = _shifted_solve(H, -grad, tau)
            trial = np.clip(w + d, lo, hi)
            s = trial - w
            pred = -(grad @ s + 0.5 * s @ _band_matvec(H, s))
            vt = model.value(trial, lam_d, lam_b, rho)
            if pred <= 0 or not np.isfinite(vt):
                ratio = -1.0
            else:
                ratio = (val - vt) / pred
            if ratio > 1e-4 and vt < val:
                step_ok = True
                break
            if pred > 0 and abs(val - vt) <= 1e-15 * max(1.0, abs(val)):
                break  # no representable progress left
            tau = max(4 * tau, 1e-8 * max(1.0, float(np.max(np.abs(H[-1])))))
        if not step_ok:
            break
        if ratio > 0.75:
            tau = tau / 4 if tau > 1e-12 else 0.0
        elif ratio < 0.25:
            tau *= 4
        w = trial
        val, grad, ab = model.derivatives(w, lam_d, lam_b, rho)
        pgn = model.pg(w, grad)
    return w, pgn, it


def _inner_spg(model, w, lam_d, lam_b, rho, tol, max_iter, unbounded, memory=10):
    """Spectral projected gradient with Barzilai-Borwein steps and a nonmonotone line search."""
    lo, hi = model.lo, model.hi
    val, grad, _ = model.derivatives(w, lam_d, lam_b, rho, hess=False)
    hist = [val]
    lam_bb = 1.0 / max(1.0, float(np.max(np.abs(grad))))
    pgn = model.pg(w, grad)
    it = 0
    for it in range(max_iter):
        if pgn <= tol:
            break
        if val < unbounded:
            raise Unbounded(f"augmented Lagrangian below {unbounded:g}")
        d = np.clip(w - lam_bb * grad, lo, hi) - w
        ref = max(hist[-memory:])
        alpha = 1.0
        for _ in range(60):
            trial = w + alpha * d
            vt = model.value(trial, lam_d, lam_b, rho)
            if vt <= ref + 1e-4 * alpha * grad @ d:
                break
            alpha *= 0.5
        else:
            break
        vn, gn, _ = model.derivatives(trial, lam_d, lam_b, rho, hess=False)
        sv, yv = trial - w, gn - grad
        sy = sv @ yv
        lam_bb = float(np.clip(sv @ sv / sy, 1e-10, 1e10)) if sy > 0 else 1.0 / max(1.0, float(np.max(np.abs(gn))))
        w, val, grad = trial, vn, gn
        hist.append(val)
        pgn = model.pg(w, grad)
    return w, pgn, it


# ---------------------------------------------------------------------------
# outer loop


@dataclass
class NLPResult:
    solution: np.ndarray       # public layout
    multipliers: np.ndarray    # defect multipliers, (N, q)
    boundary_multipliers: np.ndarray
    cost: float
    meta: dict


def solve_nlp(nlp: DiscretizedNLP, init, opts: NLPOptions | None = None, lam0=None) -> NLPResult:
    """Augmented Lagrangian method with a box-constrained inner solver.

    ``L_A = J + lam^T c + rho/2 |c|^2``; after each inner solve ``lam <- lam + rho c``
    and ``rho`` grows by ``rho_factor`` whenever the violation fails to drop
    by ``violation_decrease``. ``lam0`` (shape ``(N, n+p)``) warm-starts the
    defect multipliers; zero by default.

    Raises
    ------
    NoConvergence
        Outer-iteration cap reached; carries the violation and projected-gradient norm.
    Unbounded
        The augmented Lagrangian decreased below ``opts.unbounded``.
    """
    opts = opts or NLPOptions()
    if opts.inner not in ("newton", "spg"):
        raise InvalidParams(f"unknown inner solver {opts.inner!r}")
    model = _ALModel(nlp)
    v0 = np.asarray(init, dtype=float)
    if v0.shape != (nlp.n_vars,) or not np.all(np.isfinite(v0)):
        raise InvalidParams("initial decision vector has the wrong size or is not finite")
    w = np.clip(v0[nlp.perm], model.lo, model.hi)
    lam_d = np.zeros((nlp.q, nlp.N)) if lam0 is None else np.array(lam0, dtype=float).T
    if lam_d.shape != (nlp.q, nlp.N):
        raise InvalidParams("initial multipliers must have shape (N, n+p)")
    lam_b = np.zeros(nlp.bnd_index.size)
    rho = opts.rho0
    viol_prev = np.inf
    inner = _inner_newton if opts.inner == "newton" else _inner_spg
    total_inner = 0
    pgn = np.inf
    viol = np.inf
    for outer in range(1, opts.max_outer + 1):
        w, pgn, its = inner(model, w, lam_d, lam_b, rho, opts.tol_pg, opts.max_inner, opts.unbounded)
        total_inner += its
        cd, cb = model.constraints(w)
        viol = float(max(np.max(np.abs(cd)), np.max(np.abs(cb), initial=0.0)))
        lam_d = lam_d + rho * cd
        lam_b = lam_b + rho * cb
        if viol <= opts.tol_constraint and pgn <= opts.tol_pg:
            break
        if viol > opts.tol_constraint and viol > opts.violation_decrease * viol_prev:
            rho *= opts.rho_factor
        viol_prev = viol
    else:
        raise NoConvergence(f"{nlp.problem.name}: augmented Lagrangian hit {opts.max_outer} outer iterations "
                            f"(violation {viol:.3e}, projected gradient {pgn:.3e})",
                            residual=viol, iterations=opts.max_outer, pgnorm=pgn)
    v = np.empty_like(w)
    v[nlp.perm] = w
    return NLPResult(solution=v, multipliers=lam_d.T.copy(), boundary_multipliers=lam_b,
                     cost=nlp.objective(v),
                     meta={"outer_iterations": outer, "inner_iterations": total_inner,
                           "violation": viol, "pgnorm": pgn, "rho": rho, "inner": opts.inner})


def recover_adjoints(nlp: DiscretizedNLP, multipliers, T=None, N=None):
    """Node adjoints from the defect multipliers.

    ``lam_i`` approximates the adjoint at the interval midpoint; nodes take
    the average of adjacent intervals (linear extrapolation at the ends).
    ``py`` is the mean of the y-defect multipliers; the largest deviation
    from that mean is returned as a consistency diagnostic.

    Returns
    -------
    px : ndarray, shape (n, N+1)
    py : ndarray, shape (p,)
    deviation : float
    """
    lam = np.asarray(multipliers, dtype=float)
    N = nlp.N if N is None else N
    n, p = nlp.problem.n, nlp.problem.p
    lx = lam[:, :n].T
    px = np.empty((n, N + 1))
    px[:, 1:-1] = 0.5 * (lx[:, :-1] + lx[:, 1:])
    px[:, 0] = 1.5 * lx[:, 0] - 0.5 * lx[:, 1]
    px[:, -1] = 1.5 * lx[:, -1] - 0.5 * lx[:, -2]
    ly = lam[:, n:].T
    py = ly.mean(axis=1) if p else np.zeros(0)
    dev = float(np.max(np.abs(ly - py[:, None]))) if p else 0.0
    if dev > 1e-3 * (1 + np.linalg.norm(py)):
        warnings.warn(AdjointInconsistent(f"y-multipliers deviate from their mean by {dev:.3e}"), stacklevel=2)
    return px, py, dev


def _equilibrium_control(problem, x, u0, iters=30):
    """Least-squares control with ``f(x, u) = 0`` near ``u0`` (Gauss-Newton, clipped to the box)."""
    from .calculus import first_derivatives
    u = np.array(u0, dtype=float)
    for _ in range(iters):
        r = problem.f(x, u)
        if not np.all(np.isfinite(r)) or np.max(np.abs(r), initial=0.0) < 1e-12:
            break
        fu = first_derivatives(problem, x, u)[1]
        step = np.linalg.lstsq(fu, -r, rcond=None)[0]
        u = np.clip(u + step, problem.control_lo, problem.control_hi)
    return u if np.all(np.isfinite(u)) else np.array(u0, dtype=float)


def init_from_turnpike(problem: ProblemDef, steady, T: float, N: int, x_const=None, u_const=None):
    """Constant-turnpike initial guess (public layout).

    ``X_i = x̄`` (or ``x_const``), ``Y_i = y0 + t_i d̄``, ``U_i = ū`` (or
    ``u_const``); with ``x_const`` alone the control is fitted so that
    ``(x_const, u)`` is an equilibrium. Fixed boundary coordinates are overwritten.
    """
    n, p, m = problem.n, problem.p, problem.m
    t = np.linspace(0.0, T, N + 1)
    xc = steady.x if x_const is None else np.broadcast_to(np.asarray(x_const, dtype=float), (n,))
    if u_const is not None:
        uc = np.broadcast_to(np.asarray(u_const, dtype=float), (m,))
    elif x_const is not None:
        uc = _equilibrium_control(problem, np.asarray(xc, dtype=float), steady.u)
    else:
        uc = steady.u
    X = np.repeat(np.asarray(xc, dtype=float)[:, None], N + 1, axis=1)
    Y = problem.y0[:, None] + np.outer(steady.d, t) if p else np.zeros((0, N + 1))
    U = np.repeat(np.asarray(uc, dtype=float)[:, None], N, axis=1)
    x0v, x1v = problem.x0_values(), problem.x1_values()
    X[problem.x0_fixed, 0] = x0v[problem.x0_fixed]
    X[problem.x1_fixed, -1] = x1v[problem.x1_fixed]
    if p:
        Y[:, 0] = problem.y0
        Y[:, -1] = problem.y1(T)
    Z = np.concatenate([X, Y], axis=0)
    return np.concatenate([Z.T.ravel(), U.T.ravel()])


def solve_direct(problem: ProblemDef, T: float, N: int | None = None, init=None, steady=None,
                 x_const=None, u_const=None, opts: NLPOptions | None = None):
    """Transcribe, initialize at the turnpike and solve; returns ``(trajectory, NLPResult)``."""
    from .static import solve_static

    N = default_mesh(problem, T) if N is None else int(N)
    nlp = transcribe(problem, T, N)
    if init is None:
        if steady is None:
            steady = solve_static(problem, problem.rate(T))
        init = init_from_turnpike(problem, steady, T, N, x_const=x_const, u_const=u_const)
        lam0 = multiplier_estimate(nlp, init, steady.py)
    else:
        lam0 = None
    res = solve_nlp(nlp, init, opts, lam0=lam0)
    return trajectory_from_nlp(nlp, res), res


def multiplier_estimate(nlp: DiscretizedNLP, v, py):
    """Least-squares defect multipliers from control stationarity.

    With ``lam_y = py`` fixed, solves ``f_u^T lam_x = f0_u - g_u^T py`` on every
    interval (both trapezoid ends averaged). At a turnpike initial guess this
    makes the first subproblem stationary, so the basin of the guess is kept.
    """
    from .calculus import first_derivatives
    pr = nlp.problem
    n = pr.n
    Z, U = nlp.split(np.asarray(v, dtype=float))
    _, fu_a, _, gu_a, _, f0u_a = first_derivatives(pr, Z[:n, :-1], U)
    _, fu_b, _, gu_b, _, f0u_b = first_derivatives(pr, Z[:n, 1:], U)
    fu = 0.5 * (fu_a + fu_b)
    rhs = 0.5 * (f0u_a + f0u_b) - np.einsum("jik,j->ik", 0.5 * (gu_a + gu_b), np.asarray(py, dtype=float))
    A = np.moveaxis(fu, -1, 0).transpose(0, 2, 1)       # (N, m, n)
    lam_x = np.stack([np.linalg.lstsq(A[k], rhs[:, k], rcond=None)[0] for k in range(nlp.N)])
    lam = np.concatenate([lam_x, np.broadcast_to(py, (nlp.N, pr.p))], axis=1)
    return np.where(np.isfinite(lam), lam, 0.0)


def trajectory_from_nlp(nlp: DiscretizedNLP, res: NLPResult) -> ExtremalTrajectory:
    problem = nlp.problem
    n, p = problem.n, problem.p
    Z, U = nlp.split(res.solution)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        px, py, dev = recover_adjoints(nlp, res.multipliers)
    Un = np.concatenate([U, U[:, -1:]], axis=1)
    x, y = Z[:n], Z[n:]
    H = hamiltonian(problem, x, px, np.broadcast_to(py[:, None], (p, nlp.N + 1)), Un)
    meta = dict(res.meta)
    meta.update({"method": "direct", "T": nlp.T, "N": nlp.N, "adjoint_deviation": dev,
                 "adjoint_consistent": not caught})
    return ExtremalTrajectory(t=np.linspace(0.0, nlp.T, nlp.N + 1), x=x, y=y, px=px, py=py, u=Un,
                              H=H, cost=res.cost, meta=meta)
