"""Optimal control problem definitions and the registry of built-in instances.

Every map of a problem is vectorized over trailing batch axes: ``x`` has
shape ``(n, *batch)`` and ``u`` has shape ``(m, *batch)``; ``f`` returns
``(n, *batch)``, ``g`` returns ``(p, *batch)`` and ``f0`` returns ``batch``.

The optional ``jac`` returns the first derivatives
``(f_x, f_u, g_x, g_u, f0_x, f0_u)`` with shapes ``(n, n, *b)``,
``(n, m, *b)``, ``(p, n, *b)``, ``(p, m, *b)``, ``(n, *b)``, ``(m, *b)``.
The optional ``hess`` returns the second derivatives
``(phi_xx, phi_xu, phi_uu)`` of the weighted sum
``phi = <wf, f> + <wg, g> + w0 * f0``; the Hamiltonian is the case
``wf = px, wg = py, w0 = -1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Mapping, Optional

import numpy as np

from .errors import InvalidParams, NonFiniteDynamics, UnknownProblem


@dataclass(frozen=True)
class TerminalSpec:
    """Boundary condition on one x-coordinate: ``Fixed(value)`` or ``Free``."""

    value: Optional[float] = None

    @property
    def fixed(self) -> bool:
        return self.value is not None

    def __repr__(self):
        return f"Fixed({self.value!r})" if self.fixed else "Free"


def Fixed(value: float) -> TerminalSpec:
    return TerminalSpec(float(value))


Free = TerminalSpec(None)


@dataclass(frozen=True)
class ProblemDef:
    name: str
    n: int
    p: int
    m: int
    f: Callable
    g: Callable
    f0: Callable
    control_lo: np.ndarray
    control_hi: np.ndarray
    x0_spec: tuple
    x1_spec: tuple
    y0: np.ndarray
    y1_of_T: Callable[[float], np.ndarray]
    state_lo: Optional[np.ndarray] = None  # box on the stacked (x, y)
    state_hi: Optional[np.ndarray] = None
    params: Mapping[str, float] = field(default_factory=dict)
    jac: Optional[Callable] = None
    hess: Optional[Callable] = None
    static_guess: Optional[tuple] = None  # (x, u, px, py)
    default_T: Optional[float] = None
    # shooting relies on smooth interior extremals
    shooting_ok: bool = True
    # H is a concave quadratic in u with u-independent Hessian (affine dynamics
    # in u, quadratic cost), so one Newton step from anywhere is exact
    quadratic_u: bool = False
    # optional closed-form maximizer (x, px, py) -> u of H over the control box
    argmax_u: Optional[Callable] = None

    def __post_init__(self):
        if min(self.n, self.p, self.m) < 0:
            raise InvalidParams("dimensions must be nonnegative")
        lo = np.asarray(self.control_lo, dtype=float)
        hi = np.asarray(self.control_hi, dtype=float)
        if lo.shape != (self.m,) or hi.shape != (self.m,):
            raise InvalidParams("control box has the wrong dimension")
        if np.any(lo > hi):
            raise InvalidParams("control_lo must not exceed control_hi")
        if len(self.x0_spec) != self.n or len(self.x1_spec) != self.n:
            raise InvalidParams("terminal specs must have one entry per x-coordinate")
        if np.shape(self.y0) != (self.p,):
            raise InvalidParams("y0 has the wrong dimension")
        for box in (self.state_lo, self.state_hi):
            if box is not None and np.shape(box) != (self.n + self.p,):
                raise InvalidParams("state box must cover the stacked (x, y)")
        for arr in (lo, hi, self.y0, self.state_lo, self.state_hi):
            if arr is not None:
                arr.flags.writeable = False
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))

    def y1(self, T: float) -> np.ndarray:
        return np.asarray(self.y1_of_T(float(T)), dtype=float).reshape(self.p)

    def rate(self, T: float) -> np.ndarray:
        """Prescribed y-rate ``(y1(T) - y0) / T`` of the turnpike-static problem."""
        return (self.y1(T) - self.y0) / float(T)

    @property
    def x0_fixed(self) -> np.ndarray:
        return np.array([s.fixed for s in self.x0_spec], dtype=bool)

    @property
    def x1_fixed(self) -> np.ndarray:
        return np.array([s.fixed for s in self.x1_spec], dtype=bool)

    def x0_values(self) -> np.ndarray:
        return np.array([s.value if s.fixed else np.nan for s in self.x0_spec], dtype=float)

    def x1_values(self) -> np.ndarray:
        return np.array([s.value if s.fixed else np.nan for s in self.x1_spec], dtype=float)


def eval_rhs(problem: ProblemDef, x, u):
    """Return ``(f(x, u), g(x, u))``; ``u`` is not clipped."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[:1] != (problem.n,) or u.shape[:1] != (problem.m,):
        raise ValueError(f"expected x of length {problem.n} and u of length {problem.m}")
    with np.errstate(all="ignore"):
        dx = np.asarray(problem.f(x, u), dtype=float)
        dy = np.asarray(problem.g(x, u), dtype=float)
    if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dy))):
        raise NonFiniteDynamics(f"{problem.name}: non-finite dynamics at x={x}, u={u}")
    return dx, dy


# ---------------------------------------------------------------------------
# array helpers for writing vectorized maps


def _stack(rows, like):
    """Stack scalars/arrays into an array of shape ``(len(rows), *like.shape)``."""
    out = np.empty((len(rows),) + np.shape(like))
    for i, r in enumerate(rows):
        out[i] = r
    return out


def _mat(rows, like):
    """Nested list ``rows[i][j]`` -> array ``(len(rows), len(rows[0]), *batch)``."""
    out = np.empty((len(rows), len(rows[0])) + np.shape(like))
    for i, row in enumerate(rows):
        for j, r in enumerate(row):
            out[i, j] = r
    return out


# ---------------------------------------------------------------------------
# built-in problems


def _toy(params, with_y=True):
    alpha = params["alpha"]
    osc = params["oscillate"]

    def f(x, u):
        return _stack([u[0]], x[0])

    def g(x, u):
        if not with_y:
            return np.zeros((0,) + np.shape(x[0]))
        return _stack([x[0]], x[0])

    def f0(x, u):
        return 0.5 * (x[0] ** 2 + u[0] ** 2)

    def jac(x, u):
        z, o = np.zeros_like(x[0]), np.ones_like(x[0])
        p = 1 if with_y else 0
        gx = _mat([[o]], z)[:p]
        gu = _mat([[z]], z)[:p]
        return (_mat([[z]], z), _mat([[o]], z), gx, gu,
                _stack([x[0]], z), _stack([u[0]], z))

    def hess(x, u, wf, wg, w0):
        w0 = np.broadcast_to(w0, np.shape(x[0]))
        z = np.zeros_like(x[0])
        return _mat([[w0]], z), _mat([[z]], z), _mat([[w0]], z)

    def y1_of_T(T):
        if not with_y:
            return np.zeros(0)
        return np.array([alpha * T * (math.sin(T) if osc else 1.0)])

    p = 1 if with_y else 0
    return ProblemDef(
        name="toy" if with_y else "toy_noy",
        n=1, p=p, m=1, f=f, g=g, f0=f0,
        control_lo=np.array([-np.inf]), control_hi=np.array([np.inf]),
        x0_spec=(Fixed(params["x0"]),), x1_spec=(Fixed(params["x1"]),),
        y0=np.zeros(p), y1_of_T=y1_of_T,
        params=params, jac=jac, hess=hess,
        static_guess=(np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(p)),
        argmax_u=lambda x, px, py: px[:1],
        quadratic_u=True,
    )


def _zermelo(params):
    L, c0, vmax, rate = params["L"], params["c0"], params["vmax"], params["rate"]

    def current(x):
        return c0 + x * (L - x)

    def f(x, u):
        return _stack([u[1] * np.sin(u[0])], x[0])

    def g(x, u):
        return _stack([u[1] * np.cos(u[0]) + current(x[0])], x[0])

    def f0(x, u):
        return u[1] ** 2 + 0.0 * x[0]

    def jac(x, u):
        a, v = u[0], u[1]
        z = np.zeros_like(x[0] + a)
        s, c = np.sin(a), np.cos(a)
        return (_mat([[z]], z), _mat([[v * c, s]], z),
                _mat([[L - 2 * x[0]]], z), _mat([[-v * s, c]], z),
                _stack([z], z), _stack([z, 2 * v], z))

    def hess(x, u, wf, wg, w0):
        a, v = u[0], u[1]
        z = np.zeros_like(x[0] + a)
        s, c = np.sin(a), np.cos(a)
        wf, wg = wf[0], wg[0]
        uu = [[-wf * v * s - wg * v * c, wf * c - wg * s],
              [wf * c - wg * s, 2 * w0 + z]]
        return _mat([[-2 * wg]], z), _mat([[z, z]], z), _mat(uu, z)

    return ProblemDef(
        name="zermelo", n=1, p=1, m=2, f=f, g=g, f0=f0,
        control_lo=np.array([-np.inf, 0.0]), control_hi=np.array([np.inf, vmax]),
        x0_spec=(Fixed(0.0),), x1_spec=(Fixed(params["ell"]),),
        y0=np.zeros(1), y1_of_T=lambda T: np.array([rate * T]),
        params=params, jac=jac, hess=hess,
        static_guess=(np.array([0.9]), np.array([0.1, 0.9]), np.zeros(1), np.ones(1)),
        shooting_ok=False,
    )


def _runner(params):
    tau, sigma, alpha = params["tau"], params["sigma"], params["alpha"]
    Fm, gamma = params["F_max"], params["gamma"]

    def f(x, u):
        v, F = x[0], x[1]
        return _stack([-1.0 / tau + F / v, (gamma / v) * (u[0] * (Fm - F) - F)], v + u[0])

    def g(x, u):
        v, F = x[0], x[1]
        return _stack([sigma / v - F], v + u[0])

    def f0(x, u):
        return (1.0 + 0.5 * alpha * u[0] ** 2) / x[0]

    def jac(x, u):
        v, F, w = x[0], x[1], u[0]
        z = np.zeros_like(v + w)
        q = w * (Fm - F) - F
        fx = [[-F / v**2, 1.0 / v], [-gamma * q / v**2, -gamma * (w + 1.0) / v]]
        fu = [[z], [gamma * (Fm - F) / v]]
        gx = [[-sigma / v**2, -1.0 + z]]
        gu = [[z]]
        c = 1.0 + 0.5 * alpha * w**2
        return (_mat(fx, z), _mat(fu, z), _mat(gx, z), _mat(gu, z),
                _stack([-c / v**2, z], z), _stack([alpha * w / v], z))

    def hess(x, u, wf, wg, w0):
        v, F, w = x[0], x[1], u[0]
        z = np.zeros_like(v + w)
        a1, a2, b = wf[0], wf[1], wg[0]
        q = w * (Fm - F) - F
        c = 1.0 + 0.5 * alpha * w**2
        xx = [[a1 * 2 * F / v**3 + a2 * 2 * gamma * q / v**3 + b * 2 * sigma / v**3 + w0 * 2 * c / v**3,
               -a1 / v**2 + a2 * gamma * (w + 1.0) / v**2],
              [-a1 / v**2 + a2 * gamma * (w + 1.0) / v**2, z]]
        xu = [[-a2 * gamma * (Fm - F) / v**2 - w0 * alpha * w / v**2],
              [-a2 * gamma / v]]
        uu = [[w0 * alpha / v]]
        return _mat(xx, z), _mat(xu, z), _mat(uu, z)

    e0, M = params["e0"], params["M"]
    inf = np.inf
    # closed-form static force, used only as a Newton starting point
    fbar = (e0 + math.sqrt(e0**2 + 4 * sigma * params["d"] ** 2 / tau)) / (2 * params["d"])
    return ProblemDef(
        name="runner", n=2, p=1, m=1, f=f, g=g, f0=f0,
        control_lo=np.array([-M]), control_hi=np.array([M]),
        x0_spec=(Fixed(params["v0"]), Free), x1_spec=(Free, Free),
        y0=np.array([e0]), y1_of_T=lambda T: np.array([0.0]),
        state_lo=np.array([params["v_min"], 0.0, 0.0]),
        state_hi=np.array([inf, Fm, inf]),
        params=params, jac=jac, hess=hess,
        static_guess=(np.array([tau * fbar, fbar]), np.array([fbar / (Fm - fbar)]), np.zeros(2), np.zeros(1)),
        default_T=params["d"], shooting_ok=False, quadratic_u=True,
        argmax_u=lambda x, px, py: np.clip(px[1:2] * gamma * (Fm - x[1:2]) / alpha, -M, M),
    )


def _cubic(params):
    xd, ud = params["x_d"], params["u_d"]

    def f(x, u):
        return _stack([-3 * x[0] + 3 * x[0] ** 3 + u[0]], x[0] + u[0])

    def g(x, u):
        return np.zeros((0,) + np.shape(x[0] + u[0]))

    def f0(x, u):
        return (x[0] - xd) ** 2 + (u[0] - ud) ** 2

    def jac(x, u):
        z = np.zeros_like(x[0] + u[0])
        return (_mat([[-3 + 9 * x[0] ** 2]], z), _mat([[1.0 + z]], z),
                np.zeros((0, 1) + z.shape), np.zeros((0, 1) + z.shape),
                _stack([2 * (x[0] - xd)], z), _stack([2 * (u[0] - ud)], z))

    def hess(x, u, wf, wg, w0):
        z = np.zeros_like(x[0] + u[0])
        return _mat([[wf[0] * 18 * x[0] + 2 * w0]], z), _mat([[z]], z), _mat([[2 * w0 + z]], z)

    xf = params["xf"]
    x1 = Free if xf is None or (isinstance(xf, float) and math.isnan(xf)) else Fixed(xf)
    return ProblemDef(
        name="cubic", n=1, p=0, m=1, f=f, g=g, f0=f0,
        control_lo=np.array([-np.inf]), control_hi=np.array([np.inf]),
        x0_spec=(Fixed(params["x0"]),), x1_spec=(x1,),
        y0=np.zeros(0), y1_of_T=lambda T: np.zeros(0),
        params=params, jac=jac, hess=hess,
        static_guess=(np.array([0.5]), np.zeros(1), np.zeros(1), np.zeros(0)),
        quadratic_u=True, argmax_u=lambda x, px, py: ud + 0.5 * px[:1],
    )


_POS = (0.0, math.inf, False)  # (lo, hi, lo_inclusive)
_ANY = (-math.inf, math.inf, True)

# name -> (builder, {param: (default, (lo, hi, lo_inclusive))})
_REGISTRY = {
    "toy": (lambda p: _toy(p, True), {
        "alpha": (0.5, _ANY), "oscillate": (0.0, (0.0, 1.0, True)),
        "x0": (1.0, _ANY), "x1": (2.0, _ANY)}),
    "toy_noy": (lambda p: _toy(p, False), {
        "alpha": (0.0, _ANY), "oscillate": (0.0, (0.0, 1.0, True)),
        "x0": (1.0, _ANY), "x1": (2.0, _ANY)}),
    "zermelo": (_zermelo, {
        "L": (2.0, _POS), "c0": (3.0, _ANY), "vmax": (1.1, _POS),
        "rate": (5.0, _ANY), "ell": (2.0, _ANY)}),
    "runner": (_runner, {
        "d": (1500.0, _POS), "tau": (0.932, _POS), "sigma": (22.0, _POS),
        "alpha": (1e-5, _POS), "F_max": (8.0, _POS), "gamma": (0.0025, _POS),
        "v0": (3.0, _POS), "e0": (4651.0, _POS), "M": (10.0, _POS),
        "v_min": (0.5, _POS)}),
    "cubic": (_cubic, {
        "x_d": (1.0, _ANY), "u_d": (3.47197, _ANY), "x0": (-2.0, _ANY),
        "xf": (None, _ANY)}),
}


def problem_names():
    return sorted(_REGISTRY)


def problem_defaults(name: str) -> dict:
    if name not in _REGISTRY:
        raise UnknownProblem(f"unknown problem {name!r}; known: {', '.join(problem_names())}")
    return {k: v[0] for k, v in _REGISTRY[name][1].items()}


def _coerce(key, value):
    if value is None:
        return None
    if isinstance(value, str):
        if value.lower() in ("free", "none", "null"):
            return None
        try:
            return float(value)
        except ValueError:
            raise InvalidParams(f"parameter {key!r}: cannot parse {value!r}") from None
    try:
        return float(value)
    except (TypeError, ValueError):
        raise InvalidParams(f"parameter {key!r}: expected a number, got {value!r}") from None


def make_problem(name: str, params: Optional[Mapping] = None) -> ProblemDef:
    """Build a registered problem, overriding documented defaults with ``params``."""
    if name not in _REGISTRY:
        raise UnknownProblem(f"unknown problem {name!r}; known: {', '.join(problem_names())}")
    builder, spec = _REGISTRY[name]
    merged = {k: v[0] for k, v in spec.items()}
    for key, value in (params or {}).items():
        if key not in spec:
            raise InvalidParams(f"{name}: unknown parameter {key!r}")
        val = _coerce(key, value)
        if val is None and spec[key][0] is not None:
            raise InvalidParams(f"{name}: parameter {key!r} cannot be free")
        if val is not None:
            lo, hi, incl = spec[key][1]
            if not math.isfinite(val) or val > hi or val < lo or (val == lo and not incl):
                raise InvalidParams(f"{name}: parameter {key!r}={val!r} out of range")
        merged[key] = val
    if name == "runner" and merged["v_min"] >= merged["v0"]:
        raise InvalidParams("runner: v_min must be below v0")
    return builder(merged)
