"""Turnpike diagnostics for computed extremals.

Discrepancy series against the steady state, boundary-layer decay fits,
plateau levels, sweep classification (exponential vs linear turnpike) and
the fitted constants of the two turnpike estimates::

    exponential:  |x - x̄| + |px - p̄x| + |u - ū| <= C (e^{-nu t} + e^{-nu (T-t)})
    linear:       |x - x̄| + |px - p̄x| + |u - ū| <= C (1/T + e^{-nu t} + e^{-nu (T-t)}),
                  |y(t) - ȳ(t)| <= C,   |py - p̄y| <= C / T
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FitDegenerate, InsufficientSweep, MismatchedSteadyState

EPS_FLOOR = 1e-14
PLATEAU_WINDOW = (0.4, 0.6)
FORWARD_WINDOW = (0.05, 0.25)
MIN_FIT_POINTS = 5
BAND = 3.0
C_CAP = 100.0
RATE_TOL = 1e-9

SIGNALS = ("e_x", "e_px", "e_u", "e_y")


@dataclass
class DecayFit:
    nu_hat: float
    C_hat: float
    plateau: float
    nu_ratio: float | None = None   # nu_hat / nu when a Riccati split is supplied
    windows: tuple = ()             # which boundary windows contributed

    def to_dict(self):
        return {"nu_hat": self.nu_hat, "C_hat": self.C_hat, "plateau": self.plateau,
                "nu_ratio": self.nu_ratio, "windows": list(self.windows)}


@dataclass
class TurnpikeReport:
    T: float
    t: np.ndarray
    e_x: np.ndarray
    e_px: np.ndarray
    e_u: np.ndarray
    e_y: np.ndarray
    e_py: float
    plateau: dict = field(default_factory=dict)
    fits: dict = field(default_factory=dict)
    nu_hat: float | None = None
    C_hat: float | None = None
    classification: str | None = None
    estimate_checks: dict = field(default_factory=dict)

    @property
    def e_joint(self):
        """``e_x + e_px + e_u``, the block bounded jointly by both estimates."""
        return self.e_x + self.e_px + self.e_u

    def to_dict(self, series: bool = False):
        out = {
            "T": self.T, "e_py": self.e_py,
            "plateau": dict(self.plateau),
            "fits": {k: v.to_dict() for k, v in self.fits.items()},
            "nu_hat": self.nu_hat, "C_hat": self.C_hat,
            "classification": self.classification,
            "estimate_checks": self.estimate_checks,
            "max_e_y": float(np.max(self.e_y)) if self.e_y.size else 0.0,
        }
        if series:
            out["series"] = {"t": self.t.tolist(), **{k: getattr(self, k).tolist() for k in SIGNALS}}
        return out


def _norm(a):
    a = np.asarray(a, dtype=float)
    if a.shape[0] == 0:
        return np.zeros(a.shape[1:])
    return np.sqrt(np.sum(a * a, axis=0))


def discrepancy(traj, steady, problem=None) -> TurnpikeReport:
    """Series of distances to the turnpike, with ``ȳ(t) = y0 + t d̄``.

    Parameters
    ----------
    traj : ExtremalTrajectory
    steady : SteadyState
        Must have been computed for the rate of this horizon.
    problem : ProblemDef, optional
        When given, the rate is taken from its boundary data; otherwise from
        the trajectory's own end values.

    Raises
    ------
    MismatchedSteadyState
        ``steady.d`` differs from ``(y1 - y0) / T`` by more than 1e-9 (relative).
    """
    T = float(traj.t[-1] - traj.t[0])
    p = traj.y.shape[0]
    if p:
        if problem is not None:
            rate = problem.rate(T)
            tol = RATE_TOL
        else:
            rate = (traj.y[:, -1] - traj.y[:, 0]) / T
            # end values of a converged solve carry the boundary-row tolerance
            tol = max(RATE_TOL, 1e-6 / T)
        if np.max(np.abs(rate - steady.d)) > tol * (1 + np.max(np.abs(steady.d))):
            raise MismatchedSteadyState(f"steady rate {steady.d} does not match the horizon rate {rate}")
    t = np.asarray(traj.t, dtype=float) - traj.t[0]
    e_y = _norm(traj.y - steady.y_bar(t, traj.y[:, 0])) if p else np.zeros_like(t)
    return TurnpikeReport(
        T=T, t=t,
        e_x=_norm(traj.x - steady.x[:, None]),
        e_px=_norm(traj.px - steady.px[:, None]),
        e_u=_norm(traj.u - steady.u[:, None]),
        e_y=e_y,
        e_py=float(np.linalg.norm(np.asarray(traj.py) - steady.py)) if p else 0.0,
    )


def plateau_level(series, t, T) -> float:
    """Median of the series over the central window ``[0.4 T, 0.6 T]``."""
    t = np.asarray(t)
    mask = (t >= PLATEAU_WINDOW[0] * T) & (t <= PLATEAU_WINDOW[1] * T)
    if not np.any(mask):
        raise FitDegenerate("central window holds no samples")
    return float(np.median(np.asarray(series)[mask]))


def _window_fit(tau, e, plateau, floor):
    excess = e - plateau
    ok = excess > floor
    if np.count_nonzero(ok) < MIN_FIT_POINTS:
        return None
    slope, intercept = np.polyfit(tau[ok], np.log(excess[ok]), 1)
    return -slope, np.exp(intercept)


def fit_decay(series, t, T=None, split=None, floor: float = EPS_FLOOR) -> DecayFit:
    """Fit ``e(t) ~ plateau + C (e^{-nu t} + e^{-nu (T-t)})`` on the boundary windows.

    The forward window ``[0.05 T, 0.25 T]`` is fitted against ``t`` and the
    mirrored window ``[0.75 T, 0.95 T]`` against ``T - t``; usable windows are
    averaged. With a Riccati split the ratio ``nu_hat / nu`` is reported.

    Raises
    ------
    FitDegenerate
        Neither window has 5 points above the plateau.
    """
    e = np.asarray(series, dtype=float)
    t = np.asarray(t, dtype=float)
    if T is None:
        T = float(t[-1] - t[0])
    plateau = plateau_level(e, t, T)
    a, b = FORWARD_WINDOW
    fw = (t >= a * T) & (t <= b * T)
    bw = (t >= (1 - b) * T) & (t <= (1 - a) * T)
    fits, names = [], []
    for mask, tau, name in ((fw, t, "forward"), (bw, T - t, "backward")):
        r = _window_fit(tau[mask], e[mask], plateau, floor)
        if r is not None:
            fits.append(r)
            names.append(name)
    if not fits:
        raise FitDegenerate(f"fewer than {MIN_FIT_POINTS} samples above the plateau in both boundary windows")
    nu_hat = float(np.mean([f[0] for f in fits]))
    C_hat = float(np.mean([f[1] for f in fits]))
    ratio = None
    if split is not None:
        ratio = nu_hat / float(split.nu)
    return DecayFit(nu_hat=nu_hat, C_hat=C_hat, plateau=plateau, nu_ratio=ratio, windows=tuple(names))


def analyze(traj, steady, problem=None, split=None) -> TurnpikeReport:
    """:func:`discrepancy` plus plateaus and decay fits for every signal.

    The report's headline ``nu_hat``/``C_hat`` come from the adjoint series
    ``e_px``, which carries the boundary layer in both regimes (``e_x`` may
    cross zero against its own O(1/T) offset); the joint sum is the fallback.
    """
    rep = discrepancy(traj, steady, problem)
    for name in SIGNALS + ("e_joint",):
        series = getattr(rep, name)
        rep.plateau[name] = plateau_level(series, rep.t, rep.T)
        try:
            rep.fits[name] = fit_decay(series, rep.t, rep.T, split)
        except FitDegenerate:
            pass
    for name in ("e_px", "e_joint", "e_u", "e_x"):
        if name in rep.fits and rep.fits[name].nu_hat > 0:
            rep.nu_hat, rep.C_hat = rep.fits[name].nu_hat, rep.fits[name].C_hat
            break
    return rep


@dataclass
class SweepClassification:
    label: str
    evidence: list

    def to_dict(self):
        return {"classification": self.label, "evidence": self.evidence}


def classify_sweep(reports) -> SweepClassification:
    """Decide between exponential and linear turnpike behavior across horizons.

    With ``s(T)`` the central plateau of ``e_x + e_px + e_u``:

    * linear: ``s(T) T`` stays inside a factor-3 band and ``s(T_max) > 100 eps_floor``;
    * exponential: ``s`` drops faster than ``T^-2`` between consecutive horizons
      and every boundary fit has ``nu_hat > 0``;
    * otherwise inconclusive.

    Raises
    ------
    InsufficientSweep
        Fewer than 3 distinct horizons or ``T_max / T_min < 4``.
    """
    reports = sorted(reports, key=lambda r: r.T)
    Ts = np.array([r.T for r in reports])
    if len(np.unique(Ts)) < 3 or Ts[-1] / Ts[0] < 4:
        raise InsufficientSweep("a sweep needs at least 3 distinct horizons spanning a factor 4")
    s = np.array([r.plateau.get("e_joint", plateau_level(r.e_joint, r.t, r.T)) for r in reports])
    evidence = [{"T": float(T), "s": float(v), "sT": float(v * T), "nu_hat": r.nu_hat}
                for T, v, r in zip(Ts, s, reports)]
    sT = s * Ts
    linear = bool(np.all(sT > 0) and sT.max() / sT.min() <= BAND and s[-1] > 100 * EPS_FLOOR)
    if linear:
        return SweepClassification("linear", evidence)
    with np.errstate(divide="ignore", invalid="ignore"):
        faster = np.all(s[1:] < s[:-1] * (Ts[:-1] / Ts[1:]) ** 2)
    fitted = all(r.nu_hat is not None and r.nu_hat > 0 for r in reports)
    if faster and fitted:
        return SweepClassification("exponential", evidence)
    return SweepClassification("inconclusive", evidence)


def verify_estimates(report: TurnpikeReport, kind: str = "lin24", nu: float | None = None,
                     C_cap: float = C_CAP) -> dict:
    """Smallest constants making the turnpike estimates hold on the grid.

    ``kind="lin24"`` checks the three linear-turnpike inequalities,
    ``kind="exp13"`` the exponential one. The decay rate is the report's
    ``nu_hat`` unless ``nu`` is given. Passing means every constant is at
    most ``C_cap``.
    """
    if kind not in ("lin24", "exp13"):
        raise ValueError(f"unknown estimate {kind!r}")
    nu = report.nu_hat if nu is None else nu
    if nu is None or not nu > 0:
        return {"kind": kind, "passed": False, "reason": "no decay rate", "C": {}}
    t, T = report.t, report.T
    layer = np.exp(-nu * t) + np.exp(-nu * (T - t))
    C = {}
    if kind == "lin24":
        C["joint"] = float(np.max(report.e_joint / (1.0 / T + layer)))
        C["y"] = float(np.max(report.e_y)) if report.e_y.size else 0.0
        C["py"] = float(report.e_py * T)
    else:
        C["joint"] = float(np.max(report.e_joint / layer))
    passed = all(v <= C_cap for v in C.values())
    out = {"kind": kind, "passed": bool(passed), "nu": float(nu), "C_cap": C_cap, "C": C}
    report.estimate_checks[kind] = out
    return out
