"""Acceptance criteria, one test per criterion (or sub-criterion).

Each test prints a single ``[PASS]``/``[FAIL]`` line with the measured
quantities before asserting, so ``pytest -v -s`` (or the captured output of a
failure) shows the verdict even for the expected failures.
"""

import time

import numpy as np
import pytest

from turnpike import make_problem
from turnpike.analyzer import analyze, classify_sweep, fit_decay
from turnpike.direct import solve_direct
from turnpike.errors import KernelOverlap
from turnpike.hyperbolic import (contraction_check, explicit_R, linearize, random_bundle, riccati_residual,
                                 solve_are)
from turnpike.shooting import solve_shooting_bidirectional, solve_shooting_single
from turnpike.static import multistart_static, solve_static

from conftest import toy_oracle

pytestmark = pytest.mark.acceptance


def verdict(capsys, label, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
    return ok


def band(values):
    values = np.asarray(values, dtype=float)
    return float(values.max() / values.min())


_runs = {}


def extremal(name, T, params=None):
    """Bidirectional extremal, steady state, report and wall time (cached)."""
    key = (name, T, tuple(sorted((params or {}).items())))
    if key not in _runs:
        pr = make_problem(name, params or {})
        t0 = time.perf_counter()
        steady = solve_static(pr, pr.rate(T))
        traj = solve_shooting_bidirectional(pr, T)
        rep = analyze(traj, steady, pr)
        _runs[key] = (pr, steady, traj, rep, time.perf_counter() - t0)
    return _runs[key]


# 1 ---------------------------------------------------------------------------

@pytest.mark.parametrize("method", ["single", "bidirectional"])
def test_1_toy_oracle(capsys, toy, method):
    T = 20.0
    solver = solve_shooting_single if method == "single" else solve_shooting_bidirectional
    t0 = time.perf_counter()
    tr = solver(toy, T)
    dt = time.perf_counter() - t0
    py, x, px, y = toy_oracle(T, toy.rate(T)[0] * T, t=tr.t)
    err = {"x": np.max(np.abs(tr.x[0] - x)), "px": np.max(np.abs(tr.px[0] - px)),
           "u": np.max(np.abs(tr.u[0] - px)), "y": np.max(np.abs(tr.y[0] - y))}
    ok = max(err["x"], err["px"], err["u"]) <= 1e-6 and err["y"] <= 1e-5 and dt < 1.0
    verdict(capsys, f"1 toy oracle ({method})", ok,
            ", ".join(f"{k} {v:.2e}" for k, v in err.items()) + f", {dt:.2f} s")
    assert ok


# 2 ---------------------------------------------------------------------------

def test_2_linear_turnpike_scaling(capsys):
    Ts = (10.0, 20.0, 40.0, 80.0)
    t0 = time.perf_counter()
    reports = [extremal("toy", T)[3] for T in Ts]
    label = classify_sweep(reports).label
    dt = time.perf_counter() - t0
    b_py = band([r.e_py * r.T for r in reports])
    b_x = band([r.plateau["e_x"] * r.T for r in reports])
    ok_a, ok_b, ok_c = b_py <= 3, b_x <= 3, label == "linear"
    verdict(capsys, "2(a) e_py*T band", ok_a, f"ratio {b_py:.3f}")
    verdict(capsys, "2(b) plateau(e_x)*T band", ok_b, f"ratio {b_x:.3f}")
    verdict(capsys, "2(c) classification", ok_c, f"{label}, {dt:.2f} s")
    assert ok_a and ok_b and ok_c and dt < 5.0


# 3 ---------------------------------------------------------------------------

def test_3_boundary_layer_rate(capsys):
    pr, steady, traj, rep, dt = extremal("toy", 40.0)
    split = solve_are(linearize(pr, steady))
    fit = fit_decay(rep.e_px, rep.t, rep.T, split=split)
    ok = abs(rep.nu_hat - 1.0) <= 0.1 and abs(split.nu - 1.0) <= 1e-10 and dt < 1.0
    verdict(capsys, "3 boundary-layer rate", ok,
            f"nu_hat {rep.nu_hat:.5f}, Riccati nu {split.nu:.5f}, ratio {fit.nu_ratio:.5f}, {dt:.2f} s")
    assert ok


# 4 ---------------------------------------------------------------------------

@pytest.mark.xfail(strict=True, reason="median of the exact extremal's joint discrepancy over [0.4T, 0.6T] "
                                       "is 6.5e-8 at T=40")
def test_4a_exponential_plateau(capsys):
    rep = extremal("toy_noy", 40.0)[3]
    s = rep.plateau["e_joint"]
    ok = s <= 1e-8
    verdict(capsys, "4(a) toy_noy joint plateau at T=40", ok, f"{s:.3e} (limit 1e-8)")
    assert ok


def test_4b_exponential_classification(capsys):
    t0 = time.perf_counter()
    reports = [extremal("toy_noy", T)[3] for T in (10.0, 20.0, 40.0)]
    label = classify_sweep(reports).label
    dt = time.perf_counter() - t0
    ok = label == "exponential" and dt < 2.0
    verdict(capsys, "4(b) toy_noy classification", ok,
            f"{label}, plateaus " + ", ".join(f"{r.plateau['e_joint']:.2e}" for r in reports) + f", {dt:.2f} s")
    assert ok


# 5 ---------------------------------------------------------------------------

def test_5_zermelo(capsys, zermelo):
    T = 20.0
    t0 = time.perf_counter()
    s = solve_static(zermelo, zermelo.rate(T))
    stat = max(abs(s.x[0] - 1.0), np.max(np.abs(s.u - [0.0, 1.0])), abs(s.px[0]), abs(s.py[0] - 2.0))
    tr, _ = solve_direct(zermelo, T, N=2000)
    dt = time.perf_counter() - t0
    t = tr.t
    ey = np.max(np.abs(tr.y[0] - 5.0 * t))
    ex = np.max(np.abs(tr.x[0] - 1.0)[(t >= 5) & (t <= 15)])
    vmax = zermelo.params["vmax"]
    bang_start = np.isclose(np.max(tr.u[1][t <= 0.1 * T]), vmax, atol=1e-9)
    bang_end = np.isclose(np.max(tr.u[1][:-1][t[:-1] >= 0.9 * T]), vmax, atol=1e-9)
    checks = [stat <= 1e-8, ey <= 2.0, ex <= 0.05, bang_start and bang_end, dt < 60]
    ok = all(checks)
    verdict(capsys, "5 zermelo", ok,
            f"static err {stat:.1e}, max|y-5t| {ey:.3f}, max|x-1| on [5,15] {ex:.2e}, "
            f"bang arcs {bang_start}/{bang_end}, {dt:.1f} s")
    assert ok


# 6 ---------------------------------------------------------------------------

def test_6_runner(capsys, runner):
    T = runner.default_T
    t0 = time.perf_counter()
    s = solve_static(runner, runner.rate(T))
    ours = np.array([s.x[0], s.x[1], s.u[0]])
    ref = np.array([6.198, 6.650, 4.926])
    printed = np.array([6.2, 6.65, 4.92])
    rel = np.max(np.abs(ours - ref) / ref)
    rel_printed = np.max(np.abs(ours - printed) / printed)
    tr, res = solve_direct(runner, T)
    dt = time.perf_counter() - t0
    e0 = runner.params["e0"]
    e_end = abs(tr.y[0, -1])
    mid = np.argmin(np.abs(tr.t - 0.5 * T))
    dv = abs(tr.x[0, mid] - s.x[0])
    ok = (rel <= 1e-2 and rel_printed <= 1e-2 and res.meta["violation"] <= 1e-7
          and e_end <= 1e-4 * e0 and dv <= 0.1 and dt < 120)
    verdict(capsys, "6 runner", ok,
            f"(v, f, u) = ({ours[0]:.4f}, {ours[1]:.4f}, {ours[2]:.4f}), rel {rel:.1e}, "
            f"e(d) {e_end:.1e}, mid |v - v_bar| {dv:.4f}, {dt:.1f} s")
    assert ok


# 7 ---------------------------------------------------------------------------

COARSE_MESH = 200


def cubic_costs(T, params):
    """Time-averaged cost of the direct solve from each static minimum (lowest static cost first)."""
    pr = make_problem("cubic", params)
    glob, loc = multistart_static(pr, np.zeros(0))
    return [solve_direct(pr, T, N=COARSE_MESH, steady=s)[0].cost / T for s in (glob, loc)]


def test_7a_static_locations(capsys, cubic):
    found = multistart_static(cubic, np.zeros(0))
    xs = sorted(s.x[0] for s in found)
    ok = len(xs) == 2 and abs(xs[0] + 1.347372066) <= 1e-6 and abs(xs[1] - 0.5939615956) <= 1e-6
    verdict(capsys, "7(a) static minima locations", ok, ", ".join(f"{x:.10f}" for x in xs))
    assert ok


@pytest.mark.xfail(strict=True, reason="at u_d = 3.47197 the two static costs differ by 1.9e-4")
def test_7a_static_costs_equal(capsys, cubic):
    found = multistart_static(cubic, np.zeros(0))
    gap = abs(found[0].static_cost - found[1].static_cost)
    ok = gap <= 1e-5
    verdict(capsys, "7(a) static minima costs equal", ok,
            f"{found[0].static_cost:.9f} vs {found[1].static_cost:.9f}, gap {gap:.3e} (limit 1e-5)")
    assert ok


@pytest.mark.slow
def test_7b_dynamic_competition(capsys):
    t0 = time.perf_counter()
    c = cubic_costs(20.0, {})
    dt = time.perf_counter() - t0
    gap = abs(c[0] - c[1]) / min(c)
    ok = gap <= 0.01
    verdict(capsys, "7(b) T=20 competition", ok, f"cost averages {c[0]:.5f} / {c[1]:.5f}, rel gap {gap:.1e}, "
                                                 f"{dt:.0f} s")
    assert ok


SWITCHING = {"u_d": 1.0, "xf": -1.0}


def test_7cd_basin_costs(capsys):
    c10 = cubic_costs(10.0, SWITCHING)
    c2 = cubic_costs(2.0, SWITCHING)
    rel = lambda a, b: abs(a - b) / b
    ok_c = rel(c10[0], 3.825) <= 0.02 and rel(c10[1], 7.008) <= 0.02
    ok_d = rel(c2[0], 17.792) <= 0.02 and rel(c2[1], 16.322) <= 0.02
    ok_order = c10[0] < c10[1] and c2[0] > c2[1]
    verdict(capsys, "7(c) T=10 costs", ok_c, f"global {c10[0]:.4f} (3.825), local {c10[1]:.4f} (7.008)")
    verdict(capsys, "7(d) T=2 costs and reversal", ok_d and ok_order,
            f"global {c2[0]:.4f} (17.792), local {c2[1]:.4f} (16.322)")
    assert ok_c and ok_d and ok_order


def test_7e_crossover(capsys):
    gap = lambda T: np.subtract(*cubic_costs(T, SWITCHING))
    lo, hi = 2.5, 3.3
    g_lo, g_hi = gap(lo), gap(hi)
    bracketed = g_lo > 0 > g_hi
    while bracketed and hi - lo > 0.02:
        mid = 0.5 * (lo + hi)
        if gap(mid) > 0:
            lo = mid
        else:
            hi = mid
    T_star = 0.5 * (lo + hi)
    ok = bracketed and 2.5 <= T_star <= 3.3
    verdict(capsys, "7(e) cost crossover", ok, f"T* = {T_star:.3f} in [{lo:.3f}, {hi:.3f}]")
    assert ok


# 8 ---------------------------------------------------------------------------

def test_8_spectral_suites(capsys):
    rng = np.random.default_rng(20240)
    t0 = time.perf_counter()
    worst = {"residual": 0.0, "R_gap": 0.0}
    failures = []
    for k in range(100):
        n, m = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        p = int(rng.integers(1, m + 1))
        b = random_bundle(rng, n, m, p)
        s = solve_are(b)
        res = max(riccati_residual(b, s.Eminus, relative=True), riccati_residual(b, s.Eplus, relative=True))
        hyperbolic = np.min(np.abs(np.linalg.eigvals(b.M).real)) > 0
        signs = np.max(np.linalg.eigvalsh(s.Eminus)) < 0 < np.min(np.linalg.eigvalsh(s.Eplus))
        r_min = np.min(np.linalg.eigvalsh(b.R))
        r_gap = np.max(np.abs(explicit_R(b) - b.R)) / max(1.0, np.max(np.abs(b.R)))
        worst["residual"] = max(worst["residual"], res)
        worst["R_gap"] = max(worst["R_gap"], r_gap)
        if not (res <= 1e-8 and hyperbolic and signs and r_min > 0 and r_gap <= 1e-8):
            failures.append(k)
    trials = held = 0
    while trials < 200:
        q, m = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        A, B = rng.standard_normal((q, q)), rng.standard_normal((q, m))
        try:
            held += contraction_check(A, B)[1]
        except KernelOverlap:
            continue
        trials += 1
    dt = time.perf_counter() - t0
    ok = not failures and held == 200 and dt < 10
    verdict(capsys, "8 spectral suites", ok,
            f"bundle failures {failures}, max rel residual {worst['residual']:.1e}, max R gap {worst['R_gap']:.1e}, "
            f"contraction {held}/200, {dt:.1f} s")
    assert ok


# 9 ---------------------------------------------------------------------------

def test_9_oscillating_target(capsys):
    params = {"alpha": 1.0, "oscillate": 1.0}
    vals, dt = [], 0.0
    for T in (20.0, 40.0):
        pr, steady, traj, _, t = extremal("toy", T, params)
        assert pr.y1(T)[0] == pytest.approx(T * np.sin(T))
        assert traj.meta["residual"] <= 1e-9
        vals.append(abs(traj.py[0] - steady.py[0]) * T)
        dt += t
    ok = band(vals) <= 3 and dt < 2.0
    verdict(capsys, "9 oscillating target", ok, f"|py - py_bar| T = {vals[0]:.3f}, {vals[1]:.3f}, {dt:.2f} s")
    assert ok
