import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from turnpike import make_problem
from turnpike.calculus import hamiltonian_gradient
from turnpike.errors import ConfigError, IllConditioned, IntegrationBlowup, NoConvergence
from turnpike.hyperbolic import linearize, solve_are
from turnpike.shooting import (default_segments, default_steps, integrate_extremal,
                               solve_shooting_bidirectional, solve_shooting_single, turnpike_init)
from turnpike.static import solve_static

from conftest import toy_noy_oracle, toy_oracle


@pytest.fixture(scope="module")
def toy20(toy):
    return solve_shooting_single(toy, 20.0)


@pytest.fixture(scope="module")
def toy20_bi(toy):
    return solve_shooting_bidirectional(toy, 20.0)


def _oracle_error(traj, T, y1):
    py, x, px, y = toy_oracle(T, y1, t=traj.t)
    return (max(np.max(np.abs(traj.x[0] - x)), np.max(np.abs(traj.px[0] - px)), np.max(np.abs(traj.u[0] - px))),
            np.max(np.abs(traj.y[0] - y)), abs(traj.py[0] - py))


def test_steady_flow_is_exact(toy):
    tr = integrate_extremal(toy, [0.5], [0.0], [0.0], [0.5], 10.0, 200)
    assert np.max(np.abs(tr.x - 0.5)) <= 1e-10 and np.max(np.abs(tr.px)) <= 1e-10
    assert np.max(np.abs(tr.u)) <= 1e-10
    np.testing.assert_allclose(tr.y[0], 0.5 * tr.t, atol=1e-10)


def test_forward_from_oracle_data(toy):
    T = 20.0
    py, x, px, _ = toy_oracle(T, 10.0, t=np.array([0.0]))
    tr = integrate_extremal(toy, [1.0], [0.0], px, [py], T, 2000)
    assert abs(tr.x[0, -1] - 2.0) <= 1e-6 and abs(tr.y[0, -1] - 10.0) <= 1e-6
    assert np.max(np.abs(tr.H - tr.H[0])) <= 1e-8


def test_backward_direction(toy):
    fwd = integrate_extremal(toy, [1.0], [0.0], [-0.3], [0.5], 5.0, 500)
    back = integrate_extremal(toy, fwd.x[:, -1], fwd.y[:, -1], fwd.px[:, -1], [0.5], 5.0, 500, direction="backward")
    np.testing.assert_allclose(back.x, fwd.x, atol=1e-9)
    np.testing.assert_allclose(back.t, fwd.t)


def test_integrate_validation(toy):
    with pytest.raises(ValueError):
        integrate_extremal(toy, [1.0], [0.0], [0.0], [0.5], 1.0, 5)
    with pytest.raises(ValueError):
        integrate_extremal(toy, [1.0], [0.0], [0.0], [0.5], 1.0, 50, direction="sideways")


def test_blowup_reports_time(cubic):
    with pytest.raises(IntegrationBlowup) as exc:
        integrate_extremal(cubic, [-2.0], np.zeros(0), [50.0], np.zeros(0), 10.0, 200)
    assert 0.0 < exc.value.t < 10.0


def test_turnpike_init_toy(toy):
    st_ = solve_static(toy, [0.5])
    split = solve_are(linearize(toy, st_))
    px0, py = turnpike_init(st_, split, np.array([1.0]), 20.0, toy.y0, toy.y1(20.0))
    assert px0[0] == pytest.approx(-0.5) and py[0] == pytest.approx(0.5)
    px0, py = turnpike_init(st_, split, st_.x, 20.0, toy.y0, toy.y1(20.0))
    np.testing.assert_allclose(px0, st_.px) and np.testing.assert_allclose(py, st_.py)


def test_turnpike_init_zermelo(zermelo):
    st_ = solve_static(zermelo, [5.0])
    split = solve_are(linearize(zermelo, st_))
    px0, py = turnpike_init(st_, split, np.array([0.0]), 20.0, zermelo.y0, zermelo.y1(20.0))
    assert px0[0] == pytest.approx(-split.Eminus[0, 0]) and py[0] == pytest.approx(2.0)


def test_turnpike_init_rate_correction(toy):
    # a steady state for another rate is corrected through R
    st_ = solve_static(toy, [0.4])
    b = linearize(toy, st_)
    split = solve_are(b)
    with pytest.raises(ValueError):
        turnpike_init(st_, split, np.array([1.0]), 20.0, toy.y0, toy.y1(20.0))
    _, py = turnpike_init(st_, split, np.array([1.0]), 20.0, toy.y0, toy.y1(20.0), R=b.R)
    assert py[0] == pytest.approx(0.5)


def test_single_toy_oracle(toy20):
    ex, ey, epy = _oracle_error(toy20, 20.0, 10.0)
    assert ex <= 1e-6 and ey <= 1e-5 and epy <= 1e-6
    assert toy20.meta["iterations"] <= 6
    assert abs(toy20.py[0] - 0.5) * 20.0 <= 5.0


def test_bidirectional_toy_oracle(toy20_bi, toy20):
    ex, ey, _ = _oracle_error(toy20_bi, 20.0, 10.0)
    assert ex <= 1e-6 and ey <= 1e-5
    # single shooting meets x(T) only to one ulp of px0 times sinh(20) (~1.3e-8),
    # so the 1e-8 agreement is checked away from the terminal layer
    inner = toy20.t <= 18.0
    for k in ("x", "px", "u", "y"):
        diff = np.abs(getattr(toy20_bi, k) - getattr(toy20, k))
        assert np.max(diff[:, inner]) <= 1e-8, k
        assert np.max(diff) <= 2e-8, k


def test_long_horizon(toy):
    with pytest.raises(IllConditioned):
        solve_shooting_single(toy, 80.0)
    tr = solve_shooting_bidirectional(toy, 80.0)
    ex, ey, _ = _oracle_error(tr, 80.0, 40.0)
    assert ex <= 1e-6 and ey <= 1e-5


def test_toy_noy_midpoint(toy_noy):
    tr = solve_shooting_single(toy_noy, 20.0)
    x, px = toy_noy_oracle(20.0, tr.t)
    assert np.max(np.abs(tr.x[0] - x)) <= 1e-6 and np.max(np.abs(tr.px[0] - px)) <= 1e-6
    # the exact midpoint value is 3 sinh(10) / sinh(20) = 1.362e-4
    assert tr.x[0, tr.N // 2] == pytest.approx(3 * np.sinh(10) / np.sinh(20), abs=1e-8)
    assert tr.py.shape == (0,) and tr.y.shape == (0, tr.N + 1)


def test_oscillating_target():
    pr = make_problem("toy", {"alpha": 1.0, "oscillate": 1.0})
    T = 20.0
    tr = solve_shooting_bidirectional(pr, T)
    py, *_ = toy_oracle(T, T * np.sin(T), t=tr.t)
    assert tr.py[0] == pytest.approx(py, abs=1e-8)
    assert abs(tr.py[0] - np.sin(T)) * T <= 5.0


def _check_invariants(pr, tr, tol):
    assert np.max(np.abs(tr.H - tr.H[0])) <= 1e-8
    fixed = pr.x1_fixed
    assert np.max(np.abs(tr.x[fixed, -1] - pr.x1_values()[fixed]), initial=0.0) <= tol
    assert np.max(np.abs(tr.px[~fixed, -1]), initial=0.0) <= tol
    if pr.p:
        assert np.max(np.abs(tr.y[:, -1] - pr.y1(tr.T))) <= tol
    _, Hu = hamiltonian_gradient(pr, tr.x, tr.u, tr.px, np.broadcast_to(tr.py[:, None], (pr.p, tr.N + 1)))
    assert np.max(np.abs(Hu)) <= 1e-8


def test_invariants_single(toy, toy20):
    # single shooting stops at its rounding floor (sensitivity sinh(20) ~ 2.4e8)
    _check_invariants(toy, toy20, 1e-7)


def test_invariants_bidirectional(toy, toy20_bi):
    _check_invariants(toy, toy20_bi, 1e-9)


def test_free_end_transversality():
    # the cubic boundary layer decays at rate 2.9; start near the turnpike
    pr = make_problem("cubic", {"u_d": 1.0, "x0": 0.6})
    tr = solve_shooting_bidirectional(pr, 3.0, N=2000, segments=4)
    _check_invariants(pr, tr, 1e-9)


def test_rk4_refinement_order(toy):
    s = []
    for N in (40, 80, 160):
        tr = solve_shooting_single(toy, 10.0, N=N)
        s.append(np.concatenate([tr.x[0, :: N // 20], tr.px[0, :: N // 20], tr.py]))
    ratio = np.max(np.abs(s[0] - s[1])) / np.max(np.abs(s[1] - s[2]))
    assert 8.0 <= ratio <= 32.0


def test_explicit_init(toy):
    tr = solve_shooting_single(toy, 10.0, init=(np.array([-0.5]), np.array([0.5])))
    ex, _, _ = _oracle_error(tr, 10.0, 5.0)
    assert ex <= 1e-6


def test_no_convergence(toy):
    with pytest.raises(NoConvergence):
        solve_shooting_single(toy, 10.0, init=(np.array([5.0]), np.array([-3.0])), max_iter=1)


def test_free_initial_state_rejected(runner):
    with pytest.raises(ConfigError):
        solve_shooting_single(runner, 100.0)


def test_segment_validation(toy):
    with pytest.raises(ConfigError):
        solve_shooting_bidirectional(toy, 10.0, segments=3)


def test_defaults():
    assert default_steps(10.0) == 500 and default_steps(80.0) == 2000
    assert default_segments(20.0) == 2 and default_segments(80.0) == 6


@settings(max_examples=10, deadline=None)
@given(T=st.floats(4.0, 30.0), x0=st.floats(-2, 2), x1=st.floats(-2, 2), alpha=st.floats(-1, 1))
def test_bidirectional_matches_oracle(T, x0, x1, alpha):
    pr = make_problem("toy", {"x0": x0, "x1": x1, "alpha": alpha})
    tr = solve_shooting_bidirectional(pr, T)
    py, x, px, y = toy_oracle(T, alpha * T, x0=x0, x1=x1, t=tr.t)
    assert np.max(np.abs(tr.x[0] - x)) <= 1e-6 and np.max(np.abs(tr.px[0] - px)) <= 1e-6
    assert abs(tr.py[0] - py) <= 1e-6 and np.max(np.abs(tr.y[0] - y)) <= 1e-5
