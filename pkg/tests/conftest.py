import dataclasses

import numpy as np
import pytest

from turnpike.problems import make_problem


def toy_oracle(T, y1, x0=1.0, x1=2.0, t=None):
    """Closed-form extremal of the toy problem.

    With ``u = px`` the extremal system is ``x' = px``, ``px' = x - py``, so
    ``x = py + a e^{-t} + b e^{t-T}`` and ``px = -a e^{-t} + b e^{t-T}``.
    The three boundary conditions ``x(0) = x0``, ``x(T) = x1`` and
    ``y(T) = int x = y1`` fix ``(py, a, b)``. Returns ``(py, x, px, y)``.
    """
    eT = np.exp(-T)
    A = np.array([[1.0, 1.0, eT], [1.0, eT, 1.0], [T, 1.0 - eT, 1.0 - eT]])
    py, a, b = np.linalg.solve(A, [x0, x1, y1])
    if t is None:
        t = np.linspace(0.0, T, 11)
    x = py + a * np.exp(-t) + b * np.exp(t - T)
    px = -a * np.exp(-t) + b * np.exp(t - T)
    y = py * t + a * (1 - np.exp(-t)) + b * (np.exp(t - T) - eT)
    return py, x, px, y


def toy_noy_oracle(T, t, x0=1.0, x1=2.0):
    """Closed form without the y-block: ``x'' = x`` with ``x(0) = x0``, ``x(T) = x1``."""
    s = np.sinh(T)
    x = (x0 * np.sinh(T - t) + x1 * np.sinh(t)) / s
    px = (-x0 * np.cosh(T - t) + x1 * np.cosh(t)) / s
    return x, px


def general_path(problem):
    """Same problem with the closed-form and one-step maximizers disabled."""
    return dataclasses.replace(problem, argmax_u=None, quadratic_u=False)


@pytest.fixture(scope="session")
def toy():
    return make_problem("toy")


@pytest.fixture(scope="session")
def toy_noy():
    return make_problem("toy_noy")


@pytest.fixture(scope="session")
def zermelo():
    return make_problem("zermelo")


@pytest.fixture(scope="session")
def runner():
    return make_problem("runner")


@pytest.fixture(scope="session")
def cubic():
    return make_problem("cubic")
