"""Linearization at the steady state, Riccati splitting and the matrix R.

Around a steady state the extremal system linearizes to a Hamiltonian
matrix::

    M = [[A1t, B1 U^-1 B1^T], [W, -A1t^T]]

whose stable and antistable invariant subspaces are the graphs of the
Riccati solutions ``E-`` (negative definite) and ``E+`` (positive definite).
The p x p matrix ``R = L M^-1 V + B2 U^-1 B2^T`` couples the constant
adjoint ``py`` to the y-target.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .calculus import FdScheme, first_derivatives, hamiltonian_hessian
from .errors import (AssumptionViolated, FormulaMismatch, KernelOverlap, NotHyperbolic,
                     RiccatiResidualTooLarge, RNotPositive, SingularM, SubspaceDegenerate)

DELTA_FLOOR = 1e-12
HYPERBOLIC_GAP = 1e-9
RICCATI_TOL = 1e-8


@dataclass(frozen=True)
class LinearizationBundle:
    A1: np.ndarray
    A2: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    Hux: np.ndarray
    U: np.ndarray
    W: np.ndarray
    A1t: np.ndarray
    A2t: np.ndarray
    M: np.ndarray
    V: np.ndarray
    L: np.ndarray
    R: np.ndarray

    @property
    def n(self):
        return self.A1.shape[0]

    @property
    def m(self):
        return self.B1.shape[1]

    @property
    def p(self):
        return self.A2.shape[0]

    @property
    def G(self):
        """``B1 U^-1 B1^T``."""
        return self.M[:self.n, self.n:]


@dataclass(frozen=True)
class RiccatiSplit:
    Eminus: np.ndarray
    Eplus: np.ndarray
    P: np.ndarray
    Pinv: np.ndarray
    Mminus: np.ndarray
    Mplus: np.ndarray
    nu: float
    H1: np.ndarray
    H2: np.ndarray
    H3: np.ndarray
    H4: np.ndarray
    residual: float


def _min_eig(S):
    return float(np.linalg.eigvalsh(0.5 * (S + S.T))[0]) if S.size else np.inf


def bundle_from_matrices(A1, A2, B1, B2, Hux, U, W, delta: float = DELTA_FLOOR) -> LinearizationBundle:
    """Assemble M, V, L and R from the first-order data and the SPD weights ``U``, ``W``.

    Raises
    ------
    AssumptionViolated
        ``U`` or ``W`` has an eigenvalue below ``delta`` (``which`` is ``"U"`` or ``"W"``).
    SingularM
        M is numerically singular, so R is undefined.
    """
    A1, A2, B1, B2, Hux, U, W = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (A1, A2, B1, B2, Hux, U, W))
    n, m = B1.shape
    p = np.asarray(A2).size // max(n, 1) if n else 0
    A2, B2 = A2.reshape(p, n), B2.reshape(p, m)
    Hux = Hux.reshape(m, n)
    U = 0.5 * (U + U.T)
    if _min_eig(U) < delta:
        raise AssumptionViolated(f"U is not positive definite (min eigenvalue {_min_eig(U):.3e})", which="U")
    Uinv = np.linalg.inv(U)
    W = 0.5 * (W + W.T)
    if _min_eig(W) < delta:
        raise AssumptionViolated(f"W is not positive definite (min eigenvalue {_min_eig(W):.3e})", which="W")
    A1t = A1 + B1 @ Uinv @ Hux
    A2t = A2 + B2 @ Uinv @ Hux
    G11 = B1 @ Uinv @ B1.T
    G12 = B1 @ Uinv @ B2.T
    G22 = B2 @ Uinv @ B2.T
    M = np.block([[A1t, 0.5 * (G11 + G11.T)], [W, -A1t.T]])
    V = np.vstack([-G12, A2t.T])
    L = np.hstack([A2t, G12.T])
    try:
        with warnings.catch_warnings():
            # singularity is detected below from the pivots
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            lu = scipy.linalg.lu_factor(M, check_finite=True)
    except (ValueError, scipy.linalg.LinAlgError):
        raise SingularM("M is singular") from None
    if np.min(np.abs(np.diag(lu[0]))) <= 1e-13 * max(1.0, np.max(np.abs(M))):
        raise SingularM("M is numerically singular")
    R = L @ scipy.linalg.lu_solve(lu, V) + G22 if p else np.zeros((0, 0))
    R = 0.5 * (R + R.T)
    return LinearizationBundle(A1=A1, A2=A2, B1=B1, B2=B2, Hux=Hux, U=U, W=W, A1t=A1t, A2t=A2t,
                               M=M, V=V, L=L, R=R)


def linearize(problem, steady, scheme: FdScheme | None = None) -> LinearizationBundle:
    """Second-order data of H at the steady state ``(x̄, p̄x, p̄y, ū)``."""
    x, u, px, py = steady.x, steady.u, steady.px, steady.py
    fx, fu, gx, gu, _, _ = first_derivatives(problem, x, u)
    Hxx, Hxu, Huu = hamiltonian_hessian(problem, x, u, px, py, scheme)
    Hux = Hxu.T
    U = -0.5 * (Huu + Huu.T)
    if _min_eig(U) < DELTA_FLOOR:
        raise AssumptionViolated(f"{problem.name}: U = -H_uu is not positive definite", which="U")
    W = -Hxx - Hxu @ np.linalg.solve(U, Hux)
    return bundle_from_matrices(fx, gx.reshape(problem.p, problem.n), fu, gu.reshape(problem.p, problem.m),
                                Hux, U, W)


def riccati_residual(bundle: LinearizationBundle, X, relative: bool = False) -> float:
    """Max-norm of ``X A1t + A1t^T X + X G X - W``.

    With ``relative`` it is divided by the size of the largest term (at least 1),
    which is the meaningful measure when ``X`` is large (nearly uncontrollable pairs).
    """
    if not X.size:
        return 0.0
    A, G, W = bundle.A1t, bundle.G, bundle.W
    XA, XGX = X @ A, X @ G @ X
    res = float(np.max(np.abs(XA + XA.T + XGX - W)))
    if relative:
        res /= max(1.0, np.max(np.abs(W)), np.max(np.abs(XA)), np.max(np.abs(XGX)))
    return res


def _graph(M, n, sort):
    T, Z, sdim = scipy.linalg.schur(M, output="real", sort=sort)
    if sdim != n:
        raise NotHyperbolic(f"M has {sdim} eigenvalues in the {sort} half-plane, expected {n}")
    X1, X2 = Z[:n, :n], Z[n:, :n]
    if np.linalg.cond(X1) > 1e12:
        raise SubspaceDegenerate("invariant subspace is not a graph over the x-coordinates")
    X = np.linalg.solve(X1.T, X2.T).T
    return 0.5 * (X + X.T)


def solve_are(bundle: LinearizationBundle, tol: float = RICCATI_TOL) -> RiccatiSplit:
    """Hyperbolic splitting of M by ordered real Schur decompositions.

    Raises
    ------
    NotHyperbolic
        M has an eigenvalue within ``1e-9`` of the imaginary axis.
    SubspaceDegenerate
        The stable or antistable subspace is not a graph.
    RiccatiResidualTooLarge
        A computed Riccati solution misses the equation by more than ``tol``.
    AssumptionViolated
        ``(A1t, B1)`` is not controllable, or ``E-``/``E+`` have the wrong sign.
    """
    n, p = bundle.n, bundle.p
    M = bundle.M
    eig = np.linalg.eigvals(M)
    if np.min(np.abs(eig.real)) < HYPERBOLIC_GAP:
        raise NotHyperbolic(f"M has an eigenvalue near the imaginary axis ({eig[np.argmin(np.abs(eig.real))]})")
    if not check_kalman(bundle.A1t, bundle.B1)[1]:
        raise AssumptionViolated("(A1t, B1) is not Kalman controllable", which="kalman")
    Em = _graph(M, n, "lhp")
    Ep = _graph(M, n, "rhp")
    scale = max(1.0, np.max(np.abs(bundle.W)), np.max(np.abs(bundle.A1t)) * max(np.max(np.abs(Em)), np.max(np.abs(Ep))))
    res = max(riccati_residual(bundle, Em), riccati_residual(bundle, Ep))
    if res > tol * scale:
        raise RiccatiResidualTooLarge(f"Riccati residual {res:.3e}")
    if np.max(np.linalg.eigvalsh(Em)) >= 0 or np.min(np.linalg.eigvalsh(Ep)) <= 0:
        raise AssumptionViolated("Riccati solutions are not definite (E- < 0 < E+ fails)", which="definite")

    I = np.eye(n)
    P = np.block([[I, I], [Em, Ep]])
    Dinv = np.linalg.inv(Ep - Em)
    Pinv = np.block([[np.linalg.solve(Em, Ep @ Dinv @ Em), -Dinv], [-Dinv @ Em, Dinv]])
    Mm = bundle.A1t + bundle.G @ Em
    Mp = bundle.A1t + bundle.G @ Ep
    nu = float(np.min(-np.linalg.eigvals(Mm).real))
    MV = np.linalg.solve(M, bundle.V) if p else np.zeros((2 * n, 0))
    PMV = Pinv @ MV
    return RiccatiSplit(Eminus=Em, Eplus=Ep, P=P, Pinv=Pinv, Mminus=Mm, Mplus=Mp, nu=nu,
                        H1=MV[:n], H2=MV[n:], H3=PMV[:n], H4=PMV[n:], residual=res)


def check_kalman(A, B):
    """Rank of ``[B, AB, ..., A^{k-1} B]`` by column-pivoted QR; returns ``(rank, controllable)``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    k = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(k, -1)
    if k == 0:
        return 0, True
    blocks = [B]
    for _ in range(k - 1):
        blocks.append(A @ blocks[-1])
    K = np.hstack(blocks)
    if K.size == 0 or not np.any(K):
        return 0, False
    r = scipy.linalg.qr(K, mode="r", pivoting=True)[0]
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > 1e-10 * diag[0]))
    return rank, rank == k


def stacked_pair(bundle: LinearizationBundle):
    """``([[A1t, 0], [A2t, 0]], [B1; B2])`` on the stacked (x, y) space."""
    n, p = bundle.n, bundle.p
    A = np.block([[bundle.A1t, np.zeros((n, p))], [bundle.A2t, np.zeros((p, p))]])
    return A, np.vstack([bundle.B1, bundle.B2])


def contraction_check(A, B):
    """Largest eigenvalue of ``B^T (A A^T + B B^T)^-1 B``; the bound holds when it is ``<= 1``.

    Raises
    ------
    KernelOverlap
        ``A A^T + B B^T`` is singular, i.e. ``ker A^T`` and ``ker B^T`` intersect.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    S = A @ A.T + B @ B.T
    w = np.linalg.eigvalsh(S)
    if w[0] <= 1e-12 * max(1.0, w[-1]):
        raise KernelOverlap("ker(A^T) and ker(B^T) intersect nontrivially")
    C = B.T @ np.linalg.solve(S, B)
    max_eig = float(np.max(np.linalg.eigvalsh(0.5 * (C + C.T))))
    return max_eig, max_eig <= 1 + 1e-10


def _inv_sqrt(S, which):
    w, Q = np.linalg.eigh(0.5 * (S + S.T))
    if w[0] < DELTA_FLOOR:
        raise AssumptionViolated(f"{which} has an eigenvalue below {DELTA_FLOOR}", which=which)
    return (Q / np.sqrt(w)) @ Q.T


def explicit_R(bundle: LinearizationBundle) -> np.ndarray:
    """R as a projected Gram matrix, manifestly positive semidefinite.

    With ``G = [A1t W^-1/2, B1 U^-1/2]`` and ``K = [A2t W^-1/2, B2 U^-1/2]``::

        R = K (I - G^T (G G^T)^-1 G) K^T

    Expanding gives ``K K^T - K G^T (G G^T)^-1 G K^T`` which is the
    Schur-complement form of ``L M^-1 V + B2 U^-1 B2^T``.
    """
    Wm = _inv_sqrt(bundle.W, "W")
    Um = _inv_sqrt(bundle.U, "U")
    G = np.hstack([bundle.A1t @ Wm, bundle.B1 @ Um])
    K = np.hstack([bundle.A2t @ Wm, bundle.B2 @ Um])
    S = G @ G.T
    if _min_eig(S) <= 1e-14 * max(1.0, np.max(np.abs(S))):
        raise KernelOverlap("A1t W^-1 A1t^T + B1 U^-1 B1^T is singular")
    Pr = np.eye(G.shape[1]) - G.T @ np.linalg.solve(S, G)
    R = K @ Pr @ K.T
    return 0.5 * (R + R.T)


def two_term_split(bundle: LinearizationBundle) -> np.ndarray:
    """Sum of the two separately projected blocks ``Ã2 (I - Ã1^T S^-1 Ã1) Ã2^T + B̃2 (I - B̃1^T S^-1 B̃1) B̃2^T``.

    This drops the cross terms ``-Ã2 Ã1^T S^-1 B̃1 B̃2^T`` (and transpose), so it
    agrees with R only when those vanish (e.g. ``A2t = 0`` or ``B2 = 0``).
    Kept for comparison in the tests.
    """
    Wm = _inv_sqrt(bundle.W, "W")
    Um = _inv_sqrt(bundle.U, "U")
    a1, b1 = bundle.A1t @ Wm, bundle.B1 @ Um
    a2, b2 = bundle.A2t @ Wm, bundle.B2 @ Um
    S = a1 @ a1.T + b1 @ b1.T
    ta = a2 @ (np.eye(a1.shape[1]) - a1.T @ np.linalg.solve(S, a1)) @ a2.T
    tb = b2 @ (np.eye(b1.shape[1]) - b1.T @ np.linalg.solve(S, b1)) @ b2.T
    return ta + tb


def verify_R_spd(bundle: LinearizationBundle, tol: float = 1e-8):
    """Cross-check R against :func:`explicit_R`; returns ``(min_eig, explicit)``.

    Raises
    ------
    FormulaMismatch
        The two expressions differ by more than ``tol`` (relative to ``max(1, |R|)``).
    RNotPositive
        The smallest eigenvalue of R is not positive.
    """
    if bundle.p == 0:
        raise ValueError("R is empty when p = 0")
    Rx = explicit_R(bundle)
    gap = float(np.max(np.abs(Rx - bundle.R)))
    if gap > tol * max(1.0, np.max(np.abs(bundle.R))):
        raise FormulaMismatch(f"R formulas disagree by {gap:.3e}")
    min_eig = _min_eig(bundle.R)
    if min_eig <= 0:
        raise RNotPositive(f"R has min eigenvalue {min_eig:.3e}")
    return min_eig, Rx


RANDOM_E_BOUND = 1e4


def random_bundle(rng: np.random.Generator, n: int, m: int, p: int, max_tries: int = 1000,
                  e_bound: float = RANDOM_E_BOUND) -> LinearizationBundle:
    """Random bundle with SPD ``U``, ``W`` and a Kalman-controllable stacked pair (rejection sampling).

    The stacked pair can only be controllable when ``m >= p``: its Kalman
    matrix has rank at most ``m + n``. Draws whose Riccati solutions exceed
    ``e_bound`` in magnitude are rejected too: they are controllable only
    barely, and the splitting identities then hold only to ``eps * |E|^2``.
    """
    if p > m:
        raise ValueError("a controllable stacked pair needs m >= p")
    for _ in range(max_tries):
        A1 = rng.uniform(-1, 1, (n, n))
        A2 = rng.uniform(-1, 1, (p, n))
        B1 = rng.uniform(-1, 1, (n, m))
        B2 = rng.uniform(-1, 1, (p, m))
        Hux = rng.uniform(-1, 1, (m, n))
        QU = rng.uniform(-1, 1, (m, m))
        QW = rng.uniform(-1, 1, (n, n))
        U = QU @ QU.T + 0.5 * np.eye(m)
        W = QW @ QW.T + 0.5 * np.eye(n)
        b = bundle_from_matrices(A1, A2, B1, B2, Hux, U, W)
        if not (check_kalman(*stacked_pair(b))[1] and check_kalman(b.A1t, b.B1)[1]):
            continue
        try:
            split = solve_are(b)
        except (NotHyperbolic, SubspaceDegenerate, RiccatiResidualTooLarge, AssumptionViolated):
            continue
        if max(np.max(np.abs(split.Eminus)), np.max(np.abs(split.Eplus))) <= e_bound:
            return b
    raise RuntimeError(f"no controllable bundle found for n={n}, m={m}, p={p}")


def diagnostics(problem, steady, scheme: FdScheme | None = None) -> dict:
    """Summary used by the ``check`` command: spectrum of M, nu, R, Kalman ranks."""
    b = linearize(problem, steady, scheme)
    eig = np.linalg.eigvals(b.M)
    order = np.lexsort((eig.imag, eig.real))
    out = {
        "M_eigenvalues_real": eig.real[order].tolist(),
        "M_eigenvalues_imag": eig.imag[order].tolist(),
        "U_min_eig": _min_eig(b.U),
        "W_min_eig": _min_eig(b.W),
        "kalman_rank": check_kalman(b.A1t, b.B1)[0],
        "kalman_rank_stacked": check_kalman(*stacked_pair(b))[0],
        "n": b.n, "m": b.m, "p": b.p,
    }
    split = solve_are(b)
    out.update({
        "nu": split.nu,
        "riccati_residual": split.residual,
        "Eminus": split.Eminus.tolist(),
        "Eplus": split.Eplus.tolist(),
    })
    if b.p:
        min_eig, _ = verify_R_spd(b)
        out.update({"R": b.R.tolist(), "R_min_eig": min_eig})
    return out
