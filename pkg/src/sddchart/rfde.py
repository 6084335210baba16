"""The functional f = g o v of a system with discrete state-dependent delays.

``v_mu(phi) = phi_nu(d_kappa(phi))`` with ``mu = kappa*n + nu`` (0-based), and
``f(phi) = g(v(phi))`` on ``U = U_d  intersect  v^{-1}(V)``.  Extended derivatives
of v and f are returned as :class:`ExtLinFunctional` values.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from . import functionals as fl
from .delays import DelayFunctional, IntegralDelay, default_shapes
from .funcspace import (SAFETY, C1Fn, DomainError, GridSpec, component_max, component_min,
                        deriv, deriv_at_zero, eval_fn, from_samples, sup_norm)


class ProjectionError(RuntimeError):
    """No root of the membership residual was bracketed."""


class ManifoldError(ValueError):
    """Point is not on the discretized solution manifold."""


@dataclass(frozen=True)
class Box:
    """Open box ``lower < y < upper`` in R^{kn}; infinite faces allowed.
    A half-space ``y_mu < gamma_mu`` is a box with ``lower = -inf``."""

    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def whole(cls, dim: int) -> "Box":
        return cls(np.full(dim, -np.inf), np.full(dim, np.inf))

    @classmethod
    def below(cls, gamma) -> "Box":
        gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
        return cls(np.full(len(gamma), -np.inf), gamma)

    def violation(self, y, margin: float = 0.0) -> str | None:
        y = np.asarray(y, dtype=float)
        for mu, (yy, lo, hi) in enumerate(zip(y, self.lower, self.upper)):
            if not yy < hi - margin:
                return f"y[{mu}] = {yy!r} >= upper bound {hi!r}"
            if not yy > lo + margin:
                return f"y[{mu}] = {yy!r} <= lower bound {lo!r}"
        return None

    def contains(self, y, margin: float = 0.0) -> bool:
        return self.violation(y, margin) is None

    def to_config(self) -> dict:
        return {"lower": [float(x) for x in self.lower], "upper": [float(x) for x in self.upper]}


@dataclass(frozen=True)
class FeedbackMap:
    """``g: V -> R^n`` on ``V`` in R^{kn}, with Jacobian ``jac(y)`` of shape (n, kn)."""

    k: int
    n: int
    g: Callable
    jac: Callable
    domain: Box
    name: str = "custom"

    def __call__(self, y) -> np.ndarray:
        return np.asarray(self.g(np.asarray(y, dtype=float)), dtype=float).reshape(self.n)

    def grad(self, y, nu: int, mu: int) -> float:
        return float(self.jacobian(y)[nu, mu])

    def jacobian(self, y) -> np.ndarray:
        return np.asarray(self.jac(np.asarray(y, dtype=float)), dtype=float).reshape(self.n, self.k * self.n)

    def check_domain(self, y):
        msg = self.domain.violation(y)
        if msg is not None:
            raise DomainError(f"v(phi) outside V: {msg}")


def s5_feedback(gamma: float = 1.0) -> FeedbackMap:
    """g(xi) = -(1 - xi)^2 on V = (-inf, gamma); injective for gamma <= 1."""
    return FeedbackMap(
        1, 1,
        lambda y: np.array([-(1.0 - y[0]) ** 2]),
        lambda y: np.array([[2.0 * (1.0 - y[0])]]),
        Box.below([gamma]),
        name="S5",
    )


def linear_feedback(k: int = 1, n: int = 1) -> FeedbackMap:
    """g(y) = first block of y (the identity when k = 1), V = R^{kn}."""
    jac = np.zeros((n, k * n))
    jac[:, :n] = np.eye(n)
    return FeedbackMap(k, n, lambda y: y[:n].copy(), lambda y: jac, Box.whole(k * n), name="LIN")


def zero_feedback(k: int = 1, n: int = 1) -> FeedbackMap:
    return FeedbackMap(k, n, lambda y: np.zeros(n), lambda y: np.zeros((n, k * n)), Box.whole(k * n), name="ZERO")


def check_feedback_gradient(fb: FeedbackMap, y, step: float = 1e-6) -> float:
    """Relative mismatch between ``fb.jacobian`` and central differences of g."""
    y = np.asarray(y, dtype=float)
    J = fb.jacobian(y)
    fd = np.empty_like(J)
    for mu in range(len(y)):
        e = np.zeros_like(y)
        e[mu] = step
        fd[:, mu] = (fb(y + e) - fb(y - e)) / (2.0 * step)
    return float(np.abs(fd - J).max() / max(np.abs(J).max(), 1.0))


@dataclass(frozen=True)
class RFDE:
    feedback: FeedbackMap
    delay: DelayFunctional
    grid: GridSpec
    name: str = field(default="custom")

    def __post_init__(self):
        if self.feedback.k != self.delay.k:
            raise ValueError(f"feedback expects k = {self.feedback.k}, delay has k = {self.delay.k}")
        if self.feedback.n != self.grid.n:
            raise ValueError(f"feedback has n = {self.feedback.n}, grid has n = {self.grid.n}")

    @property
    def k(self) -> int:
        return self.delay.k

    @property
    def n(self) -> int:
        return self.grid.n

    def split(self, mu: int) -> tuple[int, int]:
        """``mu -> (kappa, nu)`` with ``mu = kappa*n + nu``."""
        return divmod(mu, self.n)


def s5_system(grid: GridSpec | None = None, gamma: float = 1.0) -> RFDE:
    grid = grid or GridSpec()
    return RFDE(s5_feedback(gamma), IntegralDelay(grid, default_shapes(grid.h)), grid, name="S5")


def lin_system(grid: GridSpec | None = None, delay: DelayFunctional | None = None) -> RFDE:
    grid = grid or GridSpec()
    delay = delay or IntegralDelay(grid, default_shapes(grid.h))
    return RFDE(linear_feedback(delay.k, grid.n), delay, grid, name="LIN")


def zero_system(grid: GridSpec | None = None, delay: DelayFunctional | None = None) -> RFDE:
    grid = grid or GridSpec()
    delay = delay or IntegralDelay(grid, default_shapes(grid.h))
    return RFDE(zero_feedback(delay.k, grid.n), delay, grid, name="ZERO")


# -- v, f and their extended derivatives ------------------------------------

def v(rfde: RFDE, phi: C1Fn) -> np.ndarray:
    d = rfde.delay.value(phi)
    vals = eval_fn(phi, d)  # shape (n, k)
    return vals.T.reshape(-1)


def Dv_ext(rfde: RFDE, phi: C1Fn, mu: int) -> fl.ExtLinFunctional:
    """Atom at ``d_kappa(phi)`` in component nu plus
    ``phi_nu'(d_kappa(phi))`` times the extended delay derivative."""
    kappa, nu = rfde.split(mu)
    d = float(rfde.delay.value(phi)[kappa])
    slope = float(eval_fn(deriv(phi), d)[nu])
    point = fl.unit_atom(phi.grid, d, nu)
    if slope == 0.0:
        return point
    return fl.add(point, fl.scale(slope, rfde.delay.ext_derivative(phi, kappa)))


def in_U(rfde: RFDE, phi: C1Fn) -> str | None:
    """None when ``phi`` is in U, otherwise the reason it is not."""
    if not rfde.delay.domain_test(phi):
        return "phi outside U_d"
    return rfde.feedback.domain.violation(v(rfde, phi))


def f(rfde: RFDE, phi: C1Fn) -> np.ndarray:
    y = v(rfde, phi)
    rfde.feedback.check_domain(y)
    return rfde.feedback(y)


def Df_ext(rfde: RFDE, phi: C1Fn) -> list[fl.ExtLinFunctional]:
    y = v(rfde, phi)
    rfde.feedback.check_domain(y)
    J = rfde.feedback.jacobian(y)
    dv = [Dv_ext(rfde, phi, mu) for mu in range(rfde.k * rfde.n)]
    return [fl.total(dv, J[nu]) for nu in range(rfde.n)]


def m_g(rfde: RFDE, y) -> float:
    rfde.feedback.check_domain(y)
    return float(np.abs(rfde.feedback(y)).max())


def m_Dg(rfde: RFDE, y) -> float:
    rfde.feedback.check_domain(y)
    return float(np.abs(rfde.feedback.jacobian(y)).max())


def m_v(rfde: RFDE, phi: C1Fn) -> float:
    d = rfde.delay.value(phi)
    slopes = eval_fn(deriv(phi), d)  # (n, k)
    best = 0.0
    for kappa in range(rfde.k):
        s = np.abs(slopes[:, kappa]).max()
        if s > 0.0:
            best = max(best, s * fl.op_norm(rfde.delay.ext_derivative(phi, kappa)))
    return best


# -- the solution manifold ---------------------------------------------------

def membership_residual(rfde: RFDE, phi: C1Fn) -> np.ndarray:
    """``phi'(0) - f(phi)``; zero on the discretized manifold."""
    return deriv_at_zero(phi) - f(rfde, phi)


def transversal_direction(grid: GridSpec, nu: int = 0) -> C1Fn:
    """``rho(t) = t e^t`` in component nu: rho(0) = 0, rho'(0) = 1."""
    def sample(t):
        out = np.zeros((grid.n, len(t)))
        out[nu] = t * np.exp(t)
        return out
    return from_samples(grid, sample)


def project_to_manifold(rfde: RFDE, phi0: C1Fn, tol: float = 1e-10, s_max: float | None = None,
                        max_sweeps: int = 50) -> C1Fn:
    """Return ``phi0 + sum_nu s_nu rho e_nu`` on the manifold.

    Each component's residual is driven to zero by a bracketed 1-D root
    search (Brent), cycling over components until all are below ``tol``.
    """
    if s_max is None:
        s_max = 10.0 * (1.0 + float(np.abs(f(rfde, phi0)).max()))
    phi = phi0
    for _ in range(max_sweeps):
        res = membership_residual(rfde, phi)
        if np.abs(res).max() <= tol:
            return phi
        for nu in range(rfde.n):
            phi = _solve_component(rfde, phi, nu, s_max, tol)
    res = membership_residual(rfde, phi)
    if np.abs(res).max() <= tol:
        return phi
    raise ProjectionError(f"componentwise sweeps did not converge, residual {res}")


def _solve_component(rfde, phi, nu, s_max, tol):
    rho = transversal_direction(phi.grid, nu)

    def r(s):
        try:
            return float(membership_residual(rfde, phi + s * rho)[nu])
        except DomainError:
            return np.nan

    r0 = r(0.0)
    if abs(r0) <= tol:
        return phi
    grid_s = np.concatenate((-np.geomspace(s_max, 1e-6 * s_max, 120), [0.0], np.geomspace(1e-6 * s_max, s_max, 120)))
    vals = np.array([r(s) if s != 0.0 else r0 for s in grid_s])
    brackets = []
    for i in range(len(grid_s) - 1):
        a, b = vals[i], vals[i + 1]
        if np.isfinite(a) and np.isfinite(b) and a * b <= 0.0:
            brackets.append((grid_s[i], grid_s[i + 1]))
    if not brackets:
        raise ProjectionError(f"no sign change of the residual for |s| <= {s_max}")
    lo, hi = min(brackets, key=lambda ab: min(abs(ab[0]), abs(ab[1])))
    s = brentq(r, lo, hi, xtol=1e-15, rtol=1e-15, maxiter=200)
    return phi + s * rho


def project_to_tangent(rfde: RFDE, phi: C1Fn, psi0: C1Fn) -> C1Fn:
    """Add ``sum_nu c_nu rho e_nu`` to ``psi0`` so that
    ``psi'(0) = D_e f(phi) psi`` (one linear correction)."""
    Df = Df_ext(rfde, phi)

    def lin_res(psi):
        return deriv_at_zero(psi) - np.array([fl.apply(L, psi) for L in Df])

    rhos = [transversal_direction(phi.grid, nu) for nu in range(rfde.n)]
    A = np.column_stack([lin_res(r) for r in rhos])
    c = np.linalg.solve(A, -lin_res(psi0))
    out = psi0
    for cn, r in zip(c, rhos):
        out = out + cn * r
    return out


def tangent_residual(rfde: RFDE, phi: C1Fn, psi: C1Fn, tol: float = 1e-8) -> float:
    res = membership_residual(rfde, phi)
    if np.abs(res).max() > tol:
        raise ManifoldError(f"membership residual {res} exceeds {tol}")
    Df = Df_ext(rfde, phi)
    lin = deriv_at_zero(psi) - np.array([fl.apply(L, psi) for L in Df])
    return float(np.abs(lin).max())


# -- regions ----------------------------------------------------------------

@dataclass(frozen=True)
class RegionParams:
    """Either ``Uc`` (parameter c) or ``Uqbd`` (parameters q, b, delta)."""

    variant: str = "Uc"
    c: float = 1.0
    q: float = 1.0
    b: float = 1.0
    delta: float = 0.25

    def __post_init__(self):
        if self.variant not in ("Uc", "Uqbd"):
            raise ValueError(f"unknown region variant {self.variant!r}")
        if self.variant == "Uc" and not self.c > 0:
            raise ValueError("c must be positive")
        if self.variant == "Uqbd":
            if not (self.q > 0 and self.b > 0):
                raise ValueError("q and b must be positive")
            if not 0 < self.delta < 1:
                raise ValueError("delta must lie in (0, 1)")

    @classmethod
    def Uc(cls, c: float) -> "RegionParams":
        return cls("Uc", c=c)

    @classmethod
    def Uqbd(cls, q: float, b: float, delta: float) -> "RegionParams":
        return cls("Uqbd", q=q, b=b, delta=delta)

    @property
    def c_equiv(self) -> float:
        """The c of the U_c region that contains this one."""
        return self.c if self.variant == "Uc" else self.b * self.q


@dataclass(frozen=True)
class RegionResult:
    inside: bool
    reason: str = ""

    def __bool__(self):
        return self.inside


def dist_lb(rfde: RFDE, phi: C1Fn, q: float | None = None) -> float:
    """Conservative lower bound for ``dist(I phi, C \\ W_q)``.

    Valid when W_q = W, i.e. when the delay carries a certified global bound
    ``q_bound < q``; then every chi within ``face - max phi_nu`` of phi keeps
    ``chi_nu(Delta(chi))`` on the right side of each finite face of V.
    Returns 0 when no certificate applies.
    """
    delay = rfde.delay
    if q is not None and not (delay.q_certified and delay.q_bound is not None and delay.q_bound < q):
        return 0.0
    box = rfde.feedback.domain
    hi = component_max(phi)
    lo = component_min(phi)
    slack = (SAFETY - 1.0)
    best = np.inf
    for mu in range(rfde.k * rfde.n):
        _, nu = rfde.split(mu)
        if np.isfinite(box.upper[mu]):
            best = min(best, box.upper[mu] - hi[nu] - slack * (1.0 + abs(hi[nu])))
        if np.isfinite(box.lower[mu]):
            best = min(best, lo[nu] - box.lower[mu] - slack * (1.0 + abs(lo[nu])))
    return max(0.0, float(best))


def region_test(rfde: RFDE, params: RegionParams, phi: C1Fn) -> RegionResult:
    try:
        why = in_U(rfde, phi)
    except DomainError as exc:
        return RegionResult(False, f"not in U: {exc}")
    if why is not None:
        return RegionResult(False, f"not in U: {why}")
    if params.variant == "Uc":
        mv = m_v(rfde, phi)
        if not mv < params.c:
            return RegionResult(False, f"m_v = {mv:.6g} >= c = {params.c:.6g}")
        return RegionResult(True)
    for kappa in range(rfde.k):
        nrm = fl.op_norm(rfde.delay.ext_derivative(phi, kappa))
        if not nrm < params.q:
            return RegionResult(False, f"|D_e d_{kappa}| = {nrm:.6g} >= q = {params.q:.6g}")
    slope = sup_norm(deriv(phi))
    if not slope < params.b:
        return RegionResult(False, f"|phi'| = {slope:.6g} >= b = {params.b:.6g}")
    dl = dist_lb(rfde, phi, params.q)
    if not dl > 2.0 * params.delta:
        return RegionResult(False, f"dist lower bound {dl:.6g} <= 2 delta = {2 * params.delta:.6g}")
    return RegionResult(True)
