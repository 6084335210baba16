"""Delay functionals d: U_d -> [-h, 0]^k with extended derivatives.

Every delay returns its value as a length-k array and, per index kappa, its
extended derivative as an :class:`ExtLinFunctional`.  ``q_bound`` is a global
bound on the operator norms of those derivatives; ``q_certified`` says
whether it is a closed form or a probed estimate.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import functionals as fl
from .funcspace import C0Fn, C1Fn, DomainError, GridSpec, integrate


class DelayFunctional:
    """Base class.  Subclasses implement ``_value`` and ``_ext_derivative``."""

    k: int = 1
    q_bound: float | None = None
    q_certified: bool = False

    def domain_test(self, phi: C1Fn) -> bool:
        return True

    def value(self, phi: C1Fn) -> np.ndarray:
        if not self.domain_test(phi):
            raise DomainError("history outside the delay's domain U_d")
        d = np.asarray(self._value(phi), dtype=float).reshape(self.k)
        h = phi.grid.h
        if np.any(d < -h - 1e-12 * h) or np.any(d > 1e-12 * h):
            raise DomainError(f"delay value {d} outside [-{h}, 0]")
        return np.clip(d, -h, 0.0)

    def ext_derivative(self, phi: C1Fn, kappa: int = 0) -> fl.ExtLinFunctional:
        if not self.domain_test(phi):
            raise DomainError("history outside the delay's domain U_d")
        return self._ext_derivative(phi, kappa)

    def to_config(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class ScalarShapeFns:
    """The scalar maps p and eta of the integral delay, with derivatives.

    ``p`` vanishes on (-inf, 0] and increases on (0, inf); ``eta`` maps into
    [-h, 0] with positive derivative.  ``p_prime_sup`` and ``eta_prime_sup``
    are the suprema of the derivatives when known in closed form.
    """

    p: Callable
    dp: Callable
    eta: Callable
    deta: Callable
    p_prime_sup: float | None = None
    eta_prime_sup: float | None = None
    name: str = "custom"

    def check(self, h: float, samples=None) -> list[str]:
        """Sampled range/sign checks; returns the list of violations."""
        xi = np.linspace(-5.0, 5.0, 2001) if samples is None else np.asarray(samples)
        problems = []
        neg = xi[xi <= 0]
        pos = xi[xi > 0]
        if np.any(self.p(neg) != 0.0):
            problems.append("p nonzero on (-inf, 0]")
        if np.any(self.dp(pos) <= 0.0):
            problems.append("p' not positive on (0, inf)")
        if np.any(self.deta(xi) <= 0.0):
            problems.append("eta' not positive")
        e = self.eta(xi)
        if np.any(e < -h) or np.any(e > 0):
            problems.append("eta leaves [-h, 0]")
        return problems


def default_shapes(h: float = 1.0) -> ScalarShapeFns:
    """p(xi) = log(1 + xi^2) for xi > 0 (else 0); eta(u) = -(h/2)(1 - tanh u).

    sup p' = 1 (at xi = 1) and sup eta' = h/2 (at u = 0).
    """

    def p(xi):
        xi = np.asarray(xi, dtype=float)
        return np.where(xi > 0, np.log1p(np.maximum(xi, 0.0) ** 2), 0.0)

    def dp(xi):
        xi = np.asarray(xi, dtype=float)
        xp = np.maximum(xi, 0.0)
        return np.where(xi > 0, 2.0 * xp / (1.0 + xp**2), 0.0)

    def eta(u):
        return -0.5 * h * (1.0 - np.tanh(u))

    def deta(u):
        return 0.5 * h / np.cosh(u) ** 2

    return ScalarShapeFns(p, dp, eta, deta, p_prime_sup=1.0, eta_prime_sup=0.5 * h, name="default")


class IntegralDelay(DelayFunctional):
    """``d(phi) = eta(int_{-h}^0 p(phi_nu(t)) dt)`` for one component ``nu``."""

    def __init__(self, grid: GridSpec, shapes: ScalarShapeFns | None = None, component: int = 0):
        self.grid = grid
        self.shapes = shapes or default_shapes(grid.h)
        self.component = component
        self.k = 1
        s = self.shapes
        if s.p_prime_sup is not None and s.eta_prime_sup is not None:
            self.q_bound = s.eta_prime_sup * grid.h * s.p_prime_sup
            self.q_certified = True
        else:
            self.q_bound = _probe_q_bound(self, grid)
            self.q_certified = False

    def _inner(self, phi: C1Fn) -> float:
        row = phi.values[self.component]
        return float(integrate(C0Fn(phi.grid.with_n(1), self.shapes.p(row)))[0])

    def _value(self, phi):
        return [self.shapes.eta(self._inner(phi))]

    def _ext_derivative(self, phi, kappa=0):
        if kappa != 0:
            raise IndexError(kappa)
        row = phi.values[self.component]
        dens = np.zeros((phi.grid.n, phi.grid.N + 1))
        dens[self.component] = self.shapes.deta(self._inner(phi)) * self.shapes.dp(row)
        return fl.ExtLinFunctional(phi.grid, density=dens)

    def to_config(self):
        return {"type": "integral", "component": self.component, "shapes": self.shapes.name}


class ConstantDelay(DelayFunctional):
    def __init__(self, r: float, h: float = 1.0):
        if not (-h <= r <= 0.0):
            raise DomainError(f"constant delay {r} outside [-{h}, 0]")
        self.r = float(r)
        self.k = 1
        self.q_bound = 0.0
        self.q_certified = True

    def _value(self, phi):
        return [self.r]

    def _ext_derivative(self, phi, kappa=0):
        return fl.zero(phi.grid)

    def to_config(self):
        return {"type": "constant", "r": self.r}


class FactorizedDelay(DelayFunctional):
    """``d(phi) = delta(L phi)`` with ``L chi = (int w_j . chi)_j``.

    ``weights`` is a sequence of m :class:`C0Fn`; ``delta`` maps R^m into
    [-h, 0] and ``grad`` returns its gradient (length m).
    """

    def __init__(self, weights, delta: Callable, grad: Callable, q_bound: float | None = None, name: str = "custom"):
        if isinstance(weights, C0Fn):
            weights = [weights]
        self.weights = list(weights)
        self.delta = delta
        self.grad = grad
        self.k = 1
        self.name = name
        self.q_bound = q_bound
        self.q_certified = q_bound is not None

    def linear_part(self, chi: C0Fn) -> np.ndarray:
        return np.array([float(np.sum(integrate(C0Fn(chi.grid, w.values * chi.values)))) for w in self.weights])

    def _value(self, phi):
        return [self.delta(self.linear_part(phi))]

    def _ext_derivative(self, phi, kappa=0):
        gr = np.atleast_1d(self.grad(self.linear_part(phi)))
        dens = sum(g * w.values for g, w in zip(gr, self.weights))
        return fl.ExtLinFunctional(phi.grid, density=dens)

    def to_config(self):
        return {"type": "factorized", "name": self.name}


def tanh_factorized(grid: GridSpec) -> FactorizedDelay:
    """Weight w = 1 on every component, delta(u) = -(h/2)(1 - tanh u)."""
    h = grid.h
    w = C0Fn(grid, np.ones((grid.n, grid.N + 1)))
    return FactorizedDelay(
        [w],
        lambda u: -0.5 * h * (1.0 - np.tanh(u[0])),
        lambda u: np.array([0.5 * h / np.cosh(u[0]) ** 2]),
        q_bound=0.5 * h * h * grid.n,
        name="tanh",
    )


class StackedDelay(DelayFunctional):
    """k scalar delays combined into one vector-valued delay."""

    def __init__(self, parts):
        self.parts = list(parts)
        self.k = sum(p.k for p in self.parts)
        bounds = [p.q_bound for p in self.parts]
        self.q_bound = None if any(b is None for b in bounds) else max(bounds)
        self.q_certified = all(p.q_certified for p in self.parts)

    def domain_test(self, phi):
        return all(p.domain_test(phi) for p in self.parts)

    def _value(self, phi):
        return np.concatenate([p.value(phi) for p in self.parts])

    def _ext_derivative(self, phi, kappa=0):
        for p in self.parts:
            if kappa < p.k:
                return p.ext_derivative(phi, kappa)
            kappa -= p.k
        raise IndexError(kappa)

    def to_config(self):
        return {"type": "stacked", "parts": [p.to_config() for p in self.parts]}


def _probe_q_bound(delay: DelayFunctional, grid: GridSpec, count: int = 64, seed: int = 0) -> float:
    # estimate only; flagged through q_certified = False
    from .probes import random_smooth

    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(count):
        phi = random_smooth(grid, rng, amplitude=3.0)
        for kappa in range(delay.k):
            best = max(best, fl.op_norm(delay.ext_derivative(phi, kappa)))
    return best


def fd_check_delay(d: DelayFunctional, phi: C1Fn, chi: C1Fn, step: float = 1e-5, floor: float = 1e-4) -> float:
    """Largest relative mismatch between the central difference of ``d`` along
    ``chi`` and the extended derivative applied to ``chi``.

    The scale is ``max(|analytic|, |difference|, floor)`` so that derivatives
    vanishing to roundoff do not inflate the ratio.
    """
    try:
        dp = d.value(phi + step * chi)
        dm = d.value(phi - step * chi)
    except DomainError as exc:
        raise DomainError(f"probe left U_d: {exc}") from exc
    fd = (dp - dm) / (2.0 * step)
    worst = 0.0
    for kappa in range(d.k):
        an = fl.apply(d.ext_derivative(phi, kappa), chi)
        diff = abs(fd[kappa] - an)
        if diff == 0.0:
            continue
        worst = max(worst, diff / max(abs(an), abs(fd[kappa]), floor))
    return worst
