"""Families of transversals tau: V -> C^1 with tau(y)'(0) = 1 and
|tau(y)|, |D_mu tau(y)| <= H(y).

Both families use ``tau(y)(t) = sin(lam t) / lam``; the sup norm is at most
``1/lam`` and the slope at 0 is one.  ``ConstantOnBox`` fixes ``lam`` on a
bounded box of y values (so ``D tau = 0``).  ``SmoothEnvelope`` lets ``lam``
depend smoothly on y through a soft-max of Lipschitz cones anchored at
sample points.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .funcspace import C1Fn, DomainError, GridSpec, deriv_at_zero, from_samples
from .rfde import FeedbackMap


class ResolutionError(ValueError):
    """The grid cannot represent sin(lam t)/lam to the required accuracy."""


class EnvelopeError(RuntimeError):
    """Envelope used before it was fitted."""


@dataclass(frozen=True)
class ScalingFn:
    """``H(y) = budget / (k n^2 (1 + c) (1 + m_g(y) + m_Dg(y)))``.

    For the U_c chart ``budget = eps``; for the U_{q,b,delta} chart
    ``budget = delta`` and ``c = b*q``.
    """

    feedback: FeedbackMap
    variant: str
    budget: float
    c: float

    def __post_init__(self):
        if self.variant not in ("Hc", "Hqbd"):
            raise ValueError(f"unknown scaling variant {self.variant!r}")
        if not 0 < self.budget < 1:
            raise ValueError(f"budget must lie in (0, 1), got {self.budget}")
        if not self.c > 0:
            raise ValueError("c must be positive")

    @classmethod
    def Hc(cls, feedback: FeedbackMap, eps: float, c: float) -> "ScalingFn":
        return cls(feedback, "Hc", eps, c)

    @classmethod
    def Hqbd(cls, feedback: FeedbackMap, delta: float, q: float, b: float) -> "ScalingFn":
        return cls(feedback, "Hqbd", delta, b * q)

    def __call__(self, y) -> float:
        return H(self, y)


def H(scaling: ScalingFn, y) -> float:
    fb = scaling.feedback
    y = np.atleast_1d(np.asarray(y, dtype=float))
    fb.check_domain(y)
    mg = float(np.abs(fb(y)).max())
    mdg = float(np.abs(fb.jacobian(y)).max())
    return scaling.budget / (fb.k * fb.n**2 * (1.0 + scaling.c) * (1.0 + mg + mdg))


def sine_transversal(grid: GridSpec, lam: float) -> C1Fn:
    return from_samples(grid, lambda t: np.sin(lam * t) / lam)


def _lam_derivative(grid: GridSpec, lam: float) -> C1Fn:
    # d/dlam [sin(lam t)/lam]
    return from_samples(grid, lambda t: t * np.cos(lam * t) / lam - np.sin(lam * t) / lam**2)


def _check_resolution(tau: C1Fn, lam: float, tol: float = 1e-10):
    slope = float(deriv_at_zero(tau)[0])
    if abs(slope - 1.0) > tol:
        raise ResolutionError(
            f"grid N={tau.grid.N} cannot resolve sin({lam:.4g} t)/{lam:.4g}: "
            f"discrete slope at 0 is {slope!r}; increase N")


class TransversalFamily:
    scaling: ScalingFn
    grid: GridSpec

    def tau(self, y) -> C1Fn:
        raise NotImplementedError

    def Dtau(self, y, mu: int) -> C1Fn:
        raise NotImplementedError

    def lam(self, y) -> float:
        raise NotImplementedError


class ConstantOnBox(TransversalFamily):
    """Fixed ``lam = max(1, 1/min_box H)`` on the closed box ``lo <= y <= hi``.

    The minimum of H over the box comes from dense sampling, shrunk by
    ``margin`` to cover dips between samples, unless ``min_h`` is supplied.
    ``lam`` may also be forced directly (used by negative controls).
    """

    def __init__(self, scaling: ScalingFn, grid: GridSpec, lo, hi, *, min_h: float | None = None,
                 lam: float | None = None, margin: float = 1e-3, samples: int = 4096):
        self.scaling = scaling
        self.grid = grid.with_n(1)
        self.lo = np.atleast_1d(np.asarray(lo, dtype=float))
        self.hi = np.atleast_1d(np.asarray(hi, dtype=float))
        dim = scaling.feedback.k * scaling.feedback.n
        if self.lo.shape != (dim,) or self.hi.shape != (dim,) or np.any(self.lo > self.hi):
            raise ValueError("box bounds must be ordered vectors of length k*n")
        if min_h is None:
            min_h = self.sampled_min_h(samples) * (1.0 - margin)
        self.min_h = float(min_h)
        self._lam = float(lam) if lam is not None else max(1.0, 1.0 / self.min_h)
        self._tau = sine_transversal(self.grid, self._lam)
        _check_resolution(self._tau, self._lam)
        self._zero = from_samples(self.grid, lambda t: np.zeros_like(t))

    def sampled_min_h(self, samples: int = 4096) -> float:
        dim = len(self.lo)
        per = max(3, int(round(samples ** (1.0 / dim))))
        axes = [np.linspace(a, b, per) for a, b in zip(self.lo, self.hi)]
        return min(H(self.scaling, np.array(y)) for y in itertools.product(*axes))

    def _check(self, y):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        tol = 1e-12 * (1.0 + np.abs(y))
        if np.any(y < self.lo - tol) or np.any(y > self.hi + tol):
            raise DomainError(f"y = {y} outside the transversal box [{self.lo}, {self.hi}]")

    def lam(self, y=None) -> float:
        if y is not None:
            self._check(y)
        return self._lam

    def tau(self, y) -> C1Fn:
        self._check(y)
        return self._tau

    def Dtau(self, y, mu: int) -> C1Fn:
        self._check(y)
        return self._zero

    def to_config(self) -> dict:
        return {"mode": "box", "lo": self.lo.tolist(), "hi": self.hi.tolist(), "lam": self._lam}


class SmoothEnvelope(TransversalFamily):
    """``lam(y) = T log(exp(1/T) + sum_i exp((lam_i - L rho(y - z_i)) / T))``.

    ``lam_i = (1 + margin) / H(z_i)`` at the samples ``z_i``, ``rho`` is a
    smoothed l1 norm (``sum sqrt(x^2 + s^2) - s``, never above ``|x|_1``) and
    ``L = 1/(h + 1)``.  Every partial derivative of ``lam`` is a convex
    combination of cone slopes, so ``|d lam / d y_mu| <= L``; with ``lam >= 1``
    this gives ``|D_mu tau(y)| <= (L/lam)(h + 1/lam) <= 1/lam``.  The soft-max
    never falls below the plain max, hence ``1/lam(z_i) <= H(z_i)``;
    between samples the bound is checked, not proven.
    """

    def __init__(self, scaling: ScalingFn, grid: GridSpec, samples=None, *,
                 temperature: float | None = None, smoothing: float | None = None, margin: float = 1e-3):
        self.scaling = scaling
        self.grid = grid.with_n(1)
        self.L = 1.0 / (grid.h + 1.0)
        self.margin = margin
        self.smoothing = 1e-3 * grid.h if smoothing is None else smoothing
        self.temperature = temperature
        self.z = None
        self.lam_i = None
        if samples is not None:
            self.fit(samples)

    def fit(self, samples) -> "SmoothEnvelope":
        z = np.asarray(samples, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        self.z = z
        self.lam_i = np.array([(1.0 + self.margin) / H(self.scaling, zi) for zi in z])
        if self.temperature is None:
            self.temperature = 1e-3 * float(self.lam_i.min())
        return self

    @property
    def slack(self) -> float:
        """Upper bound on how far the soft-max exceeds the plain max."""
        return self.temperature * np.log(len(self.lam_i) + 1.0)

    def _terms(self, y):
        if self.z is None:
            raise EnvelopeError("SmoothEnvelope has not been fitted")
        y = np.atleast_1d(np.asarray(y, dtype=float))
        self.scaling.feedback.check_domain(y)
        s = self.smoothing
        diff = y[None, :] - self.z
        root = np.sqrt(diff**2 + s**2)
        rho = (root - s).sum(axis=1)
        vals = np.concatenate(([1.0], self.lam_i - self.L * rho))
        grads = np.vstack((np.zeros(len(y)), -self.L * diff / root))
        return vals, grads

    def lam_and_grad(self, y):
        vals, grads = self._terms(y)
        T = self.temperature
        top = vals.max()
        wts = np.exp((vals - top) / T)
        total = wts.sum()
        lam = top + T * np.log(total)
        return float(lam), (wts / total) @ grads

    def lam(self, y) -> float:
        return self.lam_and_grad(y)[0]

    def envelope(self, y) -> float:
        return 1.0 / self.lam(y)

    def tau(self, y) -> C1Fn:
        lam = self.lam(y)
        tau = sine_transversal(self.grid, lam)
        _check_resolution(tau, lam)
        return tau

    def Dtau(self, y, mu: int) -> C1Fn:
        lam, grad = self.lam_and_grad(y)
        return float(grad[mu]) * _lam_derivative(self.grid, lam)

    def to_config(self) -> dict:
        return {"mode": "envelope", "samples": self.z.tolist(), "temperature": self.temperature}
