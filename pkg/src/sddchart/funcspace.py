"""Discretized histories on [-h, 0].

Functions are stored by their values at the Chebyshev-Lobatto points mapped
onto [-h, 0] (ascending, so ``t[0] = -h`` and ``t[N] = 0``).  One polynomial
of degree N per component.  Evaluation is barycentric, differentiation uses
the collocation differentiation matrix and integration uses Clenshaw-Curtis
weights on the same nodes.

The norm on R^n is the componentwise maximum, so ``|chi| = max_t max_nu
|chi_nu(t)|``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

#: Default inflation applied to oversampled norms when an upper bound is needed.
SAFETY = 1.0 + 1e-6

_NODE_TOL = 1e-14


class DomainError(ValueError):
    """Argument outside the domain of an operation."""


class GridMismatch(ValueError):
    """Operands live on different grids."""


@dataclass(frozen=True)
class GridSpec:
    """Grid parameters: history length ``h``, state dimension ``n``,
    polynomial degree ``N`` and oversampling count ``M`` (default ``8N``)."""

    h: float = 1.0
    n: int = 1
    N: int = 24
    M: int = 0

    def __post_init__(self):
        if self.M == 0:
            object.__setattr__(self, "M", 8 * self.N)
        if not self.h > 0:
            raise ValueError(f"h must be positive, got {self.h}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.N < 4:
            raise ValueError(f"N must be >= 4, got {self.N}")
        if self.M < 8 * self.N:
            raise ValueError(f"M must be >= 8N = {8 * self.N}, got {self.M}")

    @property
    def nodes(self) -> np.ndarray:
        return _ops(self).t

    def with_n(self, n: int) -> "GridSpec":
        return GridSpec(self.h, n, self.N, self.M)

    def to_dict(self) -> dict:
        return {"h": self.h, "n": self.n, "N": self.N, "M": self.M}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(float(d.get("h", 1.0)), int(d.get("n", 1)), int(d.get("N", 24)), int(d.get("M", 0)))


class _Operators:
    """Per-grid precomputed nodes, weights and matrices (read-only)."""

    def __init__(self, grid: GridSpec):
        N, h = grid.N, grid.h
        j = np.arange(N + 1)
        # x_j = -cos(j pi / N) written in the symmetric sine form
        x = np.sin(np.pi * (2 * j - N) / (2 * N))
        self.x = x
        self.t = 0.5 * h * (x - 1.0)
        self.t[-1] = 0.0
        self.t[0] = -h
        w = (-1.0) ** j
        w[0] *= 0.5
        w[-1] *= 0.5
        self.bary = w

        # differences t_i - t_j via the product formula (no cancellation)
        ii, jj = np.meshgrid(j, j, indexing="ij")
        dx = 2.0 * np.sin((ii + jj) * np.pi / (2 * N)) * np.sin((ii - jj) * np.pi / (2 * N))
        dt = 0.5 * h * dx
        np.fill_diagonal(dt, 1.0)
        D = (w[None, :] / w[:, None]) / dt
        np.fill_diagonal(D, 0.0)
        np.fill_diagonal(D, -D.sum(axis=1))
        self.D = D

        self.cc = 0.5 * h * _clenshaw_curtis(N)

        self.tt = np.linspace(-h, 0.0, grid.M)
        self.E = bary_matrix(self.t, w, self.tt)
        for arr in (self.x, self.t, self.bary, self.D, self.cc, self.tt, self.E):
            arr.setflags(write=False)


def _clenshaw_curtis(N: int) -> np.ndarray:
    """Clenshaw-Curtis weights on the N+1 Lobatto points of [-1, 1]."""
    theta = np.pi * np.arange(N + 1) / N
    w = np.zeros(N + 1)
    v = np.ones(N - 1)
    inner = slice(1, N)
    if N % 2 == 0:
        w[0] = w[N] = 1.0 / (N**2 - 1)
        for k in range(1, N // 2):
            v -= 2.0 * np.cos(2 * k * theta[inner]) / (4 * k**2 - 1)
        v -= np.cos(N * theta[inner]) / (N**2 - 1)
    else:
        w[0] = w[N] = 1.0 / N**2
        for k in range(1, (N - 1) // 2 + 1):
            v -= 2.0 * np.cos(2 * k * theta[inner]) / (4 * k**2 - 1)
    w[inner] = 2.0 * v / N
    return w


@lru_cache(maxsize=64)
def _ops(grid: GridSpec) -> _Operators:
    return _Operators(grid)


def bary_matrix(nodes: np.ndarray, weights: np.ndarray, pts) -> np.ndarray:
    """Matrix mapping nodal values to interpolant values at ``pts``."""
    pts = np.atleast_1d(np.asarray(pts, dtype=float))
    diff = pts[:, None] - nodes[None, :]
    exact = diff == 0.0
    diff[exact] = 1.0
    K = weights[None, :] / diff
    K /= K.sum(axis=1, keepdims=True)
    rows = exact.any(axis=1)
    if rows.any():
        K[rows] = exact[rows].astype(float)
    return K


def _as_values(grid: GridSpec, values) -> np.ndarray:
    v = np.array(values, dtype=float)
    if v.ndim == 1 and grid.n == 1:
        v = v[None, :]
    if v.shape != (grid.n, grid.N + 1):
        raise GridMismatch(f"values shape {v.shape} does not match grid ({grid.n}, {grid.N + 1})")
    if not np.all(np.isfinite(v)):
        raise ValueError("function values must be finite")
    v.setflags(write=False)
    return v


@dataclass(frozen=True, eq=False)
class C0Fn:
    """Element of C([-h,0], R^n) given by nodal values of shape (n, N+1)."""

    grid: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "values", _as_values(self.grid, self.values))

    def __call__(self, t):
        return eval_fn(self, t)

    def component(self, nu: int) -> np.ndarray:
        return self.values[nu]

    def _combine(self, other, a: float, b: float):
        if not isinstance(other, C0Fn):
            return NotImplemented
        check_grid(self, other)
        cls = C1Fn if isinstance(self, C1Fn) and isinstance(other, C1Fn) else C0Fn
        return cls(self.grid, a * self.values + b * other.values)

    def __add__(self, other):
        return self._combine(other, 1.0, 1.0)

    def __sub__(self, other):
        return self._combine(other, 1.0, -1.0)

    def __neg__(self):
        return type(self)(self.grid, -self.values)

    def __mul__(self, a):
        if isinstance(a, C0Fn):
            return NotImplemented
        return type(self)(self.grid, float(a) * self.values)

    __rmul__ = __mul__

    def to_dict(self) -> dict:
        return {"grid": self.grid.to_dict(), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d: dict):
        return cls(GridSpec.from_dict(d["grid"]), d["values"])


class C1Fn(C0Fn):
    """Element of C^1([-h,0], R^n); same storage as :class:`C0Fn`.

    Smoothness is a property of whatever produced the nodal data, nothing
    is enforced here.
    """


def check_grid(*fns: C0Fn) -> GridSpec:
    grid = fns[0].grid
    for fn in fns[1:]:
        if fn.grid != grid:
            raise GridMismatch(f"grid mismatch: {grid} vs {fn.grid}")
    return grid


def zeros(grid: GridSpec) -> C1Fn:
    return C1Fn(grid, np.zeros((grid.n, grid.N + 1)))


def constant(grid: GridSpec, c) -> C1Fn:
    c = np.broadcast_to(np.asarray(c, dtype=float), (grid.n,))
    return C1Fn(grid, np.repeat(c[:, None], grid.N + 1, axis=1))


def from_samples(grid: GridSpec, fn, cls=C1Fn):
    """Sample ``fn`` at the nodes.  ``fn`` takes the node array and returns
    something broadcastable to shape (n, N+1)."""
    t = _ops(grid).t
    vals = np.broadcast_to(np.asarray(fn(t), dtype=float), (grid.n, grid.N + 1))
    return cls(grid, vals)


def lincomb(a: float, phi: C0Fn, b: float, psi: C0Fn):
    """``a*phi + b*psi`` on a common grid."""
    return phi._combine(psi, a, b)


def check_time(grid: GridSpec, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    tol = _NODE_TOL * grid.h
    if np.any(t < -grid.h - tol) or np.any(t > tol) or np.any(~np.isfinite(t)):
        raise DomainError(f"time outside [-{grid.h}, 0]: {t}")
    return np.minimum(np.maximum(t, -grid.h), 0.0)


def eval_fn(phi: C0Fn, t):
    """Value of ``phi`` at ``t`` (scalar -> shape (n,), array -> (n, len(t)))."""
    ops = _ops(phi.grid)
    tc = check_time(phi.grid, t)
    K = bary_matrix(ops.t, ops.bary, tc.ravel())
    out = phi.values @ K.T
    if tc.ndim == 0:
        return out[:, 0]
    return out.reshape((phi.grid.n,) + tc.shape)


def deriv(phi: C0Fn) -> C0Fn:
    """Spectral derivative, returned as a :class:`C0Fn`."""
    return C0Fn(phi.grid, phi.values @ _ops(phi.grid).D.T)


def deriv_at_zero(phi: C0Fn) -> np.ndarray:
    """``deriv(phi)(0)`` without forming the full derivative."""
    return phi.values @ _ops(phi.grid).D[-1]


def integrate(chi: C0Fn) -> np.ndarray:
    """Componentwise Clenshaw-Curtis integral over [-h, 0]."""
    return chi.values @ _ops(chi.grid).cc


def _vertex(t, u):
    """Abscissa of the parabola through three points per row (clipped to the
    bracket; falls back to the middle point when degenerate)."""
    t0, t1, t2 = t[:, 0], t[:, 1], t[:, 2]
    u0, u1, u2 = u[:, 0], u[:, 1], u[:, 2]
    num = (t1 - t0) ** 2 * (u1 - u2) - (t1 - t2) ** 2 * (u1 - u0)
    den = (t1 - t0) * (u1 - u2) - (t1 - t2) * (u1 - u0)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = t1 - 0.5 * num / den
    ok = np.isfinite(v) & (den != 0.0)
    return np.where(ok, np.minimum(np.maximum(v, t0), t2), t1)


def _refined_peak(grid: GridSpec, values: np.ndarray, absolute: bool) -> np.ndarray:
    """Per-row maximum of the interpolants (or of their absolute values).

    Start from the oversampling grid, then refine the best few local maxima
    of each row: a parabola through the three samples around each maximum
    gives a centre for a 9-point local cluster, and a second parabola through
    the best cluster points gives a final candidate.  The result is the
    largest value actually evaluated, never below the nodal maximum.
    """
    ops = _ops(grid)
    tt = ops.tt
    M = len(tt)
    tf = np.abs if absolute else (lambda a: a)
    coarse = tf(values @ ops.E.T)
    best = np.maximum(coarse.max(axis=1), tf(values).max(axis=1))
    left = np.concatenate((np.full((coarse.shape[0], 1), -np.inf), coarse[:, :-1]), axis=1)
    right = np.concatenate((coarse[:, 1:], np.full((coarse.shape[0], 1), -np.inf)), axis=1)
    is_peak = (coarse >= left) & (coarse >= right) & (np.ptp(coarse, axis=1) > 0)[:, None]
    rows, cols = [], []
    for r in np.flatnonzero(is_peak.any(axis=1)):
        peaks = np.flatnonzero(is_peak[r])
        if len(peaks) > 5:
            peaks = peaks[np.argsort(coarse[r, peaks])[-5:]]
        rows.extend([r] * len(peaks))
        cols.extend(peaks)
    if not rows:
        return best
    rows, cols = np.array(rows), np.minimum(np.maximum(np.array(cols), 1), M - 2)
    trip = cols[:, None] + np.arange(-1, 2)[None, :]
    centre = _vertex(tt[trip], coarse[rows[:, None], trip])
    width = tt[1] - tt[0]
    offs = np.linspace(-0.125, 0.125, 9) * width
    for final in (False, True):
        pts = np.minimum(np.maximum(centre[:, None] + offs[None, :], -grid.h), 0.0)
        K = bary_matrix(ops.t, ops.bary, pts.ravel()).reshape(len(rows), len(offs), -1)
        vals = tf(np.einsum("pk,pjk->pj", values[rows], K))
        np.maximum.at(best, rows, vals.max(axis=1))
        if final:
            break
        k = np.minimum(np.maximum(np.argmax(vals, axis=1), 1), len(offs) - 2)
        idx = k[:, None] + np.arange(-1, 2)[None, :]
        sel = np.arange(len(rows))[:, None]
        centre = _vertex(pts[sel, idx], vals[sel, idx])
        offs = np.linspace(-1.0, 1.0, 3) * width * 1e-3
    return best


def component_max(chi: C0Fn) -> np.ndarray:
    """Estimate of ``max_t chi_nu(t)`` for each component."""
    return _refined_peak(chi.grid, chi.values, absolute=False)


def component_min(chi: C0Fn) -> np.ndarray:
    return -_refined_peak(chi.grid, -chi.values, absolute=False)


def component_sup(chi: C0Fn) -> np.ndarray:
    """Estimate of ``max_t |chi_nu(t)|`` for each component."""
    return _refined_peak(chi.grid, chi.values, absolute=True)


def sup_norm(chi: C0Fn) -> float:
    """Sup norm (componentwise-max norm on R^n), estimated by oversampling
    plus local refinement.  Never below the largest nodal magnitude."""
    return float(component_sup(chi).max())


def c1_norm(phi: C0Fn) -> float:
    return sup_norm(phi) + sup_norm(deriv(phi))
