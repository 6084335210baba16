"""Continuous linear functionals C_n -> R as point masses plus a density.

``L(chi) = sum_i a_i . chi(t_i) + sum_nu int w_nu(t) chi_nu(t) dt``

The density pairing is evaluated with the Clenshaw-Curtis weights of the
grid.  With the componentwise-max norm on R^n the dual norm is
``sum_i |a_i|_1 + int |w(t)|_1 dt``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial import chebyshev as cheb

from .funcspace import C0Fn, GridMismatch, GridSpec, _ops, bary_matrix, check_time

_MERGE_TOL = 1e-15


@dataclass(frozen=True, eq=False)
class ExtLinFunctional:
    """Atoms at ``locs`` with weight rows ``weights`` (shape (m, n)) and an
    optional density given by nodal values of shape (n, N+1)."""

    grid: GridSpec
    locs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    weights: np.ndarray = field(default=None)
    density: np.ndarray | None = None

    def __post_init__(self):
        n = self.grid.n
        locs = np.atleast_1d(np.asarray(self.locs, dtype=float))
        weights = np.zeros((0, n)) if self.weights is None else np.asarray(self.weights, dtype=float)
        weights = weights.reshape(len(locs), n)
        if len(locs):
            locs = check_time(self.grid, locs)
        if not np.all(np.isfinite(weights)):
            raise ValueError("atom weights must be finite")
        locs, weights = _merge(locs, weights, self.grid.h)
        object.__setattr__(self, "locs", locs)
        object.__setattr__(self, "weights", weights)
        if self.density is not None:
            dens = np.array(self.density, dtype=float).reshape(n, self.grid.N + 1)
            if not np.all(np.isfinite(dens)):
                raise ValueError("density must be finite")
            dens.setflags(write=False)
            object.__setattr__(self, "density", dens)

    def __call__(self, chi: C0Fn) -> float:
        return apply(self, chi)


def _merge(locs, weights, h):
    if len(locs) == 0:
        return locs, weights
    order = np.argsort(locs, kind="stable")
    locs, weights = locs[order], weights[order]
    keep_locs, keep_w = [locs[0]], [weights[0].copy()]
    for t, w in zip(locs[1:], weights[1:]):
        if abs(t - keep_locs[-1]) <= _MERGE_TOL * h:
            keep_w[-1] += w
        else:
            keep_locs.append(t)
            keep_w.append(w.copy())
    locs, weights = np.array(keep_locs), np.array(keep_w)
    locs.setflags(write=False)
    weights.setflags(write=False)
    return locs, weights


def zero(grid: GridSpec) -> ExtLinFunctional:
    return ExtLinFunctional(grid)


def atom(grid: GridSpec, t: float, weight) -> ExtLinFunctional:
    """Point mass at ``t``; a scalar weight is accepted when n == 1."""
    w = np.broadcast_to(np.asarray(weight, dtype=float), (grid.n,))
    return ExtLinFunctional(grid, [t], w[None, :])


def unit_atom(grid: GridSpec, t: float, nu: int) -> ExtLinFunctional:
    """Evaluation of component ``nu`` at ``t``."""
    w = np.zeros(grid.n)
    w[nu] = 1.0
    return ExtLinFunctional(grid, [t], w[None, :])


def from_density(w: C0Fn) -> ExtLinFunctional:
    return ExtLinFunctional(w.grid, density=w.values)


def apply(L: ExtLinFunctional, chi: C0Fn) -> float:
    if chi.grid != L.grid:
        raise GridMismatch(f"functional grid {L.grid} vs argument grid {chi.grid}")
    ops = _ops(L.grid)
    total = 0.0
    if len(L.locs):
        K = bary_matrix(ops.t, ops.bary, L.locs)
        total += float(np.sum(L.weights * (K @ chi.values.T)))
    if L.density is not None:
        total += float(np.sum((L.density * chi.values) @ ops.cc))
    return total


@lru_cache(maxsize=64)
def _cheb_maps(grid: GridSpec):
    """Nodal values -> Chebyshev coefficients of the interpolant, of its
    derivative and of its antiderivative (all padded to N+2 terms)."""
    N = grid.N
    to_coef = np.linalg.inv(cheb.chebvander(_ops(grid).x, N))
    eye = np.eye(N + 1)
    der = np.zeros((N + 2, N + 1))
    anti = np.zeros((N + 2, N + 1))
    for j in range(N + 1):
        d = cheb.chebder(eye[j])
        der[: len(d), j] = d
        anti[:, j] = cheb.chebint(eye[j])
    coef = np.vstack((to_coef, np.zeros((1, N + 1))))
    maps = (coef, der @ to_coef, anti @ to_coef)
    for m in maps:
        m.setflags(write=False)
    return maps


def _cheb_eval(x, coef):
    x = np.clip(np.asarray(x, dtype=float), -1.0, 1.0)
    return np.cos(np.outer(np.arccos(x), np.arange(len(coef)))) @ coef


def density_abs_integral(grid: GridSpec, values: np.ndarray) -> float:
    """``int_{-h}^0 sum_nu |w_nu|`` for the interpolants of ``values``.

    Sign changes are located on the oversampling grid, started by linear
    interpolation and polished by three Newton steps kept inside the
    bracket; each sign-constant piece is integrated exactly through the
    Chebyshev antiderivative.  A root misplaced by ``e`` changes the result
    only by ``O(e^2)``.
    """
    ops = _ops(grid)
    h = grid.h
    xs = 2.0 * ops.tt / h + 1.0
    total = 0.0
    for row in np.atleast_2d(values):
        if not np.any(row):
            continue
        samples = row @ ops.E.T
        idx = np.flatnonzero(samples[:-1] * samples[1:] < 0)
        if len(idx) == 0 and (np.all(samples >= 0) or np.all(samples <= 0)):
            # one sign throughout: the quadrature is exact for the interpolant
            total += abs(float(row @ ops.cc))
            continue
        to_coef, to_der, to_anti = _cheb_maps(grid)
        coef, dcoef = to_coef @ row, to_der @ row
        a, b = xs[idx], xs[idx + 1]
        fa, fb = samples[idx], samples[idx + 1]
        r = a - fa * (b - a) / (fb - fa)
        k = np.arange(len(coef))
        for _ in range(3):
            T = np.cos(np.outer(np.arccos(np.clip(r, -1.0, 1.0)), k))
            fr, dr = T @ coef, T @ dcoef
            with np.errstate(divide="ignore", invalid="ignore"):
                r_new = r - fr / dr
            r = np.where(np.isfinite(r_new), np.clip(r_new, a, b), r)
        F = _cheb_eval(np.concatenate(([-1.0], r, [1.0])), to_anti @ row)
        total += 0.5 * h * float(np.sum(np.abs(np.diff(F))))
    return total


def op_norm(L: ExtLinFunctional) -> float:
    """Dual norm for the sup norm on C_n.

    The density contributes the larger of the exact ``int |w|`` and its
    nodal-quadrature counterpart ``sum_j c_j |w(t_j)|``; the latter is the
    norm of the pairing actually used by :func:`apply`, so the result bounds
    ``|apply(L, chi)| / |chi|`` for every argument.
    """
    total = float(np.abs(L.weights).sum())
    if L.density is not None:
        nodal = float(np.abs(L.density).sum(axis=0) @ _ops(L.grid).cc)
        total += max(nodal, density_abs_integral(L.grid, L.density))
    return total


def scale(a: float, L: ExtLinFunctional) -> ExtLinFunctional:
    dens = None if L.density is None else a * L.density
    return ExtLinFunctional(L.grid, L.locs, a * L.weights, dens)


def add(L1: ExtLinFunctional, L2: ExtLinFunctional) -> ExtLinFunctional:
    if L1.grid != L2.grid:
        raise GridMismatch(f"grid mismatch: {L1.grid} vs {L2.grid}")
    locs = np.concatenate((L1.locs, L2.locs))
    weights = np.concatenate((L1.weights, L2.weights), axis=0)
    if L1.density is None:
        dens = L2.density
    elif L2.density is None:
        dens = L1.density
    else:
        dens = L1.density + L2.density
    return ExtLinFunctional(L1.grid, locs, weights, dens)


def total(funcs, coeffs=None) -> ExtLinFunctional:
    """``sum_i coeffs[i] * funcs[i]``."""
    funcs = list(funcs)
    if coeffs is None:
        coeffs = np.ones(len(funcs))
    out = zero(funcs[0].grid)
    for c, L in zip(coeffs, funcs):
        if c != 0.0:
            out = add(out, scale(c, L))
    return out
