"""Random smooth test functions: truncated Chebyshev series with
geometrically decaying random coefficients."""
from __future__ import annotations

import numpy as np
from numpy.polynomial import chebyshev as cheb

from .funcspace import C1Fn, GridSpec, _ops, deriv, sup_norm


def random_smooth(grid: GridSpec, rng: np.random.Generator, amplitude: float = 1.0,
                  decay: float = 0.5, terms: int = 10, offset: float = 0.0) -> C1Fn:
    """``offset + amplitude * s(t)`` with ``|s| <= 1``.

    ``s`` is a Chebyshev series in the scaled variable with coefficients
    ``U(-1, 1) * decay**k``, divided by the sum of their magnitudes.
    """
    terms = min(terms, grid.N)
    x = _ops(grid).x
    rows = []
    for _ in range(grid.n):
        c = rng.uniform(-1.0, 1.0, terms) * decay ** np.arange(terms)
        rows.append(cheb.chebval(x, c) / np.abs(c).sum())
    return C1Fn(grid, offset + amplitude * np.array(rows))


def random_unit(grid: GridSpec, rng: np.random.Generator, **kw) -> C1Fn:
    """Random smooth function rescaled to unit sup norm."""
    chi = random_smooth(grid, rng, **kw)
    return chi * (1.0 / sup_norm(chi))


def random_in_box(grid: GridSpec, rng: np.random.Generator, lo: float, hi: float,
                  slope: float | None = None, **kw) -> C1Fn:
    """Random smooth function with values in (lo, hi) and, when ``slope`` is
    given, ``|phi'| < slope`` (rescaled about the midpoint if needed)."""
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    s = random_smooth(grid, rng, amplitude=1.0, **kw)
    phi = mid + half * rng.uniform(0.0, 0.98) * s.values
    phi = C1Fn(grid, phi)
    if slope is not None:
        d = sup_norm(deriv(phi))
        if d >= slope:
            phi = C1Fn(grid, mid + (phi.values - mid) * (0.98 * slope / d))
    return phi
