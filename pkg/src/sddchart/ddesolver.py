"""Method-of-steps integration of ``x'(t) = f(x_t)`` with a dense history.

The history on [-h, 0] is the initial segment itself; beyond 0 it is the
piecewise cubic Hermite interpolant of the stored knots ``(t, x, x')``.

A segment ``x_t`` is put on the spectral grid by sampling the history at
``t + t_j``, with one adjustment: the value at the node next to 0 is chosen
so that the spectral derivative at 0 equals ``x'(t)``.  Without it the
derivative of a resampled segment would carry the polynomial interpolation
error of the history (whose second derivative jumps at 0), and
``x_t'(0) - f(x_t)`` could not fall below that floor.  Because ``x'(t)`` is
itself ``f(x_t)``, each right-hand-side evaluation is a short fixed-point
iteration.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .funcspace import C1Fn, DomainError, GridSpec, _ops, deriv, deriv_at_zero, eval_fn
from .rfde import RFDE, f, membership_residual


class IntegrationError(RuntimeError):
    pass


def _hermite(t0, t1, x0, x1, d0, d1, s):
    """Cubic Hermite value and derivative on [t0, t1] (arrays broadcast)."""
    dt = t1 - t0
    u = (s - t0) / dt
    u2, u3 = u * u, u * u * u
    h00 = 2 * u3 - 3 * u2 + 1
    h10 = u3 - 2 * u2 + u
    h01 = -2 * u3 + 3 * u2
    h11 = u3 - u2
    val = h00 * x0 + h10 * dt * d0 + h01 * x1 + h11 * dt * d1
    g00 = (6 * u2 - 6 * u) / dt
    g10 = 3 * u2 - 4 * u + 1
    g01 = (-6 * u2 + 6 * u) / dt
    g11 = 3 * u2 - 2 * u
    der = g00 * x0 + g10 * d0 + g01 * x1 + g11 * d1
    return val, der


class _History:
    """Growable knot store plus evaluation of x and x' on [-h, t_last]."""

    def __init__(self, phi0: C1Fn, dx0, capacity: int = 1024):
        self.phi0 = phi0
        self.dphi0 = deriv(phi0)
        n = phi0.grid.n
        self.t = np.zeros(capacity)
        self.x = np.zeros((capacity, n))
        self.dx = np.zeros((capacity, n))
        self.size = 0
        self.append(0.0, phi0.values[:, -1], dx0)

    def append(self, t, x, dx):
        if self.size == len(self.t):
            grow = len(self.t)
            self.t = np.concatenate((self.t, np.zeros(grow)))
            self.x = np.concatenate((self.x, np.zeros((grow, self.x.shape[1]))))
            self.dx = np.concatenate((self.dx, np.zeros((grow, self.x.shape[1]))))
        if self.size and not t > self.t[self.size - 1]:
            raise IntegrationError("knots must increase strictly")
        self.t[self.size] = t
        self.x[self.size] = x
        self.dx[self.size] = dx
        self.size += 1

    @property
    def last(self) -> float:
        return float(self.t[self.size - 1])

    def eval(self, s):
        """Values and derivatives at times ``s`` (1-d); shapes (n, len(s))."""
        s = np.asarray(s, dtype=float)
        h = self.phi0.grid.h
        if np.any(s < -h * (1 + 1e-14)) or np.any(s > self.last * (1 + 1e-14) + 1e-300):
            raise IntegrationError(f"history queried outside [-h, {self.last}]")
        n = self.phi0.grid.n
        val = np.zeros((n, len(s)))
        der = np.zeros((n, len(s)))
        past = s <= 0.0
        if past.any():
            sp = np.clip(s[past], -h, 0.0)
            val[:, past] = eval_fn(self.phi0, sp)
            der[:, past] = eval_fn(self.dphi0, sp)
        fut = ~past
        if fut.any():
            tk = self.t[: self.size]
            i = np.clip(np.searchsorted(tk, s[fut], side="right") - 1, 0, self.size - 2)
            vv, dd = _hermite(tk[i], tk[i + 1], self.x[i].T, self.x[i + 1].T,
                              self.dx[i].T, self.dx[i + 1].T, s[fut])
            val[:, fut] = vv
            der[:, fut] = dd
        return val, der


def _birkhoff_row(grid: GridSpec):
    D0 = _ops(grid).D[-1]
    return D0, D0[-2]


def _impose_slope(grid: GridSpec, values: np.ndarray, slope) -> np.ndarray:
    """Replace the value at node N-1 so the spectral slope at 0 is ``slope``."""
    D0, pivot = _birkhoff_row(grid)
    rest = values @ D0 - values[:, -2] * pivot
    values[:, -2] = (np.asarray(slope) - rest) / pivot
    return values


@dataclass
class Trajectory:
    rfde: RFDE
    grid: GridSpec
    T: float
    dt: float
    history: _History = field(repr=False)
    status: str = "ok"
    predictor_used: bool = False
    rhs_iterations: int = 0

    @property
    def knots(self) -> np.ndarray:
        return self.history.t[: self.history.size].copy()

    @property
    def t_end(self) -> float:
        return self.history.last

    def state(self, t):
        val, der = self.history.eval(np.atleast_1d(t))
        return val[:, 0], der[:, 0]


def _segment_values(hist: _History, grid: GridSpec, t: float, x_t, slope, pred=None):
    """Nodal values of x_t; nodes beyond the last knot use ``pred``."""
    ops = _ops(grid)
    s = t + ops.t[:-2]
    vals = np.empty((grid.n, grid.N + 1))
    inside = s <= hist.last
    used = False
    if inside.all():
        vals[:, :-2] = hist.eval(s)[0]
    else:
        if pred is None:
            raise IntegrationError("segment reaches beyond the history and no predictor is given")
        vals[:, :-2][:, inside] = hist.eval(s[inside])[0]
        vals[:, :-2][:, ~inside] = pred(s[~inside])
        used = True
    vals[:, -1] = x_t
    vals[:, -2] = 0.0
    return _impose_slope(grid, vals, slope), used


def segment(traj: Trajectory, t: float) -> C1Fn:
    """``x_t`` on the spectral grid; its slope at 0 equals the stored ``x'(t)``."""
    if not (-1e-14 <= t <= traj.t_end * (1 + 1e-14)):
        raise DomainError(f"segment time {t} outside [0, {traj.t_end}]")
    t = min(max(t, 0.0), traj.t_end)
    x_t, dx_t = traj.state(t)
    vals, _ = _segment_values(traj.history, traj.grid, t, x_t, dx_t)
    return C1Fn(traj.grid, vals)


def _rhs(rfde, hist, grid, t, x_t, guess, pred=None, tol=1e-15, max_iter=30):
    """Solve ``k = f(x_t)`` where x_t's slope at 0 is ``k``."""
    k = np.asarray(guess, dtype=float)
    used = False
    for it in range(1, max_iter + 1):
        vals, u = _segment_values(hist, grid, t, x_t, k, pred)
        used |= u
        k_new = f(rfde, C1Fn(grid, vals))
        if np.abs(k_new - k).max() <= tol * (1.0 + np.abs(k_new).max()):
            return k_new, used, it
        k = k_new
    raise IntegrationError(f"right-hand side did not settle at t={t}")


def _predictor(t0, x0, d0, t1, x1):
    # quadratic through (t0, x0) with slope d0 and through (t1, x1)
    span = t1 - t0
    curv = (x1 - x0 - d0 * span) / span**2

    def pred(s):
        sig = np.asarray(s) - t0
        return x0[:, None] + d0[:, None] * sig[None, :] + curv[:, None] * sig[None, :] ** 2
    return pred


def integrate(rfde: RFDE, phi0: C1Fn, T: float, dt: float, tol_member: float = 1e-8) -> Trajectory:
    """Classical RK4 from ``phi0`` (which must lie on the manifold) to ``T``.

    Stops early with a status message when a segment leaves the domain of f.
    """
    grid = rfde.grid
    h = grid.h
    if not T > 0 or not dt > 0:
        raise ValueError("T and dt must be positive")
    if dt > h / 10:
        raise ValueError(f"dt = {dt} exceeds h/10")
    if phi0.grid != grid:
        raise ValueError("initial segment on a different grid")
    res = np.abs(membership_residual(rfde, phi0)).max()
    if res > tol_member:
        raise DomainError(f"initial segment off the manifold: residual {res:.3g} > {tol_member}")
    hist = _History(phi0, deriv_at_zero(phi0), capacity=int(np.ceil(T / dt)) + 2)
    traj = Trajectory(rfde, grid, T, dt, hist)
    steps = int(round(T / dt))
    if abs(steps * dt - T) > 1e-9 * T:
        steps = int(np.ceil(T / dt))
    for i in range(steps):
        t0 = hist.last
        t1 = T if i == steps - 1 else (i + 1) * dt
        step = t1 - t0
        x0, k1 = hist.x[hist.size - 1].copy(), hist.dx[hist.size - 1].copy()
        try:
            tm = t0 + 0.5 * step
            y2 = x0 + 0.5 * step * k1
            k2, u2, n2 = _rhs(rfde, hist, grid, tm, y2, k1, _predictor(t0, x0, k1, tm, y2))
            y3 = x0 + 0.5 * step * k2
            k3, u3, n3 = _rhs(rfde, hist, grid, tm, y3, k2, _predictor(t0, x0, k1, tm, y3))
            y4 = x0 + step * k3
            k4, u4, n4 = _rhs(rfde, hist, grid, t1, y4, k3, _predictor(t0, x0, k1, t1, y4))
            x1 = x0 + step / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            d1, u5, n5 = _rhs(rfde, hist, grid, t1, x1, k4, _predictor(t0, x0, k1, t1, x1))
        except DomainError as exc:
            traj.status = f"domain exit after t={t0:.6g}: {exc}"
            break
        traj.predictor_used |= u2 or u3 or u4 or u5
        traj.rhs_iterations += n2 + n3 + n4 + n5
        hist.append(t1, x1, d1)
    return traj


def sample_times(traj: Trajectory, every: int = 1, offset: float = 0.25) -> np.ndarray:
    """One time per step at ``t_i + offset * (t_{i+1} - t_i)``.

    Avoid ``offset = 1/2``: the derivative of a cubic Hermite interpolant is
    superconvergent at the midpoint, which would hide its O(dt^3) error.
    """
    tk = traj.knots
    return (tk[:-1] + offset * np.diff(tk))[::every]


def flow_residual(traj: Trajectory, rfde: RFDE | None = None, times=None) -> float:
    """``max |x'(t) - f(x_t)|`` over ``times`` (default: :func:`sample_times`)."""
    rfde = traj.rfde if rfde is None else rfde
    times = sample_times(traj) if times is None else np.atleast_1d(times)
    worst = 0.0
    for t in times:
        _, dx = traj.state(t)
        worst = max(worst, float(np.abs(dx - f(rfde, segment(traj, t))).max()))
    return worst


def to_csv(traj: Trajectory, times=None) -> str:
    """CSV text with columns t, x_*, dx_*, d_*, residual (schema 1)."""
    rfde = traj.rfde
    times = traj.knots if times is None else np.atleast_1d(times)
    n, k = rfde.n, rfde.k
    out = io.StringIO()
    out.write("# schema=1\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["t"] + [f"x_{i + 1}" for i in range(n)] + [f"dx_{i + 1}" for i in range(n)]
               + [f"d_{i + 1}" for i in range(k)] + ["residual"])
    for t in times:
        x, dx = traj.state(t)
        seg = segment(traj, t)
        d = rfde.delay.value(seg)
        r = float(np.abs(dx - f(rfde, seg)).max())
        w.writerow([repr(float(t))] + [repr(float(a)) for a in np.concatenate((x, dx, d))] + [repr(r)])
    return out.getvalue()
