"""The regularizing chart ``A = id - R`` with ``R_nu(phi) = g_nu(v(phi)) tau(v(phi))``.

``A`` sends the solution manifold ``phi'(0) = f(phi)`` into the flat subspace
``phi'(0) = 0``.  Inversion of ``A`` and of its extended derivative uses plain
fixed-point iteration; both maps are contractions with factor at most the
chart budget on the declared region.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functionals as fl
from .funcspace import C0Fn, C1Fn, DomainError, GridMismatch, _ops, c1_norm, sup_norm
from .probes import random_smooth
from .rfde import (RFDE, Dv_ext, RegionParams, RegionResult, m_Dg, m_g, m_v, region_test, v)
from .transversal import ConstantOnBox, ScalingFn, SmoothEnvelope, TransversalFamily

_VARIANTS = {"Uc": "Hc", "Uqbd": "Hqbd"}


class InversionError(RuntimeError):
    """Fixed-point inversion failed; ``last`` holds the last iterate."""

    def __init__(self, msg: str, last=None, iterations: int = 0):
        super().__init__(msg)
        self.last = last
        self.iterations = iterations


@dataclass(frozen=True)
class Chart:
    rfde: RFDE
    transversal: TransversalFamily
    params: RegionParams
    budget: float

    def __post_init__(self):
        if not 0 < self.budget < 1:
            raise ValueError(f"budget must lie in (0, 1), got {self.budget}")
        scaling = self.transversal.scaling
        if scaling.variant != _VARIANTS[self.params.variant]:
            raise ValueError(f"{scaling.variant} transversal does not match a {self.params.variant} region")
        if abs(scaling.budget - self.budget) > 1e-15 or abs(scaling.c - self.params.c_equiv) > 1e-15:
            raise ValueError("transversal scaling was built for a different budget or region")
        tg, g = self.transversal.grid, self.rfde.grid
        if tg.N != g.N or tg.h != g.h:
            raise GridMismatch(f"transversal grid {tg} vs system grid {g}")

    @property
    def grid(self):
        return self.rfde.grid


def build_chart(rfde: RFDE, params: RegionParams, budget: float, mode: str = "box",
                lo=None, hi=None, samples=None, **kw) -> Chart:
    """Chart with a ``ConstantOnBox`` (``mode="box"``, needs ``lo``/``hi``) or
    ``SmoothEnvelope`` (``mode="envelope"``, needs ``samples``) transversal."""
    fb = rfde.feedback
    if params.variant == "Uc":
        scaling = ScalingFn.Hc(fb, budget, params.c)
    else:
        scaling = ScalingFn.Hqbd(fb, budget, params.q, params.b)
    if mode == "box":
        fam = ConstantOnBox(scaling, rfde.grid, lo, hi, **kw)
    elif mode == "envelope":
        fam = SmoothEnvelope(scaling, rfde.grid, samples, **kw)
    else:
        raise ValueError(f"unknown transversal mode {mode!r}")
    return Chart(rfde, fam, params, budget)


def _outer(grid, coeffs, row) -> C1Fn:
    return C1Fn(grid, np.outer(coeffs, row))


def remainder(chart: Chart, phi: C1Fn) -> C1Fn:
    y = v(chart.rfde, phi)
    chart.rfde.feedback.check_domain(y)
    g = chart.rfde.feedback(y)
    tau = chart.transversal.tau(y)
    return _outer(phi.grid, g, tau.values[0])


def apply_chart(chart: Chart, phi: C1Fn) -> C1Fn:
    return phi - remainder(chart, phi)


@dataclass(frozen=True)
class RemainderDerivative:
    """``D_e R(phi)`` as the finite-rank map ``chi -> sum_mu L_mu(chi) w_mu``
    with ``L_mu = D_e v_mu(phi)`` and
    ``w_mu = dg/dy_mu tau(y) + g(y) D_mu tau(y)``."""

    funcs: tuple
    profiles: np.ndarray  # (kn, n, N+1)

    def coefficients(self, chi: C0Fn) -> np.ndarray:
        return np.array([fl.apply(L, chi) for L in self.funcs])

    def __call__(self, chi: C0Fn) -> C1Fn:
        a = self.coefficients(chi)
        return C1Fn(chi.grid, np.tensordot(a, self.profiles, axes=1))


def linearize(chart: Chart, phi: C1Fn) -> RemainderDerivative:
    rfde = chart.rfde
    y = v(rfde, phi)
    rfde.feedback.check_domain(y)
    g = rfde.feedback(y)
    J = rfde.feedback.jacobian(y)
    tau = chart.transversal.tau(y).values[0]
    funcs, profiles = [], []
    for mu in range(rfde.k * rfde.n):
        funcs.append(Dv_ext(rfde, phi, mu))
        dtau = chart.transversal.Dtau(y, mu).values[0]
        profiles.append(np.outer(J[:, mu], tau) + np.outer(g, dtau))
    return RemainderDerivative(tuple(funcs), np.array(profiles))


def DR_ext(chart: Chart, phi: C1Fn, chi: C0Fn) -> C1Fn:
    """Extended derivative of the remainder at ``phi`` applied to ``chi``."""
    if chi.grid != phi.grid:
        raise GridMismatch(f"direction grid {chi.grid} vs point grid {phi.grid}")
    return linearize(chart, phi)(chi)


def apply_DA(chart: Chart, phi: C1Fn, chi: C0Fn) -> C0Fn:
    dr = DR_ext(chart, phi, chi)
    return type(chi)(chi.grid, chi.values - dr.values)


# -- smallness ---------------------------------------------------------------

def analytic_bound(chart: Chart, phi: C1Fn) -> float:
    """``k n^2 (1 + m_v) (m_Dg |tau| + m_g max_mu |D_mu tau|)`` at ``phi``."""
    rfde = chart.rfde
    y = v(rfde, phi)
    tau = chart.transversal.tau(y)
    dtau = max(sup_norm(chart.transversal.Dtau(y, mu)) for mu in range(rfde.k * rfde.n))
    return rfde.k * rfde.n**2 * (1.0 + m_v(rfde, phi)) * (
        m_Dg(rfde, y) * sup_norm(tau) + m_g(rfde, y) * dtau)


def _targeted_probes(chart: Chart, phi: C1Fn) -> list[C0Fn]:
    # continuous functions aligned with the signs of each Dv functional
    grid = phi.grid
    out = [C0Fn(grid, np.ones((grid.n, grid.N + 1))), C0Fn(grid, -np.ones((grid.n, grid.N + 1)))]
    t = grid.nodes
    for mu in range(chart.rfde.k * chart.rfde.n):
        L = Dv_ext(chart.rfde, phi, mu)
        vals = np.zeros((grid.n, grid.N + 1)) if L.density is None else np.sign(L.density)
        for loc, w in zip(L.locs, L.weights):
            j = int(np.argmin(np.abs(t - loc)))
            vals[:, j] = np.where(w != 0, np.sign(w), vals[:, j])
        if not np.any(vals):
            continue
        chi = C0Fn(grid, vals)
        chi = chi * (1.0 / sup_norm(chi))
        out.extend([chi, -chi])
    return out


def _probe_norm(lin: RemainderDerivative, chis) -> float:
    # rank by the oversampled maximum, then refine the leaders
    E = _ops(chis[0].grid).E
    norms = [sup_norm(chi) for chi in chis]
    rough = []
    for chi, nrm in zip(chis, norms):
        img = np.tensordot(lin.coefficients(chi), lin.profiles, axes=1)
        rough.append(np.abs(img @ E.T).max() / nrm)
    best = 0.0
    for i in np.argsort(rough)[-3:]:
        best = max(best, sup_norm(lin(chis[i])) / norms[i])
    return best


@dataclass
class SmallnessReport:
    sup_remainder: float
    op_estimate: float
    analytic: float
    region: RegionResult
    budget: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = bool(self.region) and self.sup_remainder < self.budget and \
            self.op_estimate <= self.budget and self.analytic <= self.budget

    def to_dict(self) -> dict:
        return {"sup_remainder": self.sup_remainder, "op_estimate": self.op_estimate,
                "analytic": self.analytic, "inside": bool(self.region), "reason": self.region.reason,
                "budget": self.budget, "passed": self.passed}


def smallness_check(chart: Chart, phi: C1Fn, rng: np.random.Generator | None = None,
                    probes: int = 64) -> SmallnessReport:
    """Compare ``|R(phi)|`` and a probed operator norm of ``D_e R(phi)`` with
    the budget.  The probe maximum is a lower estimate of the norm; the
    analytic bound is an upper one."""
    rng = np.random.default_rng(0) if rng is None else rng
    region = region_test(chart.rfde, chart.params, phi)
    try:
        sup_r = sup_norm(remainder(chart, phi))
        chis = [random_smooth(phi.grid, rng) for _ in range(probes)] + _targeted_probes(chart, phi)
        op = _probe_norm(linearize(chart, phi), chis)
        bound = float(analytic_bound(chart, phi))
    except DomainError as exc:
        return SmallnessReport(np.inf, np.inf, np.inf, RegionResult(False, str(exc)), chart.budget)
    return SmallnessReport(sup_r, op, bound, region, chart.budget)


# -- inversion ---------------------------------------------------------------

@dataclass
class FixedPointResult:
    value: C0Fn
    iterations: int
    contraction: float
    error_sup: float
    error_c1: float

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "contraction": self.contraction,
                "error_sup": self.error_sup, "error_c1": self.error_c1}


def _ratio(prev: float, step: float, floor: float) -> float | None:
    # successive increments below the roundoff floor carry no information
    if prev <= floor or step <= floor:
        return None
    return step / prev


def invert_chart(chart: Chart, zeta: C1Fn, guess: C1Fn | None = None, tol: float = 1e-10,
                 max_iter: int = 200, check_region: bool = True) -> FixedPointResult:
    """Solve ``A(phi) = zeta`` by ``phi <- zeta + R(phi)``.

    Every iterate must stay in the chart's region.  The contraction factor is
    the largest ratio of successive sup-norm increments.
    """
    phi = zeta if guess is None else guess
    floor = 1e3 * np.finfo(float).eps * (1.0 + sup_norm(zeta))
    prev, factor = None, 0.0
    for it in range(1, max_iter + 1):
        if check_region:
            res = region_test(chart.rfde, chart.params, phi)
            if not res:
                raise InversionError(f"iterate {it - 1} left the region: {res.reason}", phi, it - 1)
        try:
            nxt = zeta + remainder(chart, phi)
        except DomainError as exc:
            raise InversionError(f"iterate {it - 1} left U: {exc}", phi, it - 1) from exc
        step = sup_norm(nxt - phi)
        if prev is not None:
            r = _ratio(prev, step, floor)
            if r is not None:
                factor = max(factor, r)
        prev = step
        phi = nxt
        if step <= tol:
            err = apply_chart(chart, phi) - zeta
            return FixedPointResult(phi, it, factor, sup_norm(err), c1_norm(err))
    raise InversionError(f"no convergence in {max_iter} iterations (last step {prev:.3g})", phi, max_iter)


def solve_DA(chart: Chart, phi: C1Fn, psi: C0Fn, tol: float = 1e-10, max_iter: int = 200) -> FixedPointResult:
    """Solve ``chi - D_e R(phi) chi = psi`` by ``chi <- psi + D_e R(phi) chi``."""
    chi = psi
    floor = 1e3 * np.finfo(float).eps * (1.0 + sup_norm(psi))
    prev, factor = None, 0.0
    for it in range(1, max_iter + 1):
        dr = DR_ext(chart, phi, chi)
        nxt = type(psi)(psi.grid, psi.values + dr.values)
        step = sup_norm(nxt - chi)
        if prev is not None:
            r = _ratio(prev, step, floor)
            if r is not None:
                factor = max(factor, r)
        prev = step
        chi = nxt
        if step <= tol:
            err = apply_DA(chart, phi, chi) - psi
            return FixedPointResult(chi, it, factor, sup_norm(err), c1_norm(err))
    raise InversionError(f"no convergence in {max_iter} iterations (last step {prev:.3g})", chi, max_iter)


# -- injectivity surrogate -----------------------------------------------------

@dataclass
class BiLipschitzReport:
    lhs: float
    rhs: float
    margin: float
    applicable: bool
    passed: bool
    reason: str = ""

    def to_dict(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "margin": self.margin,
                "applicable": self.applicable, "passed": self.passed, "reason": self.reason}


def bilipschitz_lower(chart: Chart, phi: C1Fn, psi: C1Fn, samples: int = 33,
                      subset=None) -> BiLipschitzReport:
    """Test ``|A phi - A psi| >= (1 - budget) |phi - psi|`` (sup norms).

    The segment from phi to psi is sampled at ``samples`` points and each
    point must lie in the region (and in ``subset``, a predicate returning a
    reason string or None, when given); otherwise the pair is inapplicable.
    """
    for s in np.linspace(0.0, 1.0, samples):
        pt = phi + s * (psi - phi)
        res = region_test(chart.rfde, chart.params, pt)
        reason = None if res else res.reason
        if reason is None and subset is not None:
            reason = subset(pt)
        if reason is not None:
            return BiLipschitzReport(np.nan, np.nan, np.nan, False, False, f"segment at s={s:.4g}: {reason}")
    lhs = sup_norm(apply_chart(chart, phi) - apply_chart(chart, psi))
    rhs = sup_norm(phi - psi)
    margin = lhs - (1.0 - chart.budget) * rhs
    return BiLipschitzReport(lhs, rhs, margin, True, bool(margin >= -1e-12))
