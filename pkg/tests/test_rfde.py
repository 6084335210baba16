import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.optimize import bisect

from sddchart import functionals as fl
from sddchart.delays import ConstantDelay, IntegralDelay, tanh_factorized
from sddchart.funcspace import DomainError, GridSpec, constant, deriv_at_zero, eval_fn, from_samples
from sddchart.probes import random_in_box, random_smooth
from sddchart.rfde import (
    RegionParams, Df_ext, Dv_ext, ManifoldError, check_feedback_gradient, f, lin_system, m_Dg, m_g, m_v,
    membership_residual, project_to_manifold, project_to_tangent, region_test, s5_feedback, s5_system,
    tangent_residual, transversal_direction, v, zero_system,
)

G = GridSpec(N=24)
S5 = s5_system(G)


def rel(a, b, floor=1e-4):
    return abs(a - b) / max(abs(a), abs(b), floor)


# -- v and f -----------------------------------------------------------------------

def test_v_examples():
    assert v(S5, constant(G, 0.0))[0] == 0.0
    assert v(S5, from_samples(G, lambda t: t))[0] == pytest.approx(-0.5, abs=1e-15)


def test_v_of_shifted_identity_by_quadrature():
    phi = from_samples(G, lambda t: 1 + t)
    u = quad(lambda t: np.log1p((1 + t) ** 2), -1.0, 0.0)[0]
    d = -0.5 * (1 - np.tanh(u))
    # 1 + t is positive on (-1, 0], so the nodal quadrature error is spectral
    assert v(S5, phi)[0] == pytest.approx(1 + d, abs=1e-10)


def test_f_examples():
    assert f(S5, constant(G, 0.0))[0] == -1.0
    for n in range(1, 6):
        assert f(S5, constant(G, -float(n)))[0] == pytest.approx(-(1 + n) ** 2)
    assert f(lin_system(G), constant(G, 0.0))[0] == 0.0
    with pytest.raises(DomainError):
        f(S5, constant(G, 1.0))


def test_feedback_jacobian_matches_differences():
    fb = s5_feedback()
    for y in (-3.0, -0.5, 0.0, 0.7):
        assert check_feedback_gradient(fb, [y]) <= 1e-8


# -- extended derivatives --------------------------------------------------------------

def test_Dv_constant_delay_is_point_evaluation():
    rfde = lin_system(G, ConstantDelay(-0.3))
    phi = random_smooth(G, np.random.default_rng(0))
    L = Dv_ext(rfde, phi, 0)
    assert len(L.locs) == 1 and L.locs[0] == pytest.approx(-0.3) and L.density is None
    chi = random_smooth(G, np.random.default_rng(1))
    assert fl.apply(Df_ext(rfde, phi)[0], chi) == pytest.approx(eval_fn(chi, -0.3)[0], abs=1e-14)


def test_Dv_constant_history_is_point_evaluation():
    phi = constant(G, 0.4)
    L = Dv_ext(S5, phi, 0)
    d = S5.delay.value(phi)[0]
    # phi' vanishes up to the roundoff of spectral differentiation
    assert fl.op_norm(fl.add(L, fl.scale(-1.0, fl.unit_atom(G, d, 0)))) <= 1e-13


def test_Dv_finite_difference_at_quadratic_point():
    phi = from_samples(G, lambda t: 1 + t**2 / 2)
    rng = np.random.default_rng(2)
    step = 1e-5
    for _ in range(10):
        chi = random_smooth(G, rng)
        fd = (v(S5, phi + step * chi)[0] - v(S5, phi - step * chi)[0]) / (2 * step)
        assert rel(fl.apply(Dv_ext(S5, phi, 0), chi), fd) <= 1e-6


def test_Df_finite_difference():
    # 1 + t^2/2 has v >= 1, outside V; shift it into V
    phi = from_samples(G, lambda t: 0.5 + t**2 / 2)
    rng = np.random.default_rng(3)
    step = 1e-5
    for _ in range(10):
        chi = random_smooth(G, rng)
        fd = (f(S5, phi + step * chi)[0] - f(S5, phi - step * chi)[0]) / (2 * step)
        assert rel(fl.apply(Df_ext(S5, phi)[0], chi), fd) <= 1e-6


@pytest.mark.parametrize("delay", ["integral", "constant", "factorized"])
def test_Df_finite_difference_random_points(delay):
    d = {"integral": IntegralDelay(G), "constant": ConstantDelay(-0.5), "factorized": tanh_factorized(G)}[delay]
    rfde = lin_system(G, d)
    rng = np.random.default_rng(4)
    step = 1e-5
    for _ in range(20):
        phi = random_smooth(G, rng, amplitude=1.5)
        chi = random_smooth(G, rng)
        fd = (f(rfde, phi + step * chi)[0] - f(rfde, phi - step * chi)[0]) / (2 * step)
        assert rel(fl.apply(Df_ext(rfde, phi)[0], chi), fd) <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_Dv_norm_bounded_by_one_plus_m_v(seed):
    phi = random_smooth(G, np.random.default_rng(seed), amplitude=2.0)
    assert fl.op_norm(Dv_ext(S5, phi, 0)) <= 1.0 + m_v(S5, phi) + 1e-12


def test_Df_grows_along_negative_constants():
    norms = [fl.op_norm(Df_ext(S5, constant(G, -float(n)))[0]) for n in range(1, 11)]
    assert all(nrm >= 2 * (1 + n) for n, nrm in zip(range(1, 11), norms))
    assert all(b > a for a, b in zip(norms, norms[1:]))


# -- bound functions ------------------------------------------------------------------

def test_bound_functions():
    assert m_g(S5, [0.0]) == 1.0
    assert m_Dg(S5, [0.0]) == 2.0
    assert m_v(S5, constant(G, -0.7)) == 0.0
    assert m_v(S5, from_samples(G, lambda t: t)) == 0.0


# -- manifold ---------------------------------------------------------------------------

def test_membership_residual_examples():
    assert membership_residual(lin_system(G), constant(G, 0.0))[0] == 0.0
    assert membership_residual(S5, constant(G, 0.0))[0] == 1.0


def test_transversal_direction():
    rho = transversal_direction(G)
    assert eval_fn(rho, 0.0)[0] == 0.0
    assert deriv_at_zero(rho)[0] == pytest.approx(1.0, abs=1e-12)


def test_project_to_manifold_fixed_point():
    phi = constant(G, 0.0)
    assert project_to_manifold(lin_system(G), phi) is phi


def test_project_to_manifold_matches_bisection():
    phi0 = constant(G, 0.0)
    phi = project_to_manifold(S5, phi0)
    assert abs(membership_residual(S5, phi)[0]) <= 1e-10
    rho = transversal_direction(G)

    def r(s):
        return s * deriv_at_zero(rho)[0] - f(S5, phi0 + s * rho)[0] + deriv_at_zero(phi0)[0]

    s_oracle = bisect(r, -5.0, 0.0, xtol=1e-14)
    s = (phi.values[0, 0] - phi0.values[0, 0]) / rho.values[0, 0]
    assert s == pytest.approx(s_oracle, abs=1e-10)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_projection_lands_on_manifold(seed):
    phi0 = random_in_box(G, np.random.default_rng(seed), -1.0, 0.5)
    phi = project_to_manifold(S5, phi0)
    assert abs(membership_residual(S5, phi)[0]) <= 1e-10


def test_tangent_projection():
    phi = project_to_manifold(S5, from_samples(G, lambda t: 0.3 * np.sin(2 * t) + 0.2))
    assert tangent_residual(S5, phi, constant(G, 0.0)) == 0.0
    psi = project_to_tangent(S5, phi, random_smooth(G, np.random.default_rng(6)))
    assert tangent_residual(S5, phi, psi) <= 1e-10
    with pytest.raises(ManifoldError):
        tangent_residual(S5, constant(G, 0.0), psi)


def test_tangent_residual_detects_non_tangency():
    r, omega = -0.5, 3.0
    rfde = lin_system(G, ConstantDelay(r))
    psi = from_samples(G, lambda t: np.cos(omega * t))
    assert tangent_residual(rfde, constant(G, 0.0), psi) == pytest.approx(abs(np.cos(omega * r)), abs=1e-10)


# -- regions --------------------------------------------------------------------------

def test_region_examples():
    assert region_test(S5, RegionParams.Uc(0.01), constant(G, -0.3))
    out = region_test(S5, RegionParams.Uc(1.0), constant(G, 1.0))
    assert not out and "not in U" in out.reason


def test_region_parameter_validation():
    with pytest.raises(ValueError):
        RegionParams.Uc(0.0)
    with pytest.raises(ValueError):
        RegionParams.Uqbd(1.0, 1.0, 1.5)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_region_nesting(seed):
    rng = np.random.default_rng(seed)
    phi = random_in_box(G, rng, -0.8, 0.6, slope=1.2)
    small, large = RegionParams.Uc(0.05), RegionParams.Uc(0.5)
    if region_test(S5, small, phi):
        assert region_test(S5, large, phi)
    q = RegionParams.Uqbd(1.0, 1.0, 0.2)
    if region_test(S5, q, phi):
        assert region_test(S5, RegionParams.Uc(q.c_equiv), phi)


def test_zero_system():
    rfde = zero_system(G)
    phi = random_smooth(G, np.random.default_rng(7))
    assert f(rfde, phi)[0] == 0.0
    assert fl.op_norm(Df_ext(rfde, phi)[0]) == 0.0
