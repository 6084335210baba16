import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from sddchart import functionals as fl
from sddchart.delays import (
    ConstantDelay, FactorizedDelay, IntegralDelay, StackedDelay, default_shapes, fd_check_delay, tanh_factorized,
)
from sddchart.funcspace import C0Fn, DomainError, GridSpec, constant, from_samples, integrate
from sddchart.probes import random_smooth

G = GridSpec(N=24)


def eta(u, h=1.0):
    return -0.5 * h * (1.0 - np.tanh(u))


def test_shapes_satisfy_their_constraints():
    assert default_shapes(1.0).check(1.0) == []
    assert default_shapes(2.5).check(2.5) == []


def test_integral_delay_at_zero_and_negative():
    d = IntegralDelay(G)
    assert d.value(constant(G, 0.0))[0] == -0.5
    assert d.value(constant(G, -5.0))[0] == -0.5
    assert fl.op_norm(d.ext_derivative(constant(G, -5.0))) == 0.0


def test_integral_delay_at_one_closed_form():
    d = IntegralDelay(G)
    assert d.value(constant(G, 1.0))[0] == pytest.approx(-0.2, abs=1e-14)
    # independent quadrature of p(1) over [-1, 0]
    u = quad(lambda t: np.log1p(1.0), -1.0, 0.0)[0]
    assert d.value(constant(G, 1.0))[0] == pytest.approx(eta(u), abs=1e-14)


def test_integral_delay_converges_to_quadrature():
    # p(phi(t)) has a kink where phi crosses 0, so nodal quadrature converges algebraically
    def phi_fn(t):
        return np.sin(3 * t) + 0.5

    def integrand(t):
        return np.log1p(max(phi_fn(t), 0.0) ** 2)

    roots = [-5 * np.pi / 18, -np.pi / 18]  # sin(3t) = -1/2
    pieces = zip([-1.0] + roots, roots + [0.0])
    u = sum(quad(integrand, a, b, epsabs=1e-15, epsrel=1e-15)[0] for a, b in pieces)
    errors = []
    for N in (24, 48, 96, 192):
        g = GridSpec(N=N)
        errors.append(abs(IntegralDelay(g).value(from_samples(g, phi_fn))[0] - eta(u)))
    assert errors[0] <= 1e-5
    assert errors[-1] <= 1e-7
    assert errors[-1] < errors[1] < errors[0]


def test_integral_delay_closed_form_q_bound():
    for h in (1.0, 2.0):
        d = IntegralDelay(GridSpec(h=h, N=16))
        assert d.q_certified
        assert d.q_bound == pytest.approx(h * h / 2)


def test_constant_delay():
    d = ConstantDelay(-0.5)
    phi = random_smooth(G, np.random.default_rng(0))
    assert d.value(phi)[0] == -0.5
    assert fl.op_norm(d.ext_derivative(phi)) == 0.0
    assert fd_check_delay(d, phi, random_smooth(G, np.random.default_rng(1))) == 0.0
    with pytest.raises(DomainError):
        ConstantDelay(0.5)


def test_factorized_examples():
    w = C0Fn(G, np.ones((1, G.N + 1)))
    const = FactorizedDelay([w], lambda u: -0.3, lambda u: np.zeros(1), q_bound=0.0)
    assert fl.op_norm(const.ext_derivative(random_smooth(G, np.random.default_rng(2)))) == 0.0
    d = tanh_factorized(G)
    assert d.value(constant(G, 0.0))[0] == pytest.approx(-0.5, abs=1e-15)
    # constant on the kernel of the linear part
    kern = from_samples(G, lambda t: np.cos(np.pi * t))
    assert abs(integrate(kern)[0]) < 1e-14
    assert d.value(kern)[0] == pytest.approx(-0.5, abs=1e-14)


def test_fd_check_locally_constant():
    d = IntegralDelay(G)
    chi = random_smooth(G, np.random.default_rng(3), amplitude=0.5)
    assert fd_check_delay(d, constant(G, -1.0), chi) == 0.0


def test_fd_check_integral_quadratic_point():
    d = IntegralDelay(G)
    phi = from_samples(G, lambda t: 1 + t**2 / 2)
    rng = np.random.default_rng(4)
    for _ in range(10):
        assert fd_check_delay(d, phi, random_smooth(G, rng), step=1e-5) <= 1e-6


@pytest.mark.parametrize("kind", ["integral", "constant", "factorized"])
def test_fd_check_random_pairs(kind):
    d = {"integral": IntegralDelay(G), "constant": ConstantDelay(-0.3), "factorized": tanh_factorized(G)}[kind]
    rng = np.random.default_rng(5)
    for _ in range(25):
        phi = random_smooth(G, rng, amplitude=1.5)
        assert fd_check_delay(d, phi, random_smooth(G, rng), step=1e-5) <= 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 5.0))
def test_range_and_q_bound(seed, amp):
    rng = np.random.default_rng(seed)
    phi = random_smooth(G, rng, amplitude=amp, offset=rng.uniform(-1, 1))
    for d in (IntegralDelay(G), tanh_factorized(G)):
        val = d.value(phi)[0]
        assert -1.0 <= val <= 0.0
        assert fl.op_norm(d.ext_derivative(phi)) <= d.q_bound * (1 + 1e-12)


def test_not_constant_on_rays():
    d = IntegralDelay(G)
    phi = from_samples(G, lambda t: np.exp(-((t + 0.5) / 0.15) ** 2))
    eps = 0.1
    assert abs(d.value(eps * phi)[0] - d.value(2 * eps * phi)[0]) > 1e-12


def test_stacked_delay():
    grid = GridSpec(n=2, N=12)
    d = StackedDelay([IntegralDelay(grid, component=0), ConstantDelay(-0.25)])
    phi = from_samples(grid, lambda t: np.vstack((1 + 0 * t, -1 + 0 * t)))
    assert d.k == 2
    assert np.allclose(d.value(phi), [-0.2, -0.25], atol=1e-14)
    assert fl.op_norm(d.ext_derivative(phi, 1)) == 0.0
    with pytest.raises(IndexError):
        d.ext_derivative(phi, 2)
