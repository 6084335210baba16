"""Acceptance suite at full probe counts on the default S5 scenario."""
import time

import pytest

from sddchart import harness as hs


@pytest.fixture(scope="module")
def sc():
    return hs.Scenario()


@pytest.fixture(scope="module")
def chart(sc):
    return hs.uc_chart(sc)


def by_name(recs):
    return {r.name: r for r in recs}


def summary(recs):
    return "; ".join(f"{r.name}={r.measured:.3g}" if r.measured is not None else f"{r.name}=n/a" for r in recs)


def test_criterion_1_derivative_fidelity(sc, verdict):
    t0 = time.perf_counter()
    recs = hs.check_delay_derivatives(sc) + hs.check_rfde_derivatives(sc)
    kinds = {r.name.split("_", 1)[1] for r in recs}
    ok = (kinds == {"integral", "constant", "factorized"} and len(recs) == 9 and sc.probes.fd == 100
          and all(r.measured <= 1e-6 for r in recs)
          and sc.tolerances.fd_step == 1e-5)
    verdict(1, "extended derivatives vs central differences", ok,
            f"{summary(recs)} ({time.perf_counter() - t0:.1f}s)")
    assert ok


def test_criterion_2_transversal(sc, chart, verdict):
    recs = by_name(hs.check_transversal(sc, chart))
    ok = (sc.probes.transversal == 100 and recs["slope_at_zero"].measured <= 1e-10
          and recs["tau_le_H"].measured <= 1.0 and recs["Dtau_le_H"].measured <= 1.0)
    verdict(2, "transversal slope and size on the box", ok, summary(recs.values()))
    assert ok


def test_criterion_3_smallness(sc, chart, verdict):
    recs = by_name(hs.check_smallness(sc, chart))
    eps = chart.budget
    ok = (eps == 0.5 and sc.chart.c == 1.0 and sc.probes.smallness == 100
          and all(r.passed for r in recs.values())
          and recs["Uc_sup_R"].measured < eps and recs["Uc_op_DR"].measured <= eps
          and recs["Uc_analytic"].measured <= eps)
    verdict(3, "remainder smallness on U_c", ok, summary(recs.values()) + f" (eps={eps})")
    assert ok


def test_criterion_4_flattening(sc, chart, verdict):
    recs = by_name(hs.check_flattening(sc, chart))
    ok = (sc.probes.manifold == 50 and "50 manifold points" in recs["flatten"].note
          and recs["flatten"].measured <= 1e-8 and recs["fixed_points_LIN"].measured <= 1e-12)
    verdict(4, "chart flattening and fixed points", ok, summary(recs.values()))
    assert ok


def test_criterion_5_inversion(sc, chart, verdict):
    recs = by_name(hs.check_inversion(sc, chart))
    ok = (sc.probes.roundtrip == 100 and "100 probes, 0 inversion" in recs["roundtrip"].note and all(r.passed for r in recs.values())
          and recs["roundtrip"].measured <= 1e-9 and recs["contraction"].measured <= chart.budget + 0.05
          and recs["solve_DA_roundtrip"].measured <= 1e-9)
    verdict(5, "chart inversion round trips", ok, summary(recs.values()))
    assert ok


def test_criterion_6_bilipschitz(sc, chart, verdict):
    t0 = time.perf_counter()
    recs = by_name(hs.check_bilipschitz(sc, chart))
    ok = (sc.probes.pairs == 200 and all(r.note.startswith("200/200 applicable") for r in recs.values()) and all(r.passed for r in recs.values())
          and all(r.measured >= 0.0 for r in recs.values()))
    verdict(6, "bi-Lipschitz lower bound on pairs", ok,
            summary(recs.values()) + f" (min margins; {time.perf_counter() - t0:.1f}s)")
    assert ok


def test_criterion_7_demonstrations(sc, verdict):
    rep, rows = hs.demo_conditions(sc)
    recs = by_name(rep.records)
    norms = [r["op_norm"] for r in rows]
    ok = (sc.demo.eps == 0.1 and recs["I_ray_nonconstant"].measured > 1e-12
          and recs["II_not_bounded_away"].measured > 1e-10 and recs["II_not_bounded_away"].passed
          and [r["n"] for r in rows] == list(range(1, 11))
          and all(r["op_norm"] >= 2.0 * (1 + r["n"]) for r in rows)
          and all(b > a for a, b in zip(norms, norms[1:])))
    verdict(7, "violated regularity conditions", ok,
            f"gap I={recs['I_ray_nonconstant'].measured:.3g}; gap II={recs['II_not_bounded_away'].measured:.3g}; "
            f"op norms {norms[0]:.3g}..{norms[-1]:.3g}")
    assert ok


def test_criterion_8_flow(sc, verdict):
    recs = by_name(hs.check_flow(sc))
    ok = (sc.flow.T == 1.0 and sc.flow.dt == 1e-3 and "flow_run" not in recs
          and recs["flow_residual"].measured <= 1e-5 and recs["flatten_along_flow"].passed
          and recs["flatten_along_flow"].measured <= 1e-5 and recs["order_halving"].measured >= 4.0
          and recs["exp_benchmark"].measured <= 1e-6 and recs["exp_benchmark"].passed)
    verdict(8, "flow residual, order and benchmark", ok, summary(recs.values()))
    assert ok


def test_criterion_9_negative_controls(sc, verdict):
    recs = hs.negative_controls(sc)
    detected = [r for r in recs if r.expect_fail and not r.passed]
    names = {r.name for r in detected}
    required = {"eps_too_large_op_DR", "outside_Uc_op_DR", "lambda_too_small"}
    ok = len(detected) >= 3 and required <= names and len(detected) == len(recs)
    verdict(9, "negative controls detected", ok, f"{len(detected)}/{len(recs)}: {', '.join(sorted(names))}")
    assert ok
