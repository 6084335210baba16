import json
import pathlib

import numpy as np
import pytest

from sddchart import harness as hs
from sddchart.funcspace import sup_norm

SCENARIOS = pathlib.Path(__file__).resolve().parents[1] / "scenarios"


def small(sc=None, *extra):
    """A scenario with reduced probe counts for quick unit runs."""
    counts = ["probes.fd=8", "probes.transversal=8", "probes.smallness=6", "probes.op_probes=8",
              "probes.manifold=5", "probes.fixed_points=3", "probes.roundtrip=5", "probes.pairs=6",
              "probes.nesting=5"]
    return hs.apply_overrides(sc or hs.Scenario(), counts + list(extra))


# -- scenarios ---------------------------------------------------------------------

def test_shipped_scenarios_load():
    names = {p.name: hs.load_scenario(str(p)) for p in SCENARIOS.iterdir() if p.suffix in (".toml", ".json")}
    assert {"s5.toml", "lin.toml", "lin_zero.toml", "broken.toml", "s5.json"} <= set(names)
    assert names["lin_zero.toml"].system.feedback == "zero"
    assert names["broken.toml"].chart.eps == 0.99


def test_json_equivalent_to_toml(tmp_path):
    toml = tmp_path / "a.toml"
    toml.write_text('name = "x"\nseed = 5\n[chart]\neps = 0.4\nlo = [-0.5]\nhi = [0.5]\n[flow]\ndt = 5e-4\n')
    js = tmp_path / "a.json"
    js.write_text(json.dumps({"name": "x", "seed": 5, "chart": {"eps": 0.4, "lo": [-0.5], "hi": [0.5]},
                              "flow": {"dt": 5e-4}}))
    assert hs.load_scenario(str(toml)).to_dict() == hs.load_scenario(str(js)).to_dict()


def test_overrides():
    sc = hs.apply_overrides(hs.Scenario(), ["chart.eps=0.4", "seed=9", "chart.lo=[-0.5]", "system.tag=\"LIN\"",
                                             "system.delay=constant", "controls.enabled=false"])
    assert sc.chart.eps == 0.4 and sc.seed == 9 and sc.chart.lo == [-0.5]
    assert sc.system.tag == "LIN" and sc.system.delay == "constant" and sc.controls.enabled is False
    assert hs.Scenario().chart.eps == 0.5  # the input is not modified


@pytest.mark.parametrize("bad", [
    "chart.eps=1.5", "tolerances.flatten=0", "tolerances.flatten=-1e-3", "nosuch.key=1", "chart.nokey=1",
    "chart.eps=abc", "probes.fd=1.5", "system.tag=\"XYZ\"", "seed=-1", "flow.dt=0", "noequals",
])
def test_invalid_overrides(bad):
    with pytest.raises(hs.ConfigError):
        hs.apply_overrides(hs.Scenario(), [bad])


def test_bad_files(tmp_path):
    with pytest.raises(hs.ConfigError):
        hs.load_scenario(str(tmp_path / "missing.toml"))
    broken = tmp_path / "b.toml"
    broken.write_text("[chart\neps = 0.5\n")
    with pytest.raises(hs.ConfigError):
        hs.load_scenario(str(broken))
    unknown = tmp_path / "c.toml"
    unknown.write_text("[chart]\nbogus = 1\n")
    with pytest.raises(hs.ConfigError):
        hs.load_scenario(str(unknown))


# -- reports ----------------------------------------------------------------------------

def test_record_expectations():
    ok = hs._record("a", "f", {}, 1.0, 2.0, True)
    control = hs._record("b", "f", {}, 3.0, 2.0, False, expect_fail=True)
    missed = hs._record("c", "f", {}, 1.0, 2.0, True, expect_fail=True)
    rep = hs.Report("s", 1, [ok, control])
    assert rep.ok and rep.summary["controls_detected"] == 1
    rep.add(missed)
    assert not rep.ok and rep.summary["unexpected"] == 1


def test_report_formats_carry_seed_and_schema():
    rep = hs.Report("demo", 42, [hs._record("a", "f", {"x": 1}, np.float64(0.5), 1.0, True, "n")])
    data = json.loads(rep.to_json())
    assert data["seed"] == 42 and data["ok"] is True
    assert data["records"][0]["measured"] == 0.5
    assert rep.to_csv().startswith("# schema=1\nname,family,digest,")


def test_suite_is_deterministic():
    sc = small()
    a = hs.run_suite(sc, families=["funcspace", "derivatives", "smallness"])
    b = hs.run_suite(sc, families=["funcspace", "derivatives", "smallness"])
    assert a.to_json() == b.to_json() and a.to_csv() == b.to_csv()
    c = hs.run_suite(hs.apply_overrides(sc, ["seed=2"]), families=["smallness"])
    assert c.to_json() != hs.Report(sc.name, sc.seed, a.family("smallness")).to_json()


# -- check families ---------------------------------------------------------------------

def test_zero_feedback_scenario_passes_trivially():
    sc = small(hs.load_scenario(str(SCENARIOS / "lin_zero.toml")))
    rep = hs.run_suite(sc, families=["derivatives", "transversal", "smallness", "chart", "inversion", "regions"])
    assert rep.ok, rep.lines()
    for x in rep.family("smallness"):
        assert x.measured == 0.0


def test_s5_quick_families_pass():
    rep = hs.run_suite(small(), families=["funcspace", "derivatives", "transversal", "smallness", "chart",
                                          "inversion", "bilipschitz", "regions"])
    assert rep.ok, rep.lines()
    assert len(rep.records) >= 20


def test_broken_scenario_reports_region_diagnosis():
    sc = hs.load_scenario(str(SCENARIOS / "broken.toml"))
    recs = hs.check_smallness(sc)
    assert recs and all(not r.passed for r in recs)
    assert all("outside region" in r.note and "m_v" in r.note for r in recs)


def test_negative_controls_detected():
    recs = hs.negative_controls(hs.Scenario())
    assert len(recs) >= 3
    assert all(r.expect_fail and not r.passed for r in recs)
    names = {r.name for r in recs}
    assert {"eps_too_large_op_DR", "outside_Uc_op_DR", "lambda_too_small"} <= names


def test_demonstrations():
    rep, rows = hs.demo_conditions(hs.Scenario())
    assert rep.ok
    assert [r["n"] for r in rows] == list(range(1, 11))
    assert rows[0]["lower_bound"] == 4.0
    assert rows[0]["op_norm"] >= 4.0
    norms = [r["op_norm"] for r in rows]
    assert all(b > a for a, b in zip(norms, norms[1:]))
    assert hs.demo_csv(rows).splitlines()[:2] == ["# schema=1", "n,op_norm,lower_bound"]


def test_demo_II_pair_structure():
    sc = hs.Scenario()
    r = hs.demo_II(sc)
    assert r["gap"] > 1e-10
    assert r["min_slope"] > 0
    assert r["agreement"] <= sc.tolerances.demo_agreement


def test_probe_helpers_respect_region():
    sc = hs.Scenario()
    chart = hs.uc_chart(sc)
    rng = hs.family_rng(sc, "test")
    phi = hs.uc_probe(sc, chart, rng)
    assert sup_norm(phi) < 0.9
    check = hs.convex_subset(sc.chart.probe_lo, sc.chart.probe_hi, sc.chart.probe_slope)
    assert check(phi) is None
