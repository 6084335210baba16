import json
import pathlib
import subprocess
import sys

from sddchart.cli import main

SCENARIOS = pathlib.Path(__file__).resolve().parents[1] / "scenarios"
QUICK = ["--set", "probes.fd=5", "--set", "probes.transversal=5", "--set", "probes.smallness=4",
         "--set", "probes.op_probes=8", "--set", "probes.manifold=4", "--set", "probes.fixed_points=3",
         "--set", "probes.roundtrip=4", "--set", "probes.pairs=4", "--set", "probes.nesting=4",
         "--set", "flow.T=0.3"]


def read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0] == "# schema=1"
    header = lines[1].split(",")
    return header, [dict(zip(header, row.split(","))) for row in lines[2:]]


def test_missing_scenario_is_config_error(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["check", "--scenario", str(tmp_path / "nope.toml"), "--out", str(out)]) == 2
    assert "config error" in capsys.readouterr().err
    assert not out.exists()


def test_bad_override_and_output_path(tmp_path):
    out = tmp_path / "out"
    assert main(["demo5", "--out", str(out), "--set", "chart.eps=2"]) == 2
    assert main(["demo5", "--out", str(out), "--set", "bogus"]) == 2
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["demo5", "--out", str(blocker)]) == 2
    assert not out.exists()


def test_unrealizable_parameters_write_nothing(tmp_path):
    # a huge c shrinks H until the chart grid cannot resolve the transversal
    out = tmp_path / "out"
    assert main(["chart", "--out", str(out), "--set", "chart.c=50"]) == 2
    assert not out.exists()


def test_usage_errors():
    assert main([]) == 2
    assert main(["frobnicate"]) == 2


def test_demo5(tmp_path):
    out = tmp_path / "demo"
    assert main(["demo5", "--scenario", str(SCENARIOS / "s5.toml"), "--out", str(out), "--quiet"]) == 0
    header, rows = read_csv(out / "demo5.csv")
    assert header == ["n", "op_norm", "lower_bound"]
    norms = [float(r["op_norm"]) for r in rows]
    assert len(norms) == 10 and all(b > a for a, b in zip(norms, norms[1:]))
    report = json.loads((out / "report.json").read_text())
    assert report["ok"] and report["seed"] == 1


def test_seed_flag_recorded(tmp_path):
    out = tmp_path / "seeded"
    assert main(["demo5", "--out", str(out), "--seed", "12345678901234567890", "--quiet"]) == 0
    assert json.loads((out / "report.json").read_text())["seed"] == 12345678901234567890


def test_chart_subcommand(tmp_path):
    out = tmp_path / "chart"
    assert main(["chart", "--out", str(out), "--quiet", "--set", "probes.roundtrip=6"]) == 0
    header, rows = read_csv(out / "chart.csv")
    assert header == ["probe", "fixed_point_error", "flatten_residual", "roundtrip_error", "contraction"]
    assert len(rows) == 6
    assert all(float(r["roundtrip_error"]) <= 1e-9 and float(r["contraction"]) <= 0.55 for r in rows)


def test_flow_subcommand(tmp_path):
    out = tmp_path / "flow"
    assert main(["flow", "--out", str(out), "--quiet", "--set", "flow.T=0.2", "--set", "flow.every=50"]) == 0
    header, rows = read_csv(out / "flow.csv")
    assert header == ["t", "x_1", "dx_1", "d_1", "residual"]
    assert len(rows) == 4
    assert all(float(r["residual"]) <= 1e-5 for r in rows)


def test_check_lin_zero_passes(tmp_path):
    out = tmp_path / "linz"
    code = main(["check", "--scenario", str(SCENARIOS / "lin_zero.toml"), "--out", str(out), "--quiet"] + QUICK)
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["ok"] and report["summary"]["controls_detected"] >= 3
    assert (out / "report.csv").read_text().startswith("# schema=1")


def test_check_failure_exit_code(tmp_path):
    out = tmp_path / "broken"
    code = main(["check", "--scenario", str(SCENARIOS / "broken.toml"), "--out", str(out), "--quiet"] + QUICK
                + ["--set", "probes.smallness=30"])
    assert code == 1
    report = json.loads((out / "report.json").read_text())
    bad = [r for r in report["records"] if not r["as_expected"]]
    assert any(r["family"] == "smallness" and "m_v" in r["note"] for r in bad)


def test_module_entry_point(tmp_path):
    out = tmp_path / "m"
    proc = subprocess.run([sys.executable, "-m", "sddchart", "demo5", "--out", str(out)],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "-> OK" in proc.stdout
