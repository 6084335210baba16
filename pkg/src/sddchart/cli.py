"""Command-line entry point.

    sddchart check  --scenario s5.toml --out out/
    sddchart chart  --scenario s5.toml --set chart.eps=0.4
    sddchart flow   --scenario s5.toml --set flow.dt=5e-4
    sddchart demo5  --scenario s5.toml
    sddchart all    --scenario s5.toml

Exit status: 0 when every check behaved as expected, 1 when some check
failed, 2 on configuration errors (nothing is written in that case).
"""
from __future__ import annotations

import argparse
import csv
import io
import os
import sys

import numpy as np

from . import harness as hs
from .chart import InversionError, apply_chart, invert_chart
from .ddesolver import sample_times, to_csv
from .funcspace import DomainError, deriv_at_zero, sup_norm
from .rfde import lin_system


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sddchart", description="Chart and flow checks for state-dependent delay equations.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", metavar="PATH", help="TOML (or .json) scenario; built-in S5 defaults if omitted")
    common.add_argument("--out", metavar="DIR", help="output directory (default: the scenario's 'out')")
    common.add_argument("--seed", type=int, metavar="U64", help="override the scenario seed")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a scenario entry, e.g. chart.eps=0.4 (repeatable)")
    common.add_argument("--quiet", action="store_true", help="only print the summary line")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (("check", "run the verification suite"),
                       ("chart", "chart round trips on a probe set"),
                       ("flow", "integrate the system and write the trajectory"),
                       ("demo5", "demonstrate the three violated conditions"),
                       ("all", "everything above")):
        sub.add_parser(name, parents=[common], help=text)
    return p


def _config(args) -> hs.Scenario:
    sc = hs.load_scenario(args.scenario) if args.scenario else hs.Scenario()
    overrides = list(args.overrides)
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise hs.ConfigError("seed must be an unsigned 64-bit integer")
        overrides.append(f"seed={args.seed}")
    sc = hs.apply_overrides(sc, overrides)
    out = args.out or sc.out
    if os.path.exists(out) and not os.path.isdir(out):
        raise hs.ConfigError(f"output path {out} is not a directory")
    parent = os.path.dirname(os.path.abspath(out))
    if not os.path.isdir(parent) or not os.access(parent, os.W_OK):
        raise hs.ConfigError(f"cannot create output directory {out}")
    if os.path.isdir(out) and not os.access(out, os.W_OK):
        raise hs.ConfigError(f"output directory {out} is not writable")
    sc.out = out
    return sc


def _write(out: str, name: str, text: str):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, name), "w", newline="") as fh:
        fh.write(text)


def chart_experiment(sc: hs.Scenario):
    """Per-probe round trips; returns (csv text, records)."""
    rng = hs.family_rng(sc, "cli-chart")
    chart = hs.uc_chart(sc)
    lin = lin_system(chart.grid)
    lchart = hs.build_chart(lin, chart.params, sc.chart.eps, lo=[-1.0], hi=[1.0])
    fixed = hs.lin_fixed_points(chart.grid, sc.probes.roundtrip, rng)
    points = hs.manifold_points(sc, chart, sc.probes.roundtrip, rng)
    out = io.StringIO()
    out.write("# schema=1\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["probe", "fixed_point_error", "flatten_residual", "roundtrip_error", "contraction"])
    worst = {"fixed": 0.0, "flatten": 0.0, "roundtrip": 0.0, "contraction": 0.0, "failures": 0}
    tol = sc.tolerances
    for i, (phi, fx) in enumerate(zip(points, fixed)):
        fixed_err = sup_norm(apply_chart(lchart, fx) - fx)
        flat = float(abs(deriv_at_zero(apply_chart(chart, phi))).max())
        try:
            res = invert_chart(chart, apply_chart(chart, phi), tol=tol.invert)
            rt, cf = sup_norm(res.value - phi), res.contraction
        except InversionError:
            rt, cf = np.inf, np.inf
            worst["failures"] += 1
        w.writerow([i, repr(fixed_err), repr(flat), repr(float(rt)), repr(float(cf))])
        worst["fixed"] = max(worst["fixed"], fixed_err)
        worst["flatten"] = max(worst["flatten"], flat)
        worst["roundtrip"] = max(worst["roundtrip"], rt)
        worst["contraction"] = max(worst["contraction"], cf)
    inputs = {"seed": sc.seed, "count": len(points)}
    cb = sc.chart.eps + tol.contraction_slack
    recs = [
        hs._record("fixed_points", "chart", inputs, worst["fixed"], tol.fixed_point, worst["fixed"] <= tol.fixed_point),
        hs._record("flatten", "chart", inputs, worst["flatten"], tol.flatten, worst["flatten"] <= tol.flatten),
        hs._record("roundtrip", "chart", inputs, worst["roundtrip"], tol.roundtrip, worst["roundtrip"] <= tol.roundtrip),
        hs._record("contraction", "chart", inputs, worst["contraction"], cb, worst["contraction"] <= cb,
                   f"{worst['failures']} inversion failures"),
    ]
    return out.getvalue(), recs


def flow_experiment(sc: hs.Scenario):
    rfde = hs.build_system(sc, hs._grid(sc, chart=True))
    traj = hs.flow_run(sc, sc.flow.dt, rfde)
    text = to_csv(traj, sample_times(traj, every=sc.flow.every))
    return text, hs.check_flow(sc)


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    try:
        sc = _config(args)
    except hs.ConfigError as exc:
        print(f"sddchart: config error: {exc}", file=sys.stderr)
        return 2

    def say(msg):
        if not args.quiet:
            print(msg)

    try:
        report, files = _run(args.command, sc, say)
    except (hs.ConfigError, ValueError) as exc:
        # parameters that pass validation but cannot be realized (e.g. a grid too coarse for lam)
        print(f"sddchart: config error: {exc}", file=sys.stderr)
        return 2
    for name, text in files.items():
        _write(sc.out, name, text)
    for line in report.lines():
        say(line)
    s = report.summary
    print(f"{sc.name} seed={sc.seed}: {s['passed']} passed, {s['failed']} failed "
          f"({s['controls_detected']}/{s['expected_failures']} controls detected), "
          f"{s['unexpected']} unexpected -> {'OK' if report.ok else 'FAILED'}")
    for x in report.records:
        if not x.as_expected:
            print(f"sddchart: unexpected outcome in {x.family}/{x.name}: {x.note}", file=sys.stderr)
    return 0 if report.ok else 1


def _run(cmd: str, sc: hs.Scenario, say):
    """Run a subcommand; returns the merged report and {file name: text}."""
    report = hs.Report(sc.name, sc.seed)
    files = {}
    if cmd in ("check", "all"):
        rep = hs.run_suite(sc, progress=lambda name: say(f"running {name}"))
        report.extend(rep.records)
    if cmd in ("chart", "all"):
        say("running chart round trips")
        text, recs = chart_experiment(sc)
        report.extend(recs)
        files["chart.csv"] = text
    if cmd in ("flow", "all"):
        say("running flow")
        try:
            text, recs = flow_experiment(sc)
        except DomainError as exc:
            print(f"sddchart: flow failed: {exc}", file=sys.stderr)
            text, recs = "# schema=1\n", [hs._record("flow_run", "flow", {}, None, None, False, str(exc))]
        report.extend(recs)
        files["flow.csv"] = text
    if cmd in ("demo5", "all"):
        say("running demonstrations")
        rep, rows = hs.demo_conditions(sc)
        report.extend(rep.records)
        files["demo5.csv"] = hs.demo_csv(rows)
    files["report.json"] = report.to_json()
    files["report.csv"] = report.to_csv()
    return report, files


if __name__ == "__main__":
    sys.exit(main())
