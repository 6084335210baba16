"""Scenario-driven verification suites.

A :class:`Scenario` fixes the system, grids, regions, chart budgets, probe
counts, tolerances and seed.  Each check family draws from its own random
stream (derived from the seed and the family name), so families can be run
alone or in any order with identical results.  Every check becomes a
:class:`Record`; negative controls are records that are expected to fail.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import sys
import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.optimize import brentq

from . import functionals as fl
from .chart import (Chart, InversionError, analytic_bound, apply_DA, apply_chart, bilipschitz_lower,
                    build_chart, DR_ext, invert_chart, remainder, smallness_check, solve_DA)
from .ddesolver import flow_residual, integrate, sample_times, segment
from .delays import ConstantDelay, IntegralDelay, default_shapes, fd_check_delay, tanh_factorized
from .funcspace import (C1Fn, DomainError, GridSpec, constant, deriv, deriv_at_zero, eval_fn,
                        from_samples, integrate as quad, sup_norm)
from .probes import random_in_box, random_smooth, random_unit
from .rfde import (RFDE, Dv_ext, Df_ext, ProjectionError, RegionParams, f, lin_system, linear_feedback,
                   m_v, membership_residual, project_to_manifold, region_test, s5_feedback, v,
                   zero_feedback)
from .transversal import H, ConstantOnBox, ResolutionError, ScalingFn

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid scenario file, key or value."""


# -- scenario ------------------------------------------------------------------

@dataclass
class SystemCfg:
    tag: str = "S5"             # S5 | LIN
    feedback: str = "default"   # default | zero
    delay: str = "integral"     # integral | constant | factorized
    gamma: float = 1.0
    r: float = -0.5


@dataclass
class GridCfg:
    h: float = 1.0
    N: int = 24
    chart_N: int = 64


@dataclass
class ChartCfg:
    eps: float = 0.5
    c: float = 1.0
    mode: str = "box"
    lo: list = field(default_factory=lambda: [-1.0])
    hi: list = field(default_factory=lambda: [0.95])
    probe_lo: float = -0.9
    probe_hi: float = 0.9
    probe_slope: float = 1.5


@dataclass
class QbdCfg:
    q: float = 1.0
    b: float = 1.0
    delta: float = 0.25
    lo: list = field(default_factory=lambda: [-0.6])
    hi: list = field(default_factory=lambda: [0.5])
    probe_lo: float = -0.55
    probe_hi: float = 0.45
    probe_slope: float = 0.9


@dataclass
class ProbeCfg:
    fd: int = 100
    transversal: int = 100
    smallness: int = 100
    op_probes: int = 64
    manifold: int = 50
    fixed_points: int = 20
    roundtrip: int = 100
    pairs: int = 200
    nesting: int = 50


@dataclass
class FlowCfg:
    T: float = 1.0
    dt: float = 1e-3
    phi0: float = -1.0
    every: int = 10
    exp_r: float = -0.5


@dataclass
class Tolerances:
    """Every numeric tolerance used by the suites (one override point)."""

    fd_step: float = 1e-5
    fd_rel: float = 1e-6
    fd_remainder_rel: float = 1e-5
    slope_at_zero: float = 1e-10
    member: float = 1e-10
    flatten: float = 1e-8
    fixed_point: float = 1e-12
    invert: float = 1e-10
    roundtrip: float = 1e-9
    contraction_slack: float = 0.05
    bilip_abs: float = 1e-12
    flow_member: float = 1e-8
    flow_residual: float = 1e-5
    flow_flatten: float = 1e-5
    flow_order: float = 4.0
    flow_floor: float = 1e-11
    exp_benchmark: float = 1e-6
    gap_I: float = 1e-12
    gap_II: float = 1e-10
    demo_agreement: float = 1e-6
    functional_rel: float = 1e-12
    quadrature: float = 1e-12


@dataclass
class ControlCfg:
    enabled: bool = True
    eps_large: float = 8.0
    lam_factor: float = 0.5
    outside_mid: float = 0.7
    outside_amp: float = 0.25
    outside_freq: float = 20.0
    derivative_scale: float = 1.01


@dataclass
class DemoCfg:
    eps: float = 0.1
    s: float = -0.5
    rows: int = 10


@dataclass
class Scenario:
    name: str = "s5-default"
    seed: int = 1
    out: str = "out"
    system: SystemCfg = field(default_factory=SystemCfg)
    grid: GridCfg = field(default_factory=GridCfg)
    chart: ChartCfg = field(default_factory=ChartCfg)
    qbd: QbdCfg = field(default_factory=QbdCfg)
    probes: ProbeCfg = field(default_factory=ProbeCfg)
    flow: FlowCfg = field(default_factory=FlowCfg)
    tolerances: Tolerances = field(default_factory=Tolerances)
    controls: ControlCfg = field(default_factory=ControlCfg)
    demo: DemoCfg = field(default_factory=DemoCfg)

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {f.name: f.type for f in fields(Scenario)}


def _coerce(section: str, key: str, current, value):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} must be true or false")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{section}.{key} must be an integer")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key} must be a number")
        return float(value)
    if isinstance(current, list):
        if not isinstance(value, list) or not all(isinstance(x, (int, float)) for x in value):
            raise ConfigError(f"{section}.{key} must be a list of numbers")
        return [float(x) for x in value]
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{section}.{key} must be a string")
        return value
    raise ConfigError(f"cannot set {section}.{key}")


def scenario_from_dict(data: dict) -> Scenario:
    sc = Scenario()
    for key, value in data.items():
        if key in ("name", "out"):
            if not isinstance(value, str):
                raise ConfigError(f"{key} must be a string")
            setattr(sc, key, value)
        elif key == "seed":
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                raise ConfigError("seed must be a non-negative integer")
            sc.seed = value
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            sect = getattr(sc, key)
            for k, val in value.items():
                if not hasattr(sect, k):
                    raise ConfigError(f"unknown key {key}.{k}")
                setattr(sect, k, _coerce(key, k, getattr(sect, k), val))
        else:
            raise ConfigError(f"unknown key {key!r}")
    validate(sc)
    return sc


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(sc: Scenario, overrides) -> Scenario:
    """Apply ``section.key=value`` (or ``key=value`` for top-level keys)."""
    sc = copy.deepcopy(sc)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, text = item.split("=", 1)
        key = key.strip()
        value = _parse_value(text.strip())
        if "." in key:
            section, k = key.split(".", 1)
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section {section!r}")
            sect = getattr(sc, section)
            if not hasattr(sect, k):
                raise ConfigError(f"unknown key {key}")
            setattr(sect, k, _coerce(section, k, getattr(sect, k), value))
        elif key == "seed":
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                raise ConfigError("seed must be a non-negative integer")
            sc.seed = value
        elif key in ("name", "out"):
            setattr(sc, key, str(value))
        else:
            raise ConfigError(f"unknown key {key!r}")
    validate(sc)
    return sc


def validate(sc: Scenario):
    s = sc.system
    if s.tag not in ("S5", "LIN"):
        raise ConfigError(f"system.tag must be S5 or LIN, got {s.tag!r}")
    if s.feedback not in ("default", "zero"):
        raise ConfigError("system.feedback must be 'default' or 'zero'")
    if s.delay not in ("integral", "constant", "factorized"):
        raise ConfigError("system.delay must be integral, constant or factorized")
    if not sc.grid.h > 0 or sc.grid.N < 2 or sc.grid.chart_N < 2:
        raise ConfigError("grid needs h > 0 and N, chart_N >= 2")
    if not -sc.grid.h <= s.r <= 0:
        raise ConfigError("system.r must lie in [-h, 0]")
    for name, val in (("chart.eps", sc.chart.eps), ("qbd.delta", sc.qbd.delta)):
        if not 0 < val < 1:
            raise ConfigError(f"{name} must lie in (0, 1)")
    for name, val in asdict(sc.tolerances).items():
        if not val > 0:
            raise ConfigError(f"tolerances.{name} must be positive")
    for name, val in asdict(sc.probes).items():
        if val < 0:
            raise ConfigError(f"probes.{name} must be non-negative")
    if not (sc.flow.T > 0 and sc.flow.dt > 0 and sc.flow.every >= 1):
        raise ConfigError("flow needs T > 0, dt > 0, every >= 1")
    if sc.chart.mode != "box":
        raise ConfigError("chart.mode must be 'box'")
    for cfg, name in ((sc.chart, "chart"), (sc.qbd, "qbd")):
        if len(cfg.lo) != len(cfg.hi) or any(a > b for a, b in zip(cfg.lo, cfg.hi)):
            raise ConfigError(f"{name}.lo/hi must be ordered and of equal length")
        if not cfg.probe_lo < cfg.probe_hi:
            raise ConfigError(f"{name}.probe_lo must be below probe_hi")


def load_scenario(path: str) -> Scenario:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from exc
    try:
        if path.endswith(".json"):
            data = json.loads(raw.decode("utf-8"))
        else:
            data = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse scenario {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("scenario must be a table")
    return scenario_from_dict(data)


# -- reports -------------------------------------------------------------------

def _digest(obj) -> str:
    text = json.dumps(obj, sort_keys=True, default=lambda o: np.asarray(o).tolist())
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def _num(x) -> float | None:
    x = float(x)
    return x if np.isfinite(x) else None


@dataclass
class Record:
    name: str
    family: str
    digest: str
    measured: float | None
    bound: float | None
    passed: bool
    expect_fail: bool = False
    note: str = ""

    @property
    def as_expected(self) -> bool:
        return self.passed != self.expect_fail

    def to_dict(self) -> dict:
        d = asdict(self)
        d["as_expected"] = self.as_expected
        return d


@dataclass
class Report:
    scenario: str
    seed: int
    records: list = field(default_factory=list)

    def add(self, rec: Record):
        self.records.append(rec)

    def extend(self, recs):
        self.records.extend(recs)

    @property
    def summary(self) -> dict:
        r = self.records
        return {
            "total": len(r),
            "passed": sum(x.passed for x in r),
            "failed": sum(not x.passed for x in r),
            "expected_failures": sum(x.expect_fail for x in r),
            "controls_detected": sum(x.expect_fail and not x.passed for x in r),
            "unexpected": sum(not x.as_expected for x in r),
        }

    @property
    def ok(self) -> bool:
        return all(x.as_expected for x in self.records)

    def family(self, name: str) -> list:
        return [x for x in self.records if x.family == name]

    def to_json(self) -> str:
        return json.dumps({"scenario": self.scenario, "seed": self.seed, "summary": self.summary,
                           "ok": self.ok, "records": [x.to_dict() for x in self.records]},
                          indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("# schema=1\n")
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["name", "family", "digest", "measured", "bound", "passed", "expect_fail", "note"])
        for x in self.records:
            w.writerow([x.name, x.family, x.digest, "" if x.measured is None else repr(x.measured),
                        "" if x.bound is None else repr(x.bound), int(x.passed), int(x.expect_fail), x.note])
        return out.getvalue()

    def lines(self) -> list[str]:
        out = []
        for x in self.records:
            tag = "ok" if x.as_expected else "UNEXPECTED"
            state = "pass" if x.passed else "fail"
            exp = " (control)" if x.expect_fail else ""
            out.append(f"[{tag}] {x.family}/{x.name}: {state}{exp} measured={x.measured} bound={x.bound} {x.note}".rstrip())
        return out


def _record(name, family, inputs, measured, bound, passed, note="", expect_fail=False) -> Record:
    return Record(name, family, _digest(inputs), None if measured is None else _num(measured),
                  None if bound is None else _num(bound), bool(passed), expect_fail, note)


def family_rng(sc: Scenario, family: str) -> np.random.Generator:
    return np.random.default_rng([sc.seed, zlib.crc32(family.encode())])


# -- builders --------------------------------------------------------------------

def _grid(sc: Scenario, chart: bool = False) -> GridSpec:
    return GridSpec(h=sc.grid.h, n=1, N=sc.grid.chart_N if chart else sc.grid.N)


def _delay(sc: Scenario, grid: GridSpec, kind: str | None = None):
    kind = kind or sc.system.delay
    if kind == "integral":
        return IntegralDelay(grid, default_shapes(grid.h))
    if kind == "constant":
        return ConstantDelay(sc.system.r, grid.h)
    return tanh_factorized(grid)


def build_system(sc: Scenario, grid: GridSpec) -> RFDE:
    delay = _delay(sc, grid)
    if sc.system.feedback == "zero":
        fb = zero_feedback(delay.k, grid.n)
    elif sc.system.tag == "S5":
        fb = s5_feedback(sc.system.gamma)
    else:
        fb = linear_feedback(delay.k, grid.n)
    return RFDE(fb, delay, grid, name=sc.system.tag if sc.system.feedback == "default" else "ZERO")


def uc_chart(sc: Scenario, rfde: RFDE | None = None) -> Chart:
    rfde = rfde or build_system(sc, _grid(sc, chart=True))
    return build_chart(rfde, RegionParams.Uc(sc.chart.c), sc.chart.eps, lo=sc.chart.lo, hi=sc.chart.hi)


def qbd_chart(sc: Scenario, rfde: RFDE | None = None) -> Chart:
    rfde = rfde or build_system(sc, _grid(sc, chart=True))
    q = sc.qbd
    return build_chart(rfde, RegionParams.Uqbd(q.q, q.b, q.delta), q.delta, lo=q.lo, hi=q.hi)


def _box_probe(chart: Chart, rng, lo, hi, slope):
    return random_in_box(chart.grid, rng, lo, hi, slope=slope)


def uc_probe(sc: Scenario, chart: Chart, rng) -> C1Fn:
    c = sc.chart
    return _box_probe(chart, rng, c.probe_lo, c.probe_hi, c.probe_slope)


def qbd_probe(sc: Scenario, chart: Chart, rng) -> C1Fn:
    q = sc.qbd
    return _box_probe(chart, rng, q.probe_lo, q.probe_hi, q.probe_slope)


def _probe_in_region(chart: Chart, draw, rng, tries: int = 50):
    for _ in range(tries):
        phi = draw(rng)
        if region_test(chart.rfde, chart.params, phi):
            return phi
    raise RuntimeError("could not draw a probe inside the region")


def convex_subset(lo: float, hi: float, slope: float):
    """Predicate for ``{lo < phi < hi, |phi'| < slope}`` (convex)."""
    def check(phi: C1Fn):
        vals = phi.values
        if vals.min() <= lo or vals.max() >= hi:
            return f"values leave ({lo}, {hi})"
        if sup_norm(deriv(phi)) >= slope:
            return f"slope reaches {slope}"
        return None
    return check


# -- check families ------------------------------------------------------------

def check_funcspace(sc: Scenario) -> list[Record]:
    """Basic invariants of the discretization and of the functionals."""
    rng = family_rng(sc, "funcspace")
    grid = _grid(sc)
    tol = sc.tolerances
    recs = []
    lam = 0.7
    e = from_samples(grid, lambda t: np.exp(lam * t))
    exact = (1.0 - np.exp(-lam * grid.h)) / lam
    err = abs(quad(e)[0] - exact)
    recs.append(_record("quadrature_exp", "funcspace", {"lam": lam}, err, tol.quadrature, err <= tol.quadrature))
    err = abs(deriv_at_zero(e)[0] - lam)
    recs.append(_record("slope_exp", "funcspace", {"lam": lam}, err, tol.quadrature, err <= tol.quadrature))
    worst = 0.0
    for i in range(20):
        phi = random_smooth(grid, rng)
        t = rng.uniform(-grid.h, 0.0)
        L = fl.ExtLinFunctional(grid, [t], [[rng.normal()]], rng.normal(size=(1, grid.N + 1)))
        ratio = abs(fl.apply(L, phi)) / (fl.op_norm(L) * sup_norm(phi))
        worst = max(worst, ratio)
    bound = 1.0 + tol.functional_rel
    recs.append(_record("dual_norm_bound", "funcspace", {"seed": sc.seed}, worst, bound, worst <= bound))
    return recs


def _fd_direction(grid, rng):
    return random_smooth(grid, rng)


def check_delay_derivatives(sc: Scenario, count: int | None = None) -> list[Record]:
    """Extended delay derivatives against central differences."""
    grid = _grid(sc)
    tol = sc.tolerances
    count = sc.probes.fd if count is None else count
    recs = []
    for kind in ("integral", "constant", "factorized"):
        rng = family_rng(sc, f"fd-delay-{kind}")
        d = _delay(sc, grid, kind)
        worst = 0.0
        for i in range(count):
            phi = random_smooth(grid, rng, amplitude=1.5)
            chi = _fd_direction(grid, rng)
            worst = max(worst, fd_check_delay(d, phi, chi, step=tol.fd_step))
        recs.append(_record(f"delay_{kind}", "derivatives", {"kind": kind, "count": count, "seed": sc.seed},
                            worst, tol.fd_rel, worst <= tol.fd_rel, f"{count} directions"))
    return recs


def _rel(an, fd, floor=1e-4):
    diff = np.abs(np.asarray(an) - np.asarray(fd))
    scale = np.maximum(np.maximum(np.abs(an), np.abs(fd)), floor)
    return float(np.max(diff / scale))


def fd_check_v_f(rfde: RFDE, phi: C1Fn, chi: C1Fn, step: float) -> tuple[float, float]:
    """Relative mismatch of ``D_e v`` and ``D_e f`` against central differences."""
    kn = rfde.k * rfde.n
    vp, vm = v(rfde, phi + step * chi), v(rfde, phi - step * chi)
    fd_v = (vp - vm) / (2 * step)
    an_v = np.array([fl.apply(Dv_ext(rfde, phi, mu), chi) for mu in range(kn)])
    fp, fm = f(rfde, phi + step * chi), f(rfde, phi - step * chi)
    fd_f = (fp - fm) / (2 * step)
    an_f = np.array([fl.apply(L, chi) for L in Df_ext(rfde, phi)])
    return _rel(an_v, fd_v), _rel(an_f, fd_f)


def _system_for_delay(sc, grid, kind):
    delay = _delay(sc, grid, kind)
    if sc.system.tag == "S5" and sc.system.feedback == "default":
        return RFDE(s5_feedback(sc.system.gamma), delay, grid, name="S5")
    return lin_system(grid, delay)


def check_rfde_derivatives(sc: Scenario, count: int | None = None) -> list[Record]:
    """``D_e v`` and ``D_e f`` against central differences for each delay type."""
    grid = _grid(sc)
    tol = sc.tolerances
    count = sc.probes.fd if count is None else count
    recs = []
    for kind in ("integral", "constant", "factorized"):
        rng = family_rng(sc, f"fd-rfde-{kind}")
        rfde = _system_for_delay(sc, grid, kind)
        wv = wf = 0.0
        for i in range(count):
            # values kept below gamma - 0.1 so v stays inside V along the stencil
            phi = random_smooth(grid, rng, amplitude=0.8, offset=0.0)
            chi = _fd_direction(grid, rng)
            a, b = fd_check_v_f(rfde, phi, chi, tol.fd_step)
            wv, wf = max(wv, a), max(wf, b)
        inputs = {"kind": kind, "count": count, "seed": sc.seed, "system": rfde.name}
        recs.append(_record(f"Dv_{kind}", "derivatives", inputs, wv, tol.fd_rel, wv <= tol.fd_rel))
        recs.append(_record(f"Df_{kind}", "derivatives", inputs, wf, tol.fd_rel, wf <= tol.fd_rel))
    return recs


def transversal_report(fam: ConstantOnBox, ys, tol: float) -> tuple[float, float, float]:
    """Worst slope error at 0, worst ``|tau|/H`` and worst ``|D tau|/H`` over ``ys``."""
    slope = ratio_tau = ratio_dtau = 0.0
    for y in ys:
        tau = fam.tau(y)
        hy = H(fam.scaling, y)
        slope = max(slope, abs(deriv_at_zero(tau)[0] - 1.0))
        ratio_tau = max(ratio_tau, sup_norm(tau) / hy)
        dim = len(np.atleast_1d(y))
        ratio_dtau = max(ratio_dtau, max(sup_norm(fam.Dtau(y, mu)) for mu in range(dim)) / hy)
    return slope, ratio_tau, ratio_dtau


def check_transversal(sc: Scenario, chart: Chart | None = None) -> list[Record]:
    rng = family_rng(sc, "transversal")
    chart = chart or uc_chart(sc)
    fam = chart.transversal
    lo, hi = np.asarray(sc.chart.lo), np.asarray(sc.chart.hi)
    ys = [rng.uniform(lo, hi) for _ in range(sc.probes.transversal)]
    slope, rt, rd = transversal_report(fam, ys, sc.tolerances.slope_at_zero)
    inputs = {"lo": sc.chart.lo, "hi": sc.chart.hi, "lam": fam.lam(), "seed": sc.seed}
    tol = sc.tolerances.slope_at_zero
    return [
        _record("slope_at_zero", "transversal", inputs, slope, tol, slope <= tol),
        _record("tau_le_H", "transversal", inputs, rt, 1.0, rt <= 1.0, "max |tau(y)|/H(y)"),
        _record("Dtau_le_H", "transversal", inputs, rd, 1.0, rd <= 1.0, "max |D tau(y)|/H(y)"),
    ]


def smallness_records(chart: Chart, probes, rng, op_probes: int, tag: str, family: str = "smallness",
                      expect_fail: bool = False, inputs=None) -> list[Record]:
    sup_r = op = ab = 0.0
    bad = 0
    reasons = []
    for phi in probes:
        r = smallness_check(chart, phi, rng, probes=op_probes)
        sup_r, op, ab = max(sup_r, r.sup_remainder), max(op, r.op_estimate), max(ab, r.analytic)
        if not r.region:
            bad += 1
            reasons.append(r.region.reason)
    eps = chart.budget
    note = f"{len(probes)} probes" + (f"; {bad} outside region: {reasons[0]}" if bad else "")
    inputs = inputs or {"tag": tag}
    region_ok = bad == 0
    return [
        _record(f"{tag}_sup_R", family, inputs, sup_r, eps, sup_r < eps and region_ok, note, expect_fail),
        _record(f"{tag}_op_DR", family, inputs, op, eps, op <= eps and region_ok, note, expect_fail),
        _record(f"{tag}_analytic", family, inputs, ab, eps, ab <= eps and region_ok, note, expect_fail),
    ]


def check_smallness(sc: Scenario, chart: Chart | None = None) -> list[Record]:
    rng = family_rng(sc, "smallness")
    chart = chart or uc_chart(sc)
    # no rejection: probes that leave U_c are reported with the region diagnosis
    probes = [uc_probe(sc, chart, rng) for _ in range(sc.probes.smallness)]
    inputs = {"eps": chart.budget, "c": sc.chart.c, "seed": sc.seed, "count": len(probes)}
    return smallness_records(chart, probes, rng, sc.probes.op_probes, "Uc", inputs=inputs)


def manifold_points(sc: Scenario, chart: Chart, count: int, rng) -> list[C1Fn]:
    """Projections of random probes onto the manifold that land in the
    region and inside the transversal box."""
    out = []
    tries = 0
    while len(out) < count:
        tries += 1
        if tries > 20 * count + 20:
            raise RuntimeError("could not generate enough manifold points")
        phi0 = uc_probe(sc, chart, rng)
        try:
            phi = project_to_manifold(chart.rfde, phi0, tol=sc.tolerances.member)
            if not region_test(chart.rfde, chart.params, phi):
                continue
            chart.transversal.tau(v(chart.rfde, phi))
        except (ProjectionError, DomainError):
            continue
        out.append(phi)
    return out


def lin_fixed_points(grid: GridSpec, count: int, rng) -> list[C1Fn]:
    """Histories with ``phi'(0) = 0`` and ``phi(-h/2) = 0`` that are <= 0.

    For the integral delay ``p(phi) = 0``, so ``d = -h/2`` and
    ``f(phi) = phi(-h/2) = 0`` for the LIN system.
    """
    h = grid.h
    out = []
    for _ in range(count):
        a, b, c = rng.uniform(0.2, 2.0), rng.uniform(0.0, 1.0), rng.uniform(-1.0, 1.0)
        out.append(from_samples(grid, lambda t: -a * (t + 0.5 * h) ** 2 * t**2 * (1.0 + b * np.cos(c * t) ** 2)))
    return out


def check_flattening(sc: Scenario, chart: Chart | None = None) -> list[Record]:
    rng = family_rng(sc, "flattening")
    chart = chart or uc_chart(sc)
    tol = sc.tolerances
    pts = manifold_points(sc, chart, sc.probes.manifold, rng)
    worst = max(abs(deriv_at_zero(apply_chart(chart, phi))).max() for phi in pts)
    recs = [_record("flatten", "chart", {"count": len(pts), "seed": sc.seed}, worst, tol.flatten,
                    worst <= tol.flatten, f"{len(pts)} manifold points")]
    lin = lin_system(chart.grid)
    lchart = build_chart(lin, RegionParams.Uc(sc.chart.c), sc.chart.eps, lo=[-1.0], hi=[1.0])
    fx = 0.0
    for phi in lin_fixed_points(chart.grid, sc.probes.fixed_points, rng):
        res = abs(membership_residual(lin, phi)).max()
        if res > tol.member:
            raise RuntimeError("fixed-point witness off the manifold")
        fx = max(fx, sup_norm(apply_chart(lchart, phi) - phi))
    recs.append(_record("fixed_points_LIN", "chart", {"count": sc.probes.fixed_points, "seed": sc.seed}, fx,
                        tol.fixed_point, fx <= tol.fixed_point))
    return recs


def roundtrip_stats(chart: Chart, probes, rng, tol) -> dict:
    worst = {"roundtrip": 0.0, "contraction": 0.0, "da_roundtrip": 0.0, "da_consistency": 0.0, "failures": 0}
    for phi in probes:
        zeta = apply_chart(chart, phi)
        try:
            res = invert_chart(chart, zeta, tol=tol.invert)
        except InversionError:
            worst["failures"] += 1
            continue
        worst["roundtrip"] = max(worst["roundtrip"], sup_norm(res.value - phi))
        worst["contraction"] = max(worst["contraction"], res.contraction)
        chi = random_unit(chart.grid, rng)
        psi = apply_DA(chart, phi, chi)
        sol = solve_DA(chart, phi, psi, tol=tol.invert)
        worst["da_roundtrip"] = max(worst["da_roundtrip"], sup_norm(sol.value - chi))
        worst["da_consistency"] = max(worst["da_consistency"], sol.error_sup)
        worst["contraction"] = max(worst["contraction"], sol.contraction)
    return worst


def check_inversion(sc: Scenario, chart: Chart | None = None) -> list[Record]:
    rng = family_rng(sc, "inversion")
    chart = chart or uc_chart(sc)
    tol = sc.tolerances
    probes = [_probe_in_region(chart, lambda r: uc_probe(sc, chart, r), rng) for _ in range(sc.probes.roundtrip)]
    w = roundtrip_stats(chart, probes, rng, tol)
    inputs = {"eps": chart.budget, "seed": sc.seed, "count": len(probes)}
    note = f"{len(probes)} probes, {w['failures']} inversion failures"
    ok = w["failures"] == 0
    cbound = chart.budget + tol.contraction_slack
    return [
        _record("roundtrip", "inversion", inputs, w["roundtrip"], tol.roundtrip, ok and w["roundtrip"] <= tol.roundtrip, note),
        _record("contraction", "inversion", inputs, w["contraction"], cbound, ok and w["contraction"] <= cbound, note),
        _record("solve_DA_roundtrip", "inversion", inputs, w["da_roundtrip"], tol.roundtrip, w["da_roundtrip"] <= tol.roundtrip),
        _record("solve_DA_consistency", "inversion", inputs, w["da_consistency"], tol.roundtrip,
                w["da_consistency"] <= tol.roundtrip),
    ]


def bilipschitz_stats(chart: Chart, pairs, subset=None, max_gap: float | None = None) -> dict:
    worst = np.inf
    applicable = failed = 0
    for phi, psi in pairs:
        if max_gap is not None and not sup_norm(phi - psi) < max_gap:
            continue
        rep = bilipschitz_lower(chart, phi, psi, subset=subset)
        if not rep.applicable:
            continue
        applicable += 1
        failed += not rep.passed
        worst = min(worst, rep.margin)
    return {"applicable": applicable, "failed": failed, "margin": worst}


def _close_pair(sc, chart, rng, radius):
    # a second point within ``radius`` (sup norm) of a region probe
    phi = _probe_in_region(chart, lambda r: qbd_probe(sc, chart, r), rng)
    for _ in range(50):
        d = random_smooth(chart.grid, rng, amplitude=1.0)
        psi = phi + (rng.uniform(0.05, 0.95) * radius / sup_norm(d)) * d
        if region_test(chart.rfde, chart.params, psi):
            return phi, psi
    raise RuntimeError("could not draw a close pair inside the region")


def check_bilipschitz(sc: Scenario, chart: Chart | None = None, qchart: Chart | None = None) -> list[Record]:
    rng = family_rng(sc, "bilipschitz")
    chart = chart or uc_chart(sc)
    c = sc.chart
    subset = convex_subset(c.probe_lo - 1e-9, c.probe_hi + 1e-9, c.probe_slope + 1e-9)
    pairs = [(uc_probe(sc, chart, rng), uc_probe(sc, chart, rng)) for _ in range(sc.probes.pairs)]
    s1 = bilipschitz_stats(chart, pairs, subset=subset)
    recs = [_record("convex_Uc", "bilipschitz", {"eps": chart.budget, "seed": sc.seed, "count": len(pairs)},
                    s1["margin"] if s1["applicable"] else None, 0.0,
                    s1["applicable"] == len(pairs) and s1["failed"] == 0,
                    f"{s1['applicable']}/{len(pairs)} applicable, {s1['failed']} failed; measured = min margin")]
    qchart = qchart or qbd_chart(sc)
    delta = sc.qbd.delta
    qpairs = [_close_pair(sc, qchart, rng, delta) for _ in range(sc.probes.pairs)]
    s2 = bilipschitz_stats(qchart, qpairs, max_gap=delta)
    recs.append(_record("Uqbd_close_pairs", "bilipschitz",
                        {"delta": delta, "q": sc.qbd.q, "b": sc.qbd.b, "seed": sc.seed, "count": len(qpairs)},
                        s2["margin"] if s2["applicable"] else None, 0.0,
                        s2["applicable"] == len(qpairs) and s2["failed"] == 0,
                        f"{s2['applicable']}/{len(qpairs)} applicable, {s2['failed']} failed; measured = min margin"))
    return recs


def check_nesting(sc: Scenario, qchart: Chart | None = None) -> list[Record]:
    """Probes of U_{q,b,delta} lie in U_c with ``c = b q``."""
    rng = family_rng(sc, "nesting")
    qchart = qchart or qbd_chart(sc)
    uc = RegionParams.Uc(qchart.params.c_equiv)
    inside = outside = 0
    for _ in range(sc.probes.nesting):
        phi = qbd_probe(sc, qchart, rng)
        if not region_test(qchart.rfde, qchart.params, phi):
            continue
        inside += 1
        outside += not region_test(qchart.rfde, uc, phi)
    return [_record("Uqbd_in_Uc", "regions", {"seed": sc.seed, "c": uc.c}, outside, 0, inside > 0 and outside == 0,
                    f"{inside} probes in U_qbd")]


def exponential_benchmark(sc: Scenario, grid: GridSpec | None = None) -> tuple[float, float, float]:
    """x' = x(t + r) from e^{lam t}; returns (lam, max error at knots, flow residual)."""
    grid = grid or _grid(sc)
    r = sc.flow.exp_r
    lam = brentq(lambda s: s - np.exp(s * r), -50.0, 50.0, xtol=1e-15) if r < 0 else 1.0
    rfde = lin_system(grid, ConstantDelay(r, grid.h))
    phi0 = from_samples(grid, lambda t: np.exp(lam * t))
    traj = integrate(rfde, phi0, sc.flow.T, sc.flow.dt, tol_member=sc.tolerances.flow_member)
    tk = traj.knots
    err = float(np.abs(traj.history.x[: len(tk), 0] - np.exp(lam * tk)).max())
    return lam, err, flow_residual(traj)


def flow_run(sc: Scenario, dt: float, rfde: RFDE | None = None):
    rfde = rfde or build_system(sc, _grid(sc, chart=True))
    phi0 = project_to_manifold(rfde, constant(rfde.grid, sc.flow.phi0), tol=sc.tolerances.member)
    return integrate(rfde, phi0, sc.flow.T, dt, tol_member=sc.tolerances.flow_member)


def flatten_along(traj, chart_for, times) -> tuple[float, int]:
    """Worst ``|A(x_t)'(0)|`` over sampled segments inside the chart's region."""
    segs = [segment(traj, t) for t in times]
    chart = chart_for(segs)
    worst, count = 0.0, 0
    for seg in segs:
        if not region_test(chart.rfde, chart.params, seg):
            continue
        try:
            val = abs(deriv_at_zero(apply_chart(chart, seg))).max()
        except DomainError:
            continue
        worst, count = max(worst, val), count + 1
    return worst, count


def _flow_chart(sc: Scenario, rfde: RFDE):
    # transversal box fitted to the values v(x_t) met along the run
    def make(segs):
        ys = np.array([v(rfde, s) for s in segs])
        lo, hi = ys.min(axis=0) - 0.05, ys.max(axis=0) + 0.05
        hi = np.minimum(hi, rfde.feedback.domain.upper - 1e-3)
        return build_chart(rfde, RegionParams.Uc(0.1), sc.chart.eps, lo=lo, hi=hi)
    return make


def check_flow(sc: Scenario) -> list[Record]:
    tol = sc.tolerances
    rfde = build_system(sc, _grid(sc, chart=True))
    inputs = {"system": rfde.name, "T": sc.flow.T, "dt": sc.flow.dt, "phi0": sc.flow.phi0}
    recs = []
    traj = flow_run(sc, sc.flow.dt, rfde)
    if traj.status != "ok":
        recs.append(_record("flow_run", "flow", inputs, traj.t_end, sc.flow.T, False, traj.status))
        return recs
    res1 = flow_residual(traj)
    recs.append(_record("flow_residual", "flow", inputs, res1, tol.flow_residual, res1 <= tol.flow_residual,
                        "predictor used" if traj.predictor_used else ""))
    traj2 = flow_run(sc, 0.5 * sc.flow.dt, rfde)
    res2 = flow_residual(traj2)
    if res1 <= tol.flow_floor:
        ratio, ok, note = np.inf, True, "residual at roundoff floor"
    else:
        ratio = res1 / max(res2, 1e-300)
        ok, note = ratio >= tol.flow_order, f"{res1:.3g} -> {res2:.3g}"
    recs.append(_record("order_halving", "flow", inputs, ratio, tol.flow_order, ok, note))
    times = sample_times(traj, every=sc.flow.every)
    try:
        worst, count = flatten_along(traj, _flow_chart(sc, rfde), times)
        recs.append(_record("flatten_along_flow", "flow", inputs, worst, tol.flow_flatten,
                            count > 0 and worst <= tol.flow_flatten, f"{count}/{len(times)} segments in region"))
    except (ResolutionError, DomainError, ValueError) as exc:
        recs.append(_record("flatten_along_flow", "flow", inputs, None, tol.flow_flatten, False, str(exc)))
    lam, err, res = exponential_benchmark(sc)
    recs.append(_record("exp_benchmark", "flow", {"r": sc.flow.exp_r, "dt": sc.flow.dt}, err, tol.exp_benchmark,
                        err <= tol.exp_benchmark and res <= tol.exp_benchmark, f"lambda={lam:.12g}, residual={res:.3g}"))
    return recs


# -- negative controls --------------------------------------------------------

def control_charts(sc: Scenario):
    """S5 charts with an oversized budget and with a too-small lambda."""
    grid = _grid(sc, chart=True)
    rfde = RFDE(s5_feedback(sc.system.gamma), IntegralDelay(grid), grid, name="S5")
    good = build_chart(rfde, RegionParams.Uc(sc.chart.c), sc.chart.eps, lo=sc.chart.lo, hi=sc.chart.hi)
    fam = good.transversal
    # lambda as if the budget were eps_large: H grows by eps_large / eps
    lam_big = max(1.0, fam.lam() * sc.chart.eps / sc.controls.eps_large)
    big = Chart(rfde, ConstantOnBox(fam.scaling, grid, sc.chart.lo, sc.chart.hi, lam=lam_big), good.params, good.budget)
    lam_small = fam.lam() * sc.controls.lam_factor
    small = ConstantOnBox(fam.scaling, grid, sc.chart.lo, sc.chart.hi, lam=lam_small)
    return rfde, good, big, small


def outside_witness(sc: Scenario, grid: GridSpec) -> C1Fn:
    c = sc.controls
    return from_samples(grid, lambda t: c.outside_mid + c.outside_amp * np.sin(c.outside_freq * t))


class _ScaledDelay(IntegralDelay):
    """Integral delay whose extended derivative is deliberately mis-scaled."""

    def __init__(self, grid, scale):
        super().__init__(grid)
        self.scale = scale

    def _ext_derivative(self, phi, kappa=0):
        return fl.scale(self.scale, super()._ext_derivative(phi, kappa))


def negative_controls(sc: Scenario) -> list[Record]:
    rng = family_rng(sc, "controls")
    recs = []
    rfde, good, big, small = control_charts(sc)
    inputs = {"eps": sc.chart.eps, "eps_large": sc.controls.eps_large, "seed": sc.seed}
    probes = [_probe_in_region(big, lambda r: uc_probe(sc, big, r), rng) for _ in range(5)]
    recs += smallness_records(big, probes, rng, sc.probes.op_probes, "eps_too_large", family="smallness",
                              expect_fail=True, inputs=inputs)[1:]
    w = roundtrip_stats(big, probes[:3], rng, sc.tolerances)
    cb = big.budget + sc.tolerances.contraction_slack
    recs.append(_record("eps_too_large_contraction", "inversion", inputs, w["contraction"], cb,
                        w["contraction"] <= cb and w["failures"] == 0, f"{w['failures']} inversion failures",
                        expect_fail=True))
    wit = outside_witness(sc, good.grid)
    recs += smallness_records(good, [wit], rng, sc.probes.op_probes, "outside_Uc", family="smallness",
                              expect_fail=True, inputs={"witness": asdict(sc.controls), "c": sc.chart.c})[1:2]
    ys = [rng.uniform(sc.chart.lo, sc.chart.hi) for _ in range(20)]
    _, rt, _ = transversal_report(small, ys, sc.tolerances.slope_at_zero)
    recs.append(_record("lambda_too_small", "transversal", {"lam": small.lam(), "seed": sc.seed}, rt, 1.0, rt <= 1.0,
                        "max |tau(y)|/H(y)", expect_fail=True))
    grid = _grid(sc)
    bad = _ScaledDelay(grid, sc.controls.derivative_scale)
    drng = family_rng(sc, "controls-fd")
    worst = max(fd_check_delay(bad, random_smooth(grid, drng, amplitude=1.5), random_smooth(grid, drng),
                               step=sc.tolerances.fd_step) for _ in range(10))
    recs.append(_record("wrong_derivative", "derivatives", {"scale": sc.controls.derivative_scale}, worst,
                        sc.tolerances.fd_rel, worst <= sc.tolerances.fd_rel, expect_fail=True))
    return recs


# -- demonstrations --------------------------------------------------------------

def _bump(grid: GridSpec, centre: float, width: float) -> C1Fn:
    return from_samples(grid, lambda t: np.exp(-((t - centre) / width) ** 2))


def demo_I(sc: Scenario, grid: GridSpec | None = None) -> dict:
    """The delay is not constant along a ray: ``d(eps phi) != d(2 eps phi)``."""
    grid = grid or _grid(sc)
    d = IntegralDelay(grid)
    phi = _bump(grid, -0.5 * grid.h, 0.15 * grid.h)
    eps = sc.demo.eps
    d1, d2 = float(d.value(eps * phi)[0]), float(d.value(2 * eps * phi)[0])
    return {"d_eps": d1, "d_2eps": d2, "gap": abs(d1 - d2)}


def demo_II(sc: Scenario, grid: GridSpec | None = None) -> dict:
    """Increasing histories agreeing on ``[-h, s]`` and at 0 but with different f."""
    grid = grid or GridSpec(h=sc.grid.h, n=1, N=sc.grid.chart_N)
    h, s = grid.h, sc.demo.s
    rfde = RFDE(s5_feedback(sc.system.gamma), IntegralDelay(grid), grid, name="S5")

    def base(t):
        return 0.1 + 0.3 * (t + h) / h

    def bump(t):
        # C^4 at s, zero on [-h, s] and at 0, positive in between; its
        # slope is at least -0.1/|s|, so psi stays increasing for s <= -1/2
        w = np.clip(t - s, 0.0, None)
        return 0.1 * w**5 * (-t) / (-s) ** 6

    phi = from_samples(grid, base)
    psi = from_samples(grid, lambda t: base(t) + bump(t))
    tt = np.linspace(-h, s, 401)
    agree = float(max(np.abs(eval_fn(phi - psi, tt)).max(), abs((phi - psi).values[0, -1])))
    inc = float(min(eval_fn(deriv(phi), np.linspace(-h, 0, 801)).min(), eval_fn(deriv(psi), np.linspace(-h, 0, 801)).min()))
    fp, fq = float(f(rfde, phi)[0]), float(f(rfde, psi)[0])
    return {"f_phi": fp, "f_psi": fq, "gap": abs(fp - fq), "agreement": agree, "min_slope": inc}


def demo_III(sc: Scenario, grid: GridSpec | None = None) -> list[dict]:
    """``|D_e f(-n)|`` against ``|g'(-n)| = 2(1 + n)``."""
    grid = grid or _grid(sc)
    rfde = RFDE(s5_feedback(sc.system.gamma), IntegralDelay(grid), grid, name="S5")
    rows = []
    for n in range(1, sc.demo.rows + 1):
        nrm = fl.op_norm(Df_ext(rfde, constant(grid, -float(n)))[0])
        rows.append({"n": n, "op_norm": nrm, "lower_bound": 2.0 * (1 + n)})
    return rows


def demo_conditions(sc: Scenario) -> tuple[Report, list[dict]]:
    rep = Report(sc.name, sc.seed)
    tol = sc.tolerances
    r1 = demo_I(sc)
    rep.add(_record("I_ray_nonconstant", "demo", {"eps": sc.demo.eps}, r1["gap"], tol.gap_I, r1["gap"] > tol.gap_I,
                    f"d(eps phi)={r1['d_eps']!r}, d(2 eps phi)={r1['d_2eps']!r}"))
    r2 = demo_II(sc)
    ok2 = r2["gap"] > tol.gap_II and r2["min_slope"] > 0 and r2["agreement"] <= tol.demo_agreement
    rep.add(_record("II_not_bounded_away", "demo", {"s": sc.demo.s}, r2["gap"], tol.gap_II, ok2,
                    f"agreement on [-h,s] and at 0: {r2['agreement']:.3g}; min slope {r2['min_slope']:.3g}"))
    rows = demo_III(sc)
    below = [r["n"] for r in rows if r["op_norm"] < r["lower_bound"] * (1 - 1e-12)]
    norms = [r["op_norm"] for r in rows]
    inc = all(b > a for a, b in zip(norms, norms[1:]))
    rep.add(_record("III_unbounded_derivative", "demo", {"rows": sc.demo.rows}, norms[-1], rows[-1]["lower_bound"],
                    not below and inc, "strictly increasing" if inc else "not increasing"))
    return rep, rows


def demo_csv(rows) -> str:
    out = io.StringIO()
    out.write("# schema=1\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["n", "op_norm", "lower_bound"])
    for r in rows:
        w.writerow([r["n"], repr(float(r["op_norm"])), repr(float(r["lower_bound"]))])
    return out.getvalue()


# -- suites ------------------------------------------------------------------------

def run_suite(sc: Scenario, families=None, progress=None) -> Report:
    """Run the verification families (all by default) and collect records."""
    rep = Report(sc.name, sc.seed)
    chart = uc_chart(sc)
    qchart = qbd_chart(sc, chart.rfde)
    plan = [
        ("funcspace", lambda: check_funcspace(sc)),
        ("derivatives", lambda: check_delay_derivatives(sc) + check_rfde_derivatives(sc)),
        ("transversal", lambda: check_transversal(sc, chart)),
        ("smallness", lambda: check_smallness(sc, chart)),
        ("chart", lambda: check_flattening(sc, chart)),
        ("inversion", lambda: check_inversion(sc, chart)),
        ("bilipschitz", lambda: check_bilipschitz(sc, chart, qchart)),
        ("regions", lambda: check_nesting(sc, qchart)),
        ("flow", lambda: check_flow(sc)),
    ]
    if sc.controls.enabled:
        plan.append(("controls", lambda: negative_controls(sc)))
    for name, fn in plan:
        if families is not None and name not in families:
            continue
        if progress:
            progress(name)
        try:
            rep.extend(fn())
        except (RuntimeError, DomainError, ValueError) as exc:
            rep.add(_record(f"{name}_error", name, {"seed": sc.seed}, None, None, False, f"{type(exc).__name__}: {exc}"))
    return rep
