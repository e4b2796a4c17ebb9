"""The quantitative acceptance anchors, measured and judged one by one.

Every criterion returns a :class:`CriterionResult` with the measured values it
was judged on, so a failing run says by how much it failed. Solutions shared
between criteria (the audit suite) are computed once per :class:`Suite`.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from .audit import (
    PhiFunction,
    build_phik,
    check_boundary_bound,
    check_gauss_bonnet,
    check_isoperimetric,
    check_lower_bound,
    check_main_estimate,
    check_michael_simon,
    check_phik_chain,
    check_stability_inequality,
    main_estimate_constants,
)
from .errors import SemistableError
from .levelgeom import coarea_check, field_max, profile_family
from .nonlinearity import Nonlinearity
from .planar import (
    DomainMask,
    ScalarField2D,
    identity_gap,
    linearized_eigenvalue_2d,
    make_shape,
    solve_newton,
)
from .radial import (
    RadialSolution,
    extremal_parameter,
    linearized_eigenvalue,
    radial_identity_gap,
    solve_shooting,
    trace_branch,
)

EXP = Nonlinearity.exponential()
POWER2 = Nonlinearity.power(2.0)
ONE = Nonlinearity.constant(1.0)

PLANAR_SHAPES = ("disk", "square", "ellipse")
RADIAL_DIMS = (2, 3, 4)
PLANAR_LAMBDA = 1.0
RADIAL_FRACTION = 0.9  # radial suite solutions sit at 0.9 λ* on the minimal branch
T_FRACTIONS = (0.25, 0.5, 0.75)
K_LIST = (1, 4, 16, 64)
MAIN_T_FRACTIONS = tuple(np.round(np.linspace(0.1, 0.9, 9), 10))
RHO = 0.2
VERIFY_BUDGET = 600.0


@dataclass(frozen=True)
class Resolution:
    """Discretisation knobs; ``h`` is the fine planar spacing, 2h the coarse one."""

    name: str = "full"
    h: float = 1 / 256
    n_levels: int = 64
    eig_nodes: int = 4096
    branch_points: int = 60


FULL = Resolution()
REDUCED = Resolution("reduced", eig_nodes=2048, branch_points=40)


@dataclass
class CriterionResult:
    number: int
    title: str
    passed: bool
    measured: dict
    seconds: float = 0.0
    failures: list = field(default_factory=list)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        vals = ", ".join(f"{k}={_fmt(v)}" for k, v in self.measured.items())
        text = f"[{status}] {self.number:2d}. {self.title} ({self.seconds:.1f} s): {vals}"
        if self.failures:
            text += " | failing: " + "; ".join(self.failures)
        return text

    def to_dict(self) -> dict:
        return {
            "number": self.number,
            "title": self.title,
            "passed": self.passed,
            "seconds": self.seconds,
            "measured": {k: _plain(v) for k, v in self.measured.items()},
            "failures": list(self.failures),
        }


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _plain(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    if isinstance(v, (np.integer, int)) and not isinstance(v, bool):
        return int(v)
    return v


def _rel(a: float, b: float) -> float:
    return abs(a - b) / abs(b)


# --- shared solutions --------------------------------------------------------------


@dataclass
class SuiteSolution:
    ident: str
    u: object
    f: Nonlinearity
    lam: float
    lambda1: float

    @property
    def semistable(self) -> bool:
        return self.lambda1 >= -1e-4


class Suite:
    """Lazily computed, memoised suite solutions and their level families."""

    def __init__(self, res: Resolution = FULL, workers: int = 1):
        self.res = res
        self.workers = max(1, int(workers))
        self._memo: dict = {}

    def _cached(self, key, build):
        if key not in self._memo:
            self._memo[key] = build()
        return self._memo[key]

    def planar(self, shape: str, h: float) -> SuiteSolution:
        def build():
            dom = DomainMask.build(make_shape(shape), h)
            u = solve_newton(dom, EXP, PLANAR_LAMBDA)
            lam1 = linearized_eigenvalue_2d(u, EXP, PLANAR_LAMBDA)
            return SuiteSolution(f"{shape}_h{round(1 / h)}", u, EXP, PLANAR_LAMBDA, lam1)

        return self._cached(("planar", shape, h), build)

    def radial(self, n: int) -> SuiteSolution:
        def build():
            b = trace_branch(n, EXP, np.linspace(0.1, 4.0, 40), with_eigen=False)
            ext = extremal_parameter(b)
            target = RADIAL_FRACTION * ext.lambda_star
            m = brentq(lambda m: solve_shooting(n, EXP, m)[0] - target, 1e-3, ext.m_at_max, xtol=1e-13)
            lam, sol = solve_shooting(n, EXP, m)
            lam1 = linearized_eigenvalue(sol, EXP, nodes=self.res.eig_nodes)
            return SuiteSolution(f"ball_n{n}", sol, EXP, lam, lam1)

        return self._cached(("radial", n), build)

    def family(self, sol: SuiteSolution, n_levels: int | None = None):
        n_levels = n_levels or self.res.n_levels
        return self._cached(("family", sol.ident, n_levels), lambda: profile_family(sol.u, n_levels))

    def members(self, h: float | None = None) -> list[SuiteSolution]:
        """Planar suite at spacing ``h`` (default: fine) followed by the radial suite."""
        h = h or self.res.h
        jobs = [lambda s=s: self.planar(s, h) for s in PLANAR_SHAPES]
        jobs += [lambda n=n: self.radial(n) for n in RADIAL_DIMS]
        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                return list(pool.map(lambda job: job(), jobs))
        return [job() for job in jobs]


# --- criteria ------------------------------------------------------------------------


def branch_closed_form(suite: Suite) -> CriterionResult:
    res = suite.res
    b = trace_branch(2, EXP, np.linspace(0.2, 4.0, res.branch_points), workers=suite.workers, eig_nodes=res.eig_nodes)
    ext = extremal_parameter(b)
    lam1 = float(np.interp(ext.m_at_max, b.m, b.lambda1))
    m = {
        "lambda_star": ext.lambda_star,
        "lambda_star_err": abs(ext.lambda_star - 2.0),
        "sup_at_star": ext.m_at_max,
        "sup_err": abs(ext.m_at_max - 2 * math.log(2)),
        "lambda1_at_turn": lam1,
    }
    fails = []
    if m["lambda_star_err"] >= 1e-3:
        fails.append("λ* off by ≥ 1e-3")
    if m["sup_err"] >= 1e-2:
        fails.append("sup norm at λ* off by ≥ 1e-2")
    if abs(lam1) >= 5e-2:
        fails.append("λ₁ at the turning point not within 5e-2 of 0")
    return CriterionResult(1, "closed-form branch n=2", not fails, m, failures=fails)


def singular_regime(suite: Suite) -> CriterionResult:
    b10 = trace_branch(10, EXP, np.linspace(1.0, 30.0, 30), workers=suite.workers, with_eigen=False)
    far = b10.m >= 20
    dev = float(np.max(np.abs(b10.lam[far] - 16.0) / 16.0))
    m = {"n10_max_rel_dev_from_16": dev, "n10_sup": float(b10.points[-1].sup_norm)}
    fails = []
    if dev >= 1e-2:
        fails.append("n=10 branch not within 1% of 16 for m ≥ 20")
    if not m["n10_sup"] > 15:
        fails.append("n=10 sup norm does not exceed 15")
    for n in (3, 4, 9):
        b = trace_branch(n, EXP, np.linspace(0.2, 12.0, 60), workers=suite.workers, with_eigen=False)
        ext = extremal_parameter(b)
        m[f"n{n}_sup_at_fold"] = ext.m_at_max
        if ext.asymptotic or ext.m_at_max > 15:
            fails.append(f"n={n} extremal solution not bounded by 15")
    return CriterionResult(2, "singular regime n=10 vs bounded n=3,4,9", not fails, m, failures=fails)


def _semistability_grid(g: Nonlinearity, n: int, points: int) -> np.ndarray:
    if g.kind == "power":
        return np.geomspace(0.05, 40.0, points)
    if n <= 4:
        return np.linspace(0.05, 4.0, points)
    return np.linspace(0.1, 12.0, points) if n < 10 else np.linspace(0.5, 30.0, points)


def semistability(suite: Suite) -> CriterionResult:
    res = suite.res
    m, fails = {}, []
    for g in (EXP, POWER2):
        for n in (2, 3, 4, 9, 10):
            grid = _semistability_grid(g, n, res.branch_points)
            b = trace_branch(n, g, grid, workers=suite.workers, eig_nodes=res.eig_nodes)
            pts = b.minimal_part()
            worst = min(p.lambda1 for p in pts) if pts else math.nan
            m[f"{g.ident}_n{n}"] = f"{len(pts)} pts, min λ₁ {worst:.4g}"
            if len(pts) < 3 or b.gaps:
                fails.append(f"{g.ident} n={n}: {len(pts)} minimal points, {len(b.gaps)} gaps")
            elif worst < -1e-4:
                fails.append(f"{g.ident} n={n}: λ₁ = {worst:.3g}")
    return CriterionResult(3, "minimal branches are semi-stable", not fails, m, failures=fails)


def identity(suite: Suite) -> CriterionResult:
    m, fails = {}, []
    for shape in PLANAR_SHAPES:
        gap = identity_gap(suite.planar(shape, suite.res.h).u, threshold=0.1)
        m[f"{shape}_gap"] = gap
        if not gap < 1e-3:
            fails.append(f"{shape}: {gap:.3g}")
    mu = 0.5
    closed = {
        "liouville_n2": RadialSolution.from_profile(
            2, lambda r: 2 * np.log((1 + mu) / (1 + mu * r**2)), lambda r: -4 * mu * r / (1 + mu * r**2)
        ),
    }
    for n in (3, 4):
        closed[f"torsion_n{n}"] = RadialSolution.from_profile(n, lambda r, n=n: (1 - r**2) / (2 * n), lambda r, n=n: -r / n)
    for name, sol in closed.items():
        gap = radial_identity_gap(sol)
        m[f"{name}_gap"] = gap
        if not gap < 1e-6:
            fails.append(f"{name}: {gap:.3g}")
    return CriterionResult(4, "level-set Hessian identity", not fails, m, failures=fails)


def coarea(suite: Suite) -> CriterionResult:
    m, fails = {}, []
    for sol in suite.members():
        gap = coarea_check(sol.u, suite.res.n_levels, family=suite.family(sol)).gap
        m[sol.ident] = gap
        if not gap < 2e-2:
            fails.append(f"{sol.ident}: {gap:.3g}")
    return CriterionResult(5, "coarea consistency", not fails, m, failures=fails)


def stability_inequality(suite: Suite) -> CriterionResult:
    m, fails = {}, []
    worst_chain = -math.inf
    for sol in suite.members():
        if not sol.semistable:
            m[f"{sol.ident}_skipped"] = f"λ₁={sol.lambda1:.3g}"
            continue
        fam = suite.family(sol)
        T = fam.T
        phis = [PhiFunction.ramp(f * T, T) for f in T_FRACTIONS]
        phis += [build_phik(fam, f * T, k) for f in T_FRACTIONS for k in K_LIST]
        slacks = []
        for phi in phis:
            rec = check_stability_inequality(sol.u, phi, fam, sol.ident)
            slacks.append(rec.slack / max(abs(rec.rhs), 1e-300))
            if not rec.holds:
                fails.append(f"{sol.ident} {phi.kind} t={phi.t / T:.2f}T k={phi.k}: slack {rec.slack:.3g}")
        m[f"{sol.ident}_min_rel_slack"] = min(slacks)
        for f in T_FRACTIONS:
            for k in K_LIST:
                rec = check_phik_chain(fam, f * T, k, sol.ident)
                excess = rec.lhs / rec.rhs - 1
                worst_chain = max(worst_chain, excess)
                if excess > 1e-6:
                    fails.append(f"{sol.ident} chain t={f}T k={k}: lhs/rhs-1 = {excess:.3g}")
    m["chain_max_lhs_over_rhs_minus_1"] = worst_chain
    return CriterionResult(6, "stability inequality and φ_k chain", not fails, m, failures=fails)


def curvature_constants(suite: Suite) -> CriterionResult:
    m, fails = {}, []
    fam4 = suite.family(suite.radial(4))
    ms = check_michael_simon(fam4, 4).empirical_constant
    m["michael_simon_n4"] = ms
    if abs(ms - 0.04561) > 1e-4:
        fails.append(f"n=4 constant {ms:.6g}")
    for shape in PLANAR_SHAPES:
        fam = suite.family(suite.planar(shape, suite.res.h))
        gb = check_gauss_bonnet(fam, shape, tol=0.02)
        iso = check_isoperimetric(fam, shape, tol=0.02)
        m[f"{shape}_turning_dev"] = gb.lhs
        m[f"{shape}_iso_ratio"] = iso.empirical_constant
        if not gb.holds:
            fails.append(f"{shape}: turning off 2π by {gb.lhs:.3g}")
        if not iso.holds:
            fails.append(f"{shape}: 4πV/|Γ|² = {iso.empirical_constant:.4g}")
    iso2 = check_isoperimetric(suite.family(suite.radial(2)), "ball_n2", tol=0.02)
    m["ball_n2_iso_ratio"] = iso2.empirical_constant
    if not iso2.holds:
        fails.append(f"ball_n2: 4πV/|Γ|² = {iso2.empirical_constant:.4g}")
    return CriterionResult(7, "Michael-Simon, Gauss-Bonnet, isoperimetric", not fails, m, failures=fails)


def _suite_main_constants(suite: Suite, h: float) -> dict[str, float]:
    out = {}
    for sol in suite.members(h):
        T = field_max(sol.u)
        recs = check_main_estimate(sol.u, [f * T for f in MAIN_T_FRACTIONS], sol.ident)
        out[sol.ident] = main_estimate_constants(recs)["min"]
    return out


def main_estimate(suite: Suite) -> CriterionResult:
    h = suite.res.h
    fine = _suite_main_constants(suite, h)
    coarse = _suite_main_constants(suite, 2 * h)
    m, fails = {}, []
    for k, v in fine.items():
        if not (math.isfinite(v) and v > 0):
            fails.append(f"{k}: C_emp = {v}")
    m["suite_max_fine"] = max(fine.values())
    m["suite_max_coarse"] = max(coarse.values())
    m["suite_max_change"] = _rel(m["suite_max_fine"], m["suite_max_coarse"])
    if not m["suite_max_change"] < 0.1:
        fails.append("suite maximum moves ≥ 10% under grid halving")
    dom = DomainMask.build(make_shape("square"), h)
    torsion = solve_newton(dom, ONE, 1.0)
    m["square_center"] = torsion.at(0.5, 0.5)
    if abs(m["square_center"] - 0.073671) > 1e-4:
        fails.append(f"square centre {m['square_center']:.6g}")
    for shape, exact in (("square", 2 * math.pi**2), ("disk", 5.7832)):
        d = DomainMask.build(make_shape(shape), h)
        lam1 = linearized_eigenvalue_2d(ScalarField2D.zeros(d), ONE, 1.0)
        m[f"{shape}_lambda1"] = lam1
        if _rel(lam1, exact) > 5e-3:
            fails.append(f"{shape} λ₁ {lam1:.6g}")
    return CriterionResult(8, "main estimate constants and Poisson anchors", not fails, m, failures=fails)


def boundary_and_lower(suite: Suite) -> CriterionResult:
    h = suite.res.h
    m, fails = {}, []
    for shape in PLANAR_SHAPES:
        for name, check in (("gamma", lambda s: check_boundary_bound(s.u, RHO)), ("c", lambda s: check_lower_bound(s.u, s.f, s.lam))):
            fine = check(suite.planar(shape, h)).empirical_constant
            coarse = check(suite.planar(shape, 2 * h)).empirical_constant
            m[f"{shape}_{name}"] = fine
            m[f"{shape}_{name}_change"] = _rel(fine, coarse)
            if not fine > 0:
                fails.append(f"{shape} {name}_emp = {fine:.3g}")
            elif _rel(fine, coarse) > 5e-2:
                fails.append(f"{shape} {name}_emp moves {_rel(fine, coarse):.1%} ({coarse:.4g} -> {fine:.4g})")
    dom = DomainMask.build(make_shape("disk"), h)
    para = ScalarField2D.from_function(dom, lambda x, y: 1 - x * x - y * y)
    gamma = check_boundary_bound(para, RHO).empirical_constant
    m["disk_paraboloid_gamma"] = gamma
    if _rel(gamma, (math.pi / 2) / 0.36) > 1e-2:
        fails.append(f"paraboloid γ_emp {gamma:.5g}")
    return CriterionResult(9, "boundary and lower bounds", not fails, m, failures=fails)


CRITERIA = (
    branch_closed_form,
    singular_regime,
    semistability,
    identity,
    coarea,
    stability_inequality,
    curvature_constants,
    main_estimate,
    boundary_and_lower,
)
RUNTIME_LIMITS = {1: 30.0, 2: 120.0}


def run_criterion(func, suite: Suite) -> CriterionResult:
    """Run one criterion; a library error inside it is reported as a failure, not raised."""
    start = time.perf_counter()
    try:
        res = func(suite)
    except SemistableError as exc:
        number = CRITERIA.index(func) + 1
        res = CriterionResult(number, func.__name__.replace("_", " "), False, {}, failures=[f"{type(exc).__name__}: {exc}"])
    res.seconds = time.perf_counter() - start
    limit = RUNTIME_LIMITS.get(res.number)
    if limit is not None and res.seconds >= limit:
        res = replace(res, passed=False, failures=res.failures + [f"runtime {res.seconds:.1f} s ≥ {limit:g} s"])
    return res


def runtime_budget(results: list[CriterionResult], budget: float = VERIFY_BUDGET) -> CriterionResult:
    total = sum(r.seconds for r in results)
    ok = total < budget
    return CriterionResult(
        10, "full suite wall time", ok, {"seconds": total, "budget": budget}, total, [] if ok else [f"{total:.0f} s over budget"]
    )


def run_acceptance(res: Resolution = REDUCED, workers: int = 1, progress=None) -> list[CriterionResult]:
    """All criteria in order; ``progress`` (if given) is called with each result."""
    suite = Suite(res, workers)
    out = []
    for func in CRITERIA:
        r = run_criterion(func, suite)
        out.append(r)
        if progress:
            progress(r)
    r = runtime_budget(out)
    out.append(r)
    if progress:
        progress(r)
    return out
