"""Measured audit of the inequalities behind the L∞ estimate for semi-stable solutions.

Every check returns :class:`AuditRecord` objects: the two sides of one
inequality as computed, their slack, whether it holds, and (where the
inequality carries an unknown constant) the smallest constant that makes it
hold on this solution. Constants are reported, never asserted.

Checks work on radial solutions (any n) and on planar fields (n = 2). The
s-integrals use the level grid of a :class:`~semistable.levelgeom.ProfileFamily`
throughout, including the construction of φ_k.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import ArgumentError, ContradictionError, InsufficientDataError, RangeError
from .levelgeom import (
    ProfileFamily,
    field_max,
    gradient_energy,
    profile_family,
    radial_gradient_energy,
)
from .nonlinearity import Nonlinearity
from .planar import ScalarField2D, l2_norm_sq, quadratic_form, random_test_functions
from .radial import RadialSolution, sphere_area

AUDIT_TOL = 1e-8
SUMMARY_COLUMNS = ("check_id", "solution", "param", "lhs", "rhs", "slack", "holds", "constant")


@dataclass
class AuditRecord:
    check_id: str
    inputs: dict
    lhs: float
    rhs: float
    empirical_constant: float | None = None
    excluded_fraction: float = 0.0
    vacuous: bool = False

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    @property
    def holds(self) -> bool:
        tol = AUDIT_TOL * max(abs(self.lhs), abs(self.rhs), 1.0)
        return bool(self.slack >= -tol)

    @property
    def solution(self) -> str:
        return str(self.inputs.get("solution", ""))

    @property
    def param(self) -> str:
        return str(self.inputs.get("param", ""))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["slack"] = self.slack
        d["holds"] = self.holds
        return d

    def summary_row(self) -> list:
        c = "" if self.empirical_constant is None else repr(float(self.empirical_constant))
        return [
            self.check_id, self.solution, self.param,
            repr(float(self.lhs)), repr(float(self.rhs)), repr(float(self.slack)),
            str(self.holds).lower(), c,
        ]


# --- test functions of the level value -------------------------------------------


@dataclass(frozen=True)
class PhiFunction:
    """Piecewise φ on [0, T] with φ(0) = 0.

    ``s``/``values``/``derivs`` tabulate φ and φ' at breakpoints; ``t`` is
    where the linear ramp s/t ends. ``lipschitz`` bounds |φ'|.
    """

    kind: str
    t: float
    T: float
    s: np.ndarray
    values: np.ndarray
    derivs: np.ndarray
    lipschitz: float
    k: int | None = None

    @classmethod
    def ramp(cls, t: float, T: float) -> "PhiFunction":
        """φ = s/t on [0, t], 1 after."""
        if not 0 < t <= T:
            raise RangeError(f"ramp threshold {t} outside (0, {T}]")
        s = np.array([0.0, t, T])
        return cls("ramp_then_one", t, T, s, np.array([0.0, 1.0, 1.0]), np.array([1 / t, 0.0, 0.0]), 1 / t)

    @classmethod
    def zero(cls, T: float) -> "PhiFunction":
        s = np.array([0.0, T])
        return cls("zero", T, T, s, np.zeros(2), np.zeros(2), 0.0)

    def tail(self, s) -> tuple[np.ndarray, np.ndarray]:
        """The piece of (φ, φ') used on (t, T], continued to every s (flat below t)."""
        s = np.asarray(s, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(s), np.zeros_like(s)
        if self.kind == "ramp_then_one":
            return np.ones_like(s), np.zeros_like(s)
        # φ_k = exp(E): interpolate E and φ'/φ = √g_k/√2 linearly between nodes
        expo = np.interp(s, self.s, np.log(self.values))
        rate = np.interp(s, self.s, self.derivs / self.values)
        return np.exp(expo), rate * np.exp(expo)

    def at(self, s) -> tuple[np.ndarray, np.ndarray]:
        """(φ(s), φ'(s)) for an array of levels; φ' is taken from the right at s = t."""
        s = np.asarray(s, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(s), np.zeros_like(s)
        ramp = s <= self.t
        f, df = self.tail(s)
        return np.where(ramp, s / self.t, f), np.where(ramp & (s < self.t), 1.0 / self.t, df)


def build_phik(fam: ProfileFamily, t: float, k: int) -> PhiFunction:
    """φ_k from g_k = min(k, h₁/h₂) on the regular levels of ``fam``.

    φ_k = s/t on [0, t] and exp((1/√2)∫ₜ^s √g_k) after, the integral taken by
    the trapezoid rule on the family's own level grid (g_k interpolated
    linearly, extended flat to T).
    """
    if k < 1 or int(k) != k:
        raise ArgumentError("k must be a positive integer")
    if not 0 < t < fam.T:
        raise RangeError(f"threshold {t} outside (0, T = {fam.T})")
    reg = [p for p in fam.profiles if p.regular]
    if not reg:
        raise InsufficientDataError("no regular levels to build φ_k from")
    for p in reg:
        if not p.h2 > 0:
            raise ContradictionError(f"h₂ = {p.h2} at the regular level s = {p.s}; h₂ must be positive there")
    s_reg = np.array([p.s for p in reg])
    g = np.minimum(float(k), np.array([p.h1 / p.h2 for p in reg]))
    nodes = np.concatenate([[t], s_reg[s_reg > t], [fam.T]])
    nodes = np.unique(nodes)
    gk = np.interp(nodes, s_reg, g)
    root = np.sqrt(gk)
    expo = np.concatenate([[0.0], np.cumsum(0.5 * (root[1:] + root[:-1]) * np.diff(nodes))]) / math.sqrt(2)
    phi = np.exp(expo)
    dphi = root / math.sqrt(2) * phi
    lip = max(1.0 / t, float(dphi.max()))
    return PhiFunction("phi_k", t, fam.T, nodes, phi, dphi, lip, int(k))


def _split_integral(fam: ProfileFamily, values_lo, values_hi, t: float, at_top_hi=None) -> float:
    """∫₀ᵗ of one level-wise integrand plus ∫ₜ^T of another (allowing a kink at t)."""
    total = 0.0
    if values_lo is not None and t > 0:
        total += fam.integrate(values_lo, 0.0, t, at_top=None)
    if values_hi is not None and t < fam.T:
        total += fam.integrate(values_hi, t, fam.T, at_top=at_top_hi)
    return total


def _stability_sides(fam: ProfileFamily, phi: PhiFunction) -> tuple[float, float]:
    s = fam.s
    h1, h2 = fam.column("h1"), fam.column("h2")
    if phi.kind == "zero":
        return 0.0, 0.0
    # each piece is evaluated on the whole level grid, so the interpolant at t uses the right formula
    f, df = phi.tail(s)
    f_lo, df_lo = s / phi.t, np.full_like(s, 1.0 / phi.t)
    lhs = _split_integral(fam, h1 * f_lo**2, h1 * f**2, phi.t)
    rhs = _split_integral(fam, h2 * df_lo**2, h2 * df**2, phi.t, at_top_hi=0.0)
    return lhs, rhs


def check_stability_inequality(u, phi: PhiFunction, fam: ProfileFamily, solution: str = "", **extra) -> AuditRecord:
    """∫₀^T h₁ φ² ds ≤ ∫₀^T h₂ φ'² ds (the level-set form of semi-stability)."""
    lhs, rhs = _stability_sides(fam, phi)
    param = phi.kind if phi.kind == "zero" else f"{phi.kind}:t={phi.t / phi.T:.4g}T" + (f":k={phi.k}" if phi.k else "")
    return AuditRecord(
        "stability_inequality",
        {"solution": solution, "param": param, "t": phi.t, "k": phi.k, **extra},
        lhs,
        rhs,
        excluded_fraction=fam.excluded_fraction,
    )


def check_phik_chain(fam: ProfileFamily, t: float, k: int, solution: str = "") -> AuditRecord:
    """∫ₜ^T h₁ φ_k² ds ≤ 2B_t with B_t = t⁻²∫₀ᵗ h₂ ds on the same level grid."""
    phi = build_phik(fam, t, k)
    f, _ = phi.tail(fam.s)
    lhs = fam.integrate(fam.column("h1") * f**2, t, fam.T, at_top=None)
    B = fam.integrate(fam.column("h2"), 0.0, t) / t**2
    return AuditRecord(
        "phik_chain",
        {"solution": solution, "param": f"t={t / fam.T:.4g}T:k={k}", "t": t, "k": k, "B_t": B},
        lhs,
        2 * B,
        excluded_fraction=fam.excluded_fraction,
    )


# --- curvature inequalities --------------------------------------------------------


def check_michael_simon(fam: ProfileFamily, n: int, solution: str = "") -> AuditRecord:
    """n = 4: h₂^{1/3} against h₁ per level; n = 2: 1 against ∫|κ| dℓ per component.

    The record carries the worst level (largest ratio) and the smallest
    constant C with lhs ≤ C·rhs on every regular level.
    """
    reg = [p for p in fam.profiles if p.regular]
    if not reg:
        raise InsufficientDataError("no regular levels")
    if n == 4:
        ratios = np.array([p.h2 ** (1 / 3) / p.h1 for p in reg])
        i = int(np.argmax(ratios))
        spread = float(np.std(ratios) / np.mean(ratios))
        return AuditRecord(
            "michael_simon",
            {"solution": solution, "param": "n=4", "s": reg[i].s, "ratio_spread": spread},
            reg[i].h2 ** (1 / 3),
            reg[i].h1,
            float(ratios[i]),
            fam.excluded_fraction,
        )
    if n == 2:
        turns = [(p.s, a) for p in reg for a in p.abs_turning]
        if not turns:
            raise InsufficientDataError("no curve components on regular levels")
        s_min, a_min = min(turns, key=lambda x: x[1])
        return AuditRecord(
            "michael_simon",
            {"solution": solution, "param": "n=2", "s": s_min},
            1.0,
            a_min,
            1.0 / a_min,
            fam.excluded_fraction,
        )
    raise ArgumentError(f"Michael-Simon check is defined for n = 2 or n = 4, not {n}")


def check_gauss_bonnet(fam: ProfileFamily, solution: str = "", tol: float = 0.02) -> AuditRecord:
    """Total turning of every component on regular levels within ``tol`` of 2π."""
    dev = [(p.s, abs(tr - 2 * math.pi) / (2 * math.pi)) for p in fam.profiles if p.regular for tr in p.turning]
    if not dev:
        raise InsufficientDataError("no curve components on regular levels")
    s_worst, worst = max(dev, key=lambda x: x[1])
    return AuditRecord(
        "gauss_bonnet",
        {"solution": solution, "param": f"tol={tol:g}", "s": s_worst},
        worst,
        tol,
        excluded_fraction=fam.excluded_fraction,
    )


def check_isoperimetric(fam: ProfileFamily, solution: str = "", tol: float = 0.02) -> AuditRecord:
    """4πV(s) ≤ |Γ_s|²(1 + tol) at the worst regular level; constant = max 4πV/|Γ|²."""
    reg = [p for p in fam.profiles if p.regular]
    if not reg:
        raise InsufficientDataError("no regular levels")
    ratios = [4 * math.pi * p.V / p.length**2 for p in reg]
    i = int(np.argmax(ratios))
    p = reg[i]
    return AuditRecord(
        "isoperimetric",
        {"solution": solution, "param": f"tol={tol:g}", "s": p.s},
        4 * math.pi * p.V,
        p.length**2 * (1 + tol),
        float(ratios[i]),
        fam.excluded_fraction,
    )


def check_total_variation(fam: ProfileFamily, t: float, n: int = 2, solution: str = "", tol: float = 0.05) -> AuditRecord:
    """((4-n)/n)∫ₜ^T V^{2(2-n)/n}(-V') ds ≤ V(t)^{(4-n)/n}(1 + tol), -V' = ∫dℓ/|∇u|."""
    if n not in (2, 3):
        raise ArgumentError("total-variation bound is used for n = 2, 3 only")
    V = fam.column("V")
    weight = V ** (2 * (2 - n) / n) * fam.column("inv_grad")
    lhs = (4 - n) / n * fam.integrate(weight, lo=t, at_top=None)
    s_reg, V_reg = fam._regular_pairs(V)
    Vt = float(np.interp(t, s_reg, V_reg))
    rhs = Vt ** ((4 - n) / n)
    return AuditRecord(
        "total_variation",
        {"solution": solution, "param": f"t={t / fam.T:.4g}T", "t": t, "n": n, "tol": tol, "V_t_power": rhs},
        lhs,
        rhs * (1 + tol),
        excluded_fraction=fam.excluded_fraction,
    )


def divergence_n4(sol: RadialSolution, t_frac: float = 0.5, cutoffs=(1e-2, 1e-3, 1e-4, 1e-5), solution: str = "") -> AuditRecord:
    """Negative control: ∫ₜ^{s_c} V^{-1}(-V') ds for n = 4 grows without bound as s_c → T.

    The integral equals log V(t) - log V(s_c); the record's lhs/rhs are its
    values at the coarsest and finest cutoff, so ``holds`` reads "still
    growing", and ``inputs['values']`` lists every cutoff.
    """
    if sol.n != 4:
        raise ArgumentError("the divergence control is for n = 4")
    T = sol.center
    t = t_frac * T
    w = sphere_area(4)
    vals = []
    for c in cutoffs:
        # the integrand grows like 1/(T - s): use a grid uniform in log(T - s)
        gap = np.geomspace(T - t, c * T, 400)
        s_grid = T - gap
        r = np.array([sol.level_radius(s) for s in s_grid])
        slope = np.abs(sol.interp()(r, 1))
        V = w * r**4 / 4
        integrand = (w * r**3 / slope) / V
        vals.append(float(np.sum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(s_grid))))
    return AuditRecord(
        "divergence_n4",
        {"solution": solution, "param": f"t={t_frac:g}T", "cutoffs": list(cutoffs), "values": vals},
        vals[0],
        vals[-1],
    )


# --- the estimates ---------------------------------------------------------------


def _domain_measure(u) -> float:
    if isinstance(u, RadialSolution):
        return sphere_area(u.n) / u.n
    return u.dom.area


def _dimension(u) -> int:
    return u.n if isinstance(u, RadialSolution) else 2


def _sublevel_gradient_energy(u, t: float) -> float:
    if isinstance(u, RadialSolution):
        return radial_gradient_energy(u, t)
    return gradient_energy(u, t)


def check_main_estimate(u, t_grid: Sequence[float], solution: str = "") -> list[AuditRecord]:
    """max u ≤ t + (1/t)|Ω|^{(4-n)/(2n)} (∫_{u<t}|∇u|⁴)^{1/2} per t, with C_emp(t).

    C_emp(t) = (max u - t)·t / (|Ω|^{(4-n)/(2n)} (∫_{u<t}|∇u|⁴)^{1/2}) is the
    smallest constant in front of the second term that makes the bound hold.
    """
    T = field_max(u)
    n = _dimension(u)
    omega = _domain_measure(u) ** ((4 - n) / (2 * n))
    out = []
    for t in t_grid:
        if not 0 < t <= T:
            raise RangeError(f"threshold {t} outside (0, max u = {T}]")
        E = _sublevel_gradient_energy(u, t)
        if not E > 0:
            raise RangeError(f"empty sublevel set {{u < {t}}}")
        core = omega * math.sqrt(E)
        out.append(
            AuditRecord(
                "main_estimate",
                {"solution": solution, "param": f"t={t / T:.4g}T", "t": t, "n": n, "energy": E},
                T,
                t + core / t,
                (T - t) * t / core,
            )
        )
    return out


def main_estimate_constants(records: list[AuditRecord]) -> dict[str, float]:
    cs = [r.empirical_constant for r in records if r.check_id == "main_estimate"]
    if not cs:
        raise InsufficientDataError("no main-estimate records")
    return {"min": float(min(cs)), "max": float(max(cs))}


def check_boundary_bound(u, rho: float, solution: str = "") -> AuditRecord:
    """sup over the strip {dist(x, ∂Ω) < ρ} of u against ‖u‖_{L¹}; γ_emp = ‖u‖₁ / sup."""
    if isinstance(u, RadialSolution):
        if not 0 < rho < 1:
            raise ArgumentError(f"ρ = {rho} must lie in (0, inradius = 1)")
        sup = float(u.interp()(1 - rho))
        l1 = u.l1_norm()
    else:
        dom = u.dom
        inr = dom.shape.inradius
        if not 0 < rho < inr:
            raise ArgumentError(f"ρ = {rho} must lie in (0, inradius = {inr:g})")
        if not dom.convex:
            raise ArgumentError("boundary bound needs a convex domain")
        strip = dom.inside & (dom.delta <= rho)
        sup = float(u.grid[strip].max())
        l1 = dom.integrate(np.abs(u.grid))
    return AuditRecord(
        "boundary_bound",
        {"solution": solution, "param": f"rho={rho:g}", "rho": rho},
        sup,
        l1,
        l1 / sup if sup > 0 else math.inf,
    )


def check_lower_bound(u, f: Nonlinearity, lam: float, solution: str = "") -> AuditRecord:
    """min u/δ (over nodes with δ ≥ h) against ∫ λ f(u) δ dx; c_emp = their ratio.

    A zero right side marks the record vacuous and leaves the constant unset.
    """
    if isinstance(u, RadialSolution):
        r = u.r_nodes
        delta = 1 - r
        keep = delta >= np.diff(r).max()
        lhs = float(np.min(u.u[keep] / delta[keep]))
        from scipy.integrate import quad

        spline = u.interp()
        integrand = lambda x: lam * float(f.eval(max(float(spline(x)), 0.0))) * (1 - x) * x ** (u.n - 1)
        rhs = sphere_area(u.n) * quad(integrand, 0.0, 1.0, limit=400, epsrel=1e-10)[0]
    else:
        dom = u.dom
        keep = dom.inside & (dom.delta >= dom.h)
        if not keep.any():
            raise RangeError("no nodes at distance ≥ h from the boundary")
        lhs = float(np.min(u.grid[keep] / dom.delta[keep]))
        fu = np.zeros_like(u.grid)
        fu[dom.inside] = f.eval(u.values)
        rhs = dom.integrate(lam * fu * dom.delta)
    vacuous = rhs == 0.0
    if np.any(np.asarray(f.eval(np.linspace(0, field_max(u), 16))) < 0):
        raise ArgumentError("lower bound needs f(u) ≥ 0 on the range of u")
    return AuditRecord(
        "lower_bound",
        {"solution": solution, "param": f"lambda={lam:g}", "lambda": lam},
        lhs,
        rhs,
        None if vacuous else lhs / rhs,
        vacuous=vacuous,
    )


def check_second_variation(u: ScalarField2D, f: Nonlinearity, lam: float, count: int, seed: int = 0, solution: str = "") -> AuditRecord:
    """0 against min Q_u(ξ)/‖ξ‖² over ``count`` seeded random test functions."""
    if count < 1:
        raise ArgumentError("need at least one test function")
    quotients = [quadratic_form(u, f, lam, xi) / l2_norm_sq(xi) for xi in random_test_functions(u.dom, count, seed)]
    q = float(min(quotients))
    return AuditRecord(
        "second_variation",
        {"solution": solution, "param": f"samples={count},seed={seed}", "samples": count, "seed": seed},
        0.0,
        q,
        q,
    )


# --- suites ------------------------------------------------------------------------


@dataclass
class AuditTarget:
    """A solution with the data the checks need."""

    ident: str
    u: Any
    f: Nonlinearity
    lam: float
    lambda1: float = float("nan")

    @property
    def n(self) -> int:
        return _dimension(self.u)


@dataclass
class AuditSettings:
    t_fractions: tuple = (0.25, 0.5, 0.75)
    k_list: tuple = (1, 4, 16, 64)
    n_levels: int = 64
    main_t_fractions: tuple = tuple(np.round(np.linspace(0.1, 0.9, 9), 10))
    rho: float = 0.2
    tv_fraction: float = 0.5
    phi: tuple = ("ramp", "phik")
    curve_tol: float = 0.02
    samples: int = 0
    seed: int = 0


def audit_solution(target: AuditTarget, settings: AuditSettings = AuditSettings(), family: ProfileFamily | None = None) -> list[AuditRecord]:
    """Every applicable check on one solution (``family`` reuses precomputed level profiles)."""
    u, n, sid = target.u, target.n, target.ident
    fam = family if family is not None else profile_family(u, settings.n_levels)
    T = fam.T
    recs = []
    if "ramp" in settings.phi:
        for frac in settings.t_fractions:
            recs.append(check_stability_inequality(u, PhiFunction.ramp(frac * T, T), fam, sid, lambda1=target.lambda1))
    if "phik" in settings.phi:
        for frac in settings.t_fractions:
            for k in settings.k_list:
                phi = build_phik(fam, frac * T, k)
                recs.append(check_stability_inequality(u, phi, fam, sid, lambda1=target.lambda1))
                recs.append(check_phik_chain(fam, frac * T, k, sid))
    if n in (2, 4):
        recs.append(check_michael_simon(fam, n, sid))
    if n == 2:
        recs.append(check_isoperimetric(fam, sid, settings.curve_tol))
        if not isinstance(u, RadialSolution):
            recs.append(check_gauss_bonnet(fam, sid, settings.curve_tol))
    if n in (2, 3):
        recs.append(check_total_variation(fam, settings.tv_fraction * T, n, sid))
    if n == 4 and isinstance(u, RadialSolution):
        recs.append(divergence_n4(u, settings.tv_fraction, solution=sid))
    recs.extend(check_main_estimate(u, [f * T for f in settings.main_t_fractions], sid))
    recs.append(check_boundary_bound(u, settings.rho, sid))
    recs.append(check_lower_bound(u, target.f, target.lam, sid))
    if settings.samples and isinstance(u, ScalarField2D):
        recs.append(check_second_variation(u, target.f, target.lam, settings.samples, settings.seed, sid))
    return recs


def _order_key(r: AuditRecord):
    return (r.solution, r.check_id, r.inputs.get("t") if isinstance(r.inputs.get("t"), float) else -1.0, r.param)


def audit_suite(
    targets: Sequence[AuditTarget], settings: AuditSettings = AuditSettings(), workers: int = 1, families: Sequence[ProfileFamily] | None = None
) -> list[AuditRecord]:
    """Audit every target (concurrently if ``workers`` > 1); records sorted by (solution, check, t)."""
    fams = list(families) if families is not None else [None] * len(targets)
    if len(fams) != len(targets):
        raise ArgumentError("one family per target expected")
    job = lambda pair: audit_solution(pair[0], settings, pair[1])
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(job, zip(targets, fams)))
    else:
        parts = [job(pair) for pair in zip(targets, fams)]
    return sorted((r for part in parts for r in part), key=_order_key)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def write_records_json(records: list[AuditRecord], path) -> Path:
    path = Path(path)
    path.write_text(json.dumps([_jsonable(r.to_dict()) for r in records], indent=1, sort_keys=True))
    return path


def write_summary_csv(records: list[AuditRecord], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in records:
            w.writerow(r.summary_row())
    return path
