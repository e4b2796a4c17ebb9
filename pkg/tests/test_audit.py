import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import brentq

from conftest import planar_field, planar_solution
from semistable import Nonlinearity
from semistable.audit import (
    SUMMARY_COLUMNS,
    AuditRecord,
    AuditSettings,
    AuditTarget,
    PhiFunction,
    audit_solution,
    audit_suite,
    build_phik,
    check_boundary_bound,
    check_gauss_bonnet,
    check_isoperimetric,
    check_lower_bound,
    check_main_estimate,
    check_michael_simon,
    check_phik_chain,
    check_second_variation,
    check_stability_inequality,
    check_total_variation,
    divergence_n4,
    main_estimate_constants,
    write_records_json,
    write_summary_csv,
)
from semistable.errors import ArgumentError, ContradictionError, RangeError
from semistable.levelgeom import LevelProfile, ProfileFamily, profile_family
from semistable.planar import DomainMask, Square, linearized_eigenvalue_2d, minimal_branch_2d
from semistable.radial import linearized_eigenvalue, solve_shooting

EXP = Nonlinearity.exponential()
N4_LAMBDA_STAR = 4.81


def synthetic_family(ratio, T=3.0, levels=64):
    s = np.linspace(0.01 * T, 0.99 * T, levels)
    profs = [LevelProfile(x, 1.0, ratio(x) * (1 + x), 1 + x, 1.0, 1.0, True) for x in s]
    return ProfileFamily(T, profs, 0.0)


@pytest.fixture(scope="module")
def radial4():
    """Radial n = 4 exp solution at λ = 0.9 λ* on the minimal branch."""
    m = brentq(lambda m: solve_shooting(4, EXP, m)[0] - 0.9 * N4_LAMBDA_STAR, 0.1, 1.5)
    lam, sol = solve_shooting(4, EXP, m)
    assert linearized_eigenvalue(sol, EXP) > 0
    return sol, profile_family(sol, 64)


@pytest.fixture(scope="module")
def disk_family():
    u = planar_solution("disk", 1 / 128, "exp")
    return u, profile_family(u, 64)


# --- records -------------------------------------------------------------------


@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
def test_holds_matches_tolerance(lhs, rhs):
    r = AuditRecord("x", {}, lhs, rhs)
    tol = 1e-8 * max(abs(lhs), abs(rhs), 1.0)
    assert r.slack == rhs - lhs
    assert r.holds == (rhs - lhs >= -tol)


def test_record_boundary_of_tolerance():
    assert AuditRecord("x", {}, 1.0 + 0.5e-8, 1.0).holds
    assert not AuditRecord("x", {}, 1.0 + 2e-8, 1.0).holds


# --- φ functions ------------------------------------------------------------------


def test_phik_constant_ratio_two():
    fam = synthetic_family(lambda s: 2.0)
    phi = build_phik(fam, 1.0, 4)
    f, df = phi.at(np.array([0.5, 1.0, 2.0]))
    assert f[0] == pytest.approx(0.5)
    assert f[1] == pytest.approx(1.0)
    assert f[2] == pytest.approx(math.e, rel=1e-12)
    assert df[2] == pytest.approx(math.e, rel=1e-12)


def test_phik_clamped_to_k():
    fam = synthetic_family(lambda s: 1.0 + s)
    phi = build_phik(fam, 1.0, 1)
    s = np.linspace(1.0, 2.9, 7)
    f, _ = phi.at(s)
    assert np.allclose(f, np.exp((s - 1.0) / math.sqrt(2)), rtol=1e-12)


@pytest.mark.parametrize("k", [1, 4, 16, 64])
def test_phik_properties(radial4, k):
    _, fam = radial4
    phi = build_phik(fam, 0.5 * fam.T, k)
    s = np.linspace(0, fam.T, 2001)
    f, _ = phi.at(s)
    assert f[0] == 0.0
    assert np.all(np.diff(f) >= 0)
    assert np.max(np.abs(np.diff(f) / np.diff(s))) <= phi.lipschitz * (1 + 1e-9)


def test_phik_rejects_bad_arguments():
    fam = synthetic_family(lambda s: 2.0)
    with pytest.raises(ArgumentError):
        build_phik(fam, 1.0, 0)
    with pytest.raises(RangeError):
        build_phik(fam, 3.0, 1)
    bad = ProfileFamily(3.0, [LevelProfile(s, 1.0, 1.0, 0.0, 1.0, 1.0, True) for s in (0.5, 1.0, 1.5, 2.0)], 0.0)
    with pytest.raises(ContradictionError):
        build_phik(bad, 1.0, 1)


# --- stability inequality --------------------------------------------------------


@pytest.mark.parametrize("frac", [0.25, 0.5, 0.75])
def test_stability_ramp_disk(disk_family, frac):
    u, fam = disk_family
    rec = check_stability_inequality(u, PhiFunction.ramp(frac * fam.T, fam.T), fam)
    assert rec.holds and rec.slack > 0


def test_ramp_half_reproduces_curvature_chain(disk_family):
    # ∫ₜ^T h₁ ≤ ∫₀^T h₁φ² ≤ B_t for the ramp at t = T/2
    u, fam = disk_family
    t = fam.T / 2
    rec = check_stability_inequality(u, PhiFunction.ramp(t, fam.T), fam)
    B = fam.integrate(fam.column("h2"), 0.0, t) / t**2
    assert rec.rhs == pytest.approx(B, rel=1e-12)
    assert fam.integrate(fam.column("h1"), t, fam.T, at_top=None) <= rec.lhs <= B


def test_stability_zero_phi(disk_family):
    u, fam = disk_family
    rec = check_stability_inequality(u, PhiFunction.zero(fam.T), fam)
    assert rec.lhs == 0.0 and rec.rhs == 0.0 and rec.holds


def test_stability_fails_on_upper_branch():
    lam, sol = solve_shooting(2, EXP, 5.0)
    assert linearized_eigenvalue(sol, EXP) < 0
    fam = profile_family(sol, 64)
    recs = [check_stability_inequality(sol, PhiFunction.ramp(f * fam.T, fam.T), fam) for f in (0.25, 0.5, 0.75)]
    assert all(not r.holds for r in recs)


@pytest.mark.parametrize("frac", [0.25, 0.5, 0.75])
@pytest.mark.parametrize("k", [1, 4, 16, 64])
def test_phik_chain_radial4(radial4, frac, k):
    sol, fam = radial4
    rec = check_phik_chain(fam, frac * fam.T, k)
    assert rec.lhs <= rec.rhs * (1 + 1e-6)
    stab = check_stability_inequality(sol, build_phik(fam, frac * fam.T, k), fam)
    assert stab.holds


# --- curvature checks --------------------------------------------------------------


def test_michael_simon_n4(radial4):
    _, fam = radial4
    rec = check_michael_simon(fam, 4)
    assert rec.empirical_constant == pytest.approx(0.04561, abs=1e-4)
    assert rec.empirical_constant == pytest.approx((2 * math.pi**2) ** (1 / 3) / (6 * math.pi**2), rel=1e-6)
    assert rec.inputs["ratio_spread"] < 1e-3


def test_michael_simon_circles():
    fam = profile_family(planar_field("disk", 1 / 128, "1-r2"), 32)
    rec = check_michael_simon(fam, 2)
    assert rec.empirical_constant == pytest.approx(1 / (2 * math.pi), rel=1e-2)


@pytest.mark.parametrize("shape", ["square", "ellipse"])
def test_curve_checks_on_noncircular_levels(shape):
    fam = profile_family(planar_solution(shape, 1 / 128, "exp"), 32)
    ms = check_michael_simon(fam, 2)
    assert ms.rhs == pytest.approx(2 * math.pi, rel=2e-2)
    assert check_gauss_bonnet(fam).holds
    assert check_isoperimetric(fam).holds


def test_michael_simon_wrong_dimension(disk_family):
    with pytest.raises(ArgumentError):
        check_michael_simon(disk_family[1], 3)


@pytest.mark.parametrize("frac", [0.2, 0.5, 0.8])
def test_total_variation_n2(disk_family, frac):
    _, fam = disk_family
    rec = check_total_variation(fam, frac * fam.T, 2)
    assert rec.holds
    assert rec.lhs == pytest.approx(rec.inputs["V_t_power"], rel=5e-2)


def test_divergence_control_n4(radial4):
    sol, _ = radial4
    vals = divergence_n4(sol).inputs["values"]
    steps = np.diff(vals)
    # log V(t) - log V(s) grows by 2 log 10 per decade of T - s
    assert np.allclose(steps, 2 * math.log(10), rtol=2e-2)


# --- main estimate --------------------------------------------------------------


def test_main_estimate_disk_refinement():
    cs = []
    for h in (1 / 64, 1 / 128):
        u = planar_solution("disk", h, "exp")
        (rec,) = check_main_estimate(u, [u.max / 2])
        assert 0 < rec.empirical_constant < math.inf
        cs.append(rec.empirical_constant)
    assert cs[0] == pytest.approx(cs[1], rel=0.1)


def test_main_estimate_radial4_refinement(radial4):
    sol, _ = radial4
    coarse = solve_shooting(4, EXP, sol.center, nodes=1025)[1]
    c = [check_main_estimate(s, [s.center / 2])[0].empirical_constant for s in (coarse, sol)]
    assert c[0] == pytest.approx(c[1], rel=0.1)


def test_main_estimate_degenerate_threshold(disk_family):
    u, _ = disk_family
    (rec,) = check_main_estimate(u, [u.max])
    assert rec.empirical_constant == 0.0
    assert rec.holds
    with pytest.raises(RangeError):
        check_main_estimate(u, [1.1 * u.max])


def test_main_estimate_min_max(disk_family):
    u, _ = disk_family
    recs = check_main_estimate(u, np.linspace(0.1, 0.9, 9) * u.max)
    c = main_estimate_constants(recs)
    assert 0 < c["min"] <= c["max"] < math.inf


# --- boundary and lower bounds ------------------------------------------------


def test_boundary_bound_closed_form():
    rec = check_boundary_bound(planar_field("disk", 1 / 128, "1-r2"), 0.2)
    assert rec.lhs == pytest.approx(0.36, rel=1e-2)
    assert rec.rhs == pytest.approx(math.pi / 2, rel=1e-3)
    assert rec.empirical_constant == pytest.approx(4.363, rel=1e-2)


def test_boundary_bound_refinement():
    g = [check_boundary_bound(planar_solution("disk", h, "exp"), 0.2).empirical_constant for h in (1 / 64, 1 / 128)]
    assert g[0] > 0 and g[0] == pytest.approx(g[1], rel=5e-2)


def test_boundary_bound_square_branch():
    dom = DomainMask.build(Square(), 1 / 32)
    br = minimal_branch_2d(dom, EXP, [1.0, 3.0, 5.0, 6.0], with_eigen=False)
    gammas = [check_boundary_bound(p.field, 0.1).empirical_constant for p in br.points]
    assert len(gammas) == 4 and min(gammas) > 1.0


def test_boundary_bound_rho_too_large():
    with pytest.raises(ArgumentError):
        check_boundary_bound(planar_field("disk", 1 / 32, "1-r2"), 1.0)


def test_lower_bound_torsion():
    u = planar_solution("disk", 1 / 64, "one")
    rec = check_lower_bound(u, Nonlinearity.constant(1.0), 1.0)
    assert rec.lhs == pytest.approx(0.25, rel=2e-2)
    assert rec.rhs == pytest.approx(math.pi / 3, rel=1e-2)


def test_lower_bound_refinement():
    c = [
        check_lower_bound(planar_solution("disk", h, "exp"), EXP, 1.0).empirical_constant
        for h in (1 / 64, 1 / 128)
    ]
    assert c[0] > 0 and c[0] == pytest.approx(c[1], rel=5e-2)


def test_lower_bound_vacuous():
    u = planar_solution("disk", 1 / 32, "one")
    rec = check_lower_bound(u, Nonlinearity.constant(0.0), 1.0)
    assert rec.vacuous and rec.rhs == 0.0 and rec.empirical_constant is None


# --- suites -------------------------------------------------------------------


def test_disk_audit_all_hold():
    u = planar_solution("disk", 1 / 64, "exp")
    recs = audit_solution(AuditTarget("disk", u, EXP, 1.0))
    assert {r.check_id for r in recs} >= {
        "stability_inequality", "michael_simon", "isoperimetric", "gauss_bonnet",
        "total_variation", "main_estimate", "boundary_bound", "lower_bound",
    }
    assert all(r.holds for r in recs)


def test_suite_deterministic_across_workers(radial4, tmp_path):
    sol, _ = radial4
    targets = [
        AuditTarget("disk", planar_solution("disk", 1 / 32, "exp"), EXP, 1.0),
        AuditTarget("ball4", sol, EXP, sol.lam),
    ]
    settings = AuditSettings(n_levels=24, k_list=(1, 4))
    a = audit_suite(targets, settings, workers=1)
    b = audit_suite(targets, settings, workers=3)
    pa = write_summary_csv(a, tmp_path / "a.csv").read_bytes()
    pb = write_summary_csv(b, tmp_path / "b.csv").read_bytes()
    assert pa == pb
    ja = write_records_json(a, tmp_path / "a.json")
    data = json.loads(ja.read_text())
    assert len(data) == len(a) and set(data[0]) >= {"check_id", "lhs", "rhs", "slack", "holds"}
    with open(tmp_path / "a.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == SUMMARY_COLUMNS
    assert [r[1] for r in rows[1:]] == sorted(r[1] for r in rows[1:])


@pytest.mark.parametrize("shape", ["disk", "square"])
def test_second_variation_above_principal_eigenvalue(shape):
    u = planar_solution(shape, 1 / 64)
    lam1 = linearized_eigenvalue_2d(u, Nonlinearity.exponential(), 1.0)
    rec = check_second_variation(u, Nonlinearity.exponential(), 1.0, count=6, seed=3)
    assert rec.holds
    # Rayleigh quotients of the continuous form sit above the discrete λ₁ up to quadrature error
    assert rec.rhs >= lam1 * (1 - 0.02)


def test_second_variation_seeded():
    u = planar_solution("disk", 1 / 32)
    a = check_second_variation(u, Nonlinearity.exponential(), 1.0, count=3, seed=1)
    b = check_second_variation(u, Nonlinearity.exponential(), 1.0, count=3, seed=1)
    assert a.rhs == b.rhs
    with pytest.raises(ArgumentError):
        check_second_variation(u, Nonlinearity.exponential(), 1.0, count=0)
