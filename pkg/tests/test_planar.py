import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import liouville_mu_for_lambda, planar_field, planar_solution
from semistable import Nonlinearity
from semistable.errors import (
    ArgumentError,
    DegenerateFieldError,
    NonConvergenceError,
)
from semistable.planar import (
    Disk,
    DomainMask,
    Ellipse,
    Polygon,
    ScalarField2D,
    Square,
    TestFunction2D,
    gradient_equation_residual,
    identity_gap,
    l2_norm_sq,
    linearized_eigenvalue_2d,
    make_shape,
    minimal_branch_2d,
    quadratic_form,
    random_test_functions,
    solve_newton,
)
from semistable.radial import solve_shooting

EXP = Nonlinearity.exponential()
ONE = Nonlinearity.constant(1.0)
ZERO = Nonlinearity.constant(0.0)


def square_center_series(terms=200):
    k = np.arange(1, 2 * terms, 2, dtype=float)
    m, n = np.meshgrid(k, k)
    s = np.sin(m * np.pi / 2) * np.sin(n * np.pi / 2)
    return float(np.sum(16 * s / (np.pi**4 * m * n * (m * m + n * n))))


# --- shapes and masks ----------------------------------------------------------


@pytest.mark.parametrize(
    "shape",
    [Disk(), Square(), Ellipse(), Polygon(((0, 0), (1, 0), (0.3, 0.8))), Disk(0.5, (1.0, -2.0))],
)
def test_mask_area_and_arms(shape):
    dom = DomainMask.build(shape, 1 / 64)
    assert dom.area == pytest.approx(shape.area, rel=2e-3)
    for arm in dom.arms.values():
        a = arm[dom.inside]
        assert np.all((a > 0) & (a <= 1))
    assert np.all(dom.delta[dom.inside] > 0)
    assert np.all(dom.delta[dom.inside] <= shape.inradius + 1e-12)


def test_square_boundary_nodes_lie_on_the_boundary():
    dom = DomainMask.build(Square(), 1 / 16)
    X, Y = dom.coords
    on_edge = np.isclose(X, 0) | np.isclose(X, 1) | np.isclose(Y, 0) | np.isclose(Y, 1)
    assert not np.any(dom.inside & on_edge)
    # no Shortley-Weller correction is needed on the square
    for arm in dom.arms.values():
        assert np.allclose(arm[dom.inside], 1.0)


def test_ellipse_distance_against_brute_force():
    e = Ellipse(1.0, 0.6)
    t = np.linspace(0, 2 * np.pi, 200001)
    bx, by = np.cos(t), 0.6 * np.sin(t)
    rng = np.random.default_rng(3)
    pts = rng.uniform([-1.2, -0.8], [1.2, 0.8], size=(40, 2))
    pts = np.vstack([pts, [[0.3, 0.0], [0.0, 0.2], [0.9, 0.0]]])
    for px, py in pts:
        brute = np.min(np.hypot(bx - px, by - py))
        assert float(e.distance(px, py)) == pytest.approx(brute, abs=1e-7)


def test_shape_errors():
    with pytest.raises(ArgumentError):
        Polygon(((0, 0), (1, 0), (1, 1), (0.5, 0.2)))
    with pytest.raises(ArgumentError):
        make_shape("torus")
    with pytest.raises(ArgumentError):
        DomainMask.build(Disk(), 0.0)


@pytest.mark.parametrize(
    "shape, field, value",
    [
        (Disk(), lambda x, y: 1 - x * x - y * y, 4.0),
        (Ellipse(1.0, 0.6), lambda x, y: 1 - x * x - (y / 0.6) ** 2, 2 + 2 / 0.36),
        (Disk(0.7, (0.2, 0.1)), lambda x, y: 0.49 - (x - 0.2) ** 2 - (y - 0.1) ** 2, 4.0),
    ],
)
def test_shortley_weller_exact_on_quadratics(shape, field, value):
    dom = DomainMask.build(shape, 1 / 40)
    u = dom.sample(field)
    assert np.max(np.abs(dom.laplacian @ u - value)) < 1e-9


def test_ghost_extension_reproduces_quadratics():
    dom = DomainMask.build(Disk(), 1 / 32)
    u = ScalarField2D.from_function(dom, lambda x, y: 1 - x * x - y * y)
    X, Y = dom.coords
    d = u.derivatives
    ins = dom.inside
    assert np.max(np.abs(d["x"][ins] + 2 * X[ins])) < 1e-10
    assert np.max(np.abs(d["yy"][ins] + 2)) < 1e-8
    deep = dom.deep(1)
    assert np.max(np.abs(d["xy"][deep])) < 1e-8


# --- Newton ------------------------------------------------------------------


def test_square_torsion_center_matches_series():
    oracle = square_center_series()
    assert oracle == pytest.approx(0.073671, abs=5e-7)
    u = planar_solution("square", 1 / 128, "one")
    assert u.at(0.5, 0.5) == pytest.approx(oracle, abs=1e-4)


def test_disk_torsion_is_exact():
    u = planar_solution("disk", 1 / 64, "one")
    assert u.at(0.0, 0.0) == pytest.approx(0.25, abs=1e-12)
    exact = u.dom.sample(lambda x, y: (1 - x * x - y * y) / 4)
    assert np.max(np.abs(u.values - exact)) < 1e-12


@pytest.mark.parametrize("h", [1 / 64, 1 / 128])
def test_disk_exp_matches_liouville(h):
    mu = liouville_mu_for_lambda(1.0)
    assert mu == pytest.approx(3 - 2 * math.sqrt(2), rel=1e-12)
    u = planar_solution("disk", h, "exp")
    exact = u.dom.sample(lambda x, y: 2 * np.log((1 + mu) / (1 + mu * (x * x + y * y))))
    assert u.at(0, 0) == pytest.approx(2 * math.log(1 + mu), abs=1e-3)
    assert np.max(np.abs(u.values - exact)) < 50 * h * h


def test_disk_matches_radial_profile():
    u = planar_solution("disk", 1 / 256, "exp")
    mu = liouville_mu_for_lambda(1.0)
    lam, sol = solve_shooting(2, EXP, 2 * math.log(1 + mu))
    assert lam == pytest.approx(1.0, abs=1e-10)
    X, Y = u.dom.coords
    r = np.hypot(X, Y)[u.dom.inside]
    assert np.max(np.abs(u.values - sol.interp()(r))) < 5e-3


def test_newton_diverges_past_the_fold():
    dom = DomainMask.build(Disk(), 1 / 32)
    with pytest.raises(NonConvergenceError) as info:
        solve_newton(dom, EXP, 3.0)
    assert isinstance(info.value.last, ScalarField2D)


def test_newton_rejects_foreign_initial_guess():
    a = DomainMask.build(Disk(), 1 / 16)
    b = DomainMask.build(Disk(), 1 / 32)
    with pytest.raises(ArgumentError):
        solve_newton(b, EXP, 1.0, ScalarField2D.zeros(a))


# --- branch ------------------------------------------------------------------


@pytest.fixture(scope="module")
def disk_branch():
    dom = DomainMask.build(Disk(), 1 / 128)
    return minimal_branch_2d(dom, EXP, [0.5, 1.0, 1.5, 1.8, 1.9, 2.0, 2.1])


def test_disk_branch_last_good(disk_branch):
    assert disk_branch.terminated
    assert 1.9 <= disk_branch.last_good <= 2.0


def test_branch_is_semistable(disk_branch):
    lam1 = [p.lambda1 for p in disk_branch.points]
    assert min(lam1) >= -1e-4
    assert all(a > b for a, b in zip(lam1, lam1[1:]))


def test_square_branch_refinement():
    grid = np.round(np.arange(6.0, 7.3, 0.1), 10)
    ends = [
        minimal_branch_2d(DomainMask.build(Square(), h), EXP, grid, with_eigen=False).last_good
        for h in (1 / 32, 1 / 64)
    ]
    assert 6.5 < ends[1] < 7.0
    assert ends[0] == pytest.approx(ends[1], rel=1e-2)


def test_linear_branch_never_terminates():
    dom = DomainMask.build(Disk(), 1 / 32)
    br = minimal_branch_2d(dom, ONE, [1.0, 10.0, 1e3])
    assert not br.terminated and len(br) == 3


def test_branch_grid_validation():
    dom = DomainMask.build(Disk(), 1 / 16)
    with pytest.raises(ArgumentError):
        minimal_branch_2d(dom, EXP, [1.0, 0.5])
    with pytest.raises(ArgumentError):
        minimal_branch_2d(dom, EXP, [0.0, 0.5])


# --- linearisation -----------------------------------------------------------


def test_square_principal_eigenvalue():
    dom = DomainMask.build(Square(), 1 / 128)
    lam1 = linearized_eigenvalue_2d(ScalarField2D.zeros(dom), ZERO, 1.0)
    assert lam1 == pytest.approx(2 * math.pi**2, rel=5e-3)


def test_disk_principal_eigenvalue(j01):
    dom = DomainMask.build(Disk(), 1 / 128)
    lam1 = linearized_eigenvalue_2d(ScalarField2D.zeros(dom), ZERO, 1.0)
    assert lam1 == pytest.approx(j01**2, rel=5e-3)
    assert lam1 == pytest.approx(5.7832, rel=5e-3)


def test_quadratic_form_closed_form():
    dom = DomainMask.build(Disk(), 1 / 128)
    xi = TestFunction2D.from_function(dom, lambda x, y: 1 - x * x - y * y)
    assert quadratic_form(ScalarField2D.zeros(dom), ONE, 1.0, xi) == pytest.approx(2 * math.pi, rel=1e-2)
    assert quadratic_form(ScalarField2D.zeros(dom), ONE, 1.0, TestFunction2D.zeros(dom)) == 0.0


def test_quadratic_form_mask_mismatch():
    a = DomainMask.build(Disk(), 1 / 16)
    b = DomainMask.build(Square(), 1 / 16)
    with pytest.raises(ArgumentError):
        quadratic_form(ScalarField2D.zeros(a), ONE, 1.0, TestFunction2D.zeros(b))


def test_quadratic_form_on_eigenfunction():
    u = planar_solution("disk", 1 / 64, "exp")
    lam1, phi = linearized_eigenvalue_2d(u, EXP, 1.0, return_vector=True)
    assert lam1 > 0
    assert np.all(phi.values > 0)
    q = quadratic_form(u, EXP, 1.0, phi)
    assert q == pytest.approx(lam1 * l2_norm_sq(phi), rel=2e-3)


@pytest.mark.parametrize("shape, lam", [("disk", 1.0), ("square", 5.0)])
def test_random_quadratic_forms_nonnegative(shape, lam):
    dom = DomainMask.build(make_shape(shape), 1 / 48)
    u = solve_newton(dom, EXP, lam)
    for xi in random_test_functions(dom, 50, seed=7):
        assert quadratic_form(u, EXP, lam, xi) >= -1e-6 * l2_norm_sq(xi)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_test_functions_vanish_on_boundary(seed):
    dom = DomainMask.build(Ellipse(), 1 / 24)
    (xi,) = random_test_functions(dom, 1, seed=seed)
    # the extended field changes sign across the boundary crossing
    edge = dom.edge
    assert np.all(np.abs(xi.values[edge[dom.inside]]) <= np.abs(xi.values).max())
    assert np.isfinite(quadratic_form(ScalarField2D.zeros(dom), ONE, 1.0, xi))


# --- gradient equation and identity ------------------------------------------


def test_gradient_equation_disk_exp():
    u = planar_solution("disk", 1 / 256, "exp")
    assert gradient_equation_residual(u, EXP, 1.0, 0.1) < 5e-2


def test_gradient_equation_synthetic():
    u = planar_field("disk", 1 / 256, "1-r2")
    assert gradient_equation_residual(u, Nonlinearity.constant(4.0), 1.0, 0.1) < 1e-3


def test_gradient_equation_filters_everything():
    u = planar_field("disk", 1 / 32, "1-r2")
    with pytest.raises(DegenerateFieldError):
        gradient_equation_residual(u, Nonlinearity.constant(4.0), 1.0, 1.1)


@pytest.mark.parametrize("shape", ["disk", "square", "ellipse"])
def test_identity_holds_pointwise(shape):
    u = planar_solution(shape, 1 / 256, "exp")
    assert identity_gap(u, 0.1) < 1e-3


def test_identity_gap_shrinks_with_h():
    gaps = [identity_gap(planar_solution("ellipse", h, "exp")) for h in (1 / 64, 1 / 128)]
    assert gaps[1] < gaps[0] / 4


# --- persistence ---------------------------------------------------------------


def test_field_roundtrip(tmp_path):
    u = planar_solution("disk", 1 / 64, "exp")
    path = u.save(tmp_path / "u.bin")
    v = ScalarField2D.load(path)
    assert np.array_equal(u.values, v.values)
    assert v.lam == 1.0 and v.g_id == "exp"
    assert path.stat().st_size == 8 * u.dom.inside.size


def test_field_load_rejects_wrong_mask(tmp_path):
    u = planar_solution("disk", 1 / 64, "exp")
    path = u.save(tmp_path / "u.bin")
    with pytest.raises(ArgumentError):
        ScalarField2D.load(path, DomainMask.build(Disk(), 1 / 32))
