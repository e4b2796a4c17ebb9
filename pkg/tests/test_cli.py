import csv
import json
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semistable import cli
from semistable.acceptance import CriterionResult
from semistable.config import DEFAULT_TEXT, build_config, load_config, parse_text
from semistable.errors import ConfigError
from semistable.planar import DomainMask, ScalarField2D, make_shape, solve_newton
from semistable.radial import Branch, solve_shooting
from semistable.svg import Plot, nice_ticks
from semistable import Nonlinearity

RADIAL = ["--set", "branch.m_grid=linspace(0.2, 3, 24)", "--set", "branch.eig_nodes=1024", "--set", "audit.n_levels=24"]
PLANAR = [
    "--set", "problem.domain=disk",
    "--set", "branch.h=1/32",
    "--set", "branch.lambda_grid=0.5, 1.0, 1.5",
    "--set", "audit.n_levels=24",
    "--set", "audit.samples=2",
    "--set", "levels.count=3",
]


def run(tmp_path, *args):
    return cli.main([*args, "--out", str(tmp_path)])


# --- configuration -----------------------------------------------------------------


def test_config_sections_and_dotted_keys_agree():
    a = build_config(parse_text("[problem]\ndomain = square\n[branch]\nh = 1/64\n"))
    b = build_config(parse_text("problem.domain = square  # comment\nbranch.h=0.015625\n"))
    assert a.domain == b.domain == "square"
    assert a.h == b.h == 1 / 64


def test_config_grids():
    cfg = build_config({"branch.m_grid": "geomspace(0.1, 10, 3)", "audit.t_grid": "0.2, 0.4"})
    assert cfg.m_grid == pytest.approx((0.1, 1.0, 10.0))
    assert cfg.t_grid == (0.2, 0.4)


@pytest.mark.parametrize(
    "raw, field",
    [
        ({"problem.n": "3", "problem.domain": "square"}, "problem.domain"),
        ({"problem.n": "1"}, "problem.n"),
        ({"audit.t_grid": ""}, "audit.t_grid"),
        ({"branch.tol": "0"}, "branch.tol"),
        ({"audit.curve_tol": "-0.1"}, "audit.curve_tol"),
        ({"branch.m_grid": "1, 0.5"}, "branch.m_grid"),
        ({"problem.nonlinearity": "power"}, "problem.g.p"),
        ({"problem.domain.radius": "2"}, "problem.domain.radius"),
        ({"audit.phi": "ramp, cubic"}, "audit.phi"),
        ({"audit.t_grid": "0.5, 1.0"}, "audit.t_grid"),
        ({"branch.h": "abc"}, "branch.h"),
        ({"no.such": "1"}, "no.such"),
    ],
)
def test_config_field_level_errors(raw, field):
    with pytest.raises(ConfigError) as exc:
        build_config(raw)
    assert exc.value.field == field


def test_config_polygon_vertices():
    cfg = build_config({"problem.domain": "polygon", "problem.domain.vertices": "0,0; 1,0; 0,1"})
    assert cfg.shape_spec() == {"shape": "polygon", "vertices": [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]}


@settings(max_examples=25, deadline=None)
@given(st.permutations(["problem.domain = disk", "audit.n_levels = 32", "branch.h = 1/64", "# note", "audit.rho=0.1"]))
def test_config_hash_ignores_order_and_comments(lines):
    cfg = build_config(parse_text("\n".join(lines)))
    ref = build_config({"problem.domain": "disk", "audit.n_levels": "32", "branch.h": "1/64", "audit.rho": "0.1"})
    assert cfg.hash == ref.hash


def test_branch_hash_ignores_audit_keys():
    a = build_config({"audit.n_levels": "32"})
    b = build_config({"audit.n_levels": "48"})
    assert a.branch_hash == b.branch_hash and a.hash != b.hash
    assert build_config({"branch.h": "1/64"}).branch_hash != a.branch_hash


def test_default_text_is_complete():
    assert build_config({}).raw == parse_text(DEFAULT_TEXT)


def test_load_config_file(tmp_path):
    p = tmp_path / "e.cfg"
    p.write_text("[audit]\nrho = 0.1\n")
    assert load_config(p, {"audit.samples": "3"}).rho == 0.1


# --- svg -------------------------------------------------------------------------


@given(st.floats(-1e6, 1e6), st.floats(1e-6, 1e6))
def test_nice_ticks_cover_range(lo, width):
    hi = lo + width
    ticks = nice_ticks(lo, hi)
    assert 1 <= len(ticks) <= 12
    assert all(lo - 1e-9 * width <= t <= hi + 1e-9 * width for t in ticks)
    steps = np.diff(ticks)
    assert np.allclose(steps, steps[0] if steps.size else 0, rtol=1e-6, atol=1e-9 * width)


def test_svg_is_wellformed_and_deterministic(tmp_path):
    p = Plot("t <&>", "x", "y").add("a", [0, 1, 2], [1, np.nan, 3]).add("b", [0, 2], [2, 2], dashed=True)
    root = ET.fromstring(p.render())
    assert root.tag.endswith("svg")
    # NaN splits the first series into two polylines
    assert len(root.findall("{http://www.w3.org/2000/svg}polyline")) == 3
    assert p.render() == p.render()


# --- branch / extremal ---------------------------------------------------------------


def test_branch_radial_liouville(tmp_path):
    assert run(tmp_path, "branch", *RADIAL) == 0
    assert run(tmp_path, "extremal", *RADIAL) == 0
    rep = json.loads((tmp_path / "extremal.json").read_text())
    assert rep["lambda_star"] == pytest.approx(2.0, abs=1e-3)
    assert rep["lambda1_zero_crossing"] == pytest.approx(2.0, abs=1e-2)
    svg = (tmp_path / "branch.svg").read_text()
    assert "λ* ≈ 1.99" in svg or "λ* ≈ 2" in svg
    assert "λ₁ = 0" in svg
    man = cli.RunManifest.load(tmp_path)
    assert {"branch.csv", "branch.svg", "extremal.json"} <= set(man.files)
    assert man.problems(tmp_path) == {}
    assert set(man.stages) == {"branch"}


def test_branch_singular_dimension(tmp_path):
    assert run(tmp_path, "branch", "--set", "problem.n=10", "--set", "branch.m_grid=1, 10, 20, 30", "--set", "branch.eigen=false") == 0
    b = Branch.load(tmp_path / "branch.csv")
    assert abs(b.lam[-1] - 16) < 0.16 and b.points[-1].sup_norm > 15
    assert np.all(np.diff(b.m) > 0)


def test_linear_problem_warns_but_runs(tmp_path, caplog):
    code = run(tmp_path, "branch", "--set", "problem.nonlinearity=constant", "--set", "problem.g.c=1", "--set", "branch.m_grid=0.5, 1", "--set", "branch.eigen=false")
    assert code == 0
    man = cli.RunManifest.load(tmp_path)
    assert any("superlinear=false" in w for w in man.warnings)
    assert "superlinear=false" in caplog.text


def test_cache_recompute_agrees(tmp_path):
    run(tmp_path, "branch", *RADIAL)
    b = Branch.load(tmp_path / "branch.csv")
    p = b.points[5]
    lam, _ = solve_shooting(2, Nonlinearity.exponential(), p.m)
    assert abs(lam - p.lam) <= 1e-10


def test_planar_branch_cache_recompute_agrees(tmp_path):
    assert run(tmp_path, "branch", *PLANAR) == 0
    with open(tmp_path / "branch.csv") as fh:
        rows = list(csv.DictReader(fh))
    row = rows[1]
    cached = ScalarField2D.load(tmp_path / row["field"])
    fresh = solve_newton(DomainMask.build(make_shape("disk"), 1 / 32), Nonlinearity.exponential(), float(row["lambda"]))
    assert np.max(np.abs(cached.values - fresh.values)) <= 1e-10


# --- audit / levels -------------------------------------------------------------------


def test_audit_uses_cache_and_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(a, "branch", *RADIAL) == 0
    before = (a / "branch.csv").stat().st_mtime_ns
    assert run(a, "audit", *RADIAL, "--set", "audit.select=1.0, 1.5") == 0
    assert (a / "branch.csv").stat().st_mtime_ns == before
    assert "branch" in cli.RunManifest.load(a).stages
    assert run(b, "audit", *RADIAL, "--set", "audit.select=1.0, 1.5", "--threads", "3") == 0
    for name in ("branch.csv", "audit_summary.csv", "audit_records.json", "audit_profiles.svg", "audit_cemp.svg"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_audit_disk_all_hold(tmp_path, capsys):
    assert run(tmp_path, "audit", *PLANAR, "--set", "audit.select=1.0") == 0
    with open(tmp_path / "audit_summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(r["holds"] == "true" for r in rows)
    assert {r["check_id"] for r in rows} >= {"stability_inequality", "main_estimate", "second_variation", "gauss_bonnet"}
    assert "0 not holding" in capsys.readouterr().out


def test_seed_changes_only_sampled_check(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run(a, "audit", *PLANAR, "--set", "audit.select=1.0", "--seed", "1")
    run(b, "audit", *PLANAR, "--set", "audit.select=1.0", "--seed", "2")
    ra = {(r["check_id"], r["param"]): r for r in csv.DictReader(open(a / "audit_summary.csv"))}
    rb = {(r["check_id"], r["param"]): r for r in csv.DictReader(open(b / "audit_summary.csv"))}
    differ = {k[0] for k in ra if k in rb and ra[k] != rb[k]}
    assert differ == set()
    sampled = [k for k in ra if k[0] == "second_variation"]
    assert sampled and all(k not in rb for k in sampled)


def test_selector_out_of_range(tmp_path, capsys):
    run(tmp_path, "branch", *RADIAL)
    assert run(tmp_path, "audit", *RADIAL, "--set", "audit.select=2.5") == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "audit.select" in err and "available points" in err and "last good" in err


def test_planar_selector_must_hit_a_point(tmp_path, capsys):
    run(tmp_path, "branch", *PLANAR)
    assert run(tmp_path, "audit", *PLANAR, "--set", "audit.select=1.2") == cli.EXIT_CONFIG
    assert "0.5, 1, 1.5" in capsys.readouterr().err


def test_corrupt_cache_is_an_error(tmp_path, capsys):
    run(tmp_path, "branch", *PLANAR)
    field = next((tmp_path / "fields").glob("*.bin"))
    data = bytearray(field.read_bytes())
    data[100] ^= 0xFF
    field.write_bytes(bytes(data))
    assert run(tmp_path, "audit", *PLANAR) == cli.EXIT_ERROR
    assert "checksum mismatch" in capsys.readouterr().err


def test_missing_cache_recomputes(tmp_path):
    run(tmp_path, "branch", *RADIAL)
    ref = (tmp_path / "branch.csv").read_bytes()
    (tmp_path / "branch.csv").unlink()
    assert run(tmp_path, "audit", *RADIAL, "--set", "audit.select=1.0") == 0
    assert (tmp_path / "branch.csv").read_bytes() == ref
    assert cli.RunManifest.load(tmp_path).problems(tmp_path) == {}


def test_branch_config_change_invalidates_cache(tmp_path):
    run(tmp_path, "branch", *RADIAL)
    assert run(tmp_path, "audit", *RADIAL[:-2], "--set", "branch.m_grid=linspace(0.2, 3, 12)", "--set", "audit.select=1.0") == 0
    assert len(Branch.load(tmp_path / "branch.csv").points) == 12


def test_levels_planar(tmp_path):
    assert run(tmp_path, "levels", *PLANAR, "--set", "audit.select=1.5") == 0
    rows = list(csv.reader(open(tmp_path / "levels_disk_exp_lambda1.5.csv")))
    assert len(rows) == 25
    curves = json.loads((tmp_path / "curves_disk_exp_lambda1.5.json").read_text())
    assert len(curves) == 3
    ET.fromstring((tmp_path / "levels.svg").read_text())


def test_formats_restrict_outputs(tmp_path):
    assert run(tmp_path, "branch", *RADIAL, "--set", "output.formats=csv") == 0
    assert not (tmp_path / "branch.svg").exists()


def test_planar_extremal_from_eigenvalues(tmp_path):
    args = [*PLANAR, "--set", "branch.lambda_grid=0.5, 1.0, 1.5, 1.8, 1.9, 1.95"]
    assert run(tmp_path, "extremal", *args) == 0
    rep = json.loads((tmp_path / "extremal.json").read_text())
    assert rep["lambda_last_good"] == 1.95
    assert rep["lambda_star_from_eigenvalue"] == pytest.approx(2.0, rel=2e-2)


# --- verify ------------------------------------------------------------------------------


def test_verify_rejects_invalid_config_before_computing(tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(cli, "run_acceptance", lambda *a, **k: pytest.fail("computation started"))
    assert run(tmp_path, "verify", "--set", "problem.n=3", "--set", "problem.domain=ellipse") == cli.EXIT_CONFIG
    assert "problem.domain" in capsys.readouterr().err


@pytest.mark.parametrize("passed, code", [(True, 0), (False, 1)])
def test_verify_exit_status_and_report(tmp_path, monkeypatch, capsys, passed, code):
    seen = {}

    def fake(res, workers, progress):
        seen["h"] = res.h
        out = [CriterionResult(1, "one", True, {"x": 1.0}, 0.5), CriterionResult(2, "two", passed, {"gap": 0.3}, 0.5, [] if passed else ["gap 0.3"])]
        for r in out:
            progress(r)
        return out

    monkeypatch.setattr(cli, "run_acceptance", fake)
    assert run(tmp_path, "verify", "--set", "verify.h=1/16") == code
    assert seen["h"] == 1 / 16
    out = capsys.readouterr().out
    assert "[PASS]  1. one" in out
    assert ("[FAIL]  2. two" in out) is (not passed)
    report = json.loads((tmp_path / "verify_report.json").read_text())
    assert [r["passed"] for r in report] == [True, passed]


def test_bad_threads_flag(tmp_path):
    assert run(tmp_path, "branch", "--threads", "0") == cli.EXIT_CONFIG
