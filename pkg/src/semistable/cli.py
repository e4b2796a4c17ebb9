"""Batch runner: ``semistable {branch,audit,levels,extremal,verify}``.

Every command writes into the output directory and records each file's sha256
and the wall-clock time of each stage in ``manifest.json``. The branch CSV and
planar field files double as a cache for the later commands.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from . import __version__
from .acceptance import FULL, REDUCED, run_acceptance
from .audit import AuditSettings, AuditTarget, audit_suite, write_records_json, write_summary_csv
from .config import ExperimentConfig, load_config
from .errors import ConfigError, SemistableError
from .levelgeom import curves_to_json, extract_level, field_max, profile_family
from .nonlinearity import Nonlinearity, check_conditions
from .planar import DomainMask, PlanarBranch, PlanarBranchPoint, ScalarField2D, minimal_branch_2d, shape_from_config
from .radial import Branch, extremal_parameter, linearized_eigenvalue, solve_shooting, trace_branch
from .svg import Marker, Plot

log = logging.getLogger("semistable")

MANIFEST = "manifest.json"
BRANCH_CSV = "branch.csv"
FIELD_DIR = "fields"
EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_ERROR = 0, 1, 2, 3
# records whose rhs carries an unspecified constant set to 1; the measured constant is what matters
UNIT_CONSTANT_CHECKS = ("boundary_bound", "lower_bound", "main_estimate")


class CacheError(SemistableError):
    """A cached artifact exists but does not match its recorded checksum."""


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- manifest ------------------------------------------------------------------------


@dataclass
class RunManifest:
    config_hash: str
    version: str = __version__
    files: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    branch_hash: str | None = None

    @classmethod
    def load(cls, out: Path) -> "RunManifest | None":
        path = out / MANIFEST
        if not path.exists():
            return None
        data = json.loads(path.read_text())
        return cls(
            data["config_hash"], data["version"], data["files"], data["stages"], data.get("warnings", []), data.get("branch_hash")
        )

    def forget_branch(self):
        self.files = {k: v for k, v in self.files.items() if k != BRANCH_CSV and not k.startswith(FIELD_DIR + "/")}
        self.branch_hash = None

    def record(self, out: Path, path: Path) -> Path:
        rel = path.relative_to(out).as_posix()
        self.files[rel] = {"sha256": sha256(path), "bytes": path.stat().st_size}
        return path

    def problems(self, out: Path) -> dict[str, str]:
        """Listed files that are missing or whose checksum changed."""
        bad = {}
        for rel, meta in self.files.items():
            p = out / rel
            if not p.exists():
                bad[rel] = "missing"
            elif sha256(p) != meta["sha256"]:
                bad[rel] = "checksum mismatch"
        return bad

    def save(self, out: Path) -> Path:
        path = out / MANIFEST
        data = {
            "config_hash": self.config_hash,
            "version": self.version,
            "files": dict(sorted(self.files.items())),
            "stages": self.stages,
            "warnings": self.warnings,
            "branch_hash": self.branch_hash,
        }
        path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")
        return path


@dataclass
class Run:
    cfg: ExperimentConfig
    out: Path
    threads: int
    seed: int
    manifest: RunManifest

    @classmethod
    def start(cls, cfg: ExperimentConfig, out: Path, threads: int, seed: int) -> "Run":
        out.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest.load(out) or RunManifest(cfg.hash)
        manifest.config_hash, manifest.version = cfg.hash, __version__
        return cls(cfg, out, threads, seed, manifest)

    def emit(self, fmt: str) -> bool:
        return fmt in self.cfg.formats

    def keep(self, path: Path) -> Path:
        return self.manifest.record(self.out, Path(path))

    def stage(self, name: str):
        return _Stage(self, name)

    def warn(self, message: str):
        log.warning(message)
        if message not in self.manifest.warnings:
            self.manifest.warnings.append(message)

    def finish(self):
        self.manifest.save(self.out)


class _Stage:
    def __init__(self, run: Run, name: str):
        self.run, self.name = run, name

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.run.manifest.stages[self.name] = round(time.perf_counter() - self.start, 6)
        return False


# --- problem setup ----------------------------------------------------------------------


def nonlinearity(cfg: ExperimentConfig) -> Nonlinearity:
    return Nonlinearity.from_config(cfg.nonlinearity, cfg.g_params)


def domain(cfg: ExperimentConfig) -> DomainMask:
    return DomainMask.build(shape_from_config(cfg.shape_spec()), cfg.h)


CONDITION_WINDOW = 50.0


def warn_conditions(run: Run, g: Nonlinearity):
    """Warn about failed structural conditions on g; the computation goes ahead regardless."""
    s_max = min(CONDITION_WINDOW, g.params["s_max"]) if g.kind == "tabulated" else CONDITION_WINDOW
    try:
        rep = check_conditions(g, s_max)
    except SemistableError as exc:
        run.warn(f"problem.nonlinearity: conditions not checkable on [0, {s_max:g}] ({exc})")
        return
    for name in ("nondecreasing", "positive_at_zero", "superlinear"):
        if not getattr(rep, name):
            run.warn(f"problem.nonlinearity: {name}=false for {g.ident}; the branch still runs")


# --- branch ---------------------------------------------------------------------------


def _fold_crossing(lam: np.ndarray, lambda1: np.ndarray):
    """(λ, sup) where λ₁ changes sign, by linear interpolation; None when it does not."""
    for i in range(1, lam.size):
        a, b = lambda1[i - 1], lambda1[i]
        if np.isfinite(a) and np.isfinite(b) and a >= 0 > b:
            w = a / (a - b)
            return i, w
    return None


def _branch_plot(cfg, lam, sup, lambda1, lam_star=None) -> Plot:
    g = nonlinearity(cfg)
    where = f"n={cfg.n} ball" if cfg.radial else f"{cfg.domain}, h=1/{round(1 / cfg.h)}"
    p = Plot(f"Bifurcation diagram: {g.ident}, {where}", "λ", "sup u").add("branch", lam, sup)
    if lam_star is not None:
        p.vlines.append(Marker(f"λ* ≈ {lam_star:.5g}", lam_star, 0.0))
    hit = _fold_crossing(np.asarray(lam), np.asarray(lambda1))
    if hit is not None:
        i, w = hit
        p.markers.append(Marker("λ₁ = 0", lam[i - 1] + w * (lam[i] - lam[i - 1]), sup[i - 1] + w * (sup[i] - sup[i - 1])))
    return p


def _save_planar_branch(run: Run, pb: PlanarBranch) -> Path:
    fdir = run.out / FIELD_DIR
    fdir.mkdir(exist_ok=True)
    path = run.out / BRANCH_CSV
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "sup_norm", "lambda1", "field"])
        for i, p in enumerate(pb.points):
            fpath = p.field.save(fdir / f"point_{i:03d}.bin")
            run.keep(fpath)
            run.keep(fpath.with_suffix(".json"))
            w.writerow([repr(p.lam), repr(p.field.max), repr(float(p.lambda1)), f"{FIELD_DIR}/{fpath.name}"])
    return run.keep(path)


def compute_branch(run: Run):
    cfg, g = run.cfg, nonlinearity(run.cfg)
    run.manifest.forget_branch()
    run.manifest.branch_hash = cfg.branch_hash
    if cfg.radial:
        warn_conditions(run, g)
        b = trace_branch(cfg.n, g, cfg.m_grid, workers=run.threads, eig_nodes=cfg.eig_nodes, with_eigen=cfg.eigen)
        for m, why in b.gaps:
            run.warn(f"branch: no solution at m={m:g} ({why})")
        run.keep(b.save(run.out / BRANCH_CSV))
        return b
    warn_conditions(run, g)
    pb = minimal_branch_2d(domain(cfg), g, cfg.lambda_grid, with_eigen=cfg.eigen, tol=cfg.tol)
    if pb.terminated:
        run.warn(f"branch: continuation stopped after λ={pb.last_good:.6g} (no convergence beyond)")
    _save_planar_branch(run, pb)
    return pb


def branch_arrays(b):
    if isinstance(b, Branch):
        return b.lam, b.m, b.lambda1
    return (np.array([p.lam for p in b.points]), np.array([p.field.max for p in b.points]), np.array([p.lambda1 for p in b.points]))


def _radial_star(b: Branch):
    try:
        return extremal_parameter(b)
    except SemistableError:
        return None


def load_branch(run: Run):
    """The cached branch, or None when it must be recomputed; corrupt files are a hard error."""
    cfg, man = run.cfg, run.manifest
    if BRANCH_CSV not in man.files or man.branch_hash != cfg.branch_hash:
        return None
    bad = {k: v for k, v in man.problems(run.out).items() if k == BRANCH_CSV or k.startswith(FIELD_DIR + "/")}
    corrupt = {k: v for k, v in bad.items() if v == "checksum mismatch"}
    if corrupt:
        raise CacheError("corrupt cache: " + ", ".join(f"{k} ({v})" for k, v in sorted(corrupt.items())))
    if bad:
        log.info("cache incomplete (%s); recomputing", ", ".join(sorted(bad)))
        return None
    path = run.out / BRANCH_CSV
    if cfg.radial:
        return Branch.load(path, nonlinearity(cfg).ident, cfg.n)
    dom = domain(cfg)
    points = []
    with open(path) as fh:
        for row in csv.DictReader(fh):
            u = ScalarField2D.load(run.out / row["field"], dom)
            points.append(PlanarBranchPoint(float(row["lambda"]), u, float(row["lambda1"])))
    return PlanarBranch(points, points[-1].lam if points else 0.0, False)


def get_branch(run: Run):
    b = load_branch(run)
    if b is None:
        with run.stage("branch"):
            b = compute_branch(run)
    return b


def cmd_branch(run: Run) -> int:
    with run.stage("branch"):
        b = compute_branch(run)
    lam, sup, lambda1 = branch_arrays(b)
    star = None
    if isinstance(b, Branch):
        ext = _radial_star(b)
        star = ext.lambda_star if ext else None
    if run.emit("svg") and lam.size:
        run.keep(_branch_plot(run.cfg, lam, sup, lambda1, star).save(run.out / "branch.svg"))
    print(f"branch: {lam.size} points, max λ = {lam.max() if lam.size else float('nan'):.6g} -> {run.out / BRANCH_CSV}")
    return EXIT_OK


# --- selection ------------------------------------------------------------------------


def select_solutions(run: Run, b) -> list[AuditTarget]:
    """Solutions on the minimal branch at the configured λ values (all computed points by default)."""
    cfg, g = run.cfg, nonlinearity(run.cfg)
    if isinstance(b, Branch):
        pts = b.minimal_part()
        if not pts:
            raise ConfigError("audit.select", "the branch has no points before its first fold")
        lams = [p.lam for p in pts]
        if cfg.select is None:
            chosen = [(p.lam, p.m) for p in pts]
        else:
            chosen = []
            for lam in cfg.select:
                if not lams[0] <= lam <= lams[-1]:
                    raise ConfigError(
                        "audit.select",
                        f"λ={lam:g} outside the computed minimal branch [{lams[0]:.6g}, {lams[-1]:.6g}] "
                        f"(last good λ={lams[-1]:.6g}); available points: {', '.join(f'{v:.6g}' for v in lams)}",
                    )
                i = int(np.searchsorted(lams, lam))
                if lams[i] == lam:
                    chosen.append((lam, pts[i].m))
                else:
                    m = brentq(lambda m: solve_shooting(cfg.n, g, m)[0] - lam, pts[i - 1].m, pts[i].m, xtol=1e-13)
                    chosen.append((lam, m))
        targets = []
        for lam, m in chosen:
            lam_m, sol = solve_shooting(cfg.n, g, m)
            lam1 = linearized_eigenvalue(sol, g, nodes=cfg.eig_nodes) if cfg.eigen else float("nan")
            targets.append(AuditTarget(f"n{cfg.n}_{g.ident}_lambda{lam_m:.6g}", sol, g, lam_m, lam1))
        return targets
    pts = list(b.points)
    if not pts:
        raise ConfigError("audit.select", "the branch has no converged points")
    if cfg.select is None:
        chosen = pts
    else:
        chosen = []
        for lam in cfg.select:
            match = [p for p in pts if abs(p.lam - lam) <= 1e-9 * max(1.0, lam)]
            if not match:
                raise ConfigError(
                    "audit.select",
                    f"λ={lam:g} is not a computed branch point (last good λ={pts[-1].lam:.6g}); "
                    f"available points: {', '.join(f'{p.lam:.6g}' for p in pts)}",
                )
            chosen.append(match[0])
    return [AuditTarget(f"{cfg.domain}_{g.ident}_lambda{p.lam:.6g}", p.field, g, p.lam, p.lambda1) for p in chosen]


def _families(run: Run, targets: list[AuditTarget]):
    job = lambda tg: profile_family(tg.u, run.cfg.n_levels)
    if run.threads > 1:
        with ThreadPoolExecutor(run.threads) as pool:
            return list(pool.map(job, targets))
    return [job(tg) for tg in targets]


# --- audit / levels / extremal -----------------------------------------------------------


def cmd_audit(run: Run) -> int:
    cfg = run.cfg
    b = get_branch(run)
    targets = select_solutions(run, b)
    settings = AuditSettings(
        t_fractions=cfg.t_grid,
        k_list=cfg.k_list,
        n_levels=cfg.n_levels,
        main_t_fractions=cfg.main_t_grid,
        rho=cfg.rho,
        phi=cfg.phi,
        curve_tol=cfg.curve_tol,
        samples=cfg.samples,
        seed=run.seed,
    )
    with run.stage("levels"):
        fams = _families(run, targets)
    with run.stage("audit"):
        records = audit_suite(targets, settings, run.threads, fams)
    if run.emit("json"):
        run.keep(write_records_json(records, run.out / "audit_records.json"))
    if run.emit("csv"):
        run.keep(write_summary_csv(records, run.out / "audit_summary.csv"))
    if run.emit("svg"):
        p = Plot("Level profiles h₁ (solid) and h₂ (dashed)", "s / max u", "h", logy=True)
        for tg, fam in zip(targets, fams):
            reg = fam.regular
            p.add(f"h₁ λ={tg.lam:.4g}", fam.s[reg] / fam.T, fam.column("h1")[reg])
            p.add(f"h₂ λ={tg.lam:.4g}", fam.s[reg] / fam.T, fam.column("h2")[reg], dashed=True)
        run.keep(p.save(run.out / "audit_profiles.svg"))
        c = Plot("Main-estimate constant C_emp(t)", "t / max u", "C_emp")
        for tg in targets:
            recs = [r for r in records if r.solution == tg.ident and r.check_id == "main_estimate"]
            c.add(f"λ={tg.lam:.4g}", [r.inputs["t"] / r.lhs for r in recs], [r.empirical_constant for r in recs])
        run.keep(c.save(run.out / "audit_cemp.svg"))
    failed = [r for r in records if not r.holds and r.check_id not in UNIT_CONSTANT_CHECKS]
    unit = [r for r in records if not r.holds and r.check_id in UNIT_CONSTANT_CHECKS]
    print(f"audit: {len(records)} records on {len(targets)} solutions, {len(failed)} not holding")
    for r in failed:
        print(f"  {r.check_id} {r.solution} {r.param}: lhs={r.lhs:.6g} rhs={r.rhs:.6g}")
    if unit:
        print(f"  ({len(unit)} unit-constant comparisons exceeded; these estimates only claim some constant, see the constant column)")
    return EXIT_OK


def cmd_levels(run: Run) -> int:
    b = get_branch(run)
    targets = select_solutions(run, b)
    with run.stage("levels"):
        fams = _families(run, targets)
    p = Plot("Level quantities", "s / max u", "value", logy=True)
    for tg, fam in zip(targets, fams):
        if run.emit("csv"):
            run.keep(fam.save_csv(run.out / f"levels_{tg.ident}.csv"))
        if run.emit("json") and isinstance(tg.u, ScalarField2D):
            T = field_max(tg.u)
            fracs = np.linspace(0.05, 0.95, run.cfg.level_count)
            curves = [extract_level(tg.u, float(f * T)) for f in fracs]
            run.keep(curves_to_json(curves, run.out / f"curves_{tg.ident}.json"))
        reg = fam.regular
        p.add(f"V λ={tg.lam:.4g}", fam.s[reg] / fam.T, fam.column("V")[reg])
        p.add(f"h₂ λ={tg.lam:.4g}", fam.s[reg] / fam.T, fam.column("h2")[reg], dashed=True)
    if run.emit("svg") and targets:
        run.keep(p.save(run.out / "levels.svg"))
    print(f"levels: {len(targets)} solutions x {run.cfg.n_levels} levels")
    return EXIT_OK


def planar_fold_estimate(lam: np.ndarray, lambda1: np.ndarray) -> float | None:
    """λ* from λ₁² ≈ c(λ* - λ) near a fold, fitted through the last three points."""
    ok = np.isfinite(lambda1)
    lam, lambda1 = lam[ok], lambda1[ok]
    if lam.size < 3:
        return None
    slope, icpt = np.polyfit(lam[-3:], lambda1[-3:] ** 2, 1)
    if not slope < 0:
        return None
    return float(-icpt / slope)


def cmd_extremal(run: Run) -> int:
    b = get_branch(run)
    lam, sup, lambda1 = branch_arrays(b)
    if isinstance(b, Branch):
        ext = extremal_parameter(b)
        report = {
            "lambda_star": ext.lambda_star,
            "sup_at_star": ext.m_at_max,
            "bracket_m": list(ext.bracket),
            "asymptotic": ext.asymptotic,
        }
    else:
        report = {
            "lambda_last_good": float(lam[-1]) if lam.size else None,
            "lambda_star_from_eigenvalue": planar_fold_estimate(lam, lambda1),
            "sup_at_last_good": float(sup[-1]) if sup.size else None,
            "lambda1_at_last_good": float(lambda1[-1]) if lambda1.size else None,
        }
    hit = _fold_crossing(lam, lambda1)
    report["lambda1_zero_crossing"] = None if hit is None else float(lam[hit[0] - 1] + hit[1] * (lam[hit[0]] - lam[hit[0] - 1]))
    report = {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in report.items()}
    if run.emit("json"):
        path = run.out / "extremal.json"
        path.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
        run.keep(path)
    for k, v in sorted(report.items()):
        print(f"{k}: {v}")
    return EXIT_OK


def cmd_verify(run: Run) -> int:
    base = FULL if run.cfg.verify_resolution == "full" else REDUCED
    res = type(base)(base.name, run.cfg.verify_h, base.n_levels, base.eig_nodes, base.branch_points)
    print(f"verify: resolution {res.name}, h = 1/{1 / res.h:g}", flush=True)
    results = run_acceptance(res, run.threads, progress=lambda r: print(r.line(), flush=True))
    run.manifest.stages["verify"] = round(sum(r.seconds for r in results[:-1]), 6)
    if run.emit("json"):
        path = run.out / "verify_report.json"
        path.write_text(json.dumps([r.to_dict() for r in results], indent=1, sort_keys=True) + "\n")
        run.keep(path)
    failed = [r.number for r in results if not r.passed]
    print("verify: all criteria pass" if not failed else f"verify: FAILED criteria {', '.join(map(str, failed))}")
    return EXIT_FAILED if failed else EXIT_OK


COMMANDS = {"branch": cmd_branch, "audit": cmd_audit, "levels": cmd_levels, "extremal": cmd_extremal, "verify": cmd_verify}


def parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="semistable", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", type=Path, help="experiment file of 'dotted.key = value' lines")
    ap.add_argument("--out", type=Path, help="output directory (overrides output.directory)")
    ap.add_argument("--threads", type=int, default=1, help="worker pool size")
    ap.add_argument("--seed", type=int, default=0, help="seed for random test-function sampling")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return ap


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s: %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(item, "expected KEY=VALUE")
            k, v = item.split("=", 1)
            overrides[k.strip()] = v.strip()
        cfg = load_config(args.config, overrides)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run = Run.start(cfg, args.out or Path(cfg.directory), args.threads, args.seed)
    try:
        code = COMMANDS[args.command](run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SemistableError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    run.finish()
    return code


if __name__ == "__main__":
    sys.exit(main())
