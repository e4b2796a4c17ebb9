"""Experiment configuration: flat ``dotted.key = value`` text with optional ``[section]`` headers.

Values are numbers (``1/256`` allowed), booleans, bare strings, comma lists, or
``linspace(a, b, k)`` / ``geomspace(a, b, k)``. Unknown keys and invalid values
raise :class:`ConfigError` naming the offending key.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ConfigError

PLANAR_SHAPES = ("disk", "square", "ellipse", "polygon")
SHAPE_PARAMS = {
    "ball": (),
    "disk": ("radius", "center"),
    "square": ("side", "origin"),
    "ellipse": ("a", "b", "center"),
    "polygon": ("vertices",),
}
G_PARAMS = {"exponential": (), "power": ("p",), "affine": ("a", "b"), "constant": ("c",), "tabulated": ("file",)}
PHI_FAMILIES = ("ramp", "phik")
FORMATS = ("csv", "json", "svg", "field")

DEFAULT_TEXT = """\
# defaults; every key may be overridden by a config file
problem.n = 2
problem.domain = ball
problem.nonlinearity = exponential
branch.m_grid = linspace(0.05, 4, 60)
branch.lambda_grid = linspace(0.1, 1.9, 10)
branch.h = 1/128
branch.tol = 1e-10
branch.eig_nodes = 4096
branch.eigen = true
audit.select = all
audit.t_grid = 0.25, 0.5, 0.75
audit.phi = ramp, phik
audit.k_list = 1, 4, 16, 64
audit.n_levels = 64
audit.main_t_grid = 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9
audit.rho = 0.2
audit.curve_tol = 0.02
audit.samples = 8
levels.count = 8
output.directory = out
output.formats = csv, json, svg, field
verify.resolution = reduced
verify.h = 1/256
"""

FIXED_KEYS = {line.split("=")[0].strip() for line in DEFAULT_TEXT.splitlines() if "=" in line and not line.startswith("#")}
PARAM_PREFIXES = ("problem.domain.", "problem.g.")

_GRID = re.compile(r"^(linspace|geomspace)\(\s*([^,]+),\s*([^,]+),\s*([^,)]+)\)$")


def _number(text: str, key: str) -> float:
    try:
        return float(Fraction(text)) if "/" in text else float(text)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(key, f"expected a number, got {text!r}") from None


def _integer(text: str, key: str) -> int:
    v = _number(text, key)
    if v != int(v):
        raise ConfigError(key, f"expected an integer, got {text!r}")
    return int(v)


def _numbers(text: str, key: str) -> list[float]:
    text = text.strip()
    m = _GRID.match(text)
    if m:
        kind, a, b, k = m.groups()
        a, b, k = _number(a, key), _number(b, key), _integer(k, key)
        if k < 1:
            raise ConfigError(key, "grid needs at least one point")
        if kind == "geomspace" and (a <= 0 or b <= 0):
            raise ConfigError(key, "geomspace needs positive end points")
        return [float(v) for v in getattr(np, kind)(a, b, k)]
    return [_number(v.strip(), key) for v in _words(text, key)]


def _words(text: str, key: str) -> list[str]:
    items = [v.strip() for v in text.split(",")]
    if items == [""]:
        return []
    if any(not v for v in items):
        raise ConfigError(key, f"empty list entry in {text!r}")
    return items


def _boolean(text: str, key: str) -> bool:
    t = text.lower()
    if t in ("true", "yes", "1"):
        return True
    if t in ("false", "no", "0"):
        return False
    raise ConfigError(key, f"expected true/false, got {text!r}")


def parse_text(text: str) -> dict[str, str]:
    """Raw ``key -> value`` strings; later assignments win."""
    raw: dict[str, str] = {}
    section = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not section:
                raise ConfigError(f"line {lineno}", "empty section header")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}", "missing key")
        raw[f"{section}.{key}" if section else key] = value
    return raw


@dataclass(frozen=True)
class ExperimentConfig:
    n: int
    domain: str
    domain_params: dict
    nonlinearity: str
    g_params: dict
    m_grid: tuple
    lambda_grid: tuple
    h: float
    tol: float
    eig_nodes: int
    eigen: bool
    select: tuple | None
    t_grid: tuple
    phi: tuple
    k_list: tuple
    n_levels: int
    main_t_grid: tuple
    rho: float
    curve_tol: float
    samples: int
    level_count: int
    directory: str
    formats: tuple
    verify_resolution: str
    verify_h: float
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def radial(self) -> bool:
        return self.domain == "ball"

    @property
    def canonical_text(self) -> str:
        return "".join(f"{k} = {self.raw[k]}\n" for k in sorted(self.raw))

    @property
    def hash(self) -> str:
        """sha256 of the canonical (sorted, normalised) key = value text."""
        return hashlib.sha256(self.canonical_text.encode()).hexdigest()

    @property
    def branch_hash(self) -> str:
        """sha256 over the keys a computed branch depends on (problem.* and branch.*)."""
        text = "".join(f"{k} = {self.raw[k]}\n" for k in sorted(self.raw) if k.startswith(("problem.", "branch.")))
        return hashlib.sha256(text.encode()).hexdigest()

    def shape_spec(self) -> dict:
        return {"shape": self.domain, **self.domain_params}


def _shape_param(name: str, text: str, key: str):
    if name == "vertices":
        pts = [p.strip() for p in text.split(";") if p.strip()]
        verts = [tuple(_numbers(p, key)) for p in pts]
        if len(verts) < 3 or any(len(v) != 2 for v in verts):
            raise ConfigError(key, "vertices need at least three 'x, y' pairs separated by ';'")
        return verts
    if name in ("center", "origin"):
        v = _numbers(text, key)
        if len(v) != 2:
            raise ConfigError(key, "expected 'x, y'")
        return tuple(v)
    v = _number(text, key)
    if not v > 0:
        raise ConfigError(key, "must be positive")
    return v


def build_config(raw: dict[str, str]) -> ExperimentConfig:
    """Merge ``raw`` over the defaults and validate every field."""
    merged = parse_text(DEFAULT_TEXT)
    for key in raw:
        if key not in FIXED_KEYS and not key.startswith(PARAM_PREFIXES):
            raise ConfigError(key, "unknown key")
    merged.update(raw)
    get = merged.__getitem__

    n = _integer(get("problem.n"), "problem.n")
    if n < 2:
        raise ConfigError("problem.n", f"dimension must be at least 2, got {n}")
    domain = get("problem.domain")
    if domain not in SHAPE_PARAMS:
        raise ConfigError("problem.domain", f"unknown domain {domain!r}; expected one of {', '.join(SHAPE_PARAMS)}")
    if n >= 3 and domain != "ball":
        raise ConfigError("problem.domain", f"n = {n} needs the radial domain 'ball'; planar shapes are for n = 2 only")
    domain_params = {}
    for key, text in merged.items():
        if key.startswith("problem.domain."):
            name = key.rsplit(".", 1)[1]
            if name not in SHAPE_PARAMS[domain]:
                raise ConfigError(key, f"{domain} takes parameters {SHAPE_PARAMS[domain] or 'none'}")
            domain_params[name] = _shape_param(name, text, key)
    if domain == "polygon" and "vertices" not in domain_params:
        raise ConfigError("problem.domain.vertices", "polygon needs vertices")

    kind = get("problem.nonlinearity")
    if kind not in G_PARAMS:
        raise ConfigError("problem.nonlinearity", f"unknown kind {kind!r}; expected one of {', '.join(G_PARAMS)}")
    g_params = {}
    for key, text in merged.items():
        if key.startswith("problem.g."):
            name = key.rsplit(".", 1)[1]
            if name not in G_PARAMS[kind]:
                raise ConfigError(key, f"{kind} takes parameters {G_PARAMS[kind] or 'none'}")
            g_params[name] = text if name == "file" else _number(text, key)
    missing = [p for p in G_PARAMS[kind] if p not in g_params]
    if missing:
        raise ConfigError(f"problem.g.{missing[0]}", f"{kind} needs this parameter")

    def grid(key, positive=True):
        vals = _numbers(get(key), key)
        if not vals:
            raise ConfigError(key, "must not be empty")
        if positive and any(v <= 0 for v in vals):
            raise ConfigError(key, "values must be positive")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ConfigError(key, "values must be strictly increasing")
        return tuple(vals)

    def positive(key, integer=False):
        v = _integer(get(key), key) if integer else _number(get(key), key)
        if not v > 0:
            raise ConfigError(key, f"must be positive, got {get(key)!r}")
        return v

    def fractions(key):
        vals = grid(key)
        if vals[-1] >= 1:
            raise ConfigError(key, "fractions of max u must lie in (0, 1)")
        return vals

    select_text = get("audit.select").strip()
    select = None if select_text == "all" else grid("audit.select")
    phi = tuple(_words(get("audit.phi"), "audit.phi"))
    if not phi or any(p not in PHI_FAMILIES for p in phi):
        raise ConfigError("audit.phi", f"expected a list from {PHI_FAMILIES}, got {get('audit.phi')!r}")
    k_list = tuple(int(k) for k in grid("audit.k_list"))
    if any(k != v for k, v in zip(k_list, grid("audit.k_list"))):
        raise ConfigError("audit.k_list", "k values must be integers")
    n_levels = positive("audit.n_levels", integer=True)
    if n_levels < 16:
        raise ConfigError("audit.n_levels", "need at least 16 levels")
    formats = tuple(_words(get("output.formats"), "output.formats"))
    if any(f not in FORMATS for f in formats):
        raise ConfigError("output.formats", f"expected a list from {FORMATS}")
    resolution = get("verify.resolution")
    if resolution not in ("reduced", "full"):
        raise ConfigError("verify.resolution", "expected 'reduced' or 'full'")
    h = positive("branch.h")
    verify_h = positive("verify.h")
    for key, v in (("branch.h", h), ("verify.h", verify_h)):
        if v > 0.25:
            raise ConfigError(key, "grid spacing must be at most 1/4")
    samples = _integer(get("audit.samples"), "audit.samples")
    if samples < 0:
        raise ConfigError("audit.samples", "must be nonnegative")
    rho = positive("audit.rho")
    if domain == "ball" and rho >= 1:
        raise ConfigError("audit.rho", "must be below the ball's inradius 1")

    return ExperimentConfig(
        n=n,
        domain=domain,
        domain_params=domain_params,
        nonlinearity=kind,
        g_params=g_params,
        m_grid=grid("branch.m_grid"),
        lambda_grid=grid("branch.lambda_grid"),
        h=h,
        tol=positive("branch.tol"),
        eig_nodes=positive("branch.eig_nodes", integer=True),
        eigen=_boolean(get("branch.eigen"), "branch.eigen"),
        select=select,
        t_grid=fractions("audit.t_grid"),
        phi=phi,
        k_list=k_list,
        n_levels=n_levels,
        main_t_grid=fractions("audit.main_t_grid"),
        rho=rho,
        curve_tol=positive("audit.curve_tol"),
        samples=samples,
        level_count=positive("levels.count", integer=True),
        directory=get("output.directory"),
        formats=formats,
        verify_resolution=resolution,
        verify_h=verify_h,
        raw=merged,
    )


def load_config(path=None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    raw = parse_text(Path(path).read_text()) if path else {}
    raw.update(overrides or {})
    return build_config(raw)
