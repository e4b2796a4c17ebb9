"""Finite-difference solves of -Δu = λ f(u), u = 0 on ∂Ω, for convex planar Ω.

Ω is given by a shape (disk, square, ellipse, convex polygon) sampled on a
uniform grid. The 5-point Laplacian uses Shortley-Weller arms at nodes next to
a curved boundary, so it stays second-order accurate without a body-fitted mesh.

Fields live on the full grid. Inside nodes carry the solution; nodes within
three cells outside Ω carry ghost values extrapolated quadratically through the
boundary crossing along grid lines, which lets gradients, Hessians, level
curves and cut-cell quadrature use ordinary stencils up to ∂Ω.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Callable

import numpy as np
import scipy.sparse as sps
from scipy.sparse.linalg import splu

from . import _cutcell
from .errors import ArgumentError, LinearSolveError, NonConvergenceError
from .nonlinearity import Nonlinearity

PAD = 3
INSIDE_TOL = 1e-12
THETA_MIN = 1e-6


# --- shapes --------------------------------------------------------------


@dataclass(frozen=True)
class Disk:
    radius: float = 1.0
    center: tuple[float, float] = (0.0, 0.0)
    kind = "disk"

    def level(self, x, y):
        return np.hypot(x - self.center[0], y - self.center[1]) - self.radius

    def distance(self, x, y):
        return np.abs(self.level(x, y))

    @property
    def bbox(self):
        cx, cy = self.center
        r = self.radius
        return cx - r, cy - r, cx + r, cy + r

    @property
    def area(self):
        return math.pi * self.radius**2

    @property
    def inradius(self):
        return self.radius

    corners = ()

    def params(self):
        return {"radius": self.radius, "center": list(self.center)}


@dataclass(frozen=True)
class Square:
    side: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)
    kind = "square"

    def level(self, x, y):
        half = 0.5 * self.side
        cx, cy = self.origin[0] + half, self.origin[1] + half
        return np.maximum(np.abs(x - cx), np.abs(y - cy)) - half

    def distance(self, x, y):
        x0, y0 = self.origin
        s = self.side
        inner = np.minimum.reduce([x - x0, x0 + s - x, y - y0, y0 + s - y])
        return np.abs(inner)

    @property
    def bbox(self):
        x0, y0 = self.origin
        return x0, y0, x0 + self.side, y0 + self.side

    @property
    def area(self):
        return self.side**2

    @property
    def inradius(self):
        return 0.5 * self.side

    @property
    def corners(self):
        x0, y0 = self.origin
        s = self.side
        return ((x0, y0), (x0 + s, y0), (x0 + s, y0 + s), (x0, y0 + s))

    def params(self):
        return {"side": self.side, "origin": list(self.origin)}


@dataclass(frozen=True)
class Ellipse:
    a: float = 1.0
    b: float = 0.6
    center: tuple[float, float] = (0.0, 0.0)
    kind = "ellipse"

    def level(self, x, y):
        # scaled so |∇level| ~ 1 near the boundary
        X = (x - self.center[0]) / self.a
        Y = (y - self.center[1]) / self.b
        return min(self.a, self.b) * (np.hypot(X, Y) - 1.0)

    def distance(self, x, y):
        """Euclidean distance to the ellipse, by bisection on the foot-point equation."""
        x = np.abs(np.asarray(x, dtype=float) - self.center[0])
        y = np.abs(np.asarray(y, dtype=float) - self.center[1])
        swap = self.a < self.b
        e0, e1 = (self.b, self.a) if swap else (self.a, self.b)
        p0, p1 = (y, x) if swap else (x, y)
        p0, p1 = np.broadcast_arrays(p0, p1)
        on_axis = p1 <= 1e-14 * e0
        q1s = np.where(on_axis, 1.0, p1)  # placeholder off the major axis
        # foot (e0² p0/(t+e0²), e1² p1/(t+e1²)); F decreases on (-e1², ∞) from +∞
        lo = np.full(p0.shape, -e1 * e1)
        hi = np.maximum(e0 * p0, e1 * q1s) + 1.0
        for _ in range(120):
            t = 0.5 * (lo + hi)
            F = (e0 * p0 / (t + e0 * e0)) ** 2 + (e1 * q1s / (t + e1 * e1)) ** 2 - 1.0
            pos = F > 0
            lo = np.where(pos, t, lo)
            hi = np.where(pos, hi, t)
        t = 0.5 * (lo + hi)
        d = np.hypot(p0 - e0 * e0 * p0 / (t + e0 * e0), q1s - e1 * e1 * q1s / (t + e1 * e1))
        # on the major axis the foot leaves the axis while p0 < (e0² - e1²)/e0
        cut = (e0 * e0 - e1 * e1) / e0
        xa = np.clip(e0 * e0 * p0 / (e0 * e0 - e1 * e1), 0.0, e0) if e0 > e1 else np.zeros_like(p0)
        d_axis = np.where(
            p0 < cut,
            np.hypot(xa - p0, e1 * np.sqrt(np.maximum(0.0, 1.0 - (xa / e0) ** 2))),
            np.abs(p0 - e0),
        )
        return np.where(on_axis, d_axis, d)

    @property
    def bbox(self):
        cx, cy = self.center
        return cx - self.a, cy - self.b, cx + self.a, cy + self.b

    @property
    def area(self):
        return math.pi * self.a * self.b

    @property
    def inradius(self):
        return min(self.a, self.b)

    corners = ()

    def params(self):
        return {"a": self.a, "b": self.b, "center": list(self.center)}


@dataclass(frozen=True)
class Polygon:
    vertices: tuple[tuple[float, float], ...]
    kind = "polygon"

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[0] < 3 or v.shape[1] != 2:
            raise ArgumentError("polygon needs at least three (x, y) vertices")
        signed = 0.5 * np.sum(v[:, 0] * np.roll(v[:, 1], -1) - np.roll(v[:, 0], -1) * v[:, 1])
        if signed < 0:
            v = v[::-1]
        e = np.roll(v, -1, axis=0) - v
        cross = e[:, 0] * np.roll(e[:, 1], -1) - e[:, 1] * np.roll(e[:, 0], -1)
        if np.any(cross <= 0):
            raise ArgumentError("polygon must be strictly convex")
        object.__setattr__(self, "vertices", tuple(map(tuple, v)))

    def _edges(self):
        v = np.asarray(self.vertices)
        e = np.roll(v, -1, axis=0) - v
        normal = np.stack([e[:, 1], -e[:, 0]], axis=1) / np.linalg.norm(e, axis=1)[:, None]
        return v, e, normal

    def level(self, x, y):
        v, _, nrm = self._edges()
        vals = [(x - v[k, 0]) * nrm[k, 0] + (y - v[k, 1]) * nrm[k, 1] for k in range(len(v))]
        return np.maximum.reduce(vals)

    def distance(self, x, y):
        v, e, _ = self._edges()
        best = None
        for k in range(len(v)):
            t = ((x - v[k, 0]) * e[k, 0] + (y - v[k, 1]) * e[k, 1]) / (e[k] @ e[k])
            t = np.clip(t, 0.0, 1.0)
            d = np.hypot(x - v[k, 0] - t * e[k, 0], y - v[k, 1] - t * e[k, 1])
            best = d if best is None else np.minimum(best, d)
        return best

    @property
    def bbox(self):
        v = np.asarray(self.vertices)
        return v[:, 0].min(), v[:, 1].min(), v[:, 0].max(), v[:, 1].max()

    @property
    def area(self):
        v = np.asarray(self.vertices)
        return 0.5 * abs(np.sum(v[:, 0] * np.roll(v[:, 1], -1) - np.roll(v[:, 0], -1) * v[:, 1]))

    @property
    def inradius(self):
        # largest inscribed circle of a convex polygon: max over a fine sample of the distance
        x0, y0, x1, y1 = self.bbox
        xs, ys = np.meshgrid(np.linspace(x0, x1, 201), np.linspace(y0, y1, 201))
        d = np.where(self.level(xs, ys) < 0, self.distance(xs, ys), 0.0)
        return float(d.max())

    @property
    def corners(self):
        return self.vertices

    def params(self):
        return {"vertices": [list(p) for p in self.vertices]}


def make_shape(shape: str, **params):
    if shape == "disk":
        return Disk(float(params.get("radius", 1.0)), tuple(params.get("center", (0.0, 0.0))))
    if shape == "square":
        return Square(float(params.get("side", 1.0)), tuple(params.get("origin", (0.0, 0.0))))
    if shape == "ellipse":
        return Ellipse(float(params.get("a", 1.0)), float(params.get("b", 0.6)), tuple(params.get("center", (0.0, 0.0))))
    if shape == "polygon":
        if "vertices" not in params:
            raise ArgumentError("polygon needs 'vertices'")
        return Polygon(tuple(tuple(map(float, p)) for p in params["vertices"]))
    raise ArgumentError(f"unknown shape {shape!r}; expected disk, square, ellipse or polygon")


def shape_from_config(spec: dict[str, Any]):
    spec = dict(spec)
    return make_shape(spec.pop("shape"), **spec)


# --- grid mask -----------------------------------------------------------

# (name, d_ix, d_iy); arrays are indexed [iy, ix]
DIRECTIONS = (("E", 1, 0), ("W", -1, 0), ("N", 0, 1), ("S", 0, -1))


def _shift(a: np.ndarray, dx: int, dy: int, fill) -> np.ndarray:
    """out[iy, ix] = a[iy + dy, ix + dx], ``fill`` where that index leaves the grid."""
    out = np.full_like(a, fill)
    ny, nx = a.shape
    ys_dst = slice(max(0, -dy), ny - max(0, dy))
    xs_dst = slice(max(0, -dx), nx - max(0, dx))
    ys_src = slice(max(0, dy), ny - max(0, -dy))
    xs_src = slice(max(0, dx), nx - max(0, -dx))
    out[ys_dst, xs_dst] = a[ys_src, xs_src]
    return out


@dataclass(eq=False)
class DomainMask:
    """Grid sampling of a convex planar domain.

    ``arms[d]`` holds, for inside nodes, the distance to the neighbour in
    direction d as a fraction θ ∈ (0, 1] of h (θ < 1 where ∂Ω cuts the grid
    line first). ``delta`` is the distance to ∂Ω at inside nodes.
    """

    shape: Any
    h: float
    x: np.ndarray
    y: np.ndarray
    level: np.ndarray
    inside: np.ndarray
    index: np.ndarray
    arms: dict[str, np.ndarray]
    delta: np.ndarray
    convex: bool = True

    @classmethod
    def build(cls, shape, h: float) -> "DomainMask":
        if not h > 0:
            raise ArgumentError("grid spacing must be positive")
        x0, y0, x1, y1 = shape.bbox
        nx = int(math.ceil((x1 - x0) / h - 1e-9))
        ny = int(math.ceil((y1 - y0) / h - 1e-9))
        x = x0 + h * np.arange(-PAD, nx + PAD + 1)
        y = y0 + h * np.arange(-PAD, ny + PAD + 1)
        X, Y = np.meshgrid(x, y)
        level = shape.level(X, Y)
        inside = level < -INSIDE_TOL * max(1.0, x1 - x0)
        index = np.full(inside.shape, -1, dtype=np.int64)
        index[inside] = np.arange(int(inside.sum()))
        arms = {}
        for name, dx, dy in DIRECTIONS:
            theta = np.where(inside, 1.0, np.nan)
            nb_inside = _shift(inside, dx, dy, False)
            cut = inside & ~nb_inside
            px, py = X[cut], Y[cut]
            lo = np.zeros(px.shape)
            hi = np.ones(px.shape)
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                neg = shape.level(px + mid * h * dx, py + mid * h * dy) < 0
                lo = np.where(neg, mid, lo)
                hi = np.where(neg, hi, mid)
            theta[cut] = np.maximum(0.5 * (lo + hi), THETA_MIN)
            arms[name] = theta
        delta = np.where(inside, shape.distance(X, Y), 0.0)
        return cls(shape, h, x, y, level, inside, index, arms, delta)

    @property
    def size(self) -> int:
        return int(self.inside.sum())

    @cached_property
    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.x, self.y)

    @cached_property
    def area(self) -> float:
        """|Ω| by cut-cell quadrature of the shape's level function."""
        return self.integrate(np.ones_like(self.level))

    @cached_property
    def edge(self) -> np.ndarray:
        """Inside nodes with at least one Shortley-Weller arm shorter than h or a missing neighbour."""
        e = np.zeros_like(self.inside)
        for name, dx, dy in DIRECTIONS:
            e |= self.inside & ~_shift(self.inside, dx, dy, False)
        return e

    def deep(self, k: int) -> np.ndarray:
        """Inside nodes whose whole (2k+1)² neighbourhood is inside."""
        ok = self.inside.copy()
        for dy in range(-k, k + 1):
            for dx in range(-k, k + 1):
                ok &= _shift(self.inside, dx, dy, False)
        return ok

    def integrate(self, F: np.ndarray, *constraints: np.ndarray) -> float:
        """∫_Ω F over {constraints > 0}, F given on the full grid."""
        val, _ = _cutcell.integrate(self.h, F, [-self.level, *constraints])
        return val

    def to_grid(self, vec: np.ndarray, fill=0.0) -> np.ndarray:
        G = np.full(self.inside.shape, fill, dtype=float)
        G[self.inside] = vec
        return G

    def sample(self, func: Callable) -> np.ndarray:
        X, Y = self.coords
        return np.asarray(func(X, Y), dtype=float)[self.inside]

    def describe(self) -> dict:
        return {"shape": self.shape.kind, **self.shape.params()}

    # --- operators ---------------------------------------------------------

    @cached_property
    def laplacian(self) -> sps.csr_matrix:
        """-Δ_h with Shortley-Weller arms and homogeneous Dirichlet data."""
        h = self.h
        ins = self.inside
        idx = self.index[ins]
        arm = {name: self.arms[name][ins] * h for name, _, _ in DIRECTIONS}
        rows, cols, vals = [idx], [idx], [2.0 / (arm["E"] * arm["W"]) + 2.0 / (arm["N"] * arm["S"])]
        pairs = {"E": "W", "W": "E", "N": "S", "S": "N"}
        for name, dx, dy in DIRECTIONS:
            nb = _shift(self.index, dx, dy, -1)[ins]
            has = (nb >= 0) & (self.arms[name][ins] >= 1.0)
            a, b = arm[name], arm[pairs[name]]
            rows.append(idx[has])
            cols.append(nb[has])
            vals.append(-2.0 / (a[has] * (a[has] + b[has])))
        n = self.size
        return sps.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        )

    # --- ghost extension ---------------------------------------------------

    def extend(self, vec: np.ndarray) -> np.ndarray:
        """Full-grid array: ``vec`` at inside nodes, ghost values up to PAD cells outside.

        Along each grid line leaving Ω, the ghost values come from the quadratic
        through the boundary crossing (value 0) and the two nearest inside nodes
        at least h/2 from ∂Ω; several lines reaching a node are averaged.
        """
        G = self.to_grid(vec, np.nan)
        acc = np.zeros_like(G)
        cnt = np.zeros_like(G)
        ny, nx = G.shape
        iy_all, ix_all = np.nonzero(self.inside)
        for name, dx, dy in DIRECTIONS:
            theta = self.arms[name][iy_all, ix_all]
            nb_in = _shift(self.inside, dx, dy, False)[iy_all, ix_all]
            sel = ~nb_in
            iy, ix, th = iy_all[sel], ix_all[sel], theta[sel]
            uP = G[iy, ix]

            def node(k):
                jy, jx = iy + k * dy, ix + k * dx
                ok = (jy >= 0) & (jy < ny) & (jx >= 0) & (jx < nx)
                jy_c, jx_c = np.clip(jy, 0, ny - 1), np.clip(jx, 0, nx - 1)
                ok &= self.inside[jy_c, jx_c]
                return np.where(ok, G[jy_c, jx_c], np.nan), ok

            uW, okW = node(-1)
            uWW, okWW = node(-2)
            far = (th < 0.5) & okW & okWW
            # nodes (position, value) in units of h along the line; boundary at θ
            x1 = np.where(far, -2.0, -1.0)
            y1 = np.where(far, uWW, uW)
            x2 = np.where(far, -1.0, 0.0)
            y2 = np.where(far, uW, uP)
            quad = okW
            for k in range(1, PAD + 1):
                jy, jx = iy + k * dy, ix + k * dx
                ok = (jy >= 0) & (jy < ny) & (jx >= 0) & (jx < nx)
                t = float(k)
                # Lagrange through (x1, y1), (x2, y2), (θ, 0)
                l1 = (t - x2) * (t - th) / ((x1 - x2) * (x1 - th))
                l2 = (t - x1) * (t - th) / ((x2 - x1) * (x2 - th))
                val_q = l1 * y1 + l2 * y2
                val_l = uP * (t - th) / (0.0 - th)
                val = np.where(quad, val_q, val_l)
                jy, jx, val = jy[ok], jx[ok], val[ok]
                keep = ~self.inside[jy, jx]
                np.add.at(acc, (jy[keep], jx[keep]), val[keep])
                np.add.at(cnt, (jy[keep], jx[keep]), 1.0)
        ghost = cnt > 0
        G[ghost] = acc[ghost] / cnt[ghost]
        # remaining band nodes: linear extrapolation from two filled neighbours on a line
        for _ in range(2):
            missing = np.isnan(G) & (self.level < PAD * self.h)
            if not missing.any():
                break
            acc = np.zeros_like(G)
            cnt = np.zeros_like(G)
            for _, dx, dy in DIRECTIONS:
                a1 = _shift(G, -dx, -dy, np.nan)
                a2 = _shift(G, -2 * dx, -2 * dy, np.nan)
                ext = 2 * a1 - a2
                ok = missing & np.isfinite(ext)
                acc[ok] += ext[ok]
                cnt[ok] += 1
            fill = cnt > 0
            G[fill] = acc[fill] / cnt[fill]
        return G


# --- fields ----------------------------------------------------------------


class ScalarField2D:
    """Values at the inside nodes of a DomainMask (zero trace on ∂Ω)."""

    def __init__(self, dom: DomainMask, values: np.ndarray, lam: float = float("nan"), g_id: str = ""):
        values = np.asarray(values, dtype=float)
        if values.shape != (dom.size,):
            raise ArgumentError(f"expected {dom.size} interior values, got shape {values.shape}")
        self.dom = dom
        self.values = values
        self.lam = lam
        self.g_id = g_id

    @classmethod
    def zeros(cls, dom: DomainMask) -> "ScalarField2D":
        return cls(dom, np.zeros(dom.size))

    @classmethod
    def from_function(cls, dom: DomainMask, func: Callable, **kw) -> "ScalarField2D":
        return cls(dom, dom.sample(func), **kw)

    @cached_property
    def grid(self) -> np.ndarray:
        return self.dom.extend(self.values)

    @cached_property
    def derivatives(self) -> dict[str, np.ndarray]:
        """Central-difference u_x, u_y, u_xx, u_xy, u_yy on the full grid (NaN where undefined)."""
        G = self.grid
        h = self.h
        out = {k: np.full_like(G, np.nan) for k in ("x", "y", "xx", "xy", "yy")}
        c = (slice(1, -1), slice(1, -1))
        out["x"][c] = (G[1:-1, 2:] - G[1:-1, :-2]) / (2 * h)
        out["y"][c] = (G[2:, 1:-1] - G[:-2, 1:-1]) / (2 * h)
        out["xx"][c] = (G[1:-1, 2:] - 2 * G[1:-1, 1:-1] + G[1:-1, :-2]) / h**2
        out["yy"][c] = (G[2:, 1:-1] - 2 * G[1:-1, 1:-1] + G[:-2, 1:-1]) / h**2
        out["xy"][c] = (G[2:, 2:] - G[2:, :-2] - G[:-2, 2:] + G[:-2, :-2]) / (4 * h * h)
        return out

    @cached_property
    def grad_norm(self) -> np.ndarray:
        d = self.derivatives
        return np.hypot(d["x"], d["y"])

    @property
    def h(self) -> float:
        return self.dom.h

    @property
    def max(self) -> float:
        return float(self.values.max())

    def at(self, px: float, py: float) -> float:
        """Bilinear interpolation of the (ghost-extended) grid at a point."""
        dom = self.dom
        fx = (px - dom.x[0]) / dom.h
        fy = (py - dom.y[0]) / dom.h
        ix, iy = int(math.floor(fx)), int(math.floor(fy))
        tx, ty = fx - ix, fy - iy
        G = self.grid
        return float(
            (1 - tx) * (1 - ty) * G[iy, ix]
            + tx * (1 - ty) * G[iy, ix + 1]
            + (1 - tx) * ty * G[iy + 1, ix]
            + tx * ty * G[iy + 1, ix + 1]
        )

    # persistence ----------------------------------------------------------

    def save(self, path) -> Path:
        """Flat little-endian float64 grid (zeros outside Ω) plus a JSON header."""
        path = Path(path)
        grid = self.dom.to_grid(self.values, 0.0)
        grid.astype("<f8").tofile(path)
        ny, nx = grid.shape
        header = {
            "nx": nx,
            "ny": ny,
            "h": self.dom.h,
            "shape": self.dom.describe(),
            "lambda": None if math.isnan(self.lam) else self.lam,
            "g_id": self.g_id,
        }
        path.with_suffix(".json").write_text(json.dumps(header, sort_keys=True))
        return path

    @classmethod
    def load(cls, path, dom: DomainMask | None = None) -> "ScalarField2D":
        path = Path(path)
        header = json.loads(path.with_suffix(".json").read_text())
        if dom is None:
            dom = DomainMask.build(shape_from_config(header["shape"]), header["h"])
        grid = np.fromfile(path, dtype="<f8").reshape(header["ny"], header["nx"])
        if grid.shape != dom.inside.shape:
            raise ArgumentError("stored grid does not match the domain mask")
        lam = header["lambda"]
        return cls(dom, grid[dom.inside], float("nan") if lam is None else lam, header["g_id"])


class TestFunction2D(ScalarField2D):
    """Admissible test function ξ: values at inside nodes, zero on ∂Ω."""

    __test__ = False  # not a pytest class


def _same_mask(a: ScalarField2D, b: ScalarField2D):
    if a.dom is not b.dom:
        same = (
            a.dom.h == b.dom.h
            and a.dom.describe() == b.dom.describe()
            and a.dom.inside.shape == b.dom.inside.shape
        )
        if not same:
            raise ArgumentError("fields live on different domain masks")


# --- Newton solver -------------------------------------------------------


def _factor(A):
    """Sparse LU; the operators are structurally symmetric, so order on A + Aᵀ."""
    return splu(
        A.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True}
    )


def _scaled_residual(dom, u, f, lam):
    L = dom.laplacian
    F = L @ u - lam * np.asarray(f.eval(u))
    return F, float(np.max(np.abs(F) / L.diagonal()))


def solve_newton(
    dom: DomainMask,
    f: Nonlinearity,
    lam: float,
    init: ScalarField2D | None = None,
    tol: float = 1e-10,
    max_iter: int = 50,
) -> ScalarField2D:
    """Newton iteration on -Δ_h u = λ f(u).

    Converged when max_i |residual_i| / diag_i < ``tol`` (the residual in units
    of u); the converged iterate then gets one chord step with the last LU
    factors, so solves from different starting points agree to roundoff. Raises NonConvergenceError after 5 consecutive residual increases,
    an overflow of f, or ``max_iter`` steps; ``.last`` holds the last iterate.
    """
    from .errors import EvaluationDomainError

    u = np.zeros(dom.size) if init is None else init.values.copy()
    if init is not None:
        _same_mask(init, ScalarField2D(dom, u))
    L = dom.laplacian.tocsc()
    growth = 0
    prev = math.inf
    lu = None
    for it in range(max_iter + 1):
        try:
            F, res = _scaled_residual(dom, u, f, lam)
        except EvaluationDomainError as exc:
            raise NonConvergenceError(f"Newton left the domain of f at λ={lam}: {exc}", last=ScalarField2D(dom, u, lam, f.ident)) from exc
        if not math.isfinite(res):
            raise NonConvergenceError(f"non-finite residual at λ={lam}", last=ScalarField2D(dom, u, lam, f.ident))
        if res < tol:
            if lu is not None:
                u = u + lu.solve(-F)
            return ScalarField2D(dom, u, lam, f.ident)
        growth = growth + 1 if res > prev else 0
        if growth >= 5:
            raise NonConvergenceError(f"Newton diverging at λ={lam} (residual {res:.3e})", last=ScalarField2D(dom, u, lam, f.ident))
        prev = res
        if it == max_iter:
            break
        J = L - sps.diags(lam * np.asarray(f.deriv(u), dtype=float))
        try:
            lu = _factor(J)
            du = lu.solve(-F)
        except RuntimeError as exc:
            raise LinearSolveError(f"singular Jacobian at λ={lam}: {exc}") from exc
        if not np.all(np.isfinite(du)):
            raise LinearSolveError(f"non-finite Newton update at λ={lam}")
        u = u + du
    raise NonConvergenceError(f"Newton did not converge in {max_iter} steps at λ={lam}", last=ScalarField2D(dom, u, lam, f.ident))


@dataclass
class PlanarBranchPoint:
    lam: float
    field: ScalarField2D
    lambda1: float


@dataclass
class PlanarBranch:
    points: list[PlanarBranchPoint]
    last_good: float
    terminated: bool
    failures: list[tuple[float, str]] = field(default_factory=list)

    def __iter__(self):
        return iter((p.lam, p.field, p.lambda1) for p in self.points)

    def __len__(self):
        return len(self.points)


def minimal_branch_2d(dom, g, lambda_grid, with_eigen=True, tol=1e-10, max_iter=10) -> PlanarBranch:
    """Warm-started Newton continuation along increasing λ from u ≡ 0.

    A failed step is retried at half and then a quarter of its length; the
    branch ends when the quarter step fails too, and ``last_good`` is then a
    lower bound for the discrete λ*. Warm-started Newton converges in a handful
    of steps on the branch, so ``max_iter`` is kept small to fail fast past
    the fold.
    """
    grid = [float(v) for v in lambda_grid]
    if not grid or grid[0] <= 0 or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ArgumentError("lambda_grid must be positive and strictly increasing")
    points: list[PlanarBranchPoint] = []
    failures = []
    current = ScalarField2D.zeros(dom)
    lam_prev = 0.0
    for target in grid:
        step = target - lam_prev
        halvings = 0
        while lam_prev < target - 1e-14 * max(1.0, target):
            trial = min(lam_prev + step, target)
            try:
                sol = solve_newton(dom, g, trial, current, tol=tol, max_iter=max_iter)
            except (NonConvergenceError, LinearSolveError) as exc:
                failures.append((trial, str(exc)))
                if halvings == 2:
                    last = points[-1].lam if points else 0.0
                    return PlanarBranch(points, last, True, failures)
                halvings += 1
                step *= 0.5
                continue
            lam1 = linearized_eigenvalue_2d(sol, g, trial) if with_eigen else float("nan")
            points.append(PlanarBranchPoint(trial, sol, lam1))
            current, lam_prev = sol, trial
    return PlanarBranch(points, points[-1].lam if points else 0.0, False, failures)


# --- linearisation ---------------------------------------------------------


def linearized_eigenvalue_2d(u: ScalarField2D, f: Nonlinearity, lam: float, tol=1e-9, max_iter=300, return_vector=False):
    """Smallest eigenvalue of -Δ_h - λ f'(u) by shifted inverse power iteration.

    The first shift sits below min(-λ f'(u)), which bounds the principal
    eigenvalue from below; once the Rayleigh quotient settles to 1e-4 the
    operator is refactored once, just below the current quotient.
    """
    dom = u.dom
    L = dom.laplacian
    pot = -lam * np.asarray(f.deriv(u.values), dtype=float)
    A = (L + sps.diags(pot)).tocsc()
    I = sps.identity(dom.size, format="csc")
    sigma = float(pot.min()) - 1.0
    lu = _factor(A - sigma * I)
    x = np.ones(dom.size) / math.sqrt(dom.size)
    rq_prev = float(x @ (A @ x))
    refined = False
    for _ in range(max_iter):
        y = lu.solve(x)
        nrm = np.linalg.norm(y)
        if not np.isfinite(nrm) or nrm == 0:
            raise NonConvergenceError("inverse iteration produced a non-finite iterate", last=rq_prev)
        x = y / nrm
        rq = float(x @ (A @ x))
        scale = max(1.0, abs(rq))
        delta = abs(rq - rq_prev)
        rq_prev = rq
        if refined and delta < tol * scale:
            if return_vector:
                x = x if x.sum() >= 0 else -x
                return rq, TestFunction2D(dom, x)
            return rq
        if not refined and delta < 1e-4 * scale:
            sigma = rq - 1e-4 * scale
            lu = _factor(A - sigma * I)
            refined = True
    raise NonConvergenceError(f"inverse iteration did not converge in {max_iter} steps", last=rq_prev)


def quadratic_form(u: ScalarField2D, f: Nonlinearity, lam: float, xi: ScalarField2D) -> float:
    """Q_u(ξ) = ∫ |∇ξ|² - λ f'(u) ξ² by cut-cell (piecewise-linear) quadrature."""
    _same_mask(u, xi)
    if not np.any(xi.values):
        return 0.0
    d = xi.derivatives
    ug = np.where(u.dom.inside, u.grid, np.maximum(u.grid, 0.0))
    fp = np.full_like(ug, np.nan)
    ok = np.isfinite(ug)
    fp[ok] = f.deriv(ug[ok])
    integrand = d["x"] ** 2 + d["y"] ** 2 - lam * fp * xi.grid**2
    return u.dom.integrate(integrand)


def l2_norm_sq(xi: ScalarField2D) -> float:
    return xi.dom.integrate(xi.grid**2)


def random_test_functions(dom: DomainMask, count: int, seed: int = 0, max_freq: int = 3) -> list[TestFunction2D]:
    """Smooth admissible ξ: torsion function times random low-frequency sine products."""
    rng = np.random.default_rng(seed)
    torsion = solve_newton(dom, Nonlinearity.constant(1.0), 1.0)
    X, Y = dom.coords
    x0, y0, x1, y1 = dom.shape.bbox
    Xi = X[dom.inside]
    Yi = Y[dom.inside]
    out = []
    for _ in range(count):
        s = np.zeros(dom.size)
        for a in range(1, max_freq + 1):
            for b in range(1, max_freq + 1):
                s += rng.normal() * np.sin(a * np.pi * (Xi - x0) / (x1 - x0)) * np.sin(b * np.pi * (Yi - y0) / (y1 - y0))
        out.append(TestFunction2D(dom, torsion.values * (s + rng.normal())))
    return out


# --- gradient equation ----------------------------------------------------


def _hessian_lhs(d, gn):
    """Σ u_ij² - Σ_i (Σ_j u_ij u_j / |∇u|)²."""
    with np.errstate(invalid="ignore", divide="ignore"):
        return _hessian_lhs_raw(d, gn)


def _hessian_lhs_raw(d, gn):
    hx = (d["xx"] * d["x"] + d["xy"] * d["y"]) / gn
    hy = (d["xy"] * d["x"] + d["yy"] * d["y"]) / gn
    return d["xx"] ** 2 + 2 * d["xy"] ** 2 + d["yy"] ** 2 - hx**2 - hy**2


CORNER_CELLS = 10


def _stat_nodes(u: ScalarField2D, threshold: float, depth: int = 2) -> np.ndarray:
    """Nodes entering pointwise derivative statistics.

    Excludes nodes whose stencils reach outside Ω and, near vertices of
    polygonal domains, a disc of CORNER_CELLS cells where u is not C³.
    """
    gn = u.grad_norm
    gmax = float(np.nanmax(np.where(u.dom.inside, gn, np.nan)))
    sel = u.dom.deep(depth) & (gn > threshold * gmax)
    X, Y = u.dom.coords
    for cx, cy in u.dom.shape.corners:
        sel &= np.hypot(X - cx, Y - cy) > CORNER_CELLS * u.h
    if not sel.any():
        from .errors import DegenerateFieldError

        raise DegenerateFieldError(f"no interior nodes with |∇u| > {threshold}·max|∇u|")
    return sel


def _grid_gradient(A: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    gx = np.full_like(A, np.nan)
    gy = np.full_like(A, np.nan)
    gx[:, 1:-1] = (A[:, 2:] - A[:, :-2]) / (2 * h)
    gy[1:-1, :] = (A[2:, :] - A[:-2, :]) / (2 * h)
    return gx, gy


def _grid_laplacian(A: np.ndarray, h: float) -> np.ndarray:
    out = np.full_like(A, np.nan)
    out[1:-1, 1:-1] = (A[1:-1, 2:] + A[1:-1, :-2] + A[2:, 1:-1] + A[:-2, 1:-1] - 4 * A[1:-1, 1:-1]) / h**2
    return out


def _d1(A: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Fourth-order centred first difference along ``axis`` (1 = x, 0 = y); NaN at the rim."""
    out = np.full_like(A, np.nan)
    m = A.shape[axis]
    sl = lambda a, b: tuple(slice(a, b) if ax == axis else slice(None) for ax in range(2))
    out[sl(2, m - 2)] = (
        -A[sl(4, m)] + 8 * A[sl(3, m - 1)] - 8 * A[sl(1, m - 3)] + A[sl(0, m - 4)]
    ) / (12 * h)
    return out


def _d2(A: np.ndarray, axis: int, h: float) -> np.ndarray:
    out = np.full_like(A, np.nan)
    m = A.shape[axis]
    sl = lambda a, b: tuple(slice(a, b) if ax == axis else slice(None) for ax in range(2))
    out[sl(2, m - 2)] = (
        -A[sl(4, m)] + 16 * A[sl(3, m - 1)] - 30 * A[sl(2, m - 2)] + 16 * A[sl(1, m - 3)] - A[sl(0, m - 4)]
    ) / (12 * h * h)
    return out


def _fine_derivatives(u: ScalarField2D) -> dict[str, np.ndarray]:
    G, h = u.grid, u.h
    ux, uy = _d1(G, 1, h), _d1(G, 0, h)
    return {"x": ux, "y": uy, "xx": _d2(G, 1, h), "yy": _d2(G, 0, h), "xy": _d1(ux, 0, h)}


def level_geometry_terms(u: ScalarField2D) -> tuple[np.ndarray, np.ndarray]:
    """(∇_T|∇u|, κ) on the grid by differencing derived fields.

    ∇_T|∇u| is the tangential component of the gradient of the |∇u| array;
    κ = -div(∇u/|∇u|) is differenced from the normalised gradient. Neither
    touches the Hessian, so comparing them with the Hessian form is a genuine
    two-route check. Fourth-order differences throughout.
    """
    h = u.h
    G = u.grid
    ux, uy = _d1(G, 1, h), _d1(G, 0, h)
    gn = np.hypot(ux, uy)
    with np.errstate(invalid="ignore", divide="ignore"):
        nx_, ny_ = ux / gn, uy / gn
        tangential = -ny_ * _d1(gn, 1, h) + nx_ * _d1(gn, 0, h)
        kappa = -(_d1(nx_, 1, h) + _d1(ny_, 0, h))
    return tangential, kappa


def identity_gap(u: ScalarField2D, threshold: float = 0.1) -> float:
    """Max pointwise relative gap between both sides of the level-set Hessian identity.

    Left: Σ u_ij² - Σ_i(Σ_j u_ij u_j/|∇u|)² from the discrete Hessian.
    Right: |∇_T|∇u||² + κ²|∇u|² from :func:`level_geometry_terms`.
    Nodes within four cells of ∂Ω are excluded, so no stencil reaches a ghost value.
    """
    sel = _stat_nodes(u, threshold, depth=4)
    d = _fine_derivatives(u)
    gn = np.hypot(d["x"], d["y"])
    with np.errstate(invalid="ignore", divide="ignore"):
        lhs = _hessian_lhs(d, gn)
    tang, kappa = level_geometry_terms(u)
    rhs = tang**2 + kappa**2 * gn**2
    gap = np.abs(lhs - rhs)[sel] / np.abs(lhs[sel])
    return float(gap.max())


def gradient_equation_residual(u: ScalarField2D, f: Nonlinearity, lam: float, threshold: float = 0.1) -> float:
    """Max relative residual of (Δ + λ f'(u))|∇u| = (|∇_T|∇u||² + |A|²|∇u|²)/|∇u|.

    The right side is evaluated through the Hessian form of the identity. Each
    node's residual is divided by the largest of |Δ|∇u||, |λ f'(u)|∇u|| and the
    right side there. Only nodes with |∇u| > threshold·max|∇u| and two cells
    away from ∂Ω are used.
    """
    sel = _stat_nodes(u, threshold, depth=2)
    d = u.derivatives
    gn = u.grad_norm
    lap = _grid_laplacian(gn, u.h)
    fp = np.zeros_like(gn)
    fp[sel] = f.deriv(u.grid[sel])
    left_a = lap[sel]
    left_b = lam * fp[sel] * gn[sel]
    right = _hessian_lhs(d, gn)[sel] / gn[sel]
    scale = np.maximum.reduce([np.abs(left_a), np.abs(left_b), np.abs(right)])
    return float(np.max(np.abs(left_a + left_b - right) / scale))
