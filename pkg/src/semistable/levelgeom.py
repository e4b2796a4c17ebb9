"""Level sets of planar fields and the line integrals built on them.

For a level Γ_s = {u = s} with |∇u| > 0 we use

    h₂(s) = ∫_Γ |∇u|³ dℓ
    h₁(s) = ∫_Γ 4 |∂_T |∇u|^{1/2}|² + κ² |∇u| dℓ
    V(s)  = |{u > s}|,    -V'(s) = ∫_Γ dℓ / |∇u|
    B_t   = t⁻² ∫_{u<t} |∇u|⁴ dx

Curves come from marching squares on the grid; gradient and Hessian are the
central differences of the field, interpolated linearly along cell edges.
κ is signed so that convex superlevel sets have κ > 0.
Radial solutions get the same profile objects from their closed forms.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import singledispatch
from pathlib import Path

import numpy as np

from .errors import ArgumentError, InsufficientDataError, RangeError
from .planar import ScalarField2D
from .radial import RadialSolution, radial_level_quantities

REG_FRACTION = 0.05
LEVEL_MARGIN = 0.01
PROFILE_COLUMNS = ("s", "length", "h1", "h2", "V", "min_grad", "regular")


# --- marching squares ------------------------------------------------------------

# corners of cell (iy, ix), counter-clockwise from the lower left: a b c d
# edges: 0 bottom (a-b), 1 right (b-c), 2 top (d-c), 3 left (a-d)
_SEGMENTS = {
    1: ((3, 0),),
    2: ((0, 1),),
    3: ((3, 1),),
    4: ((1, 2),),
    6: ((0, 2),),
    7: ((3, 2),),
    8: ((2, 3),),
    9: ((2, 0),),
    11: ((2, 1),),
    12: ((1, 3),),
    13: ((1, 0),),
    14: ((0, 3),),
}
# saddles: (centre above, centre below); "connect the higher side"
_SADDLES = {
    5: (((0, 1), (2, 3)), ((3, 0), (1, 2))),  # a, c above
    10: (((3, 0), (1, 2)), ((0, 1), (2, 3))),  # b, d above
}


def _edge_key(iy, ix, e, nx):
    """Global id of edge e of cell (iy, ix): horizontal edges even, vertical odd."""
    if e == 0:
        return 2 * (iy * nx + ix)
    if e == 2:
        return 2 * ((iy + 1) * nx + ix)
    if e == 3:
        return 2 * (iy * nx + ix) + 1
    return 2 * (iy * nx + ix + 1) + 1


def _segments(G: np.ndarray, s: float):
    """All marching-squares segments as pairs of edge ids."""
    ny, nx = G.shape
    above = G > s
    a, b = above[:-1, :-1], above[:-1, 1:]
    c, d = above[1:, 1:], above[1:, :-1]
    case = a.astype(np.int8) + 2 * b + 4 * c + 8 * d
    centre = 0.25 * (G[:-1, :-1] + G[:-1, 1:] + G[1:, 1:] + G[1:, :-1])
    segs = []
    for iy, ix in zip(*np.nonzero((case > 0) & (case < 15))):
        k = int(case[iy, ix])
        if k in _SADDLES:
            pairs = _SADDLES[k][0 if centre[iy, ix] > s else 1]
        else:
            pairs = _SEGMENTS[k]
        for e0, e1 in pairs:
            segs.append((_edge_key(iy, ix, e0, nx), _edge_key(iy, ix, e1, nx)))
    return segs


def _chain(segs):
    """Join segments sharing an edge id into closed loops of edge ids."""
    nbrs: dict[int, list[int]] = {}
    for p, q in segs:
        nbrs.setdefault(p, []).append(q)
        nbrs.setdefault(q, []).append(p)
    seen: set[int] = set()
    loops = []
    for start in sorted(nbrs):
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        prev, cur = None, start
        while True:
            nxt = [q for q in nbrs[cur] if q != prev]
            if not nxt:
                break
            step = nxt[0] if prev is not None or len(nxt) == 1 else min(nxt)
            if step == start:
                loop.append(start)
                break
            if step in seen:
                break
            seen.add(step)
            loop.append(step)
            prev, cur = cur, step
        if len(loop) > 3 and loop[0] == loop[-1]:
            loops.append(loop)
    return loops


def _edge_points(keys: np.ndarray, G: np.ndarray, s: float):
    """Node pair and interpolation weight of each crossing point."""
    ny, nx = G.shape
    node = keys // 2
    iy, ix = node // nx, node % nx
    vertical = (keys % 2).astype(bool)
    jy = iy + vertical
    jx = ix + ~vertical
    g0, g1 = G[iy, ix], G[jy, jx]
    t = (s - g0) / (g1 - g0)
    return iy, ix, jy, jx, t


@dataclass
class LevelCurve:
    """Closed polylines of {u = s} with per-vertex |∇u|, κ and ∂_T|∇u|^{1/2}.

    Each component is an (m, 2) array whose last vertex repeats the first.
    """

    s: float
    components: list[np.ndarray]
    grad: list[np.ndarray]
    kappa: list[np.ndarray]
    dt_sqrt_grad: list[np.ndarray]

    @staticmethod
    def _line(values, pts):
        dl = np.hypot(*np.diff(pts, axis=0).T)
        return float(np.sum(0.5 * (values[:-1] + values[1:]) * dl))

    def line_integral(self, per_vertex) -> float:
        """Trapezoid ∫_Γ F dℓ summed over components; ``per_vertex`` maps a component index to F."""
        return sum(self._line(per_vertex(k), p) for k, p in enumerate(self.components))

    @property
    def lengths(self) -> list[float]:
        return [float(np.sum(np.hypot(*np.diff(p, axis=0).T))) for p in self.components]

    @property
    def length(self) -> float:
        return float(sum(self.lengths))

    def turning(self) -> list[float]:
        """Σ κ Δℓ per component (total signed turning)."""
        return [self._line(self.kappa[k], p) for k, p in enumerate(self.components)]

    def abs_turning(self) -> list[float]:
        return [self._line(np.abs(self.kappa[k]), p) for k, p in enumerate(self.components)]

    @property
    def min_grad(self) -> float:
        return float(min(g.min() for g in self.grad)) if self.grad else 0.0

    def to_json(self) -> dict:
        return {"s": self.s, "components": [p.round(12).tolist() for p in self.components]}


def _field_max(u: ScalarField2D) -> float:
    return float(u.values.max())


def extract_level(u: ScalarField2D, s: float) -> LevelCurve:
    """Marching squares on the grid values of u at level s."""
    T = _field_max(u)
    if not 0.0 < s < T:
        raise RangeError(f"level {s} outside (0, max u = {T})")
    G = np.where(np.isfinite(u.grid), u.grid, -1.0 - abs(T))
    loops = _chain(_segments(G, s))
    d = u.derivatives
    X, Y = u.dom.coords
    comps, grads, kappas, dts = [], [], [], []
    for loop in loops:
        keys = np.asarray(loop, dtype=np.int64)
        iy, ix, jy, jx, t = _edge_points(keys, G, s)

        def lerp(A):
            return (1 - t) * A[iy, ix] + t * A[jy, jx]

        pts = np.column_stack([lerp(X), lerp(Y)])
        ux, uy = lerp(d["x"]), lerp(d["y"])
        uxx, uxy, uyy = lerp(d["xx"]), lerp(d["xy"]), lerp(d["yy"])
        gn = np.hypot(ux, uy)
        with np.errstate(invalid="ignore", divide="ignore"):
            kappa = -(uy * uy * uxx - 2 * ux * uy * uxy + ux * ux * uyy) / gn**3
            # ∂_T|∇u| = T·H∇u/|∇u| with T = (-u_y, u_x)/|∇u|
            dt_grad = (-uy * (uxx * ux + uxy * uy) + ux * (uxy * ux + uyy * uy)) / gn**2
            dt_sqrt = 0.5 * dt_grad / np.sqrt(gn)
        comps.append(pts)
        grads.append(gn)
        kappas.append(kappa)
        dts.append(dt_sqrt)
    order = np.argsort([-LevelCurve._line(np.ones(len(p)), p) for p in comps], kind="stable")
    pick = lambda seq: [seq[i] for i in order]
    return LevelCurve(float(s), pick(comps), pick(grads), pick(kappas), pick(dts))


# --- profiles ---------------------------------------------------------------


@dataclass
class LevelProfile:
    s: float
    length: float
    h1: float
    h2: float
    V: float
    min_grad: float
    regular: bool
    inv_grad: float = float("nan")  # ∫ dℓ/|∇u| = -V'(s)
    turning: tuple = ()
    abs_turning: tuple = ()

    def row(self) -> list:
        return [self.s, self.length, self.h1, self.h2, self.V, self.min_grad, int(self.regular)]


def max_gradient(u: ScalarField2D) -> float:
    return float(np.nanmax(np.where(u.dom.inside, u.grad_norm, np.nan)))


@singledispatch
def level_quantities(u, s: float, eps_reg: float | None = None) -> LevelProfile:
    raise ArgumentError(f"no level quantities for {type(u).__name__}")


@level_quantities.register
def _(u: ScalarField2D, s: float, eps_reg: float | None = None) -> LevelProfile:
    curve = extract_level(u, s)
    if eps_reg is None:
        eps_reg = REG_FRACTION * max_gradient(u)
    if not curve.components:
        raise RangeError(f"no level curve at s={s}")
    h2 = curve.line_integral(lambda k: curve.grad[k] ** 3)
    h1 = curve.line_integral(lambda k: 4 * curve.dt_sqrt_grad[k] ** 2 + curve.kappa[k] ** 2 * curve.grad[k])
    inv = curve.line_integral(lambda k: 1.0 / curve.grad[k])
    V = u.dom.integrate(np.ones_like(u.grid), u.grid - s)
    mg = curve.min_grad
    # derivatives are NaN where a stencil leaves the ghost band (coarse grids near corners)
    finite = all(np.all(np.isfinite(a)) for a in (*curve.grad, *curve.kappa, *curve.dt_sqrt_grad))
    return LevelProfile(
        float(s), curve.length, h1, h2, V, mg, bool(finite and mg > eps_reg), inv,
        tuple(curve.turning()), tuple(curve.abs_turning()),
    )


@level_quantities.register
def _(u: RadialSolution, s: float, eps_reg: float | None = None) -> LevelProfile:
    q = radial_level_quantities(u, s)
    if eps_reg is None:
        eps_reg = REG_FRACTION * float(np.max(np.abs(u.du)))
    turn = (2 * math.pi,) if u.n == 2 else ()
    return LevelProfile(
        float(s), q.area, q.h1, q.h2, q.volume, q.slope, bool(q.slope > eps_reg),
        q.area / q.slope, turn, turn,
    )


def field_max(u) -> float:
    return float(u.center) if isinstance(u, RadialSolution) else _field_max(u)


@dataclass
class ProfileFamily:
    """Level profiles on a uniform s-grid in (margin·T, (1 - margin)·T)."""

    T: float
    profiles: list[LevelProfile]
    eps_reg: float

    @property
    def s(self) -> np.ndarray:
        return np.array([p.s for p in self.profiles])

    def column(self, name: str, regular_only=False) -> np.ndarray:
        ps = [p for p in self.profiles if p.regular or not regular_only]
        return np.array([getattr(p, name) for p in ps], dtype=float)

    @property
    def regular(self) -> np.ndarray:
        return np.array([p.regular for p in self.profiles])

    @property
    def excluded_fraction(self) -> float:
        return float(1.0 - self.regular.mean()) if self.profiles else 1.0

    def integrate(self, values, lo: float = 0.0, hi: float | None = None, at_top: float | None = 0.0) -> float:
        """Composite trapezoid ∫_lo^hi F ds over regular levels.

        ``values`` are F at every profile level (non-regular ones are dropped).
        The ends are closed by linear extrapolation from the nearest two
        regular levels, except that ``at_top`` (if not None) pins F(T).
        """
        hi = self.T if hi is None else hi
        s, F = self._regular_pairs(values)
        if s.size < 4:
            raise InsufficientDataError(f"only {s.size} regular levels; need at least 4")
        s_ext = np.concatenate([[0.0], s, [self.T]])
        F0 = F[0] + (F[1] - F[0]) * (0.0 - s[0]) / (s[1] - s[0])
        FT = at_top if at_top is not None else F[-1] + (F[-1] - F[-2]) * (self.T - s[-1]) / (s[-1] - s[-2])
        F_ext = np.concatenate([[F0], F, [FT]])
        return _trapezoid_window(s_ext, F_ext, lo, hi)

    def _regular_pairs(self, values):
        values = np.asarray(values, dtype=float)
        if values.shape != (len(self.profiles),):
            raise ArgumentError("need one value per profile level")
        keep = self.regular & np.isfinite(values)
        return self.s[keep], values[keep]

    def save_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PROFILE_COLUMNS)
            for p in self.profiles:
                w.writerow([repr(float(v)) if not isinstance(v, int) else v for v in p.row()])
        return path


def _trapezoid_window(s, F, lo, hi):
    """∫_lo^hi of the piecewise-linear interpolant through (s, F)."""
    if hi <= lo:
        return 0.0
    inner = (s > lo) & (s < hi)
    xs = np.concatenate([[lo], s[inner], [hi]])
    ys = np.interp(xs, s, F)
    return float(np.sum(0.5 * (ys[1:] + ys[:-1]) * np.diff(xs)))


def level_grid(T: float, n_levels: int = 64) -> np.ndarray:
    return np.linspace(LEVEL_MARGIN * T, (1 - LEVEL_MARGIN) * T, n_levels)


def profile_family(u, n_levels: int = 64, workers: int = 1) -> ProfileFamily:
    """Profiles on ``n_levels`` uniform levels; ordered by s regardless of ``workers``."""
    if n_levels < 2:
        raise ArgumentError("need at least two levels")
    T = field_max(u)
    if isinstance(u, RadialSolution):
        eps = REG_FRACTION * float(np.max(np.abs(u.du)))
    else:
        eps = REG_FRACTION * max_gradient(u)
    levels = level_grid(T, n_levels)
    job = lambda s: level_quantities(u, float(s), eps)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            profiles = list(pool.map(job, levels))
    else:
        profiles = [job(s) for s in levels]
    return ProfileFamily(T, profiles, eps)


# --- volume integrals --------------------------------------------------------


def gradient_energy(u: ScalarField2D, t: float | None = None) -> float:
    """∫_{u<t} |∇u|⁴ dx (whole domain when t is None)."""
    F = u.grad_norm**4
    if t is None:
        return u.dom.integrate(F)
    return u.dom.integrate(F, t - u.grid)


def sublevel_energy(u, t: float) -> float:
    """B_t = t⁻² ∫_{u<t} |∇u|⁴ dx."""
    T = field_max(u)
    if not 0.0 < t <= T:
        raise RangeError(f"threshold {t} outside (0, max u = {T}]")
    if isinstance(u, RadialSolution):
        return radial_gradient_energy(u, t) / t**2
    return gradient_energy(u, None if t >= T else t) / t**2


def radial_gradient_energy(sol: RadialSolution, t: float | None = None) -> float:
    """ω_{n-1} ∫ |u'|⁴ r^{n-1} dr over {u < t}, by adaptive quadrature of the profile spline."""
    from scipy.integrate import quad

    from .radial import sphere_area

    spline = sol.interp()
    R = float(sol.r_nodes[-1])
    r0 = 0.0 if t is None or t >= sol.center else sol.level_radius(t)
    integrand = lambda r: abs(float(spline(r, 1))) ** 4 * r ** (sol.n - 1)
    pts = sol.r_nodes[(sol.r_nodes > r0) & (sol.r_nodes < R)]
    pts = pts[:: max(1, pts.size // 40)]
    val, _ = quad(integrand, r0, R, points=pts if pts.size else None, limit=400, epsabs=0, epsrel=1e-10)
    return sphere_area(sol.n) * val


@dataclass
class CoareaResult:
    lhs: float
    rhs: float
    gap: float
    excluded_fraction: float

    def __iter__(self):
        return iter((self.lhs, self.rhs, self.gap))


def coarea_check(u, n_levels: int = 64, family: ProfileFamily | None = None) -> CoareaResult:
    """Compare ∫₀^T h₂ ds (over regular levels) with ∫_Ω |∇u|⁴ dx."""
    if n_levels < 16:
        raise ArgumentError("coarea check needs at least 16 levels")
    fam = family if family is not None else profile_family(u, n_levels)
    lhs = fam.integrate(fam.column("h2"))
    rhs = radial_gradient_energy(u) if isinstance(u, RadialSolution) else gradient_energy(u)
    return CoareaResult(lhs, rhs, abs(lhs - rhs) / rhs, fam.excluded_fraction)


def total_variation_gap(fam: ProfileFamily, t: float, n: int = 2) -> tuple[float, float]:
    """(V(t)^{(4-n)/n}, ((4-n)/n) ∫ₜ^T V^{2(2-n)/n} (-V') ds) with -V' from ∫dℓ/|∇u|."""
    s, V = fam._regular_pairs(fam.column("V"))
    Vt = float(np.interp(t, s, V)) if s[0] <= t else float(V[0])
    weight = fam.column("V") ** (2 * (2 - n) / n) * fam.column("inv_grad")
    rhs = (4 - n) / n * fam.integrate(weight, lo=t, at_top=None)
    return Vt ** ((4 - n) / n), rhs


def curves_to_json(curves: list[LevelCurve], path) -> Path:
    path = Path(path)
    path.write_text(json.dumps([c.to_json() for c in curves], sort_keys=True))
    return path
