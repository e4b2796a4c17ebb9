"""Radial solutions of -Δu = λ g(u) on the unit ball of R^n.

Solutions are parameterised by their centre value m = u(0). Shooting
integrates

    v'' + (n-1)/r v' + g(v) = 0,   v(0) = m,  v'(0) = 0

to its first zero R(m); then λ = R² and u(r) = v(R r) solves the problem on B_1.
Tracing λ(m) over an m-grid gives the bifurcation diagram with folds appearing as
interior maxima, so no pseudo-arclength machinery is needed.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicHermiteSpline, CubicSpline
from scipy.linalg import LinAlgError, solve_banded

from .errors import (
    ArgumentError,
    BracketNotFoundError,
    NoSolutionError,
    NonConvergenceError,
    RangeError,
    SemistableError,
)
from .nonlinearity import Nonlinearity

SERIES_R0 = 1e-4
EIG_NODES = 4096


def gamma_half_integer(x: float) -> float:
    """Γ(x) for positive integer or half-integer x, by exact recursion."""
    twice = round(2 * x)
    if twice <= 0 or abs(twice - 2 * x) > 1e-12:
        raise ArgumentError(f"Γ recursion needs a positive integer or half-integer, got {x}")
    val = 1.0 if twice % 2 == 0 else math.sqrt(math.pi)
    y = 1.0 if twice % 2 == 0 else 0.5
    while y < x - 1e-12:
        val *= y
        y += 1.0
    return val


def sphere_area(n: int) -> float:
    """Surface measure ω_{n-1} of the unit sphere in R^n."""
    return 2.0 * math.pi ** (n / 2) / gamma_half_integer(n / 2)


@dataclass
class RadialSolution:
    """Radial profile on [0, 1] with u(1) = 0, stored at increasing nodes."""

    n: int
    r_nodes: np.ndarray
    u: np.ndarray
    du: np.ndarray
    lam: float
    g_id: str = ""
    _interp: CubicHermiteSpline | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.r_nodes = np.asarray(self.r_nodes, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        self.du = np.asarray(self.du, dtype=float)
        if self.n < 2:
            raise ArgumentError("dimension n must be at least 2")
        if not (self.r_nodes.shape == self.u.shape == self.du.shape) or self.r_nodes.size < 4:
            raise ArgumentError("r_nodes, u, du must be equal-length arrays (>= 4 nodes)")
        if self.r_nodes[0] != 0.0 or self.r_nodes[-1] != 1.0 or np.any(np.diff(self.r_nodes) <= 0):
            raise ArgumentError("r_nodes must increase from 0 to 1")

    @classmethod
    def from_profile(cls, n, u_func, du_func, lam=0.0, nodes=2049, g_id="synthetic"):
        """Build a solution record from closed-form callables (synthetic fields, oracles)."""
        r = np.linspace(0.0, 1.0, nodes)
        return cls(n, r, u_func(r), du_func(r), lam, g_id)

    @property
    def center(self) -> float:
        return float(self.u[0])

    def interp(self) -> CubicHermiteSpline:
        if self._interp is None:
            self._interp = CubicHermiteSpline(self.r_nodes, self.u, self.du)
        return self._interp

    def level_radius(self, s: float) -> float:
        """Radius where u = s, by bisection on the monotone profile."""
        if not 0.0 < s < self.center:
            raise RangeError(f"level {s} outside (0, {self.center})")
        i = int(np.searchsorted(-self.u, -s))  # first node with u <= s
        lo, hi = self.r_nodes[i - 1], self.r_nodes[i]
        f = self.interp()
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if f(mid) > s:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-15:
                break
        return 0.5 * (lo + hi)

    def l1_norm(self) -> float:
        """∫_{B_1} u dx."""
        w = self.u * self.r_nodes ** (self.n - 1)
        return sphere_area(self.n) * float(np.trapezoid(w, self.r_nodes))

    # persistence ----------------------------------------------------------

    def save(self, csv_path) -> Path:
        csv_path = Path(csv_path)
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r", "u", "du"])
            for row in zip(self.r_nodes, self.u, self.du):
                w.writerow([repr(float(x)) for x in row])
        sidecar = csv_path.with_suffix(".json")
        sidecar.write_text(json.dumps({"n": self.n, "lambda": self.lam, "g_id": self.g_id}, sort_keys=True))
        return csv_path

    @classmethod
    def load(cls, csv_path) -> "RadialSolution":
        csv_path = Path(csv_path)
        meta = json.loads(csv_path.with_suffix(".json").read_text())
        data = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
        return cls(int(meta["n"]), data[:, 0], data[:, 1], data[:, 2], float(meta["lambda"]), meta["g_id"])


def residual(sol: RadialSolution, g: Nonlinearity) -> float:
    """Max of |u'' + (n-1)/r u' + λ g(u)| over interior nodes, scaled by max(1, λ max g(u)).

    u'' comes from differentiating a spline through the stored u' values, so this
    re-checks the ODE independently of the integrator that produced the nodes.
    """
    r = sol.r_nodes
    d2u = CubicSpline(r, sol.du)(r, 1)
    inner = slice(1, -1)
    lg = sol.lam * np.asarray(g.eval(sol.u[inner]))
    res = d2u[inner] + (sol.n - 1) / r[inner] * sol.du[inner] + lg
    return float(np.max(np.abs(res)) / max(1.0, float(np.max(lg))))


def _length_scale(g: Nonlinearity, m: float) -> float:
    a = float(g.eval(m))
    b = float(g.deriv(m))
    scales = [1.0]
    if a > 0:
        scales.append(math.sqrt(m / a) if m > 0 else 1.0)
    if b > 0:
        scales.append(1.0 / math.sqrt(b))
    return min(scales)


def _integrate_profile(n, g, m, r_max, rtol, atol, method="DOP853"):
    """Integrate the unscaled profile from the series start to its first zero.

    Works in t = log r, where v'' + (n-1)/r v' + g(v) = 0 becomes
    w'' + (n-2) w' + e^{2t} g(w) = 0; this keeps step counts bounded even when
    the profile varies on scales ~ e^{-m/2}.
    """
    a = float(g.eval(m))
    b = float(g.deriv(m))
    scale = _length_scale(g, m)
    r0 = SERIES_R0 * min(1.0, scale)
    c2 = -a / (2 * n)
    c4 = b * a / (8 * n * (n + 2))
    v0 = m + c2 * r0**2 + c4 * r0**4
    dv0 = 2 * c2 * r0 + 4 * c4 * r0**3

    g0 = float(g.eval(0.0))
    dg0 = float(g.deriv(0.0))

    def rhs(t, y):
        w, wt = y
        # rejected trial stages may leave [0, m] (the profile decreases from m);
        # extend g by its tangent at either end (C^1) instead of overflowing
        if w < 0.0:
            gw = g0 + dg0 * w
        elif w > m:
            gw = a + b * (w - m)
        else:
            gw = float(g.eval(w))
        return [wt, -(n - 2) * wt - math.exp(2 * t) * gw]

    def hit_zero(t, y):
        return y[0]

    hit_zero.terminal = True
    hit_zero.direction = -1

    t0 = math.log(r0)
    out = solve_ivp(
        rhs,
        (t0, math.log(r_max)),
        [v0, r0 * dv0],
        method=method,
        rtol=rtol,
        atol=atol,
        events=hit_zero,
        dense_output=True,
    )
    if out.status == -1:
        raise NoSolutionError(f"integration failed at m={m}: {out.message}")
    if out.t_events[0].size == 0:
        raise NoSolutionError(f"no-solution-at-this-center-value: no zero of v before r_max={r_max} (m={m})")
    t_zero = float(out.t_events[0][0])
    return out.sol, t0, t_zero, (m, c2, c4, r0), scale


def solve_shooting(
    n: int,
    g: Nonlinearity,
    m: float,
    nodes: int = 2049,
    r_max: float = 1e6,
    rtol: float = 1e-11,
    atol: float = 1e-13,
) -> tuple[float, RadialSolution]:
    """Shoot from centre value ``m``; return ``(λ, u)`` with u rescaled to B_1."""
    if n < 2:
        raise ArgumentError("dimension n must be at least 2")
    if not m > 0:
        raise ArgumentError("centre value m must be positive")
    if float(np.min(g.eval(np.linspace(0.0, m, 64)))) <= 0:
        raise ArgumentError("shooting needs g > 0 on [0, m]")
    dense, t0, t_zero, (m_, c2, c4, r0), scale = _integrate_profile(n, g, m, r_max, rtol, atol)
    R = math.exp(t_zero)
    lam = R * R

    rho = np.linspace(0.0, 1.0, nodes)
    if scale / R < 50.0 / nodes:
        rho = np.union1d(rho, np.geomspace(0.01 * scale / R, 0.1, 400))
    rho[-1] = 1.0
    r = R * rho
    u = np.empty_like(rho)
    du = np.empty_like(rho)
    series = r <= 10.0 * r0  # series error ~ r^6 is below round-off here
    rs = r[series]
    u[series] = m + c2 * rs**2 + c4 * rs**4
    du[series] = 2 * c2 * rs + 4 * c4 * rs**3
    t = np.log(r[~series])
    w, wt = dense(t)
    u[~series] = w
    du[~series] = wt / r[~series]
    u[-1] = 0.0
    du *= R  # d/dρ of v(R ρ)
    return lam, RadialSolution(n, rho, u, du, lam, g.ident)


# --- linearised eigenvalue ------------------------------------------------


def _eigen_grid(sol: RadialSolution, nodes: int) -> np.ndarray:
    rho = np.linspace(0.0, 1.0, nodes + 1)
    # resolve a steep core (large centre values) that the uniform grid cannot see
    d2u0 = abs(float(CubicSpline(sol.r_nodes[:8], sol.du[:8])(0.0, 1)))
    core = math.sqrt(max(sol.center, 1e-300) / d2u0) if d2u0 > 0 else 1.0
    if core < 50.0 / nodes:
        rho = np.union1d(rho, np.geomspace(0.02 * core, 0.1, 600))
    return rho


def _fv_operator(rho: np.ndarray, n: int, potential: np.ndarray):
    """Symmetric tridiagonal form of -φ'' - (n-1)/r φ' + V φ with φ'(0) = 0, φ(1) = 0.

    Finite-volume discretisation with weight r^{n-1}. Returns (diag, offdiag,
    volumes, flux) for the unknowns rho[0..N-1] after the vol^{1/2} similarity
    transform; ``flux[i]`` couples nodes i and i+1.
    """
    mids = 0.5 * (rho[1:] + rho[:-1])
    lo = np.concatenate(([0.0], mids[:-1]))
    hi = mids
    vol = (hi**n - lo**n) / n
    flux = mids ** (n - 1) / np.diff(rho)
    N = rho.size - 1
    k_diag = flux[:N] + np.concatenate(([0.0], flux[: N - 1])) + potential[:N] * vol
    k_off = -flux[: N - 1]
    s = 1.0 / np.sqrt(vol)
    return k_diag * s**2, k_off * s[:-1] * s[1:], vol, flux


def sturm_count(diag, off, sigma: float) -> int:
    """Number of eigenvalues of the symmetric tridiagonal matrix below ``sigma``."""
    count = 0
    d = 1.0
    tiny = 1e-300
    off2 = (off * off).tolist()
    dl = diag.tolist()
    d = dl[0] - sigma
    if d < 0:
        count += 1
    for a, b2 in zip(dl[1:], off2):
        if d == 0.0:
            d = tiny
        d = a - sigma - b2 / d
        if d < 0:
            count += 1
    return count


def _bracket_lowest(diag, off, lo: float, hi: float, rel: float = 1e-2) -> tuple[float, float]:
    """Bisection with Sturm counts down to an interval containing only the lowest eigenvalue."""
    while hi - lo > rel * max(1.0, abs(hi)):
        mid = 0.5 * (lo + hi)
        if sturm_count(diag, off, mid) >= 1:
            hi = mid
        else:
            lo = mid
    return lo, hi


def _inverse_power(diag, off, quotient=None, lower_bound=None, tol=1e-9, max_iter=500):
    """Smallest eigenvalue of a symmetric tridiagonal matrix by shifted inverse iteration.

    Sturm-count bisection first brackets the lowest eigenvalue between a lower
    bound (``lower_bound`` if given, else Gershgorin) and the starting quotient;
    then a fixed shift at the bracket's lower end until the Rayleigh quotient settles to 1e-4, then
    Rayleigh-quotient shifts. Converged when successive quotients differ by
    < tol·max(1, |quotient|). ``quotient(x)`` may supply a cancellation-free
    evaluation of x·Ax / x·x.
    """
    N = diag.size
    gersh = diag - np.abs(np.concatenate(([0.0], off))) - np.abs(np.concatenate((off, [0.0])))
    lo = (float(gersh.min()) if lower_bound is None else float(lower_bound)) - 1.0
    x = np.ones(N) / math.sqrt(N)

    if quotient is None:

        def quotient(v):
            av = diag * v
            av[:-1] += off * v[1:]
            av[1:] += off * v[:-1]
            return float(v @ av) / float(v @ v)

    rq_prev = quotient(x)
    lo, _ = _bracket_lowest(diag, off, lo, rq_prev + 1e-9 * max(1.0, abs(rq_prev)))
    sigma = lo
    rayleigh = False
    ab = np.zeros((3, N))
    ab[0, 1:] = off
    ab[2, :-1] = off
    for _ in range(max_iter):
        ab[1] = diag - sigma
        try:
            y = solve_banded((1, 1), ab, x, check_finite=False)
        except (LinAlgError, ValueError):
            sigma -= 1e-10 * max(1.0, abs(sigma))
            continue
        nrm = np.linalg.norm(y)
        if not np.isfinite(nrm) or nrm == 0:
            raise NonConvergenceError("inverse iteration produced a non-finite iterate", last=rq_prev)
        x = y / nrm
        rq = quotient(x)
        delta = abs(rq - rq_prev)
        scale = max(1.0, abs(rq))
        if rayleigh and delta < tol * scale:
            return rq, x
        if not rayleigh and delta < 1e-4 * scale:
            rayleigh = True
        if rayleigh:
            sigma = rq
        rq_prev = rq
    raise NonConvergenceError(f"inverse iteration did not converge in {max_iter} steps", last=rq_prev)


def linearized_eigenvalue(sol: RadialSolution, g: Nonlinearity, nodes: int = EIG_NODES, return_vector=False):
    """First Dirichlet eigenvalue of -Δ - λ g'(u) on B_1, restricted to radial functions.

    The first eigenfunction of a radial Schrödinger operator on a ball is radial,
    so the radial problem gives the true λ_1.
    """
    rho = _eigen_grid(sol, nodes)
    u = sol.interp()(rho)
    u[-1] = 0.0
    pot = -sol.lam * np.asarray(g.deriv(np.maximum(u, 0.0)))
    diag, off, vol, flux = _fv_operator(rho, sol.n, pot)
    N = diag.size
    sq = np.sqrt(vol)

    def energy(psi):
        phi = np.concatenate((psi / sq, [0.0]))
        kinetic = float(np.sum(flux[:N] * np.diff(phi) ** 2))
        return (kinetic + float(np.sum(pot[:N] * vol * phi[:N] ** 2))) / float(psi @ psi)

    # the kinetic part is positive semidefinite, so min(pot) bounds the spectrum below
    mu, psi = _inverse_power(diag, off, quotient=energy, lower_bound=float(pot[:N].min()))
    if return_vector:
        phi = np.concatenate((psi / sq, [0.0]))
        if phi[0] < 0:
            phi = -phi
        return mu, rho, phi
    return mu


# --- branch ------------------------------------------------------------------


@dataclass(frozen=True)
class BranchPoint:
    m: float
    lam: float
    sup_norm: float
    lambda1: float
    l1_norm: float


@dataclass
class Branch:
    points: list[BranchPoint]
    g_id: str
    n: int
    gaps: list[tuple[float, str]] = field(default_factory=list)

    def __post_init__(self):
        ms = [p.m for p in self.points]
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ArgumentError("branch points must have strictly increasing m")

    @property
    def m(self) -> np.ndarray:
        return np.array([p.m for p in self.points])

    @property
    def lam(self) -> np.ndarray:
        return np.array([p.lam for p in self.points])

    @property
    def lambda1(self) -> np.ndarray:
        return np.array([p.lambda1 for p in self.points])

    def minimal_part(self, noise: float = 1e-8) -> list[BranchPoint]:
        """Points strictly before the first fold (first interior maximum of λ(m)).

        Decreases smaller than ``noise`` relative are treated as solver noise.
        """
        lam = self.lam
        for i in range(1, lam.size):
            if lam[i] < lam[i - 1] * (1.0 - noise):
                return self.points[: i - 1]
        return list(self.points)

    def save(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["m", "lambda", "sup_norm", "lambda1", "l1_norm"])
            for p in self.points:
                w.writerow([repr(float(x)) for x in (p.m, p.lam, p.sup_norm, p.lambda1, p.l1_norm)])
        return path

    @classmethod
    def load(cls, path, g_id="", n=0) -> "Branch":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        pts = [BranchPoint(*map(float, row)) for row in data]
        return cls(pts, g_id, n)


def _branch_point(n, g, m, eig_nodes, with_eigen):
    lam, sol = solve_shooting(n, g, m)
    lam1 = linearized_eigenvalue(sol, g, nodes=eig_nodes) if with_eigen else float("nan")
    return BranchPoint(m, lam, sol.center, lam1, sol.l1_norm())


def trace_branch(n, g, m_grid, workers=1, eig_nodes=EIG_NODES, with_eigen=True) -> Branch:
    """One branch point per centre value; failures become gaps, not aborts."""
    m_grid = [float(m) for m in m_grid]
    if not m_grid:
        raise ArgumentError("empty m_grid")
    if any(m <= 0 for m in m_grid) or any(b <= a for a, b in zip(m_grid, m_grid[1:])):
        raise ArgumentError("m_grid must be positive and strictly increasing")

    def one(m):
        try:
            return _branch_point(n, g, m, eig_nodes, with_eigen)
        except SemistableError as exc:
            return (m, f"{type(exc).__name__}: {exc}")

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, m_grid))
    else:
        results = [one(m) for m in m_grid]
    points = [r for r in results if isinstance(r, BranchPoint)]
    gaps = [r for r in results if not isinstance(r, BranchPoint)]
    return Branch(points, g.ident, n, gaps)


@dataclass(frozen=True)
class Extremal:
    lambda_star: float
    m_at_max: float
    bracket: tuple[float, float]
    asymptotic: bool = False

    def __iter__(self):
        return iter((self.lambda_star, self.m_at_max))


def extremal_parameter(b: Branch, plateau_tol: float = 5e-3, noise: float = 1e-8) -> Extremal:
    """Largest λ on the branch, refined by a parabola through the bracketing points.

    When λ(m) keeps increasing up to the last grid point (no fold, as for e^u in
    n >= 10) the maximum is accepted as an asymptotic value only if the last
    three λ values agree to ``plateau_tol`` relative; otherwise the grid is too
    short and BracketNotFoundError is raised. A last value within ``noise``
    (relative) of the maximum counts as a maximum at the end of the grid.
    """
    if len(b.points) < 3:
        raise ArgumentError("extremal_parameter needs at least 3 branch points")
    m, lam = b.m, b.lam
    i = int(np.argmax(lam))
    if lam[-1] >= lam[i] * (1.0 - noise):
        i = lam.size - 1
    if i == 0:
        raise BracketNotFoundError(f"max λ at the first grid point m={m[0]}; extend the m-grid downwards")
    if i == lam.size - 1:
        tail = lam[-3:]
        if (tail.max() - tail.min()) <= plateau_tol * tail.max():
            return Extremal(float(lam[-1]), float(m[-1]), (float(m[-3]), float(m[-1])), asymptotic=True)
        raise BracketNotFoundError(f"max λ at the last grid point m={m[-1]}; extend the m-grid upwards")
    x0, x1, x2 = m[i - 1 : i + 2]
    y0, y1, y2 = lam[i - 1 : i + 2]
    denom = (x0 - x1) * (x0 - x2) * (x1 - x2)
    A = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / denom
    B = (x2**2 * (y0 - y1) + x1**2 * (y2 - y0) + x0**2 * (y1 - y2)) / denom
    C = (x1 * x2 * (x1 - x2) * y0 + x2 * x0 * (x2 - x0) * y1 + x0 * x1 * (x0 - x1) * y2) / denom
    if A >= 0:
        return Extremal(float(y1), float(x1), (float(x0), float(x2)))
    xv = -B / (2 * A)
    xv = min(max(xv, x0), x2)
    return Extremal(float(A * xv**2 + B * xv + C), float(xv), (float(x0), float(x2)))


# --- sphere closed forms -------------------------------------------------


@dataclass(frozen=True)
class RadialLevel:
    s: float
    radius: float
    slope: float  # |u'(r_s)|
    h1: float
    h2: float
    area: float
    A_norm: float  # |A| of the level sphere
    n: int

    @property
    def volume(self) -> float:
        """|{u > s}| = |B_{r_s}|, assuming u decreasing."""
        return self.area * self.radius / self.n


def radial_level_quantities(sol: RadialSolution, s: float) -> RadialLevel:
    """Closed forms of h_1, h_2, |Γ_s| and |A| on the level sphere {|x| = r_s}."""
    r_s = sol.level_radius(s)
    n = sol.n
    slope = abs(float(sol.interp()(r_s, 1)))
    w = sphere_area(n)
    area = w * r_s ** (n - 1)
    h2 = area * slope**3
    h1 = (n - 1) * w * r_s ** (n - 3) * slope
    return RadialLevel(s, r_s, slope, h1, h2, area, math.sqrt(n - 1) / r_s, n)


def radial_hessian(x: np.ndarray, d1: float, d2: float) -> np.ndarray:
    """Cartesian Hessian of a radial function at x given u'(|x|) = d1, u''(|x|) = d2."""
    r = float(np.linalg.norm(x))
    e = x / r
    P = np.outer(e, e)
    return d2 * P + (d1 / r) * (np.eye(x.size) - P)


def radial_identity_gap(sol: RadialSolution, r_min: float = 0.05, samples: int = 200, seed: int = 0) -> float:
    """Max relative gap of Σu_ij² - Σ_i(Σ_j u_ij u_j/|∇u|)² against |A|²|∇u|² on spheres.

    The left side is assembled from Cartesian Hessians at random directions; the
    right side uses the sphere closed form |A|² = (n-1)/r².
    """
    rng = np.random.default_rng(seed)
    n = sol.n
    spline = CubicSpline(sol.r_nodes, sol.du)
    radii = np.linspace(r_min, 0.98, samples)
    worst = 0.0
    for r in radii:
        d1 = float(sol.interp()(r, 1))
        d2 = float(spline(r, 1))
        if abs(d1) < 1e-12:
            continue
        e = rng.normal(size=n)
        x = r * e / np.linalg.norm(e)
        H = radial_hessian(x, d1, d2)
        grad = d1 * x / r
        gn = np.linalg.norm(grad)
        lhs = float(np.sum(H * H) - np.sum((H @ grad / gn) ** 2))
        rhs = (n - 1) / r**2 * gn**2
        worst = max(worst, abs(lhs - rhs) / abs(rhs))
    return worst
