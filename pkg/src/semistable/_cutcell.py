"""Quadrature of nodal fields over regions cut out of a uniform grid.

Each grid cell is split into two triangles along its (i, j)-(i+1, j+1)
diagonal. On a triangle all nodal data are interpolated linearly, the region
{c_k > 0 for every constraint k} is clipped exactly (Sutherland-Hodgman), and a
linear integrand is integrated exactly over the clipped polygon.
"""

from __future__ import annotations

import numpy as np

# corner offsets (di, dj) of the two triangles of cell (i, j); arrays are indexed [iy, ix]
_TRIANGLES = (((0, 0), (0, 1), (1, 1)), ((0, 0), (1, 1), (1, 0)))


def _clip(poly, k):
    """Clip polygon (list of attribute rows: x, y, F, c_1..) by attribute k > 0."""
    out = []
    n = len(poly)
    for i in range(n):
        a = poly[i]
        b = poly[(i + 1) % n]
        ina = a[k] > 0.0
        inb = b[k] > 0.0
        if ina:
            out.append(a)
        if ina != inb:
            t = a[k] / (a[k] - b[k])
            out.append(a + t * (b - a))
    return out


def _polygon_integral(poly):
    """∫ F over a convex polygon, F linear (fan triangulation, centroid rule)."""
    total = 0.0
    p0 = poly[0]
    for p1, p2 in zip(poly[1:-1], poly[2:]):
        area = 0.5 * abs((p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]))
        total += area * (p0[2] + p1[2] + p2[2]) / 3.0
    return total


def _one_cut(h, Fv, cv):
    """∫ F over {c > 0} for triangles cut by one linear constraint, vectorised.

    ``Fv`` and ``cv`` are lists of the three vertex arrays. The part where
    exactly one vertex is positive is a corner triangle; with two positive
    vertices the result is the whole triangle minus the opposite corner.
    """
    total_area = 0.5 * h * h
    pos = [c > 0 for c in cv]
    npos = pos[0].astype(int) + pos[1] + pos[2]
    out = np.zeros(Fv[0].shape)

    def corner(k, sign):
        i, j = (k + 1) % 3, (k + 2) % 3
        ck, ci, cj = sign * cv[k], sign * cv[i], sign * cv[j]
        ti = ck / (ck - ci)
        tj = ck / (ck - cj)
        Fi = Fv[k] + ti * (Fv[i] - Fv[k])
        Fj = Fv[k] + tj * (Fv[j] - Fv[k])
        return ti * tj * total_area * (Fv[k] + Fi + Fj) / 3.0

    whole = total_area * (Fv[0] + Fv[1] + Fv[2]) / 3.0
    with np.errstate(invalid="ignore", divide="ignore"):
        for k in range(3):
            others = [pos[(k + 1) % 3], pos[(k + 2) % 3]]
            lone_pos = (npos == 1) & pos[k]
            lone_neg = (npos == 2) & ~pos[k] & others[0] & others[1]
            out = np.where(lone_pos, corner(k, 1.0), out)
            out = np.where(lone_neg, whole - corner(k, -1.0), out)
    return out


def integrate(h: float, F: np.ndarray, constraints: list[np.ndarray]) -> tuple[float, int]:
    """∫ F over {every constraint > 0}, on a grid with spacing ``h``.

    Returns ``(value, skipped)``, where ``skipped`` counts cut triangles that
    had non-finite data and were left out.
    """
    F = np.asarray(F, dtype=float)
    cons = [np.asarray(c, dtype=float) for c in constraints]
    ny, nx = F.shape
    total = 0.0
    skipped = 0
    for tri in _TRIANGLES:
        sl = [(slice(di, ny - 1 + di), slice(dj, nx - 1 + dj)) for di, dj in tri]
        Fv = [F[s] for s in sl]
        Cv = [[c[s] for s in sl] for c in cons]
        # a triangle is dropped if some constraint is <= 0 at all three vertices
        dead = np.zeros(Fv[0].shape, dtype=bool)
        full = np.ones(Fv[0].shape, dtype=bool)
        fulls = []
        for cv in Cv:
            with np.errstate(invalid="ignore"):
                dead |= (cv[0] <= 0) & (cv[1] <= 0) & (cv[2] <= 0)
                fk = (cv[0] > 0) & (cv[1] > 0) & (cv[2] > 0)
            fulls.append(fk)
            full &= fk
        finite_F = np.isfinite(Fv[0]) & np.isfinite(Fv[1]) & np.isfinite(Fv[2])
        full &= ~dead
        good = full & finite_F
        total += 0.5 * h * h * float(np.sum((Fv[0] + Fv[1] + Fv[2])[good])) / 3.0
        cut = ~dead & ~full
        skipped += int(np.count_nonzero(full & ~finite_F))
        # triangles cut by a single constraint, with finite data: closed form
        n_cut = sum((~fk).astype(int) for fk in fulls)
        for k, cv in enumerate(Cv):
            finite_c = np.isfinite(cv[0]) & np.isfinite(cv[1]) & np.isfinite(cv[2])
            single = cut & (n_cut == 1) & ~fulls[k] & finite_F & finite_c
            if single.any():
                part = _one_cut(h, [f[single] for f in Fv], [c[single] for c in cv])
                total += float(np.sum(part))
                cut &= ~single
        for iy, ix in zip(*np.nonzero(cut)):
            verts = []
            ok = True
            for v, (di, dj) in enumerate(tri):
                row = [(ix + dj) * h, (iy + di) * h, Fv[v][iy, ix]]
                row.extend(cv[v][iy, ix] for cv in Cv)
                arr = np.array(row)
                if not np.all(np.isfinite(arr)):
                    ok = False
                verts.append(arr)
            if not ok:
                skipped += 1
                continue
            poly = verts
            for k in range(len(Cv)):
                poly = _clip(poly, 3 + k)
                if len(poly) < 3:
                    break
            if len(poly) >= 3:
                total += _polygon_integral(poly)
    return total, skipped
