"""Nonlinearities g for -Δu = λ g(u): evaluation, derivative, primitive, condition checks.

Built-in kinds:

    exponential     g(s) = e^s
    power(p)        g(s) = (1 + s)^p
    affine(a, b)    g(s) = a s + b
    constant(c)     g(s) = c
    tabulated       cubic spline through (s, g(s)) samples read from a CSV

Every kind exposes ``eval``, ``deriv`` and ``primitive`` (with F(0) = 0), all
vectorised over numpy arrays.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import ArgumentError, EvaluationDomainError, SaturationError

EXP_SATURATION = 700.0

KINDS = ("exponential", "power", "affine", "constant", "tabulated")


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


@dataclass(frozen=True)
class Nonlinearity:
    kind: str
    params: Mapping[str, float] = field(default_factory=dict)
    spline: CubicSpline | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ArgumentError(f"unknown nonlinearity kind {self.kind!r}; expected one of {KINDS}")
        required = {"power": ("p",), "affine": ("a", "b"), "constant": ("c",)}.get(self.kind, ())
        for key in required:
            if key not in self.params:
                raise ArgumentError(f"{self.kind} nonlinearity needs parameter {key!r}")
        if self.kind == "tabulated" and self.spline is None:
            raise ArgumentError("tabulated nonlinearity needs sample data")
        object.__setattr__(self, "params", dict(self.params))

    # constructors -------------------------------------------------------

    @classmethod
    def exponential(cls) -> "Nonlinearity":
        return cls("exponential")

    @classmethod
    def power(cls, p: float) -> "Nonlinearity":
        return cls("power", {"p": float(p)})

    @classmethod
    def affine(cls, a: float, b: float) -> "Nonlinearity":
        return cls("affine", {"a": float(a), "b": float(b)})

    @classmethod
    def constant(cls, c: float) -> "Nonlinearity":
        return cls("constant", {"c": float(c)})

    @classmethod
    def tabulated(cls, s, g) -> "Nonlinearity":
        s = np.asarray(s, dtype=float)
        g = np.asarray(g, dtype=float)
        if s.ndim != 1 or s.shape != g.shape or s.size < 4:
            raise ArgumentError("tabulated data needs two equal-length columns with at least 4 rows")
        if np.any(np.diff(s) <= 0):
            raise ArgumentError("tabulated s column must be strictly increasing")
        if not s[0] <= 0.0 <= s[-1]:
            raise ArgumentError("tabulated range must contain s = 0 (primitive is anchored there)")
        spline = CubicSpline(s, g)
        return cls("tabulated", {"s_min": float(s[0]), "s_max": float(s[-1])}, spline)

    @classmethod
    def from_csv(cls, path) -> "Nonlinearity":
        rows = []
        with open(Path(path), newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].strip().startswith("#"):
                    continue
                try:
                    rows.append((float(row[0]), float(row[1])))
                except ValueError:
                    if rows:
                        raise ArgumentError(f"malformed row in {path}: {row}") from None
                    # header line
        if not rows:
            raise ArgumentError(f"no data rows in {path}")
        s, g = np.array(rows).T
        return cls.tabulated(s, g)

    @classmethod
    def from_config(cls, kind: str, params: Mapping[str, Any] | None = None) -> "Nonlinearity":
        params = dict(params or {})
        if kind == "exponential":
            return cls.exponential()
        if kind == "tabulated":
            if "file" not in params:
                raise ArgumentError("tabulated nonlinearity needs a 'file' parameter")
            return cls.from_csv(params["file"])
        return cls(kind, {k: float(v) for k, v in params.items()})

    @property
    def ident(self) -> str:
        """Short stable identifier, used in file names and sidecars."""
        if self.kind == "exponential":
            return "exp"
        if self.kind == "power":
            return f"power_p{self.params['p']:g}"
        if self.kind == "affine":
            return f"affine_a{self.params['a']:g}_b{self.params['b']:g}"
        if self.kind == "constant":
            return f"const_c{self.params['c']:g}"
        return f"tabulated_{self.params['s_min']:g}_{self.params['s_max']:g}"

    # evaluation -----------------------------------------------------------

    def _check(self, s):
        s = np.asarray(s, dtype=float)
        if not np.all(np.isfinite(s)):
            raise EvaluationDomainError(f"{self.ident}: non-finite argument")
        if self.kind == "exponential" and np.any(s > EXP_SATURATION):
            raise SaturationError(
                f"exp saturates: argument {float(np.max(s)):.6g} exceeds {EXP_SATURATION:g}"
            )
        if self.kind == "power" and np.any(s <= -1.0):
            raise EvaluationDomainError(f"{self.ident}: (1+s)^p needs s > -1")
        if self.kind == "tabulated":
            lo, hi = self.params["s_min"], self.params["s_max"]
            if np.any(s < lo) or np.any(s > hi):
                raise EvaluationDomainError(f"{self.ident}: argument outside table range [{lo}, {hi}]")
        return s

    def eval(self, s):
        s = self._check(s)
        k, p = self.kind, self.params
        if k == "exponential":
            out = np.exp(s)
        elif k == "power":
            out = (1.0 + s) ** p["p"]
        elif k == "affine":
            out = p["a"] * s + p["b"]
        elif k == "constant":
            out = np.full_like(s, p["c"])
        else:
            out = self.spline(s)
        return _out(out)

    __call__ = eval

    def deriv(self, s):
        s = self._check(s)
        k, p = self.kind, self.params
        if k == "exponential":
            out = np.exp(s)
        elif k == "power":
            out = p["p"] * (1.0 + s) ** (p["p"] - 1.0)
        elif k == "affine":
            out = np.full_like(s, p["a"])
        elif k == "constant":
            out = np.zeros_like(s)
        else:
            out = self.spline(s, 1)
        return _out(out)

    def primitive(self, s):
        s = self._check(s)
        k, p = self.kind, self.params
        if k == "exponential":
            out = np.expm1(s)
        elif k == "power":
            q = p["p"] + 1.0
            out = np.log1p(s) if q == 0.0 else np.expm1(q * np.log1p(s)) / q
        elif k == "affine":
            out = 0.5 * p["a"] * s**2 + p["b"] * s
        elif k == "constant":
            out = p["c"] * s
        else:
            anti = self.spline.antiderivative()
            out = anti(s) - anti(0.0)
        return _out(out)


def eval_triplet(g: Nonlinearity, s: float) -> tuple[float, float, float]:
    """Return ``(g(s), g'(s), F(s))``; raises instead of returning infinities."""
    return float(g.eval(s)), float(g.deriv(s)), float(g.primitive(s))


@dataclass(frozen=True)
class ConditionReport:
    """Sampled verdicts on: g nondecreasing, g(0) > 0, g(s)/s → ∞.

    ``witnesses`` holds the sample points and values each flag was computed
    from, so :meth:`recompute` reproduces the flags without calling ``g``.
    """

    nondecreasing: bool
    positive_at_zero: bool
    superlinear: bool
    witnesses: dict

    @staticmethod
    def flags_from(witnesses) -> tuple[bool, bool, bool]:
        g_vals = np.asarray(witnesses["g"])
        nondecreasing = bool(np.all(np.diff(g_vals) >= -1e-12 * np.maximum(1.0, np.abs(g_vals[:-1]))))
        positive = bool(witnesses["g0"] > 0.0)
        ratio = np.asarray(witnesses["ratio"])
        thr = int(witnesses["threshold_index"])
        # growth of g/s must persist over at least the last quarter of the window
        grows = thr >= 0 and thr <= 3 * (ratio.size - 1) // 4
        superlinear = bool(grows and ratio[-1] > 10.0 * witnesses["g1"])
        return nondecreasing, positive, superlinear

    def recompute(self) -> tuple[bool, bool, bool]:
        return self.flags_from(self.witnesses)


def _growth_threshold(ratio: np.ndarray) -> int:
    """First index from which ``ratio`` is strictly increasing to the end, or -1."""
    inc = np.diff(ratio) > 0
    if inc.size == 0 or not inc[-1]:
        return -1
    bad = np.nonzero(~inc)[0]
    return 0 if bad.size == 0 else int(bad[-1] + 1)


def check_conditions(g: Nonlinearity, s_max: float, samples: int = 256) -> ConditionReport:
    """Check monotonicity, positivity at zero, and a superlinear-growth surrogate.

    The limit g(s)/s → ∞ cannot be decided from finitely many samples. It is
    replaced by: g(s)/s strictly increasing on [1, s_max] beyond some detected
    threshold (which must leave at least a quarter of the window), and
    g(s_max)/s_max > 10 g(1).
    """
    if not s_max > 0:
        raise ArgumentError("s_max must be positive")
    if samples < 16:
        raise ArgumentError("need at least 16 samples")
    s = np.linspace(0.0, s_max, samples)
    s_ratio = np.linspace(1.0, max(s_max, 1.0), samples)
    g_vals = np.asarray(g.eval(s), dtype=float)
    g_ratio = np.asarray(g.eval(s_ratio), dtype=float)
    g0 = float(g.eval(0.0))
    g1 = float(g.eval(1.0))
    if not (np.all(np.isfinite(g_vals)) and np.all(np.isfinite(g_ratio)) and math.isfinite(g1)):
        raise EvaluationDomainError(f"{g.ident}: non-finite value on [0, {s_max}]")
    ratio = g_ratio / s_ratio
    witnesses = {
        "s": s,
        "g": g_vals,
        "g0": g0,
        "g1": g1,
        "s_ratio": s_ratio,
        "ratio": ratio,
        "threshold_index": _growth_threshold(ratio),
    }
    nd, pos, sup = ConditionReport.flags_from(witnesses)
    return ConditionReport(nd, pos, sup, witnesses)
