import functools
import math

import numpy as np
import pytest


def liouville_mu(m):
    """Parameter of the 2D Liouville family with centre value m."""
    return math.exp(m / 2) - 1.0


def liouville_lambda(m):
    mu = liouville_mu(m)
    return 8 * mu / (1 + mu) ** 2


def liouville_u(mu, r):
    return 2 * np.log((1 + mu) / (1 + mu * np.asarray(r) ** 2))


def liouville_du(mu, r):
    r = np.asarray(r)
    return -4 * mu * r / (1 + mu * r**2)


def bisect(f, a, b, tol=1e-14):
    fa = f(a)
    while b - a > tol:
        c = 0.5 * (a + b)
        fc = f(c)
        if (fc > 0) == (fa > 0):
            a, fa = c, fc
        else:
            b = c
    return 0.5 * (a + b)


@pytest.fixture(scope="session")
def j01():
    from scipy.special import j0

    return bisect(j0, 2.0, 3.0)


def liouville_mu_for_lambda(lam):
    """Smaller root of 8μ/(1+μ)² = λ (the minimal branch)."""
    a = 8.0 / lam - 2.0
    return 0.5 * (a - math.sqrt(a * a - 4.0))


@functools.lru_cache(maxsize=None)
def planar_solution(shape, h, kind="exp", lam=1.0):
    """Cached 2D solution shared across test modules (shape given by name)."""
    from semistable import Nonlinearity
    from semistable.planar import DomainMask, make_shape, solve_newton

    g = {"exp": Nonlinearity.exponential(), "one": Nonlinearity.constant(1.0)}[kind]
    dom = DomainMask.build(make_shape(shape), h)
    return solve_newton(dom, g, lam)


@functools.lru_cache(maxsize=None)
def planar_field(shape, h, expr):
    """Cached synthetic field: ``expr`` is one of the closed forms below."""
    from semistable.planar import DomainMask, ScalarField2D, make_shape

    funcs = {
        "1-r": lambda x, y: 1 - np.hypot(x, y),
        "1-r2": lambda x, y: 1 - x * x - y * y,
        "1-max": lambda x, y: 1 - np.maximum(np.abs(x), np.abs(y)),
    }
    shapes = {"disk": make_shape("disk"), "square2": make_shape("square", side=2.0, origin=(-1.0, -1.0))}
    dom = DomainMask.build(shapes[shape], h)
    return ScalarField2D.from_function(dom, funcs[expr])


def pytest_terminal_summary(terminalreporter):
    import sys

    acc = sys.modules.get("test_acceptance")
    if acc is None or not acc.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(acc.RESULTS):
        terminalreporter.write_line(acc.RESULTS[k].line())
