"""Computer generation of the harf curve.

The harf is rendered as a parabola suspended between the ism and fil
anchors, like the main cable of a suspension bridge hanging between two
towers.  Given a target cable length, the midpoint sag is found by
doubling-then-bisection on the arc length, which is strictly increasing
in the sag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import (
    BadSampleCountError,
    DegenerateSpanError,
    InfeasibleLengthError,
    NoConvergenceError,
)

ARC_QUADRATURE_TOL = 1e-12
CHORD_SLACK = 1e-12


@dataclass
class Anchor:
    """One suspension point: time (s) and amplitude."""

    t: float
    h: float

    def __post_init__(self):
        if not (math.isfinite(self.t) and math.isfinite(self.h)):
            raise ValueError("anchor coordinates must be finite")


@dataclass
class Parabola:
    """y(t) = a*t^2 + b*t + c over [t1, t2]."""

    a: float
    b: float
    c: float
    t1: float
    t2: float

    def __call__(self, t):
        return (self.a * t + self.b) * t + self.c

    def slope(self, t):
        return 2.0 * self.a * t + self.b

    @property
    def span(self) -> tuple[float, float]:
        return (self.t1, self.t2)


@dataclass
class SagFitResult:
    """Outcome of the sag iteration."""

    sag: float        # vertical drop of midpoint below the chord midpoint
    iterations: int
    residual: float   # |arc_length(sag) - target|


def parabola_through(p1: Anchor, p2: Anchor, sag: float) -> Parabola:
    """Unique quadratic through both anchors whose midpoint hangs ``sag``
    below the chord midpoint.

    Constructed as chord minus sag times the bump 4(t-t1)(t2-t)/(t2-t1)^2,
    which is 0 at the anchors and 1 at midspan.
    """
    if p2.t <= p1.t:
        raise DegenerateSpanError(f"anchors must satisfy t1 < t2, got "
                                  f"{p1.t} and {p2.t}")
    width = p2.t - p1.t
    slope = (p2.h - p1.h) / width
    a = 4.0 * sag / width**2
    b = slope - a * (p1.t + p2.t)
    c = p1.h - slope * p1.t + a * p1.t * p2.t
    return Parabola(a=a, b=b, c=c, t1=p1.t, t2=p2.t)


def _adaptive_simpson(f, a, b, tol, max_depth=60):
    """Recursive adaptive Simpson quadrature with Richardson correction."""
    def simpson(lo, hi, flo, fmid, fhi):
        return (hi - lo) / 6.0 * (flo + 4.0 * fmid + fhi)

    def recurse(lo, hi, flo, fmid, fhi, whole, eps, depth):
        mid = (lo + hi) / 2.0
        lmid = (lo + mid) / 2.0
        rmid = (mid + hi) / 2.0
        flmid = f(lmid)
        frmid = f(rmid)
        left = simpson(lo, mid, flo, flmid, fmid)
        right = simpson(mid, hi, fmid, frmid, fhi)
        if depth >= max_depth or abs(left + right - whole) <= 15.0 * eps:
            return left + right + (left + right - whole) / 15.0
        half = eps / 2.0
        return (recurse(lo, mid, flo, flmid, fmid, left, half, depth + 1)
                + recurse(mid, hi, fmid, frmid, fhi, right, half, depth + 1))

    fa, fm, fb = f(a), f((a + b) / 2.0), f(b)
    whole = simpson(a, b, fa, fm, fb)
    return recurse(a, b, fa, fm, fb, whole, tol, 0)


def arc_length(p: Parabola) -> float:
    """Cable length of the parabola over its span.

    Integrates sqrt(1 + y'(t)^2) with adaptive Simpson quadrature at
    absolute tolerance 1e-12.
    """
    def integrand(t):
        return math.hypot(1.0, p.slope(t))

    return _adaptive_simpson(integrand, p.t1, p.t2, ARC_QUADRATURE_TOL)


def chord_length(p1: Anchor, p2: Anchor) -> float:
    return math.hypot(p2.t - p1.t, p2.h - p1.h)


def fit_sag(p1: Anchor, p2: Anchor, target_len: float, tol: float = 1e-9,
            max_iter: int = 200) -> SagFitResult:
    """Find the sag whose cable length matches ``target_len``.

    The upper bracket doubles until it overshoots the target, then
    bisection runs until |L(sag) - target| <= tol.  Targets shorter than
    the chord are infeasible; a straight cable is the minimum.
    """
    chord = chord_length(p1, p2)
    if target_len < chord - CHORD_SLACK:
        raise InfeasibleLengthError(
            f"target {target_len} shorter than chord {chord}"
        )

    def length_at(sag):
        return arc_length(parabola_through(p1, p2, sag))

    iterations = 0
    if abs(chord - target_len) <= tol:
        return SagFitResult(sag=0.0, iterations=iterations,
                            residual=abs(length_at(0.0) - target_len))

    upper = p2.t - p1.t  # sag on the scale of the span
    while length_at(upper) < target_len:
        upper *= 2.0
        iterations += 1
        if iterations > max_iter:
            raise NoConvergenceError("bracket doubling exceeded max_iter")

    lo, hi = 0.0, upper
    while iterations < max_iter:
        mid = (lo + hi) / 2.0
        length = length_at(mid)
        iterations += 1
        if abs(length - target_len) <= tol:
            return SagFitResult(sag=mid, iterations=iterations,
                                residual=abs(length - target_len))
        if length < target_len:
            lo = mid
        else:
            hi = mid
    raise NoConvergenceError(f"no sag within tolerance after {max_iter} "
                             f"iterations")


def render_harf(p: Parabola, n: int) -> list[tuple[float, float]]:
    """Sample the curve at ``n`` equally spaced points over its span,
    endpoints included."""
    if n < 2:
        raise BadSampleCountError(f"need at least 2 samples, got {n}")
    step = (p.t2 - p.t1) / (n - 1)
    points = []
    for i in range(n):
        t = p.t2 if i == n - 1 else p.t1 + i * step
        points.append((t, p(t)))
    return points
