"""Constructive objective-ascending flows on a box and their numerical check.

Given a smooth test function ``j`` with isolated critical points inside an
open box ``B``, the field

    X(x) = eta(x) * mu(x)**m * grad j(x)

vanishes on the boundary (through the defining function ``mu``) and at the
critical points (through the cutoff ``eta``), and ``j`` never decreases along
its flow because ``dj/dt = eta mu^m |grad j|^2 >= 0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import brentq
from scipy.spatial.distance import pdist

BOUNDARY_LINEAR_FRACTION = 0.1


class BoxExitError(RuntimeError):
    """A trajectory left the box it should never leave."""


def smooth_step(u):
    """C-infinity step: 0 for u <= 0, 1 for u >= 1, built from exp(-1/u)."""
    u = np.asarray(u, dtype=np.float64)
    a = np.where(u > 0, np.exp(-1.0 / np.where(u > 0, u, 1.0)), 0.0)
    v = 1.0 - u
    b = np.where(v > 0, np.exp(-1.0 / np.where(v > 0, v, 1.0)), 0.0)
    return a / (a + b)


def _saturate(r, lin: float, sat: float):
    """r below ``lin``, the constant 1 above ``sat``, a smooth blend in between."""
    s = smooth_step((r - lin) / (sat - lin))
    return r * (1.0 - s) + s


@dataclass
class MorseProblem:
    name: str
    lo: np.ndarray
    hi: np.ndarray
    j: Callable[[np.ndarray], np.ndarray]
    grad_j: Callable[[np.ndarray], np.ndarray]
    critical_points: np.ndarray
    inner_radius: np.ndarray
    outer_radius: np.ndarray
    m: int = 3
    kinds: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.lo = np.atleast_1d(np.asarray(self.lo, dtype=np.float64))
        self.hi = np.atleast_1d(np.asarray(self.hi, dtype=np.float64))
        n = self.dim
        if n not in (1, 2) or self.hi.shape != (n,) or np.any(self.hi <= self.lo):
            raise ValueError("box must be a non-empty 1-D or 2-D product of intervals")
        self.critical_points = np.asarray(self.critical_points, dtype=np.float64).reshape(-1, n)
        k = len(self.critical_points)
        self.inner_radius = np.broadcast_to(np.asarray(self.inner_radius, dtype=np.float64), (k,)).copy()
        self.outer_radius = np.broadcast_to(np.asarray(self.outer_radius, dtype=np.float64), (k,)).copy()
        if self.m < n + 1:
            raise ValueError(f"decay exponent m must be at least {n + 1}")
        if np.any(self.inner_radius <= 0) or np.any(self.outer_radius <= self.inner_radius):
            raise ValueError("cutoff radii must satisfy 0 < inner < outer")
        for p, r in zip(self.critical_points, self.outer_radius):
            if np.any(p - r <= self.lo) or np.any(p + r >= self.hi):
                raise ValueError("critical point neighbourhoods must lie strictly inside the box")
        for a in range(k):
            for b in range(a + 1, k):
                gap = np.linalg.norm(self.critical_points[a] - self.critical_points[b])
                if gap < self.outer_radius[a] + self.outer_radius[b]:
                    raise ValueError("cutoff supports of distinct critical points overlap")

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def min_half_width(self) -> float:
        return float(np.min(self.hi - self.lo) / 2)


def _points(x, n: int) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(-1, n)


def mu_defining(x, lo, hi) -> np.ndarray:
    """Defining function of the box: zero on the boundary, positive inside.

    Product over faces of ``f(distance to face)`` where ``f(r) = r`` for
    ``r`` below a tenth of the smallest half-width and ``f = 1`` from the
    half-width on, so near a face (away from corners) it equals the distance
    to the boundary.
    """
    lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
    hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
    pts = _points(x, len(lo))
    if np.any(pts < lo) or np.any(pts > hi):
        raise ValueError("point lies outside the box")
    hw = float(np.min(hi - lo) / 2)
    lin = BOUNDARY_LINEAR_FRACTION * hw
    out = np.prod(_saturate(pts - lo, lin, hw) * _saturate(hi - pts, lin, hw), axis=1)
    return out if np.ndim(x) > 1 else out[0]


def cutoff_eta(x, problem: MorseProblem) -> np.ndarray:
    """``1 - sum_i rho_i``: 0 on the inner balls, 1 outside every support."""
    pts = _points(x, problem.dim)
    total = np.zeros(len(pts))
    for p, r0, r1 in zip(problem.critical_points, problem.inner_radius, problem.outer_radius):
        d = np.linalg.norm(pts - p, axis=1)
        total += 1.0 - smooth_step((d - r0) / (r1 - r0))
    out = 1.0 - total
    return out if np.ndim(x) > 1 else out[0]


def build_morse_field(problem: MorseProblem):
    """The ascending field ``X = eta * mu^m * grad j`` as a batched callable."""

    def field_fn(x):
        pts = _points(x, problem.dim)
        scale = cutoff_eta(pts, problem) * mu_defining(pts, problem.lo, problem.hi) ** problem.m
        out = scale[:, None] * problem.grad_j(pts)
        return out if np.ndim(x) > 1 else out[0]

    return field_fn


def _inside(pts, problem) -> bool:
    return bool(np.all(pts > problem.lo) and np.all(pts < problem.hi))


def _inside_closed(pts, problem) -> bool:
    return bool(np.all(pts >= problem.lo) and np.all(pts <= problem.hi))


def integrate_flow(problem: MorseProblem, x0, flow_time: float, h: float | None = None, record=None):
    """RK4 integration of the Morse field; raises :class:`BoxExitError` on exit."""
    raw = build_morse_field(problem)

    def field_fn(pts):
        # an RK4 stage can leave the box before the step itself does
        if not _inside_closed(pts, problem):
            raise BoxExitError("trajectory left the box")
        return raw(pts)

    x = _points(x0, problem.dim).copy()
    if flow_time == 0:
        return x
    h = flow_time / 200 if h is None else h
    n = max(1, int(round(flow_time / h)))
    h = flow_time / n
    for _ in range(n):
        k1 = field_fn(x)
        k2 = field_fn(x + 0.5 * h * k1)
        k3 = field_fn(x + 0.5 * h * k2)
        k4 = field_fn(x + h * k3)
        x_new = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not _inside(x_new, problem):
            raise BoxExitError("trajectory left the box")
        if record is not None:
            record(x, x_new)
        x = x_new
    return x


@dataclass
class MorseReport:
    monotone_fraction: float
    strict_fraction: float
    min_mu: float
    min_endpoint_distance: float
    min_abs_det: float
    n_trajectories: int
    n_steps: int

    def passed(self) -> bool:
        return (self.monotone_fraction == 1.0 and self.min_mu > 0
                and self.min_endpoint_distance > 0 and self.min_abs_det > 0)


def grid_points(problem: MorseProblem, resolution: int) -> np.ndarray:
    """``resolution`` points per axis strictly inside the box."""
    axes = [np.linspace(a, b, resolution + 2)[1:-1] for a, b in zip(problem.lo, problem.hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.reshape(-1) for g in mesh], axis=1)


def verify_morse_flow(problem: MorseProblem, resolution: int = 21, flow_time: float = 0.5,
                      h: float | None = None, tol: float = 1e-9, fd_step: float = 1e-5) -> MorseReport:
    """Integrate from a grid of starts and measure the flow's defining properties.

    Monotonicity is counted per RK4 step (``j(next) >= j(prev) - tol``);
    ``min_mu`` is the smallest defining-function value visited; the Jacobian
    determinant of the time-``flow_time`` map is estimated by central
    differences at every start.
    """
    starts = grid_points(problem, resolution)
    stats = {"steps": 0, "mono": 0, "strict": 0, "min_mu": float(np.min(mu_defining(starts, problem.lo, problem.hi)))}

    def record(prev, nxt):
        dj = problem.j(nxt) - problem.j(prev)
        stats["steps"] += len(dj)
        stats["mono"] += int(np.sum(dj >= -tol))
        stats["strict"] += int(np.sum(dj > 0))
        stats["min_mu"] = min(stats["min_mu"], float(np.min(mu_defining(nxt, problem.lo, problem.hi))))

    ends = integrate_flow(problem, starts, flow_time, h, record)
    n = problem.dim
    jac = np.zeros((len(starts), n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = fd_step
        plus = integrate_flow(problem, starts + e, flow_time, h)
        minus = integrate_flow(problem, starts - e, flow_time, h)
        jac[:, :, k] = (plus - minus) / (2 * fd_step)
    det = np.linalg.det(jac)
    steps = stats["steps"]
    return MorseReport(
        monotone_fraction=stats["mono"] / steps if steps else 1.0,
        strict_fraction=stats["strict"] / steps if steps else 0.0,
        min_mu=stats["min_mu"],
        min_endpoint_distance=float(np.min(pdist(ends))) if len(ends) > 1 else float("inf"),
        min_abs_det=float(np.min(np.abs(det))),
        n_trajectories=len(starts),
        n_steps=steps // max(len(starts), 1),
    )


# built-in problems

def quadratic_bowl() -> MorseProblem:
    """``j = -|x|^2`` on [-1, 1]^2 with its maximum at the origin."""
    return MorseProblem(
        "bowl", [-1.0, -1.0], [1.0, 1.0],
        j=lambda x: -np.sum(x**2, axis=1),
        grad_j=lambda x: -2.0 * x,
        critical_points=[[0.0, 0.0]], inner_radius=0.1, outer_radius=0.3, kinds=["max"],
    )


def two_bumps(separation: float = 1.4, width: float = 0.5, heights=(1.0, 0.8)) -> MorseProblem:
    """Two gaussian bumps on the x-axis: two maxima and a saddle between them."""
    a = np.array([-separation / 2, 0.0])
    b = np.array([separation / 2, 0.0])
    h1, h2 = heights
    s2 = width**2

    def j(x):
        return h1 * np.exp(-np.sum((x - a) ** 2, axis=1) / (2 * s2)) + h2 * np.exp(-np.sum((x - b) ** 2, axis=1) / (2 * s2))

    def grad_j(x):
        ga = h1 * np.exp(-np.sum((x - a) ** 2, axis=1) / (2 * s2))
        gb = h2 * np.exp(-np.sum((x - b) ** 2, axis=1) / (2 * s2))
        return -(ga[:, None] * (x - a) + gb[:, None] * (x - b)) / s2

    # every critical point lies on the line through the centres; find the
    # sign changes of the derivative along it
    def dj(u):
        return grad_j(np.array([[u, 0.0]]))[0, 0]

    us = np.linspace(a[0] - 1.0, b[0] + 1.0, 2001)
    vals = np.array([dj(u) for u in us])
    roots = [brentq(dj, us[i], us[i + 1], xtol=1e-14) for i in range(len(us) - 1) if vals[i] * vals[i + 1] < 0]
    kinds = ["max" if dj(r - 1e-4) > 0 else "saddle" for r in roots]
    pts = np.array([[r, 0.0] for r in roots])
    gap = np.min(np.diff(np.sort(pts[:, 0])))
    return MorseProblem(
        "two-bumps", [-2.0, -1.5], [2.0, 1.5], j=j, grad_j=grad_j,
        critical_points=pts, inner_radius=0.12 * gap, outer_radius=0.4 * gap, kinds=kinds,
    )


def tilted_quadratic() -> MorseProblem:
    """1-D ``j = -x^2 + x/2`` on [-1, 1], maximum at x = 1/4."""
    return MorseProblem(
        "tilted", [-1.0], [1.0],
        j=lambda x: -x[:, 0] ** 2 + 0.5 * x[:, 0],
        grad_j=lambda x: -2.0 * x + 0.5,
        critical_points=[[0.25]], inner_radius=0.05, outer_radius=0.2, m=2, kinds=["max"],
    )


PROBLEMS = {"bowl": quadratic_bowl, "two-bumps": two_bumps, "tilted": tilted_quadratic}


def get_problem(name: str) -> MorseProblem:
    try:
        return PROBLEMS[name]()
    except KeyError:
        raise ValueError(f"unknown Morse problem {name!r}; choose from {sorted(PROBLEMS)}") from None
