"""Bounded local minimizers used by the calibration stages.

Two engines share one problem/result type:

* ``nelder-mead`` for non-smooth scalar objectives (absolute values, sorting).
  Works in coordinates rescaled to the unit box; trial points leaving the box
  are reflected back inside.
* ``lm`` (Levenberg-Marquardt) for least-squares problems; every step is
  projected onto the bounds.

Both are deterministic: no randomness, fixed evaluation order.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InfeasibleBracket, NoRoot, NonFiniteObjective

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 2000


@dataclass
class BoundedProblem:
    x0: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    objective: Callable[[np.ndarray], float] | None = None
    residuals: Callable[[np.ndarray], np.ndarray] | None = None
    jacobian: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).ravel()
        n = self.x0.size
        self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (n,)).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (n,)).copy()
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")
        if np.any(self.x0 < self.lower) or np.any(self.x0 > self.upper):
            raise ValueError("x0 outside the bounds")
        if self.objective is None and self.residuals is None:
            raise ValueError("need an objective or a residual function")

    @property
    def dim(self) -> int:
        return self.x0.size

    def value(self, x) -> float:
        if self.objective is not None:
            f = float(self.objective(x))
        else:
            r = self.residuals(x)
            f = float(r @ r)
        if not np.isfinite(f):
            raise NonFiniteObjective(f"objective is {f} at x={x}")
        return f


@dataclass
class OptimResult:
    x: np.ndarray
    f: float
    iterations: int
    evaluations: int
    converged: bool
    termination: str
    trace: list[float]

    @property
    def at_bounds(self) -> np.ndarray:
        return np.zeros(self.x.size, dtype=bool)


def minimize(problem: BoundedProblem, tol: float = DEFAULT_TOL, method: str | None = None,
             max_iter: int = DEFAULT_MAX_ITER, **options) -> OptimResult:
    """Local minimizer of a bounded problem.

    ``method`` defaults to ``"lm"`` when the problem supplies residuals and to
    ``"nelder-mead"`` otherwise. On hitting ``max_iter`` the best point so far is
    returned with ``converged=False`` and ``termination="max_iterations"``.
    """
    if method is None:
        method = "lm" if problem.residuals is not None else "nelder-mead"
    if method == "nelder-mead":
        return _nelder_mead(problem, tol, max_iter, **options)
    if method == "lm":
        if problem.residuals is None:
            raise ValueError("Levenberg-Marquardt needs a residual function")
        return _levenberg_marquardt(problem, tol, max_iter, **options)
    raise ValueError(f"unknown method {method!r}")


def _reflect_unit(z: np.ndarray) -> np.ndarray:
    z = np.where(z < 0.0, -z, z)
    z = np.where(z > 1.0, 2.0 - z, z)
    return np.clip(z, 0.0, 1.0)


def _nelder_mead(problem: BoundedProblem, tol: float, max_iter: int,
                 initial_step: float | np.ndarray = 0.05, max_restarts: int = 3,
                 xtol: float | None = None) -> OptimResult:
    lo, hi = problem.lower, problem.upper
    span = np.where(hi > lo, hi - lo, 1.0)
    free = hi > lo
    n = problem.dim
    xtol = tol if xtol is None else xtol

    def to_x(z):
        return np.where(free, lo + z * span, lo)

    nfev = 0

    def f_of(z):
        nonlocal nfev
        nfev += 1
        return problem.value(to_x(z))

    # adaptive coefficients (Gao & Han) behave better in more than a few dimensions
    alpha, gamma = 1.0, 1.0 + 2.0 / n
    rho, sigma = 0.75 - 1.0 / (2 * n), 1.0 - 1.0 / n

    z_best = np.where(free, (problem.x0 - lo) / span, 0.0)
    f_best = f_of(z_best)
    trace = [f_best]
    steps = np.broadcast_to(np.asarray(initial_step, dtype=float), (n,)).copy()
    iterations = 0
    converged = False
    termination = "max_iterations"

    for restart in range(max_restarts + 1):
        simplex = [z_best.copy()]
        for i in range(n):
            z = z_best.copy()
            step = steps[i] if free[i] else 0.0
            z[i] = z[i] + step if z[i] + step <= 1.0 else z[i] - step
            simplex.append(z)
        simplex = np.array(simplex)
        fs = np.array([f_best] + [f_of(z) for z in simplex[1:]])
        start_best = f_best

        while iterations < max_iter:
            order = np.argsort(fs, kind="stable")
            simplex, fs = simplex[order], fs[order]
            diameter = np.max(np.abs(simplex[1:] - simplex[0]))
            spread = fs[-1] - fs[0]
            if diameter <= xtol or spread <= tol * max(abs(fs[0]), 1e-300):
                converged = True
                termination = "xtol" if diameter <= xtol else "ftol"
                break
            iterations += 1
            centroid = simplex[:-1].mean(axis=0)
            zr = _reflect_unit(centroid + alpha * (centroid - simplex[-1]))
            fr = f_of(zr)
            if fr < fs[0]:
                ze = _reflect_unit(centroid + gamma * (zr - centroid))
                fe = f_of(ze)
                if fe < fr:
                    simplex[-1], fs[-1] = ze, fe
                else:
                    simplex[-1], fs[-1] = zr, fr
            elif fr < fs[-2]:
                simplex[-1], fs[-1] = zr, fr
            else:
                if fr < fs[-1]:
                    zc = _reflect_unit(centroid + rho * (zr - centroid))
                else:
                    zc = _reflect_unit(centroid + rho * (simplex[-1] - centroid))
                fc = f_of(zc)
                if fc < min(fr, fs[-1]):
                    simplex[-1], fs[-1] = zc, fc
                else:
                    simplex[1:] = simplex[0] + sigma * (simplex[1:] - simplex[0])
                    fs[1:] = [f_of(z) for z in simplex[1:]]
            trace.append(min(trace[-1], float(fs.min())))

        i_best = int(np.argmin(fs))
        if fs[i_best] < f_best:
            z_best, f_best = simplex[i_best].copy(), float(fs[i_best])
        if iterations >= max_iter:
            converged = False
            termination = "max_iterations"
            break
        # restart from the best vertex with a smaller simplex until it stops paying off
        if start_best - f_best <= tol * max(abs(f_best), 1e-300):
            break
        steps = np.maximum(steps * 0.1, 10 * xtol)

    return OptimResult(to_x(z_best), f_best, iterations, nfev, converged, termination, trace)


def finite_difference_jacobian(fun, x, lower=None, upper=None, rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian; steps are shrunk to stay within bounds."""
    x = np.asarray(x, dtype=float)
    r0 = np.asarray(fun(x))
    J = np.empty((r0.size, x.size))
    for i in range(x.size):
        h = rel_step * max(abs(x[i]), 1.0)
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        if upper is not None and xp[i] > upper[i]:
            xp[i] = x[i]
        if lower is not None and xm[i] < lower[i]:
            xm[i] = x[i]
        J[:, i] = (np.asarray(fun(xp)) - np.asarray(fun(xm))) / (xp[i] - xm[i])
    return J


def _levenberg_marquardt(problem: BoundedProblem, tol: float, max_iter: int,
                         mu0: float = 1e-3) -> OptimResult:
    lo, hi = problem.lower, problem.upper
    x = problem.x0.copy()
    r = problem.residuals(x)
    f = float(r @ r)
    if not np.isfinite(f):
        raise NonFiniteObjective(f"objective is {f} at x0")
    nfev = 1
    trace = [f]
    mu = mu0
    iterations = 0
    converged = False
    termination = "max_iterations"

    def jac(x):
        if problem.jacobian is not None:
            return problem.jacobian(x)
        return finite_difference_jacobian(problem.residuals, x, lo, hi)

    J = jac(x)
    while iterations < max_iter:
        iterations += 1
        g = J.T @ r
        N = J.T @ J
        d = np.diag(N).copy()
        d[d <= 0] = 1.0
        improved = False
        for _ in range(60):
            try:
                step = np.linalg.solve(N + mu * np.diag(d), -g)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            x_new = np.clip(x + step, lo, hi)
            r_new = problem.residuals(x_new)
            nfev += 1
            f_new = float(r_new @ r_new)
            if np.isfinite(f_new) and f_new < f:
                improved = True
                break
            mu *= 4.0
        if not improved:
            converged = True
            termination = "no_decrease"
            break
        dx = x_new - x
        decrease = f - f_new
        x, r, f = x_new, r_new, f_new
        trace.append(f)
        mu = max(mu / 3.0, 1e-15)
        if decrease <= tol * max(f, 1e-300) or np.linalg.norm(dx) <= tol * (np.linalg.norm(x) + tol):
            converged = True
            termination = "ftol" if decrease <= tol * max(f, 1e-300) else "xtol"
            break
        J = jac(x)
    return OptimResult(x, f, iterations, nfev, converged, termination, trace)


@dataclass(frozen=True)
class EpsilonConstraint:
    """``S * a_i - b_i > -epsilon`` for every i."""
    a: np.ndarray
    b: np.ndarray
    epsilon: float = 0.0


@dataclass(frozen=True)
class MedianConstraint:
    """``median(S * a_i - b_i) == 0`` over the supplied points."""
    a: np.ndarray
    b: np.ndarray


def minimize_scalar_constrained(objective: Callable[[float], float],
                                constraint: EpsilonConstraint | MedianConstraint,
                                bracket: tuple[float, float] = (0.5, 2.0),
                                xtol: float = 1e-14) -> float:
    """Scale factor minimizing ``objective`` under one of the two constraint forms.

    The slack form turns into a lower bound on S (all ``a_i`` positive), and the
    convex objective is then minimized by golden-section search on the
    feasible part of the bracket. The median form fixes S outright; it is found
    by bisection since the median is nondecreasing in S.
    """
    lo, hi = map(float, bracket)
    if not lo < hi:
        raise ValueError(f"empty bracket {bracket}")
    a = np.asarray(constraint.a, dtype=float)
    b = np.asarray(constraint.b, dtype=float)

    if isinstance(constraint, MedianConstraint):
        def g(S):
            return float(np.median(S * a - b))
        g_lo, g_hi = g(lo), g(hi)
        if g_lo == 0.0:
            return lo
        if g_hi == 0.0:
            return hi
        if np.sign(g_lo) == np.sign(g_hi):
            raise NoRoot(f"median constraint does not change sign on [{lo}, {hi}]")
        while hi - lo > xtol * max(1.0, abs(lo)):
            mid = 0.5 * (lo + hi)
            if mid <= lo or mid >= hi:
                break
            g_mid = g(mid)
            if g_mid == 0.0:
                return mid
            if np.sign(g_mid) == np.sign(g_lo):
                lo, g_lo = mid, g_mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    eps = float(constraint.epsilon)
    if np.any(a <= 0):
        keep = a > 0
        # points with a_i = 0 do not depend on S: need -b_i > -eps
        if np.any(b[~keep] > eps):
            raise InfeasibleBracket("constraint violated independently of S")
        a, b = a[keep], b[keep]
    s_min = float(np.max((b - eps) / a)) if a.size else -np.inf
    # strict inequality: a feasible S must exceed s_min, here taken in the limit
    lo = max(lo, s_min)
    if lo > hi:
        raise InfeasibleBracket(f"constraint requires S >= {s_min}, bracket ends at {hi}")
    return _golden_section(objective, lo, hi, xtol)


def _golden_section(fun, lo: float, hi: float, xtol: float) -> float:
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fun(c), fun(d)
    while b - a > xtol * max(1.0, abs(a)):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fun(d)
        if not (a < c < d < b):
            break
    candidates = [(fun(lo), lo), (fc, c), (fd, d), (fun(hi), hi)]
    return min(candidates, key=lambda p: (p[0], p[1]))[1]
