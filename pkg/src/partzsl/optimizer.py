"""Limited-memory BFGS minimizer with Armijo backtracking.

Works on flat parameter vectors; callers flatten matrices row-major.
The objective callable returns ``(value, gradient)`` for a given point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import InputError, NumericError

# Curvature pairs with y.s below this relative threshold are skipped.
CURVATURE_TOL = 1e-10


@dataclass(frozen=True)
class LbfgsConfig:
    memory: int = 10
    max_iters: int = 200
    grad_tol: float = 1e-6
    c1: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 40

    def __post_init__(self):
        if self.memory < 1 or self.max_iters < 0:
            raise InputError("memory must be >= 1 and max_iters >= 0")
        if not 0.0 < self.c1 < 1.0:
            raise InputError("c1 must lie in (0, 1)")
        if not 0.0 < self.shrink < 1.0:
            raise InputError("shrink must lie in (0, 1)")
        if self.grad_tol <= 0:
            raise InputError("grad_tol must be positive")

    def to_dict(self) -> dict:
        return {
            "memory": self.memory,
            "max_iters": self.max_iters,
            "grad_tol": self.grad_tol,
            "c1": self.c1,
            "shrink": self.shrink,
            "max_backtracks": self.max_backtracks,
        }


@dataclass(frozen=True)
class MinimizeResult:
    x: np.ndarray
    f: float
    iterations: int
    converged: bool


def _evaluate(fun: Callable, x: np.ndarray):
    f, g = fun(x)
    f = float(f)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != x.shape:
        raise InputError(
            f"gradient shape {g.shape} does not match point shape {x.shape}")
    if not np.isfinite(f) or not np.isfinite(g).all():
        raise NumericError("objective returned non-finite value or gradient",
                           iterate=x.copy())
    return f, g


def _search_direction(g: np.ndarray, history: list) -> np.ndarray:
    """Two-loop recursion over the stored (s, y, rho) pairs."""
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(history):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    if history:
        s, y, _ = history[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y, rho), a in zip(history, reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


# Bound on the single interpolation-based trial step of the line search.
MAX_TRIAL_STEP = 1e3


def _line_search(fun: Callable, x: np.ndarray, f: float, p: np.ndarray,
                 slope: float, config: LbfgsConfig):
    """Armijo line search with one quadratic-interpolation trial.

    The interpolated candidate is the exact 1-D minimizer whenever the
    objective is quadratic along the ray, which is what lets the minimizer
    inherit conjugate-gradient finite termination on quadratics; plain
    Armijo halving from the unit step is the safeguard everywhere else.
    Returns ``(step, f_new, g_new)`` or ``(None, None, None)`` when no
    acceptable step exists.
    """
    armijo = lambda t, ft: ft <= f + config.c1 * t * slope
    f1, g1 = _evaluate(fun, x + p)
    # Quadratic fit through f(0)=f, f'(0)=slope, f(1)=f1.
    curvature = f1 - f - slope
    if curvature > 0.0:
        tq = min(-slope / (2.0 * curvature), MAX_TRIAL_STEP)
        if tq > 1e-12:
            probe = _probe(fun, x + tq * p, raise_on_nonfinite=tq <= 1.0)
            if probe is not None:
                fq, gq = probe
                if fq <= f1 and armijo(tq, fq):
                    return tq, fq, gq
    if armijo(1.0, f1):
        return 1.0, f1, g1
    step = config.shrink
    for _ in range(config.max_backtracks):
        ft, gt = _evaluate(fun, x + step * p)
        if armijo(step, ft):
            return step, ft, gt
        step *= config.shrink
    return None, None, None


def _probe(fun: Callable, x: np.ndarray, raise_on_nonfinite: bool):
    """Evaluate a speculative trial point; extrapolated probes may fail soft."""
    try:
        return _evaluate(fun, x)
    except NumericError:
        if raise_on_nonfinite:
            raise
        return None


def minimize(fun: Callable, x0, config: LbfgsConfig = LbfgsConfig(),
             trace_sink: Optional[Callable] = None) -> MinimizeResult:
    """Minimize ``fun`` starting from ``x0``.

    Args:
        fun: callable mapping a flat vector to ``(value, gradient)``.
        x0: starting point; ``fun(x0)`` must be finite.
        config: memory size, iteration budget, tolerances, line search.
        trace_sink: optional callable receiving one record per iteration
            with keys ``iter``, ``f``, ``grad_norm``, ``step``.

    Returns:
        MinimizeResult with the best point found. ``converged`` is True
        iff the max-abs gradient entry fell below ``config.grad_tol``
        within the iteration budget. Accepted values never increase.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    if x.ndim != 1:
        x = x.ravel()
    f, g = _evaluate(fun, x)
    history = []
    iterations = 0

    for _ in range(config.max_iters):
        if float(np.max(np.abs(g))) <= config.grad_tol:
            return MinimizeResult(x, f, iterations, True)

        p = _search_direction(g, history)
        slope = float(g @ p)
        if slope >= 0.0:
            # Numerically non-descent direction: fall back to steepest descent.
            p = -g
            slope = -float(g @ g)

        step, f_new, g_new = _line_search(fun, x, f, p, slope, config)
        if step is None:
            # Line search stalled; keep the last (best) iterate.
            return MinimizeResult(x, f, iterations, False)
        x_new = x + step * p

        s = x_new - x
        y = g_new - g
        ys = float(y @ s)
        if ys > CURVATURE_TOL * float(np.linalg.norm(y) * np.linalg.norm(s)):
            history.append((s, y, 1.0 / ys))
            if len(history) > config.memory:
                history.pop(0)

        x, f, g = x_new, f_new, g_new
        iterations += 1
        if trace_sink is not None:
            trace_sink({"iter": iterations, "f": f,
                        "grad_norm": float(np.linalg.norm(g)), "step": step})

    converged = float(np.max(np.abs(g))) <= config.grad_tol
    return MinimizeResult(x, f, iterations, converged)


def check_gradient(fun: Callable, x, h: float = 1e-5) -> float:
    """Max relative error of the analytic gradient vs central differences.

    For each coordinate i the reference is
    ``(f(x + h e_i) - f(x - h e_i)) / (2 h)`` and the error is normalized
    by ``max(1, |g_i|)``.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    _, g = _evaluate(fun, x)
    worst = 0.0
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        f_plus, _ = fun(x + e)
        f_minus, _ = fun(x - e)
        approx = (float(f_plus) - float(f_minus)) / (2.0 * h)
        err = abs(g[i] - approx) / max(1.0, abs(g[i]))
        worst = max(worst, err)
    return worst
