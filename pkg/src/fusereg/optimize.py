"""Limited-memory quasi-Newton minimizer with backtracking line search.

Shared by the non-parametric solvers and the affine baselines.  Hand rolled
rather than delegated so that iterates, objective decomposition and
line-search behaviour stay fully observable and bit-reproducible; all inner
products use numpy sums, which are deterministic regardless of BLAS
threading.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, FuseRegError

ARMIJO_C1 = 1e-4
MAX_BACKTRACKS = 30


@dataclass
class MinimizeResult:
    x: np.ndarray
    fun: float
    iterations: int
    converged: bool
    n_evals: int


def _dot(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sum(a * b))


def _two_loop(gradient: np.ndarray, pairs, h0_solve=None) -> np.ndarray:
    """Standard l-BFGS two-loop recursion for -H * gradient.

    With ``h0_solve`` the seed matrix is gamma * H0 instead of gamma * I,
    where H0 applies a fixed preconditioner and gamma rescales it from the
    latest curvature pair (gamma = s.y / y.H0 y, the usual scalar when H0
    is the identity).
    """
    q = gradient.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * _dot(s, q)
        alphas.append(a)
        q -= a * y
    if h0_solve is not None:
        q = h0_solve(q)
        if pairs:
            s, y, _ = pairs[-1]
            q *= _dot(s, y) / max(_dot(y, h0_solve(y)), 1e-300)
    elif pairs:
        s, y, _ = pairs[-1]
        gamma = _dot(s, y) / max(_dot(y, y), 1e-300)
        q *= gamma
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        beta = rho * _dot(y, q)
        q += (a - beta) * s
    return -q


def minimize_lbfgs(
    fun_grad,
    x0: np.ndarray,
    *,
    max_iters: int = 200,
    rel_tolerance: float = 1e-6,
    memory: int = 10,
    step_cap: float | None = None,
    h0_solve=None,
    callback=None,
) -> MinimizeResult:
    """Minimize fun_grad(x) -> (value, gradient) from x0.

    Accepts steps under the Armijo condition with halving backtracks; with
    ``step_cap`` set, trial steps are clipped so no component moves farther
    than the cap (a step-limited trust-region flavour).  ``h0_solve(v)``,
    when given, applies an SPD preconditioner as the l-BFGS seed matrix
    (see :func:`_two_loop`).  Stops on a relative objective change below
    ``rel_tolerance``, a vanishing gradient, or a line search that finds no
    decrease (a working-precision stationary point).  A non-finite starting
    objective raises :class:`DivergenceError`.

    ``callback(iteration, x, value, gradient, step_norm)`` fires for the
    initial point (iteration 0) and after every accepted step.
    """
    x = np.array(x0, dtype=np.float64)
    f, g = fun_grad(x)
    n_evals = 1
    if not np.isfinite(f):
        raise DivergenceError("objective is not finite at the starting point")
    if callback is not None:
        callback(0, x, f, g, 0.0)
    pairs: list = []
    iterations = 0
    converged = False
    for _ in range(max_iters):
        g_inf = float(np.max(np.abs(g))) if g.size else 0.0
        if g_inf <= 1e-12 * (1.0 + abs(f)):
            converged = True
            break
        d = _two_loop(g, pairs, h0_solve)
        slope = _dot(g, d)
        if not np.isfinite(slope) or slope >= 0.0:
            pairs.clear()
            d = -g
            slope = _dot(g, d)
        d_inf = float(np.max(np.abs(d)))
        t = 1.0
        if not pairs and d_inf > 0.0:
            # first trial step at most one pixel in any component
            t = min(1.0, 1.0 / d_inf)
        if step_cap is not None and d_inf * t > step_cap:
            t = step_cap / d_inf
        accepted = False
        f_new = f
        g_new = g
        for _ in range(MAX_BACKTRACKS):
            x_try = x + t * d
            try:
                f_try, g_try = fun_grad(x_try)
                n_evals += 1
            except FuseRegError:
                # trial point left the measure's domain; shrink and retry
                t *= 0.5
                continue
            if np.isfinite(f_try) and f_try <= f + ARMIJO_C1 * t * slope:
                accepted = True
                f_new, g_new = f_try, g_try
                break
            t *= 0.5
        if not accepted:
            # No decrease within the backtrack budget.  With an exact
            # gradient this only happens at a working-precision stationary
            # point or at a kink of the sampled objective (integer-aligned
            # displacements); either way the iterate is as good as this
            # direction set gets, so stop rather than diverge.
            converged = True
            break
        step = t * d
        s = step
        y = g_new - g
        sy = _dot(s, y)
        if sy > 1e-12 * float(np.sqrt(_dot(s, s) * _dot(y, y)) + 1e-300):
            pairs.append((s, y, 1.0 / sy))
            if len(pairs) > memory:
                pairs.pop(0)
        iterations += 1
        f_prev = f
        x = x_try
        f, g = f_new, g_new
        if callback is not None:
            callback(iterations, x, f, g, float(np.max(np.abs(step))))
        if abs(f_prev - f) <= rel_tolerance * max(abs(f), 1e-12):
            converged = True
            break
    return MinimizeResult(x=x, fun=f, iterations=iterations, converged=converged, n_evals=n_evals)
