"""Dense quasi-Newton minimizer with a backtracking line search.

Built for the small pose problems in this package (a handful of parameters,
smooth objective, cheap analytic gradient). Supports optional box constraints
through projection of the trial points, which keeps every evaluated iterate
feasible and bound values exact.
"""

from __future__ import annotations

import dataclasses
import enum

import numpy as np

__all__ = ["SolverStatus", "SolverOptions", "MinimizeResult", "SolverError", "minimize"]


class SolverStatus(enum.Enum):
    CONVERGED_GRAD = "converged_grad"
    CONVERGED_STEP = "converged_step"
    MAX_ITERS = "max_iters"


@dataclasses.dataclass
class SolverOptions:
    max_iters: int = 100          # outer quasi-Newton iterations
    grad_tol: float = 1e-8        # infinity norm of the gradient
    step_tol: float = 1e-12       # infinity norm of the accepted step
    c1: float = 1e-4              # sufficient-decrease constant
    backtrack: float = 0.5        # step shrink factor per line-search trial
    min_alpha: float = 1e-20      # line search gives up below this step size
    bounds: tuple | None = None   # (lower, upper) arrays, or None


@dataclasses.dataclass
class MinimizeResult:
    x: np.ndarray
    f: float
    status: SolverStatus
    n_iters: int
    n_fev: int
    f_history: np.ndarray  # objective at x0 and at every accepted iterate


class SolverError(RuntimeError):
    """Raised on a non-finite objective or gradient; keeps the last good iterate."""

    def __init__(self, message, last_x=None, last_f=None, n_iters=0):
        super().__init__(message)
        self.last_x = last_x
        self.last_f = last_f
        self.n_iters = n_iters


def _projector(bounds, n):
    if bounds is None:
        return lambda x: x
    lo = np.asarray(bounds[0], dtype=float).reshape(-1)
    hi = np.asarray(bounds[1], dtype=float).reshape(-1)
    if lo.size != n or hi.size != n or (lo > hi).any():
        raise ValueError("bounds must be (lower, upper) arrays matching x0")
    return lambda x: np.clip(x, lo, hi)


def minimize(f, g, x0, opts: SolverOptions | None = None) -> MinimizeResult:
    """Minimize f with analytic gradient g from x0.

    Quasi-Newton (BFGS) directions with a backtracking line search starting at
    unit step; the sufficient-decrease test uses the projected displacement so
    box bounds stay exact. The accepted objective sequence never increases.
    """
    opts = opts or SolverOptions()
    x = np.asarray(x0, dtype=float).copy().reshape(-1)
    n = x.size
    project = _projector(opts.bounds, n)
    x = project(x)

    n_fev = 1
    fx = float(f(x))
    if not np.isfinite(fx):
        raise SolverError("objective is not finite at the start point", x, fx, 0)
    gx = np.asarray(g(x), dtype=float)
    if not np.isfinite(gx).all():
        raise SolverError("gradient is not finite at the start point", x, fx, 0)

    H = np.eye(n)
    history = [fx]
    status = SolverStatus.MAX_ITERS
    it = 0
    first_update = True
    for it in range(1, opts.max_iters + 1):
        if np.abs(gx).max() <= opts.grad_tol:
            status = SolverStatus.CONVERGED_GRAD
            it -= 1
            break

        p = -(H @ gx)
        if p @ gx >= 0.0:
            # quasi-Newton model went bad; reset to steepest descent
            H = np.eye(n)
            p = -gx

        alpha = 1.0
        x_new = None
        while alpha >= opts.min_alpha:
            trial = project(x + alpha * p)
            step = trial - x
            if np.abs(step).max() == 0.0:
                break
            n_fev += 1
            f_trial = float(f(trial))
            if not np.isfinite(f_trial):
                raise SolverError(
                    "objective became non-finite during the line search",
                    x,
                    fx,
                    it,
                )
            if f_trial <= fx + opts.c1 * float(gx @ step):
                x_new = trial
                f_new = f_trial
                break
            alpha *= opts.backtrack
        if x_new is None:
            # no feasible decreasing step exists at this resolution
            status = SolverStatus.CONVERGED_STEP
            it -= 1
            break

        s = x_new - x
        g_new = np.asarray(g(x_new), dtype=float)
        if not np.isfinite(g_new).all():
            raise SolverError(
                "gradient became non-finite during the line search", x, fx, it
            )
        y = g_new - gx
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            if first_update:
                H = np.eye(n) * (sy / float(y @ y))
                first_update = False
            rho = 1.0 / sy
            V = np.eye(n) - rho * np.outer(s, y)
            H = V @ H @ V.T + rho * np.outer(s, s)

        x, fx, gx = x_new, f_new, g_new
        history.append(fx)
        if np.abs(s).max() <= opts.step_tol:
            status = SolverStatus.CONVERGED_STEP
            break
    else:
        status = SolverStatus.MAX_ITERS

    return MinimizeResult(
        x=x,
        f=fx,
        status=status,
        n_iters=it,
        n_fev=n_fev,
        f_history=np.asarray(history),
    )
