"""Levenberg-Marquardt core shared by the PnP, pose-graph and bundle solvers.

A problem supplies three callables on an opaque parameter state ``x``:

``residuals(x)``
    stacked residual vector;
``linearize(x)``
    an object with a ``gradient`` array (``J^T r``) and a ``solve(lam)``
    method returning the step ``-(H + lam * D)^-1 g`` with ``H = J^T J`` and
    ``D = diag(H)``;
``retract(x, delta)``
    the updated state (manifold blocks are right-multiplied by ``Exp``).

Cost is the plain sum of squared residuals.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import NonFiniteResidual, SingularNormalEquations

log = logging.getLogger(__name__)


@dataclass
class LMOptions:
    initial_lambda: float = 1e-4
    lambda_factor: float = 10.0
    max_iterations: int = 200
    relative_cost_tol: float = 1e-12
    gradient_tol: float = 1e-10
    step_tol: float = 1e-10
    max_lambda: float = 1e16


@dataclass
class SolverReport:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    rms_reproj: float = float("nan")
    termination: str = ""
    cost_history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cost_history"] = [float(c) for c in self.cost_history]
        return d

    @property
    def monotone(self) -> bool:
        h = self.cost_history
        return all(b <= a for a, b in zip(h, h[1:]))


def damped_solve(H, g, lam):
    """Solve ``(H + lam * diag(H)) delta = -g`` by Cholesky."""
    d = np.diag(H).copy()
    floor = max(1e-12 * float(d.max(initial=0.0)), 1e-300)
    A = H + lam * np.diag(np.maximum(d, floor))
    c = cho_factor(A, lower=True, check_finite=False)
    return -cho_solve(c, g, check_finite=False)


class DenseLinearization:
    def __init__(self, J, r):
        self.H = J.T @ J
        self.gradient = J.T @ r

    def solve(self, lam):
        return damped_solve(self.H, self.gradient, lam)


class DenseProblem:
    """Euclidean least squares from a residual function and its Jacobian."""

    def __init__(self, residual_fn, jacobian_fn):
        self.residual_fn = residual_fn
        self.jacobian_fn = jacobian_fn

    def residuals(self, x):
        return np.asarray(self.residual_fn(x), dtype=float)

    def linearize(self, x):
        return DenseLinearization(np.atleast_2d(self.jacobian_fn(x)), self.residuals(x))

    def retract(self, x, delta):
        return np.asarray(x, dtype=float) + delta


def _cost(r):
    return float(r @ r)


def lm_minimize(problem, x0, options: LMOptions | None = None):
    """Minimize ``sum r^2``; returns ``(x, SolverReport)``.

    Raises NonFiniteResidual if the start is not finite and
    SingularNormalEquations if the damped system cannot be factored at any
    damping level.
    """
    opt = options or LMOptions()
    x = x0
    r = problem.residuals(x)
    if not np.all(np.isfinite(r)):
        raise NonFiniteResidual("residual is not finite at the initial parameters")
    cost = _cost(r)
    report = SolverReport(cost, cost, 0, False, cost_history=[cost])
    lam = opt.initial_lambda
    while True:
        if cost == 0.0:
            report.converged, report.termination = True, "zero_cost"
            break
        if report.iterations >= opt.max_iterations:
            report.termination = "max_iterations"
            break
        lin = problem.linearize(x)
        if float(np.max(np.abs(lin.gradient), initial=0.0)) < opt.gradient_tol:
            report.converged, report.termination = True, "gradient"
            break
        accepted = False
        solved_any = False
        while not accepted:
            try:
                delta = lin.solve(lam)
            except (LinAlgError, np.linalg.LinAlgError):
                delta = None
            if delta is not None and np.all(np.isfinite(delta)):
                solved_any = True
                x_new = problem.retract(x, delta)
                r_new = problem.residuals(x_new)
                c_new = _cost(r_new) if np.all(np.isfinite(r_new)) else np.inf
                if c_new < cost:
                    rel = (cost - c_new) / cost
                    x, cost = x_new, c_new
                    lam = max(lam / opt.lambda_factor, 1e-12)
                    report.iterations += 1
                    report.cost_history.append(cost)
                    accepted = True
                    if rel < opt.relative_cost_tol:
                        report.converged, report.termination = True, "relative_cost"
                    elif float(np.max(np.abs(delta), initial=0.0)) < opt.step_tol:
                        report.converged, report.termination = True, "step"
                    continue
                if np.isfinite(c_new) and (c_new - cost) <= opt.relative_cost_tol * cost:
                    # no representable decrease left
                    report.converged, report.termination = True, "relative_cost"
                    break
            lam *= opt.lambda_factor
            if lam > opt.max_lambda:
                if not solved_any:
                    raise SingularNormalEquations(
                        f"normal equations singular for damping up to {opt.max_lambda:g}")
                # even vanishing gradient steps fail: numerical minimum
                report.converged, report.termination = True, "no_decrease"
                break
        if report.converged:
            break
    report.final_cost = cost
    log.debug("lm: %s after %d iterations, cost %.6g -> %.6g", report.termination,
              report.iterations, report.initial_cost, report.final_cost)
    return x, report
