"""Free entry with zero resale value: penalized equation and its obstacle limit.

With penalty ``eta`` machines enter at rate ``(U)_+ / eta`` and are never sold,
so the drift is ``-delta K + (U)_+ / eta``.  As ``eta -> 0`` the value is
capped at zero and solves ``max((r+d) U + d K U' - 1/(K+eps) + c, U) = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    Grid1D,
    ModelParams,
    ParameterError,
    SolverError,
    Trajectory,
    ValueFunction1D,
    check_sorted,
    validate_params,
)
from .det1d import (
    SolverOptions,
    TransportProblem1D,
    _check_inward,
    _integrate_path,
    default_grid,
    drift_root,
    flow_reward,
    stationary_state_closed_form,
)


def positive_part_inflow(eta: float):
    return lambda u: (np.maximum(u, 0.0) / eta, (u > 0.0) / eta)


@dataclass(frozen=True)
class PenalizedSolution:
    eta: float
    u: ValueFunction1D
    k_star: float  # closed form with lambda = 1/eta
    k_star_numerical: float  # zero of the drift on the solved U

    @property
    def values(self):
        return self.u.values


@dataclass(frozen=True)
class ObstacleSolution:
    u: ValueFunction1D
    k_star: float
    complementarity: float  # sup over nodes of |max(PDE residual, U)|


def _penalized_params(p: ModelParams, eta: float) -> ModelParams:
    return p.replace(lam=1.0 / eta)


def solve_penalized(
    p: ModelParams,
    eta: float,
    g: Grid1D | None = None,
    o: SolverOptions | None = None,
    warm_start: ValueFunction1D | None = None,
) -> PenalizedSolution:
    if not (eta > 0 and math.isfinite(eta)):
        raise ParameterError("eta", f"must be finite and > 0, got {eta!r}")
    validate_params(p)
    g = g or default_grid(p)
    o = o or SolverOptions()
    if not g.k_max > 1.0 / p.c - p.eps:
        raise ParameterError("k_max", f"must exceed 1/c - eps = {1.0 / p.c - p.eps}")
    f = flow_reward(p, g)
    inflow = positive_part_inflow(eta)
    prob = TransportProblem1D(g, p.rho, p.delta, f, inflow)
    if warm_start is not None and warm_start.grid == g:
        u0 = warm_start.values
    else:
        u0 = f / p.rho
    u, rn, it = prob.solve(u0, o)
    _check_inward(prob.pieces(u)[1], o.tol)
    vf = ValueFunction1D(g, u, residual_norm=rn, iterations=it)
    k_num = drift_root(vf, p.delta, lambda v: np.maximum(v, 0.0) / eta)
    return PenalizedSolution(
        eta=eta,
        u=vf,
        k_star=stationary_state_closed_form(_penalized_params(p, eta)),
        k_star_numerical=k_num,
    )


def obstacle_residual(values, grid: Grid1D, p: ModelParams) -> np.ndarray:
    """Nodewise ``max((r+d) U + d K U'_- - reward, U)`` with backward differences."""
    u = np.asarray(values, dtype=float)
    k = grid.nodes
    d = np.empty_like(u)
    d[0] = 0.0  # transport coefficient vanishes at K = 0
    d[1:] = np.diff(u) / grid.h
    pde = p.rho * u + p.delta * k * d - flow_reward(p, grid)
    return np.maximum(pde, u)


def solve_obstacle(
    p: ModelParams, g: Grid1D | None = None, o: SolverOptions | None = None
) -> ObstacleSolution:
    """Projected Gauss-Seidel for the obstacle problem.

    The transport ``-d K`` points toward K = 0, so sweeping from the left is
    the upwind order: one sweep already solves the discrete problem and the
    following sweep confirms the fixed point.
    """
    validate_params(p)
    g = g or default_grid(p)
    o = o or SolverOptions()
    if not g.k_max > 1.0 / p.c - p.eps:
        raise ParameterError("k_max", f"must exceed 1/c - eps = {1.0 / p.c - p.eps}")
    f = flow_reward(p, g).tolist()
    a = (p.delta * g.nodes / g.h).tolist()
    rho = p.rho
    u = [0.0] * g.n
    for sweep in range(1, o.max_iters + 1):
        change = 0.0
        prev = 0.0
        for i in range(g.n):
            new = min(0.0, (f[i] + a[i] * prev) / (rho + a[i]))
            change = max(change, abs(new - u[i]))
            u[i] = new
            prev = new
        if change <= o.tol and sweep > 1:
            break
    else:
        raise SolverError(f"projected iteration did not converge in {o.max_iters} sweeps")
    values = np.array(u)
    comp = float(np.max(np.abs(obstacle_residual(values, g, p))))
    vf = ValueFunction1D(g, values, residual_norm=comp, iterations=sweep)
    neg = np.nonzero(values < 0.0)[0]
    if neg.size == 0:
        raise SolverError("value never becomes negative; enlarge k_max")
    k_star = float(g.nodes[neg[0] - 1]) if neg[0] > 0 else 0.0
    return ObstacleSolution(u=vf, k_star=k_star, complementarity=comp)


def simulate_obstacle_trajectory(
    p: ModelParams,
    sol: ObstacleSolution,
    k0: float,
    horizon: float,
    dt: float | None = None,
) -> Trajectory:
    """Limit dynamics: jump up to ``k_star`` at once, or decay at rate delta down to it.

    An upward jump is recorded as two samples at t = 0.
    """
    if not k0 >= 0:
        raise ParameterError("k0", "must be >= 0")
    dt = dt if dt is not None else 0.01 / p.delta
    steps = max(1, int(math.ceil(horizon / dt - 1e-9)))
    t = np.arange(steps + 1) * (horizon / steps)
    ks = sol.k_star
    if k0 < ks:
        times = np.concatenate([[0.0], t])
        states = np.full(times.size, ks)
        states[0] = k0
        return Trajectory(times, states[:, None], ("K",))
    return Trajectory(t, np.maximum(k0 * np.exp(-p.delta * t), ks)[:, None], ("K",))


def simulate_penalized_trajectory(
    p: ModelParams,
    sol: PenalizedSolution,
    k0: float,
    horizon: float,
    dt: float | None = None,
    method: str = "euler",
) -> Trajectory:
    """Path of ``K' = -delta K + (U_eta(K))_+ / eta``."""
    dt = dt if dt is not None else 0.01 / p.delta
    u, eta = sol.u, sol.eta
    return _integrate_path(
        k0,
        horizon,
        dt,
        lambda k: -p.delta * k + max(u.at(k), 0.0) / eta,
        u.grid.k_max,
        method,
    )


@dataclass(frozen=True)
class ConvergenceRow:
    eta: float
    k_star_eta: float
    k_star_numerical: float
    sup_gap: float


def convergence_study(
    p: ModelParams,
    eta_sequence,
    g: Grid1D | None = None,
    o: SolverOptions | None = None,
) -> tuple[list[ConvergenceRow], list[PenalizedSolution], ObstacleSolution]:
    """Warm-started penalized solves along a decreasing ``eta`` sequence.

    ``sup_gap`` is the sup-norm distance to the obstacle solution on the same grid.
    """
    etas = np.asarray(eta_sequence, dtype=float)
    if etas.size == 0 or np.any(etas <= 0):
        raise ParameterError("eta_sequence", "must be non-empty and positive")
    check_sorted(-etas, "eta_sequence")
    g = g or default_grid(p)
    obst = solve_obstacle(p, g, o)
    rows, sols = [], []
    prev = None
    for eta in etas:
        sol = solve_penalized(p, float(eta), g, o, warm_start=prev.u if prev else None)
        gap = float(np.max(np.abs(sol.u.values - obst.u.values)))
        rows.append(ConvergenceRow(float(eta), sol.k_star, sol.k_star_numerical, gap))
        sols.append(sol)
        prev = sol
    return rows, sols, obst
