"""Deterministic master equation on [0, k_max]: solver, stationary state, trajectories.

The equation ``0 = -(r+d) U + (-d K + lam U) U' + 1/(K+eps) - c`` is discretized
with first-order upwinding on the transport term (direction picked per node from
the sign of the current drift iterate, ties go right) and marched to steady state
in pseudo-time.  Each pseudo-time step is implicit and linearized, so the step
can grow geometrically once the residual starts to fall; in the limit the
iteration is Newton's method on the upwind system.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import solve_banded
from scipy.optimize import brentq

from .core import (
    DomainError,
    EquilibriumReport,
    FloatArray,
    Grid1D,
    ModelParams,
    ParameterError,
    SolverError,
    Trajectory,
    ValueFunction1D,
    reward_denominator,
    validate_params,
)


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-8
    max_iters: int = 500
    cfl: float = 0.5

    def __post_init__(self):
        if not self.tol > 0:
            raise ParameterError("tol", "must be > 0")
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ParameterError("max_iters", "must be an integer >= 1")
        if not 0 < self.cfl <= 1:
            raise ParameterError("cfl", "must lie in (0, 1]")


# (values) -> (inflow rate, d inflow / d value)
Inflow = Callable[[FloatArray], tuple[FloatArray, FloatArray]]


def linear_inflow(lam: float) -> Inflow:
    return lambda u: (lam * u, np.full_like(u, lam))


def flow_reward(p: ModelParams, grid: Grid1D) -> FloatArray:
    return 1.0 / reward_denominator(grid.nodes, p.eps, grid.h) - p.c


def stationary_state_closed_form(p: ModelParams) -> float:
    """Positive root of ``d K^2 + (d eps + c lam/(r+d)) K + lam (c eps - 1)/(r+d) = 0``.

    ``c * eps == 1`` is admitted and gives 0.
    """
    for name, v in (("r", p.r), ("delta", p.delta), ("lambda", p.lam), ("c", p.c)):
        if not v > 0:
            raise ParameterError(name, "must be > 0")
    if p.eps < 0:
        raise ParameterError("eps", "must be >= 0")
    if p.c * p.eps > 1:
        raise ParameterError("eps", "c*eps must be <= 1")
    a = p.lam / p.rho
    lin = p.delta * p.eps + p.c * a
    const = a * (p.c * p.eps - 1.0)
    if const == 0.0:
        return 0.0
    # cancellation-free form of (sqrt(lin^2 - 4 d const) - lin) / (2 d)
    return -2.0 * const / (math.sqrt(lin * lin - 4.0 * p.delta * const) + lin)


def stationary_report(p: ModelParams) -> EquilibriumReport:
    validate_params(p)
    k = stationary_state_closed_form(p)
    u = p.delta * k / p.lam
    return EquilibriumReport(k_star=k, u_star=u, pi_star=k * u, params=p)


def drift(k, u, p: ModelParams):
    """Equilibrium drift of the real hashrate, ``-delta K + lam U``."""
    return -p.delta * k + p.lam * u


def default_grid(p: ModelParams, n: int = 4000) -> Grid1D:
    k_max = max(3.0 / p.c, 3.0 * stationary_state_closed_form(p))
    return Grid1D(k_max=k_max, n=n)


class TransportProblem1D:
    """``0 = -rho U + (-delta K + inflow(U)) U' + reward`` on a uniform grid."""

    def __init__(self, grid: Grid1D, rho: float, delta: float, reward: FloatArray, inflow: Inflow):
        self.grid = grid
        self.rho = rho
        self.delta = delta
        self.reward = np.asarray(reward, dtype=float)
        self.inflow = inflow

    def pieces(self, u: FloatArray):
        h = self.grid.h
        rate, drate = self.inflow(u)
        b = rate - self.delta * self.grid.nodes
        diff = np.diff(u) / h
        fwd = b >= 0.0
        fwd[0] = True
        fwd[-1] = False
        d = np.where(fwd, np.append(diff, 0.0), np.insert(diff, 0, 0.0))
        res = -self.rho * u + b * d + self.reward
        return res, b, drate, d, fwd

    def residual(self, u: FloatArray) -> FloatArray:
        return self.pieces(u)[0]

    def solve(self, u0: FloatArray, opts: SolverOptions) -> tuple[FloatArray, float, int]:
        """Pseudo-transient continuation; returns (values, sup residual, iterations)."""
        h = self.grid.h
        n = self.grid.n
        u = np.array(u0, dtype=float)
        res, b, drate, d, fwd = self.pieces(u)
        rn = float(np.max(np.abs(res)))
        if not math.isfinite(rn):
            raise SolverError("non-finite residual at the initial guess (reward overflow?)")
        dtau = opts.cfl * h / max(float(np.max(np.abs(b))), 1e-300)
        it = 0
        while rn > opts.tol:
            if it >= opts.max_iters:
                raise SolverError(
                    f"no convergence after {opts.max_iters} pseudo-time steps (residual {rn:.3e})"
                )
            it += 1
            # Jacobian of the residual with upwind directions frozen
            diag = -self.rho + drate * d
            up = np.zeros(n)
            lo = np.zeros(n)
            bf = np.where(fwd, b, 0.0) / h
            bb = np.where(fwd, 0.0, b) / h
            diag = diag - bf + bb
            up[:-1] = bf[:-1]
            lo[1:] = -bb[1:]
            ab = np.zeros((3, n))
            ab[0, 1:] = -up[:-1]
            ab[1] = 1.0 / dtau - diag
            ab[2, :-1] = -lo[1:]
            step = solve_banded((1, 1), ab, res)
            trial = u + step
            t_res, t_b, t_drate, t_d, t_fwd = self.pieces(trial)
            t_rn = float(np.max(np.abs(t_res)))
            if np.isfinite(t_rn) and t_rn < rn:
                u, res, b, drate, d, fwd, rn = trial, t_res, t_b, t_drate, t_d, t_fwd, t_rn
                dtau = min(dtau * 4.0, 1e300)
            else:
                dtau *= 0.25
                if dtau < 1e-300:
                    raise SolverError("pseudo-time step underflow")
        return u, rn, it


def _check_inward(b: FloatArray, tol: float):
    if b[0] < -tol:
        raise DomainError(f"drift {b[0]:.3e} points outward at K=0")
    if b[-1] >= 0:
        raise DomainError(f"drift {b[-1]:.3e} points outward at k_max; enlarge the domain")


def solve_master_1d(
    p: ModelParams, g: Grid1D | None = None, o: SolverOptions | None = None
) -> ValueFunction1D:
    """Value of a unit of real hashrate on the grid ``g``."""
    validate_params(p)
    g = g or default_grid(p)
    o = o or SolverOptions()
    if not g.k_max > 1.0 / p.c - p.eps:
        raise ParameterError("k_max", f"must exceed 1/c - eps = {1.0 / p.c - p.eps}")
    f = flow_reward(p, g)
    prob = TransportProblem1D(g, p.rho, p.delta, f, linear_inflow(p.lam))
    u, rn, it = prob.solve(f / p.rho, o)
    _check_inward(prob.pieces(u)[1], o.tol)
    return ValueFunction1D(g, u, residual_norm=rn, iterations=it)


def drift_root(u: ValueFunction1D, delta: float, inflow_rate: Callable[[FloatArray], FloatArray]) -> float:
    """Unique zero of ``inflow_rate(U(K)) - delta K`` for the piecewise-linear ``U``.

    The drift is decreasing, so the sign-change cell is unique; the root inside
    it is found by bracketing.
    """
    k = u.grid.nodes
    w = inflow_rate(u.values) - delta * k
    if w[0] < 0:
        return 0.0
    neg = np.nonzero(w < 0)[0]
    if neg.size == 0:
        raise SolverError("drift has no sign change on the grid; enlarge k_max")
    i = int(neg[0]) - 1
    if w[i] == 0.0:
        return float(k[i])

    def fn(x):
        return float(inflow_rate(np.array([u.at(x)]))[0]) - delta * x

    return brentq(fn, k[i], k[i + 1], xtol=1e-14, rtol=4 * np.finfo(float).eps)


def numerical_stationary_state(u: ValueFunction1D, p: ModelParams) -> float:
    return drift_root(u, p.delta, lambda v: p.lam * v)


def _integrate_path(
    k0: float,
    horizon: float,
    dt: float,
    speed: Callable[[float], float],
    k_max: float,
    method: str = "euler",
) -> Trajectory:
    if not dt > 0:
        raise ParameterError("dt", "must be > 0")
    if not horizon > 0:
        raise ParameterError("horizon", "must be > 0")
    if method not in ("euler", "heun"):
        raise ParameterError("method", f"unknown integrator {method!r}")
    if not 0.0 <= k0 <= k_max:
        raise DomainError(f"k0={k0} outside [0, {k_max}]")
    steps = max(1, int(math.ceil(horizon / dt - 1e-9)))
    dt = horizon / steps
    ks = np.empty(steps + 1)
    k = float(k0)
    ks[0] = k
    pinned = False
    for j in range(1, steps + 1):
        if not pinned:
            v = speed(k)
            if v == 0.0:
                pinned = True
            else:
                nxt = max(k + dt * v, 0.0)
                if method == "heun" and nxt <= k_max:
                    nxt = max(k + 0.5 * dt * (v + speed(nxt)), 0.0)
                v2 = speed(min(nxt, k_max))
                if v2 != 0.0 and (v2 > 0) != (v > 0):
                    # the step jumped over a zero of the drift; stop there
                    nxt = brentq(speed, min(k, nxt), min(max(k, nxt), k_max), xtol=1e-15)
                    pinned = True
                elif v2 == 0.0:
                    pinned = True
                if nxt > k_max:
                    raise DomainError(f"path left [0, {k_max}] at t={j * dt:.6g}")
                k = nxt
        ks[j] = k
    return Trajectory(np.arange(steps + 1) * dt, ks[:, None], ("K",))


def simulate_trajectory(
    p: ModelParams,
    u: ValueFunction1D,
    k0: float,
    horizon: float,
    dt: float | None = None,
    method: str = "euler",
) -> Trajectory:
    """Explicit path of ``K' = -delta K + lam U(K)`` with linear interpolation of U.

    ``method`` is ``"euler"`` (default) or ``"heun"``.  ``K`` is clamped at 0.
    A step that would jump across the zero of the interpolated drift is cut at
    that zero, which keeps paths monotone.
    """
    dt = dt if dt is not None else 0.01 / p.delta
    return _integrate_path(
        k0, horizon, dt, lambda k: -p.delta * k + p.lam * u.at(k), u.grid.k_max, method
    )


def discounted_flow_integral(p: ModelParams, path: Trajectory, h: float) -> float:
    k = path.K
    t = path.times
    flow = np.exp(-p.rho * t) * (1.0 / reward_denominator(k, p.eps, h) - p.c)
    return float(np.trapezoid(flow, t))


def value_oracle(
    p: ModelParams,
    u: ValueFunction1D,
    k0: float,
    horizon: float = 100.0,
    dt: float | None = None,
    method: str = "heun",
) -> float:
    """Discounted flow payoff integrated along the equilibrium path started at ``k0``.

    Trapezoid rule on the simulated path.  Heun stepping by default: Euler's
    O(dt) error is about 1e-3 at the default step.
    """
    if math.exp(-p.rho * horizon) > 1e-10:
        raise ParameterError("horizon", f"exp(-(r+delta) T) must be <= 1e-10 (T={horizon})")
    path = simulate_trajectory(p, u, k0, horizon, dt, method)
    return discounted_flow_integral(p, path, u.grid.h)
