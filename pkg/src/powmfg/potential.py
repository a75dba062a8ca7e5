"""Planner's problem: ``0 = -r Phi - d K Phi' + (lam/2) (Phi')^2 + ln(K+eps) - c K``.

Differentiating in K gives back the master equation for ``U = Phi'``; this
module solves the HJB equation on its own and compares ``Phi'`` with ``U``.
The transport term carries a derivative (``-d K Phi'``): without it the
differentiated equation would not match.

The Hamiltonian ``sup_a (-d K + a) p - a^2/(2 lam)`` is upwinded per node:
forward difference if the forward drift is positive, backward if the backward
drift is negative, otherwise the control that stops the state.  The boundary
one-sided choices are masked so that neither end lets the state leave [0, k_max].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.linalg import solve_banded

from .core import FloatArray, Grid1D, ModelParams, ParameterError, SolverError, ValueFunction1D
from .det1d import SolverOptions, default_grid

DEFAULT_EPS = 1e-3


@dataclass(frozen=True)
class PotentialSolution:
    grid: Grid1D
    phi_values: FloatArray
    params: ModelParams
    residual_norm: float = float("nan")
    iterations: int = 0

    def __post_init__(self):
        a = np.array(self.phi_values, dtype=float)
        if a.shape != (self.grid.n,):
            raise ValueError("phi_values does not match the grid")
        a.flags.writeable = False
        object.__setattr__(self, "phi_values", a)

    def gradient(self) -> FloatArray:
        """Centred differences at interior nodes."""
        return (self.phi_values[2:] - self.phi_values[:-2]) / (2.0 * self.grid.h)

    def stationary_point(self) -> float:
        """Where the optimal drift ``-d K + lam Phi'`` changes sign (linear interpolation)."""
        p = self.params
        k = self.grid.nodes[1:-1]
        w = p.lam * self.gradient() - p.delta * k
        neg = np.nonzero(w < 0)[0]
        if neg.size == 0 or neg[0] == 0:
            raise SolverError("optimal drift has no interior sign change")
        i = neg[0] - 1
        return float(k[i] + (k[i + 1] - k[i]) * w[i] / (w[i] - w[i + 1]))


def _check_hjb_params(p: ModelParams):
    for name, v in (("r", p.r), ("delta", p.delta), ("c", p.c)):
        if not (math.isfinite(v) and v > 0):
            raise ParameterError(name, "must be finite and > 0")
    if not (math.isfinite(p.lam) and p.lam >= 0):
        raise ParameterError("lambda", "must be finite and >= 0")
    if not p.eps > 0:
        raise ParameterError("eps", "must be > 0 (ln(K+eps) at K = 0)")


def _upwind(phi, k, p: ModelParams, h: float):
    """Per-node upwind choice: returns (drift, control, mask_fwd, mask_bwd)."""
    d = np.diff(phi) / h
    pf = np.append(d, 0.0)
    pb = np.insert(d, 0, 0.0)
    sf = -p.delta * k + p.lam * pf
    sb = -p.delta * k + p.lam * pb
    fwd = sf > 0
    fwd[-1] = False  # no exit through k_max
    bwd = (sb < 0) & ~fwd
    bwd[0] = False  # nor through K = 0
    a = np.where(fwd, p.lam * pf, np.where(bwd, p.lam * pb, p.delta * k))
    drift = np.where(fwd, sf, np.where(bwd, sb, 0.0))
    if p.lam == 0:
        a = np.zeros_like(k)
        drift = -p.delta * k
        fwd = np.zeros(k.size, dtype=bool)
        bwd = k > 0
    return drift, a, fwd, bwd


def _running(p: ModelParams, k):
    return np.log(k + p.eps) - p.c * k


def hjb_residual(phi, grid: Grid1D, p: ModelParams) -> FloatArray:
    k = grid.nodes
    drift, a, fwd, bwd = _upwind(phi, k, p, grid.h)
    d = np.diff(phi) / grid.h
    grad = np.where(fwd, np.append(d, 0.0), np.where(bwd, np.insert(d, 0, 0.0), 0.0))
    cost = a * a / (2.0 * p.lam) if p.lam > 0 else 0.0
    return -p.r * phi + drift * grad - cost + _running(p, k)


def solve_hjb(
    p: ModelParams,
    g: Grid1D | None = None,
    o: SolverOptions | None = None,
    dt: float = 1e4,
) -> PotentialSolution:
    """Implicit policy iteration: freeze the upwind control, solve the linear system, repeat.

    ``dt`` is a large implicit time step; it stabilizes the switch of upwind
    directions without slowing convergence much.
    """
    _check_hjb_params(p)
    g = g or default_grid(p)
    o = o or SolverOptions()
    k = g.nodes
    h = g.h
    n = g.n
    f = _running(p, k)
    # stop-the-state policy as a starting point
    phi = (f - (p.delta * k) ** 2 / (2.0 * p.lam)) / p.r if p.lam > 0 else f / p.r
    for it in range(1, o.max_iters + 1):
        drift, a, fwd, bwd = _upwind(phi, k, p, h)
        cost = a * a / (2.0 * p.lam) if p.lam > 0 else 0.0
        sf = np.where(fwd, drift, 0.0) / h
        sb = np.where(bwd, drift, 0.0) / h
        ab = np.zeros((3, n))
        ab[1] = 1.0 / dt + p.r + sf - sb
        ab[0, 1:] = -sf[:-1]
        ab[2, :-1] = sb[1:]
        new = solve_banded((1, 1), ab, f - cost + phi / dt)
        phi = new
        res = float(np.max(np.abs(hjb_residual(phi, g, p))))
        if res <= o.tol:
            return PotentialSolution(g, phi, p, res, it)
    raise SolverError(f"policy iteration did not converge in {o.max_iters} steps")


def potential_check(phi: PotentialSolution, u: ValueFunction1D) -> float:
    """sup over interior nodes of |centred difference of Phi - U|."""
    if phi.grid != u.grid:
        raise ParameterError("grid", "Phi and U live on different grids")
    if not phi.params.eps > 0:
        raise ParameterError("eps", "must be > 0")
    return float(np.max(np.abs(phi.gradient() - u.values[1:-1])))


def characteristics_value(p: ModelParams, k0: float) -> float:
    """Value without control: ``int_0^inf e^{-r t} (ln(k0 e^{-d t} + eps) - c k0 e^{-d t}) dt``."""

    def integrand(t):
        kt = k0 * math.exp(-p.delta * t)
        return math.exp(-p.r * t) * (math.log(kt + p.eps) - p.c * kt)

    val, _err = quad(integrand, 0.0, math.inf, limit=500, epsabs=1e-12, epsrel=1e-12)
    return val
