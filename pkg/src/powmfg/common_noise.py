"""Random exchange rate: the (K, p) master equation, attractor curve and coupled SDE.

The reward ``1/(K+eps)`` becomes ``g(p)/(K+eps)`` with ``dP = alpha(P) dt + sqrt(2 nu) dW``.
The p-axis is truncated to [p_min, p_max] with reflecting walls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .core import (
    DomainError,
    FloatArray,
    Grid1D,
    ModelParams,
    ParameterError,
    SolverError,
    Trajectory,
    UniformAxis,
    ValueFunction1D,
    reward_denominator,
    validate_params,
)
from .det1d import SolverOptions, drift_root

DRIFT_KINDS = ("constant", "affine")
REWARD_KINDS = ("identity", "exponential-capped")


@dataclass(frozen=True)
class PriceProcess:
    """Price driver ``dP = (a + b P) dt + sqrt(2 nu) dW`` and reward map ``g``.

    ``identity`` means g = 1; ``exponential-capped`` means
    ``g(p) = clip(exp(p), eps*c, cap)``.
    """

    nu: float
    p_min: float
    p_max: float
    drift_kind: str = "constant"
    a: float = 0.0
    b: float = 0.0
    reward_kind: str = "identity"
    cap: float = 5.0

    def __post_init__(self):
        if self.drift_kind not in DRIFT_KINDS:
            raise ParameterError("drift_kind", f"must be one of {DRIFT_KINDS}")
        if self.reward_kind not in REWARD_KINDS:
            raise ParameterError("reward_kind", f"must be one of {REWARD_KINDS}")
        if not (self.nu > 0 and math.isfinite(self.nu)):
            raise ParameterError("nu", "must be finite and > 0")
        if not (math.isfinite(self.p_min) and math.isfinite(self.p_max) and self.p_max > self.p_min):
            raise ParameterError("p_max", "bounds must be finite with p_max > p_min")
        if not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise ParameterError("a", "drift coefficients must be finite")
        if self.drift_kind == "constant" and self.b != 0.0:
            raise ParameterError("b", "must be 0 for a constant drift")
        if not (self.cap > 0 and math.isfinite(self.cap)):
            raise ParameterError("cap", "must be finite and > 0")

    @classmethod
    def ornstein_uhlenbeck(cls, kappa: float, mean: float, nu: float, width: float = 6.0, **kw):
        """Mean-reverting driver truncated ``width`` stationary deviations around ``mean``."""
        sd = math.sqrt(nu / kappa)
        return cls(
            nu=nu,
            p_min=mean - width * sd,
            p_max=mean + width * sd,
            drift_kind="affine",
            a=kappa * mean,
            b=-kappa,
            **kw,
        )

    def alpha(self, p):
        return self.a + self.b * np.asarray(p, dtype=float)

    def g(self, p, floor: float):
        p = np.asarray(p, dtype=float)
        if self.reward_kind == "identity":
            return np.ones_like(p)
        return np.clip(np.exp(p), floor, self.cap)

    def reward_bound(self) -> float:
        return 1.0 if self.reward_kind == "identity" else self.cap

    def validate_for(self, p: ModelParams) -> "PriceProcess":
        floor = p.eps * p.c
        if self.reward_kind == "identity":
            if floor > 1.0:
                raise ParameterError("reward_kind", "eps*c exceeds g = 1")
        elif self.cap < floor:
            raise ParameterError("cap", f"must be >= eps*c = {floor}")
        return self

    def axis(self, n: int) -> UniformAxis:
        return UniformAxis(self.p_min, self.p_max, n)

    def fold(self, x: float) -> float:
        """Reflect ``x`` back into [p_min, p_max]."""
        span = self.p_max - self.p_min
        y = (x - self.p_min) % (2.0 * span)
        if y > span:
            y = 2.0 * span - y
        return self.p_min + y


@dataclass(frozen=True)
class ValueFunction2D:
    gridK: Grid1D
    gridP: UniformAxis
    values: FloatArray  # shape (nK, nP)
    residual_norm: float = float("nan")
    iterations: int = 0

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.gridK.n, self.gridP.n):
            raise ValueError(f"values has shape {v.shape}")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def slice(self, j: int) -> ValueFunction1D:
        return ValueFunction1D(self.gridK, self.values[:, j])

    def at(self, k: float, p: float) -> float:
        i, wk = self.gridK.locate(k)
        j, wp = self.gridP.locate(p)
        v = self.values
        return (
            (1 - wk) * ((1 - wp) * v[i, j] + wp * v[i, j + 1])
            + wk * ((1 - wp) * v[i + 1, j] + wp * v[i + 1, j + 1])
        )

    def slices_nonincreasing(self) -> bool:
        return bool(np.all(np.diff(self.values, axis=0) <= 0.0))


@dataclass(frozen=True)
class TargetCurve:
    p_nodes: FloatArray
    k_star: FloatArray
    jump_bound: FloatArray  # per cell, max_K lam |U(K,p_j+1) - U(K,p_j)| / delta

    def at(self, p: float) -> float:
        return float(np.interp(p, self.p_nodes, self.k_star))

    def is_continuous(self) -> bool:
        return bool(np.all(np.abs(np.diff(self.k_star)) <= self.jump_bound + 1e-12))


def price_operator(pp: PriceProcess, axis: UniformAxis) -> sp.csr_matrix:
    """Generator of the reflected price diffusion on the p-grid.

    Upwind first derivative (zero across a wall the drift pushes into) plus the
    centred second difference with mirrored ghost nodes.  Rows sum to zero.
    """
    n, h = axis.n, axis.h
    al = pp.alpha(axis.nodes)
    main = np.zeros(n)
    up = np.zeros(n - 1)
    lo = np.zeros(n - 1)
    fwd = np.maximum(al, 0.0) / h
    bwd = np.maximum(-al, 0.0) / h
    fwd[-1] = 0.0
    bwd[0] = 0.0
    main -= fwd + bwd
    up += fwd[:-1]
    lo += bwd[1:]
    dif = pp.nu / h**2
    main -= 2.0 * dif
    up += dif
    lo += dif
    up[0] += dif
    lo[-1] += dif
    return sp.diags([lo, main, up], [-1, 0, 1], format="csr")


def frozen_price_stationary_state(p: ModelParams, g: float) -> float:
    """Stationary state of the deterministic game with the reward scaled by ``g``."""
    a = p.lam / p.rho
    lin = p.delta * p.eps + p.c * a
    const = a * (p.c * p.eps - g)
    if const >= 0.0:
        return 0.0
    return -2.0 * const / (math.sqrt(lin * lin - 4.0 * p.delta * const) + lin)


def default_grids(p: ModelParams, pp: PriceProcess, nK: int = 751, nP: int = 41):
    gmax = pp.reward_bound()
    k_top = frozen_price_stationary_state(p, gmax)
    k_max = max(1.5 * gmax / p.c, 3.0 * k_top)
    return Grid1D(k_max, nK), pp.axis(nP)


class _KPProblem:
    """``0 = -rho U + b dK U + Lp U + R`` with ``b = -delta K + lam U``, flattened K-major."""

    def __init__(self, p: ModelParams, pp: PriceProcess, gK: Grid1D, gP: UniformAxis):
        self.p = p
        self.gK, self.gP = gK, gP
        self.shape = (gK.n, gP.n)
        K = gK.nodes[:, None]
        gvals = pp.g(gP.nodes, p.eps * p.c)[None, :]
        self.reward = gvals / reward_denominator(K, p.eps, gK.h) - p.c
        self.K = np.broadcast_to(K, self.shape)
        self.Lp = sp.kron(sp.identity(gK.n, format="csr"), price_operator(pp, gP), format="csr")
        self.p_rate = float(np.max(np.abs(pp.alpha(gP.nodes)))) / gP.h + 2.0 * pp.nu / gP.h**2

    def pieces(self, flat):
        p, h = self.p, self.gK.h
        u = flat.reshape(self.shape)
        b = -p.delta * self.K + p.lam * u
        diff = np.diff(u, axis=0) / h
        zero = np.zeros((1, self.shape[1]))
        fwd = b >= 0.0
        fwd[0] = True
        fwd[-1] = False
        d = np.where(fwd, np.vstack([diff, zero]), np.vstack([zero, diff]))
        res = -p.rho * u + b * d + self.reward + (self.Lp @ flat).reshape(self.shape)
        return res.ravel(), b, d, fwd

    def jacobian(self, b, d, fwd):
        p, h = self.p, self.gK.h
        nP = self.shape[1]
        bf = np.where(fwd, b, 0.0) / h
        bb = np.where(fwd, 0.0, b) / h
        main = (-p.rho + p.lam * d - bf + bb).ravel()
        up = bf.ravel()[:-nP]
        lo = -bb.ravel()[nP:]
        JK = sp.diags([lo, main, up], [-nP, 0, nP], format="csr")
        return JK + self.Lp

    def solve(self, u0, o: SolverOptions):
        u = np.array(u0, dtype=float).ravel()
        res, b, d, fwd = self.pieces(u)
        rn = float(np.max(np.abs(res)))
        rate = float(np.max(np.abs(b))) / self.gK.h + self.p_rate
        dtau = o.cfl / max(rate, 1e-300)
        n = u.size
        eye = sp.identity(n, format="csr")
        it = 0
        while rn > o.tol:
            if it >= o.max_iters:
                raise SolverError(f"no convergence after {o.max_iters} steps (residual {rn:.3e})")
            it += 1
            A = (eye / dtau - self.jacobian(b, d, fwd)).tocsc()
            trial = u + spsolve(A, res)
            t = self.pieces(trial)
            t_rn = float(np.max(np.abs(t[0])))
            if np.isfinite(t_rn) and t_rn < rn:
                u, (res, b, d, fwd), rn = trial, t, t_rn
                dtau = min(dtau * 4.0, 1e300)
            else:
                dtau *= 0.25
                if dtau < 1e-300:
                    raise SolverError("pseudo-time step underflow")
        return u.reshape(self.shape), b, rn, it


def solve_master_2d(
    p: ModelParams,
    pp: PriceProcess,
    grids: tuple[Grid1D, UniformAxis] | None = None,
    o: SolverOptions | None = None,
) -> ValueFunction2D:
    validate_params(p)
    pp.validate_for(p)
    gK, gP = grids or default_grids(p, pp)
    if (gP.lo, gP.hi) != (pp.p_min, pp.p_max):
        raise ParameterError("gridP", "must span [p_min, p_max]")
    o = o or SolverOptions()
    if not gK.k_max > pp.reward_bound() / p.c:
        raise ParameterError("k_max", f"must exceed max g / c = {pp.reward_bound() / p.c}")
    prob = _KPProblem(p, pp, gK, gP)
    u, b, rn, it = prob.solve(prob.reward / p.rho, o)
    if np.any(b[0] < -o.tol):
        raise DomainError("drift points outward at K=0")
    if np.any(b[-1] >= 0):
        raise DomainError("drift points outward at k_max; enlarge the domain")
    return ValueFunction2D(gK, gP, u, residual_norm=rn, iterations=it)


def target_curve(u: ValueFunction2D, p: ModelParams) -> TargetCurve:
    """Per price node, the zero of ``lam U(K, p) - delta K``."""
    roots = np.array(
        [drift_root(u.slice(j), p.delta, lambda v: p.lam * v) for j in range(u.gridP.n)]
    )
    if np.any(roots <= 0):
        raise SolverError("non-positive attractor value; check the reward floor")
    jump = p.lam * np.max(np.abs(np.diff(u.values, axis=1)), axis=0) / p.delta
    return TargetCurve(u.gridP.nodes, roots, jump)


def simulate_sde(
    p: ModelParams,
    pp: PriceProcess,
    u: ValueFunction2D,
    k0: float,
    p0: float,
    horizon: float,
    dt: float | None = None,
    seed: int = 0,
) -> Trajectory:
    """Euler-Maruyama path of (K, P); P is folded back at the walls.

    The same seed always produces the same path.
    """
    if not 0 <= seed < 2**64:
        raise ParameterError("seed", "must be an unsigned 64-bit integer")
    if not 0.0 <= k0 <= u.gridK.k_max:
        raise DomainError(f"k0={k0} outside [0, {u.gridK.k_max}]")
    if not pp.p_min <= p0 <= pp.p_max:
        raise DomainError(f"p0={p0} outside [{pp.p_min}, {pp.p_max}]")
    dt = dt if dt is not None else 1e-3 / max(p.delta, abs(pp.b))
    steps = max(1, int(math.ceil(horizon / dt - 1e-9)))
    dt = horizon / steps
    noise = np.random.default_rng(seed).standard_normal(steps) * math.sqrt(2.0 * pp.nu * dt)
    ks = np.empty(steps + 1)
    ps = np.empty(steps + 1)
    k, x = float(k0), float(p0)
    ks[0], ps[0] = k, x
    a, bcoef = pp.a, pp.b
    k_max = u.gridK.k_max
    for n in range(steps):
        k_next = max(k + dt * (-p.delta * k + p.lam * u.at(k, x)), 0.0)
        if k_next > k_max:
            raise DomainError(f"K left [0, {k_max}] at t={(n + 1) * dt:.6g}")
        x = pp.fold(x + (a + bcoef * x) * dt + noise[n])
        k = k_next
        ks[n + 1], ps[n + 1] = k, x
    return Trajectory(np.arange(steps + 1) * dt, np.column_stack([ks, ps]), ("K", "p"))


def drift_sign_violations(path: Trajectory, curve: TargetCurve, tol: float) -> int:
    """Steps where K moves away from the attractor while more than ``tol`` from it."""
    k = path.component("K")
    pr = path.component("p")
    target = np.interp(pr[:-1], curve.p_nodes, curve.k_star)
    dk = np.diff(k)
    below = k[:-1] < target - tol
    above = k[:-1] > target + tol
    return int(np.sum(below & (dk < 0)) + np.sum(above & (dk > 0)))
