"""Two populations of miners with different electricity costs.

``K`` and ``L`` are installed real hashrates of populations 1 and 2; only
``phi(K, L) <= K`` and ``psi(K, L) <= L`` actually run.  The values ``U`` and
``V`` solve a coupled pair of master equations on [0, k_max]^2.  The
stochastic variant adds a cross exchange rate ``h(P)`` and solves on
[0, k_max]^2 x [p_min, p_max] by sweeping over price slices.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .common_noise import PriceProcess, price_operator
from .core import (
    DomainError,
    FloatArray,
    Grid1D,
    ParameterError,
    SolverError,
    Trajectory,
    UniformAxis,
)
from .det1d import SolverOptions


@dataclass(frozen=True)
class TwoPopParams:
    r1: float = 0.05
    r2: float = 0.05
    lam1: float = 1.0
    lam2: float = 1.0
    c1: float = 0.02
    c2: float = 0.3
    delta: float = 0.2
    eps: float = 0.0

    def __post_init__(self):
        for name in ("r1", "r2", "lam1", "lam2", "c1", "c2", "delta"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ParameterError(name, f"must be finite and > 0, got {v!r}")
        if not (math.isfinite(self.eps) and self.eps >= 0):
            raise ParameterError("eps", f"must be finite and >= 0, got {self.eps!r}")
        if max(self.c1, self.c2) * self.eps >= 1:
            raise ParameterError("eps", "c_i * eps must be < 1")

    def replace(self, **changes) -> "TwoPopParams":
        return TwoPopParams(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)


def participation(K, L, tp: TwoPopParams, c2=None):
    """Running hashrates ``(phi, psi)`` for installed stocks ``(K, L)``.

    The higher-cost population is shrunk first until it is indifferent; if the
    lower-cost one still loses money it is shrunk too, which pushes the other
    to zero.  With equal costs both shrink in proportion.  This is the result
    of the two-pass resolution written in closed form.  ``c2`` overrides the
    second population's (effective) cost.
    """
    K = np.asarray(K, dtype=float)
    L = np.asarray(L, dtype=float)
    c1 = tp.c1
    c2 = tp.c2 if c2 is None else c2
    eps = tp.eps
    if c1 == c2:
        total = K + L
        cap = max(1.0 / c1 - eps, 0.0)
        active = np.minimum(total, cap)
        scale = np.divide(active, total, out=np.ones_like(total), where=total > 0)
        return K * scale, L * scale
    if c1 < c2:
        lo, hi, c_lo, c_hi, swap = K, L, c1, c2, False
    else:
        lo, hi, c_lo, c_hi, swap = L, K, c2, c1, True
    a_lo = np.minimum(lo, max(1.0 / c_lo - eps, 0.0))
    a_hi = np.minimum(hi, np.maximum(1.0 / c_hi - eps - a_lo, 0.0))
    return (a_hi, a_lo) if swap else (a_lo, a_hi)


def participation_passes(K: float, L: float, tp: TwoPopParams) -> tuple[float, float]:
    """Literal iterative resolution (scalar); kept as an independent check."""
    c = {1: tp.c1, 2: tp.c2}
    stock = {1: K, 2: L}
    active = {1: K, 2: L}
    order = (2, 1) if tp.c2 > tp.c1 else (1, 2)
    if tp.c1 == tp.c2:
        tot = K + L
        cap = max(1.0 / tp.c1 - tp.eps, 0.0)
        if tot > cap:
            return K * cap / tot, L * cap / tot
        return K, L
    for _ in range(2):
        for i in order:
            other = active[3 - i]
            if active[i] + other + tp.eps == 0:
                continue
            if 1.0 / (active[i] + other + tp.eps) < c[i]:
                active[i] = min(stock[i], max(0.0, 1.0 / c[i] - other - tp.eps))
            elif active[i] < stock[i]:
                active[i] = min(stock[i], max(0.0, 1.0 / c[i] - other - tp.eps))
    return active[1], active[2]


def flow_payoffs(K, L, tp: TwoPopParams, h: float, hx: float = 1.0):
    """``max(hx_i / (phi + psi + eps) - c_i, 0)`` for both populations.

    ``hx`` is the exchange rate applied to population 2.  The node at zero
    total hashrate (eps = 0) takes the denominator of its neighbours one cell
    away, ``min(h, 1/c1, hx/c2)``, so the reward stays monotone there.
    """
    c2 = tp.c2 / hx
    phi, psi = participation(K, L, tp, c2=c2)
    den = phi + psi + tp.eps
    den = np.where(den > 0, den, min(h, 1.0 / tp.c1, 1.0 / c2))
    return np.maximum(1.0 / den - tp.c1, 0.0), np.maximum(hx / den - tp.c2, 0.0)


@dataclass(frozen=True)
class Grid2D:
    k_max: float
    n: int

    def __post_init__(self):
        Grid1D(self.k_max, self.n)  # same constraints

    @property
    def axis(self) -> Grid1D:
        return Grid1D(self.k_max, self.n)

    @property
    def h(self) -> float:
        return self.k_max / (self.n - 1)

    def mesh(self):
        x = self.axis.nodes
        return np.meshgrid(x, x, indexing="ij")


def default_grid2d(tp: TwoPopParams, n: int = 151) -> Grid2D:
    return Grid2D(1.5 / min(tp.c1, tp.c2), n)


@dataclass(frozen=True)
class ValueFunctionPair:
    grid: Grid2D
    u_values: FloatArray
    v_values: FloatArray
    residual_norm: float = float("nan")
    iterations: int = 0

    def __post_init__(self):
        for name in ("u_values", "v_values"):
            a = np.array(getattr(self, name), dtype=float)
            if a.shape != (self.grid.n, self.grid.n):
                raise ValueError(f"{name} has shape {a.shape}")
            a.flags.writeable = False
            object.__setattr__(self, name, a)

    def at(self, x: float, y: float) -> tuple[float, float]:
        ax = self.grid.axis
        i, wx = ax.locate(x)
        j, wy = ax.locate(y)
        out = []
        for a in (self.u_values, self.v_values):
            out.append(
                (1 - wx) * ((1 - wy) * a[i, j] + wy * a[i, j + 1])
                + wx * ((1 - wy) * a[i + 1, j] + wy * a[i + 1, j + 1])
            )
        return out[0], out[1]

    def is_monotone(self, atol: float = 0.0) -> bool:
        """U and V non-increasing along both axes."""
        return all(
            np.all(np.diff(a, axis=ax) <= atol)
            for a in (self.u_values, self.v_values)
            for ax in (0, 1)
        )


def monotone_coupling_violation(uv: ValueFunctionPair, pairs: int = 10_000, seed: int = 0) -> float:
    """Largest value of the coupling form over random grid-point pairs (should be <= 0).

    Where the two products cancel exactly in exact arithmetic the float sum can
    come out at +1e-16; each value is therefore reduced by its own rounding
    bound, ``4 u`` times the form evaluated on absolute values.
    """
    rng = np.random.default_rng(seed)
    n = uv.grid.n
    x = uv.grid.axis.nodes
    i1, j1, i2, j2 = rng.integers(0, n, size=(4, pairs))
    U, V = uv.u_values, uv.v_values
    a = (U[i1, j1] - U[i2, j2]) * (x[i1] - x[i2])
    b = (V[i1, j1] - V[i2, j2]) * (x[j1] - x[j2])
    mag = (np.abs(U[i1, j1]) + np.abs(U[i2, j2])) * np.abs(x[i1] - x[i2]) + (
        np.abs(V[i1, j1]) + np.abs(V[i2, j2])
    ) * np.abs(x[j1] - x[j2])
    slack = 4.0 * np.finfo(float).eps * mag
    return float(np.max(a + b - slack))


class _PairProblem:
    """Upwind residual and Jacobian of the pair system on one (K, L) slice.

    ``shift`` adds ``shift * W`` and ``src_u``/``src_v`` add fixed sources;
    the price sweeps use them to carry the lagged p-coupling.
    """

    def __init__(self, tp: TwoPopParams, grid: Grid2D, r1, r2, lam2, shift=0.0, src_u=0.0, src_v=0.0):
        self.tp = tp
        self.grid = grid
        self.n = grid.n
        self.K, self.L = grid.mesh()
        self.r1, self.r2 = r1, r2
        self.lam2 = lam2
        self.shift = shift
        self.src_u = src_u
        self.src_v = src_v

    @staticmethod
    def _one_sided(w, fwd, axis, h):
        diff = np.diff(w, axis=axis) / h
        pad = [(0, 0), (0, 0)]
        pad_f = list(pad)
        pad_b = list(pad)
        pad_f[axis] = (0, 1)
        pad_b[axis] = (1, 0)
        return np.where(fwd, np.pad(diff, pad_f), np.pad(diff, pad_b))

    def pieces(self, flat):
        tp, h, n = self.tp, self.grid.h, self.n
        U = flat[: n * n].reshape(n, n)
        V = flat[n * n :].reshape(n, n)
        b1 = -tp.delta * self.K + tp.lam1 * U
        b2 = -tp.delta * self.L + self.lam2 * V
        fk = b1 >= 0.0
        fk[0, :] = True
        fk[-1, :] = False
        fl = b2 >= 0.0
        fl[:, 0] = True
        fl[:, -1] = False
        dKU = self._one_sided(U, fk, 0, h)
        dLU = self._one_sided(U, fl, 1, h)
        dKV = self._one_sided(V, fk, 0, h)
        dLV = self._one_sided(V, fl, 1, h)
        rU = (-(self.r1 + tp.delta) + self.shift) * U + b1 * dKU + b2 * dLU + self.r_u + self.src_u
        rV = (-(self.r2 + tp.delta) + self.shift) * V + b1 * dKV + b2 * dLV + self.r_v + self.src_v
        res = np.concatenate([rU.ravel(), rV.ravel()])
        return res, (b1, b2, fk, fl, dKU, dLU, dKV, dLV)

    def set_rewards(self, r_u, r_v):
        self.r_u, self.r_v = r_u, r_v

    def jacobian(self, state):
        tp, h, n = self.tp, self.grid.h, self.n
        b1, b2, fk, fl, dKU, dLU, dKV, dLV = state
        b1f = np.where(fk, b1, 0.0) / h
        b1b = np.where(fk, 0.0, b1) / h
        b2f = np.where(fl, b2, 0.0) / h
        b2b = np.where(fl, 0.0, b2) / h
        transport_diag = -b1f + b1b - b2f + b2b
        kup = b1f.ravel()[:-n]
        klo = -b1b.ravel()[n:]
        lup = b2f.ravel()[:-1]
        llo = -b2b.ravel()[1:]
        # neighbours along L never wrap across rows: the direction masks force
        # forward at j = 0 and backward at j = n-1, so the wrapped entries are 0
        T_off = sp.diags([klo, llo, lup, kup], [-n, -1, 1, n], shape=(n * n, n * n), format="csr")
        d_uu = (-(self.r1 + tp.delta) + self.shift + tp.lam1 * dKU + transport_diag).ravel()
        d_vv = (-(self.r2 + tp.delta) + self.shift + self.lam2 * dLV + transport_diag).ravel()
        J_uu = T_off + sp.diags(d_uu, format="csr")
        J_vv = T_off + sp.diags(d_vv, format="csr")
        J_uv = sp.diags((self.lam2 * dLU).ravel(), format="csr")
        J_vu = sp.diags((tp.lam1 * dKV).ravel(), format="csr")
        return sp.bmat([[J_uu, J_uv], [J_vu, J_vv]], format="csr")

    def solve(self, w0, o: SolverOptions):
        w = np.array(w0, dtype=float)
        res, state = self.pieces(w)
        rn = float(np.max(np.abs(res)))
        b1, b2 = state[0], state[1]
        rate = (float(np.max(np.abs(b1))) + float(np.max(np.abs(b2)))) / self.grid.h
        dtau = o.cfl / max(rate, 1e-300)
        eye = sp.identity(w.size, format="csr")
        # interleave (U, V) per node: the matrix becomes banded and SuperLU's
        # natural ordering factors it far faster than a column-ordering heuristic
        m = w.size // 2
        perm = np.empty(w.size, dtype=int)
        perm[0::2] = np.arange(m)
        perm[1::2] = np.arange(m) + m
        it = 0
        while rn > o.tol:
            if it >= o.max_iters:
                raise SolverError(f"no convergence after {o.max_iters} steps (residual {rn:.3e})")
            it += 1
            A = (eye / dtau - self.jacobian(state))[perm][:, perm].tocsc()
            step = np.empty_like(w)
            step[perm] = splu(A, permc_spec="NATURAL").solve(res[perm])
            trial = w + step
            t_res, t_state = self.pieces(trial)
            t_rn = float(np.max(np.abs(t_res)))
            if np.isfinite(t_rn) and t_rn < rn:
                w, res, state, rn = trial, t_res, t_state, t_rn
                dtau = min(dtau * 4.0, 1e300)
            else:
                dtau *= 0.25
                if dtau < 1e-300:
                    raise SolverError("pseudo-time step underflow")
        return w, state, rn, it


def _check_inward(state, tol):
    b1, b2 = state[0], state[1]
    if np.any(b1[0, :] < -tol) or np.any(b2[:, 0] < -tol):
        raise DomainError("drift points outward at a zero-hashrate boundary")
    if np.any(b1[-1, :] >= 0) or np.any(b2[:, -1] >= 0):
        raise DomainError("drift points outward at k_max; enlarge the domain")


def solve_system(
    tp: TwoPopParams, grid2d: Grid2D | None = None, o: SolverOptions | None = None
) -> ValueFunctionPair:
    grid2d = grid2d or default_grid2d(tp)
    o = o or SolverOptions()
    if not grid2d.k_max > 1.0 / min(tp.c1, tp.c2):
        raise ParameterError("k_max", f"must exceed 1/min(c1, c2) = {1.0 / min(tp.c1, tp.c2)}")
    prob = _PairProblem(tp, grid2d, tp.r1, tp.r2, tp.lam2)
    K, L = grid2d.mesh()
    r_u, r_v = flow_payoffs(K, L, tp, grid2d.h)
    prob.set_rewards(r_u, r_v)
    w0 = np.concatenate([(r_u / (tp.r1 + tp.delta)).ravel(), (r_v / (tp.r2 + tp.delta)).ravel()])
    w, state, rn, it = prob.solve(w0, o)
    _check_inward(state, o.tol)
    n = grid2d.n
    return ValueFunctionPair(grid2d, w[: n * n].reshape(n, n), w[n * n :].reshape(n, n), rn, it)


def _flow(uv: ValueFunctionPair, tp: TwoPopParams, lam2: float, z):
    u, v = uv.at(z[0], z[1])
    return np.array([-tp.delta * z[0] + tp.lam1 * u, -tp.delta * z[1] + lam2 * v])


def stationary_state_2pop(
    tp: TwoPopParams,
    uv: ValueFunctionPair,
    lam2: float | None = None,
    z0=None,
    tol: float = 1e-13,
    max_iters: int = 200_000,
) -> tuple[float, float]:
    """Zero of the flow field, found by the projected damped iteration ``z <- (z + tau W(z))_+``.

    The step ``tau`` is the inverse of a local Lipschitz bound of ``W`` taken
    from the grid cell containing ``z``.
    """
    lam2 = tp.lam2 if lam2 is None else lam2
    k_max = uv.grid.k_max
    z = np.array(z0 if z0 is not None else (0.5 * k_max, 0.5 * k_max), dtype=float)
    ax = uv.grid.axis
    h = ax.h
    U, V = uv.u_values, uv.v_values
    for _ in range(max_iters):
        i, _w = ax.locate(z[0])
        j, _w = ax.locate(z[1])
        cu = U[i : i + 2, j : j + 2]
        cv = V[i : i + 2, j : j + 2]
        lip = tp.delta + (
            tp.lam1 * (np.ptp(cu, axis=0).max() + np.ptp(cu, axis=1).max())
            + lam2 * (np.ptp(cv, axis=0).max() + np.ptp(cv, axis=1).max())
        ) / h
        W = _flow(uv, tp, lam2, z)
        z_new = np.clip(z + W / lip, 0.0, k_max)
        if np.max(np.abs(z_new - z)) <= tol * max(1.0, np.max(np.abs(z))):
            return float(z_new[0]), float(z_new[1])
        z = z_new
    raise SolverError("stationary-state iteration did not settle")


def simulate_2pop(
    tp: TwoPopParams,
    uv: ValueFunctionPair,
    k0: float,
    l0: float,
    horizon: float,
    dt: float | None = None,
) -> Trajectory:
    """Explicit Euler path of (K, L) with bilinear interpolation of U and V."""
    k_max = uv.grid.k_max
    if not (0 <= k0 <= k_max and 0 <= l0 <= k_max):
        raise DomainError("initial state outside the grid")
    dt = dt if dt is not None else 0.01 / tp.delta
    steps = max(1, int(math.ceil(horizon / dt - 1e-9)))
    dt = horizon / steps
    out = np.empty((steps + 1, 2))
    z = np.array([k0, l0], dtype=float)
    out[0] = z
    for s in range(1, steps + 1):
        z = np.maximum(z + dt * _flow(uv, tp, tp.lam2, z), 0.0)
        if np.any(z > k_max):
            raise DomainError(f"path left the grid at t={s * dt:.6g}")
        out[s] = z
    return Trajectory(np.arange(steps + 1) * dt, out, ("K", "L"))


# --- stochastic two-country variant -------------------------------------------------

LAMBDA2_FORMS = ("multiply", "divide", "none")


def lam2_adjusted(lam2: float, hx, form: str = "multiply"):
    if form == "multiply":
        return lam2 * hx
    if form == "divide":
        return lam2 / hx
    if form == "none":
        return lam2 * np.ones_like(hx)
    raise ParameterError("lam2_form", f"must be one of {LAMBDA2_FORMS}")


@dataclass(frozen=True)
class PairNoiseSolution:
    grid: Grid2D
    gridP: UniformAxis
    u_values: FloatArray  # (nK, nL, nP)
    v_values: FloatArray
    exchange: FloatArray  # h(p) per node
    lam2: FloatArray  # adjusted lambda_2 per node
    residual_norm: float
    sweeps: int

    def slice(self, j: int) -> ValueFunctionPair:
        return ValueFunctionPair(self.grid, self.u_values[:, :, j], self.v_values[:, :, j])


@dataclass(frozen=True)
class TargetSurface:
    p_nodes: FloatArray
    k_star: FloatArray
    l_star: FloatArray
    jump_bound: FloatArray

    def jumps(self) -> FloatArray:
        return np.hypot(np.diff(self.k_star), np.diff(self.l_star))

    def is_continuous(self) -> bool:
        return bool(np.all(self.jumps() <= self.jump_bound + 1e-9))


def _pair_noise_residual(tp, grid, Lp_dense, ex, lam2s, U, V):
    """Full residual of the 3D system (sup norm) for the current iterate."""
    n, nP = grid.n, U.shape[2]
    K, L = grid.mesh()
    worst = 0.0
    for j in range(nP):
        cu = np.tensordot(U, Lp_dense[j], axes=([2], [0]))
        cv = np.tensordot(V, Lp_dense[j], axes=([2], [0]))
        prob = _PairProblem(tp, grid, tp.r1, tp.r2, lam2s[j], 0.0, cu, cv)
        prob.set_rewards(*flow_payoffs(K, L, tp, grid.h, ex[j]))
        res, _ = prob.pieces(np.concatenate([U[:, :, j].ravel(), V[:, :, j].ravel()]))
        worst = max(worst, float(np.max(np.abs(res))))
    return worst


def solve_2pop_noise(
    tp: TwoPopParams,
    pp: PriceProcess,
    grid2d: Grid2D | None = None,
    nP: int = 9,
    lam2_form: str = "multiply",
    o: SolverOptions | None = None,
    max_sweeps: int = 500,
) -> tuple[PairNoiseSolution, TargetSurface]:
    """Pair system with exchange rate ``h(P)`` between the two cost currencies.

    ``h`` is ``pp``'s reward map (``identity`` gives h = 1).  Population 2's
    friction becomes ``lam2_adjusted(lam2, h, lam2_form)``.  Price slices are
    relaxed in a forward-then-backward Gauss-Seidel order with the p-coupling
    lagged, until the full residual is below ``o.tol``.
    """
    o = o or SolverOptions(tol=1e-6)
    grid2d = grid2d or default_grid2d(tp, 41)
    n = grid2d.n
    if n**2 * nP > 64**3:
        raise ParameterError("grid", "at most 64^3 nodes")
    gP = pp.axis(nP)
    ex = pp.g(gP.nodes, tp.eps * tp.c2)
    if np.any(ex <= 0):
        raise ParameterError("reward_kind", "exchange rate must stay positive")
    lam2s = lam2_adjusted(tp.lam2, ex, lam2_form)
    c_eff_min = min(tp.c1, float(np.min(tp.c2 / ex)))
    if not grid2d.k_max > 1.0 / c_eff_min:
        raise ParameterError("k_max", f"must exceed 1/min effective cost = {1.0 / c_eff_min}")
    Lp = price_operator(pp, gP).toarray()
    K, L = grid2d.mesh()
    U = np.empty((n, n, nP))
    V = np.empty((n, n, nP))
    rewards = [flow_payoffs(K, L, tp, grid2d.h, ex[j]) for j in range(nP)]
    for j in range(nP):
        U[:, :, j] = rewards[j][0] / (tp.r1 + tp.delta)
        V[:, :, j] = rewards[j][1] / (tp.r2 + tp.delta)
    inner = SolverOptions(tol=0.1 * o.tol, max_iters=o.max_iters, cfl=o.cfl)
    rn = math.inf
    for sweep in range(1, max_sweeps + 1):
        order = range(nP) if sweep % 2 else range(nP - 1, -1, -1)
        for j in order:
            off = Lp[j].copy()
            off[j] = 0.0
            src_u = np.tensordot(U, off, axes=([2], [0]))
            src_v = np.tensordot(V, off, axes=([2], [0]))
            prob = _PairProblem(tp, grid2d, tp.r1, tp.r2, lam2s[j], Lp[j, j], src_u, src_v)
            prob.set_rewards(*rewards[j])
            w0 = np.concatenate([U[:, :, j].ravel(), V[:, :, j].ravel()])
            w, state, _, _ = prob.solve(w0, inner)
            U[:, :, j] = w[: n * n].reshape(n, n)
            V[:, :, j] = w[n * n :].reshape(n, n)
        rn = _pair_noise_residual(tp, grid2d, Lp, ex, lam2s, U, V)
        if rn <= o.tol:
            break
    else:
        raise SolverError(f"price sweeps did not converge (residual {rn:.3e})")
    sol = PairNoiseSolution(grid2d, gP, U, V, ex, lam2s, rn, sweep)
    return sol, target_surface(tp, sol)


def target_surface(tp: TwoPopParams, sol: PairNoiseSolution) -> TargetSurface:
    """Per price node, the stationary pair of the frozen-price flow field."""
    nP = sol.gridP.n
    zs = []
    z = None
    for j in range(nP):
        z = stationary_state_2pop(tp, sol.slice(j), lam2=float(sol.lam2[j]), z0=z)
        zs.append(z)
    zs = np.array(zs)
    dU = np.abs(np.diff(tp.lam1 * sol.u_values, axis=2))
    lv = sol.v_values * sol.lam2[None, None, :]
    dV = np.abs(np.diff(lv, axis=2))
    bound = np.sqrt(np.max(dU, axis=(0, 1)) ** 2 + np.max(dV, axis=(0, 1)) ** 2) / tp.delta
    return TargetSurface(sol.gridP.nodes, zs[:, 0], zs[:, 1], bound)
