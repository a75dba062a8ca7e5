"""Parameter records, grids and solution containers shared by every solver."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

FloatArray = NDArray[np.float64]


class ParameterError(ValueError):
    """A parameter record violates one of its invariants."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class SolverError(RuntimeError):
    """A numerical solve did not produce an admissible answer."""


class DomainError(SolverError):
    """The drift points out of the truncated domain, or a path left it."""


def _frozen(a) -> FloatArray:
    arr = np.array(a, dtype=float)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ModelParams:
    """Baseline calibration of the mining game.

    ``lam`` is the inverse friction: machines enter at rate ``lam * U``.
    Construction does not validate; call :func:`validate_params`.
    """

    r: float = 0.05
    delta: float = 0.2
    lam: float = 1.0
    c: float = 0.02
    eps: float = 0.0

    @property
    def rho(self) -> float:
        """Effective discount rate r + delta."""
        return self.r + self.delta

    def replace(self, **changes) -> "ModelParams":
        return ModelParams(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return {"r": self.r, "delta": self.delta, "lambda": self.lam, "c": self.c, "eps": self.eps}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        known = {"r", "delta", "lambda", "c", "eps"}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(sorted(unknown)[0], "unknown parameter")
        kw = {k: float(v) for k, v in d.items()}
        if "lambda" in kw:
            kw["lam"] = kw.pop("lambda")
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelParams":
        return cls.from_dict(json.loads(text))


def validate_params(p: ModelParams) -> ModelParams:
    """Return ``p`` unchanged, or raise :class:`ParameterError` naming the bad field."""
    for name, value in (("r", p.r), ("delta", p.delta), ("lambda", p.lam), ("c", p.c)):
        if not (math.isfinite(value) and value > 0):
            raise ParameterError(name, f"must be finite and > 0, got {value!r}")
    if not (math.isfinite(p.eps) and p.eps >= 0):
        raise ParameterError("eps", f"must be finite and >= 0, got {p.eps!r}")
    if p.c * p.eps >= 1:
        raise ParameterError("eps", f"c*eps must be < 1, got {p.c * p.eps!r}")
    return p


def real_hashrate(nominal: float, delta: float, t: float) -> float:
    """Nominal hashrate deflated by technological progress: ``exp(-delta t) P``."""
    return math.exp(-delta * t) * nominal


@dataclass(frozen=True)
class Grid1D:
    """Uniform partition of [0, k_max] with ``n`` nodes."""

    k_max: float
    n: int

    def __post_init__(self):
        if not (self.k_max > 0 and math.isfinite(self.k_max)):
            raise ParameterError("k_max", f"must be finite and > 0, got {self.k_max!r}")
        if int(self.n) != self.n or self.n < 3:
            raise ParameterError("n", f"must be an integer >= 3, got {self.n!r}")

    @cached_property
    def nodes(self) -> FloatArray:
        x = np.linspace(0.0, self.k_max, self.n)
        x[-1] = self.k_max
        return _frozen(x)

    @property
    def h(self) -> float:
        return self.k_max / (self.n - 1)

    def locate(self, k: float) -> tuple[int, float]:
        """Cell index and fractional offset of ``k`` (clipped into the grid)."""
        s = min(max(k / self.h, 0.0), self.n - 1.0)
        i = min(int(s), self.n - 2)
        return i, s - i


@dataclass(frozen=True)
class UniformAxis:
    """Uniform partition of [lo, hi]; used for the price variable."""

    lo: float
    hi: float
    n: int

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ParameterError("p_max", "must exceed p_min")
        if int(self.n) != self.n or self.n < 3:
            raise ParameterError("n", f"must be an integer >= 3, got {self.n!r}")

    @cached_property
    def nodes(self) -> FloatArray:
        x = np.linspace(self.lo, self.hi, self.n)
        x[-1] = self.hi
        return _frozen(x)

    @property
    def h(self) -> float:
        return (self.hi - self.lo) / (self.n - 1)

    def locate(self, x: float) -> tuple[int, float]:
        s = min(max((x - self.lo) / self.h, 0.0), self.n - 1.0)
        i = min(int(s), self.n - 2)
        return i, s - i


def reward_denominator(total: FloatArray, eps: float, h: float) -> FloatArray:
    """``total + eps`` with the zero-hashrate node replaced by the grid spacing when eps = 0."""
    d = np.asarray(total, dtype=float) + eps
    return np.where(d > 0, d, h)


@dataclass(frozen=True)
class ValueFunction1D:
    """Grid samples of the value of one unit of real hashrate."""

    grid: Grid1D
    values: FloatArray
    residual_norm: float = float("nan")
    iterations: int = 0

    def __post_init__(self):
        v = _frozen(self.values)
        if v.shape != (self.grid.n,):
            raise ValueError(f"values has shape {v.shape}, expected ({self.grid.n},)")
        object.__setattr__(self, "values", v)

    def __call__(self, k):
        """Piecewise-linear interpolation; constant extrapolation outside the grid."""
        return np.interp(k, self.grid.nodes, self.values)

    def at(self, k: float) -> float:
        i, w = self.grid.locate(k)
        v = self.values
        return (1.0 - w) * v[i] + w * v[i + 1]

    def derivative(self) -> FloatArray:
        """Forward differences, one per cell."""
        return np.diff(self.values) / self.grid.h

    def is_nonincreasing(self, atol: float = 0.0) -> bool:
        return bool(np.all(np.diff(self.values) <= atol))


@dataclass(frozen=True)
class Trajectory:
    """Time-indexed path of the aggregate state.

    ``states`` has one row per sample and one column per label in ``labels``.
    A repeated time stamp encodes an instantaneous jump.
    """

    times: FloatArray
    states: FloatArray
    labels: tuple[str, ...] = ("K",)

    def __post_init__(self):
        t = _frozen(self.times)
        s = np.array(self.states, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        s.flags.writeable = False
        if s.shape != (t.size, len(self.labels)):
            raise ValueError(f"states shape {s.shape} does not match {t.size} x {len(self.labels)}")
        if np.any(np.diff(t) < 0):
            raise ValueError("times must be non-decreasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", s)

    def __len__(self) -> int:
        return self.times.size

    def component(self, label: str) -> FloatArray:
        return self.states[:, self.labels.index(label)]

    @property
    def K(self) -> FloatArray:
        return self.component("K")

    @property
    def terminal(self) -> FloatArray:
        return self.states[-1]

    def rows(self):
        """``(t, *state)`` tuples, one per sample."""
        for t, s in zip(self.times, self.states):
            yield (t, *s)


@dataclass(frozen=True)
class EquilibriumReport:
    """Stationary quantities for one parameter point."""

    k_star: float
    u_star: float
    pi_star: float
    residual_norm: float = 0.0
    iterations: int = 0
    params: ModelParams | None = field(default=None, compare=False)

    def to_dict(self) -> dict:
        d = {
            "k_star": self.k_star,
            "u_star": self.u_star,
            "pi_star": self.pi_star,
            "residual_norm": self.residual_norm,
            "iterations": self.iterations,
        }
        if self.params is not None:
            d["params"] = self.params.to_dict()
        return d


def check_sorted(values: Sequence[float], name: str, strict: bool = True) -> FloatArray:
    a = np.asarray(values, dtype=float)
    d = np.diff(a)
    if np.any(d <= 0) if strict else np.any(d < 0):
        raise ParameterError(name, "must be increasing")
    return a
