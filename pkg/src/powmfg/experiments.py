"""Comparative statics of the stationary state and hashrate-series ingestion."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar

from .core import (
    EquilibriumReport,
    FloatArray,
    ModelParams,
    ParameterError,
    SolverError,
    check_sorted,
    validate_params,
)
from .det1d import default_grid, numerical_stationary_state, solve_master_1d, stationary_report

DEFAULT_LAMBDAS = np.logspace(-1.0, 1.0, 41)
DEFAULT_DELTAS = np.linspace(0.05, 2.0, 40)
SECONDS_PER_YEAR = 365.25 * 86400.0


@dataclass(frozen=True)
class SweepResult:
    param: str
    values: FloatArray
    reports: tuple[EquilibriumReport, ...]

    def column(self, name: str) -> FloatArray:
        return np.array([getattr(r, name) for r in self.reports])

    @property
    def k_star(self) -> FloatArray:
        return self.column("k_star")

    @property
    def u_star(self) -> FloatArray:
        return self.column("u_star")

    @property
    def pi_star(self) -> FloatArray:
        return self.column("pi_star")

    def rows(self):
        for v, r in zip(self.values, self.reports):
            yield float(v), r.k_star, r.u_star, r.pi_star


def _sweep(p: ModelParams, name: str, attr: str, values, jobs: int) -> SweepResult:
    vals = check_sorted(values, name)
    if np.any(vals <= 0):
        raise ParameterError(name, "must be positive")
    points = [p.replace(**{attr: float(v)}) for v in vals]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            reports = tuple(ex.map(stationary_report, points))
    else:
        reports = tuple(map(stationary_report, points))
    return SweepResult(name, vals, reports)


def sweep_lambda(p: ModelParams, lambdas=DEFAULT_LAMBDAS, jobs: int = 1) -> SweepResult:
    return _sweep(p, "lambda", "lam", lambdas, jobs)


def sweep_delta(p: ModelParams, deltas=DEFAULT_DELTAS, jobs: int = 1) -> SweepResult:
    return _sweep(p, "delta", "delta", deltas, jobs)


def pde_cross_check(p: ModelParams, sweep: SweepResult, points: int = 10, n: int = 4000) -> float:
    """Largest relative gap between the closed-form and solver-derived K* at ``points`` sweep rows."""
    attr = "lam" if sweep.param == "lambda" else sweep.param
    idx = np.unique(np.linspace(0, sweep.values.size - 1, points).round().astype(int))
    worst = 0.0
    for i in idx:
        q = p.replace(**{attr: float(sweep.values[i])})
        u = solve_master_1d(q, default_grid(q, n))
        k_num = numerical_stationary_state(u, q)
        k_ref = sweep.reports[i].k_star
        worst = max(worst, abs(k_num - k_ref) / k_ref)
    return worst


def total_profit(p: ModelParams, delta: float) -> float:
    return stationary_report(p.replace(delta=delta)).pi_star


def argmax_profit_delta(p: ModelParams, bracket=(0.05, 2.0), xtol: float = 1e-6) -> float:
    """Maximizer of Pi*(delta) inside ``bracket`` (bounded Brent search, golden-section steps)."""
    lo, hi = map(float, bracket)
    if not 0 < lo < hi:
        raise ParameterError("bracket", "need 0 < lo < hi")
    validate_params(p)
    step = 1e-6 * (hi - lo)
    slope_lo = total_profit(p, lo + step) - total_profit(p, lo)
    slope_hi = total_profit(p, hi) - total_profit(p, hi - step)
    if not (slope_lo > 0 and slope_hi < 0):
        raise SolverError("no interior maximum of total profit inside the bracket")
    res = minimize_scalar(
        lambda d: -total_profit(p, d), bounds=(lo, hi), method="bounded", options={"xatol": xtol}
    )
    if not res.success:
        raise SolverError(f"maximizer search failed: {res.message}")
    return float(res.x)


# --- hashrate series ---------------------------------------------------------------


@dataclass(frozen=True)
class HashrateSeries:
    timestamps: tuple[datetime, ...]
    values: FloatArray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (len(self.timestamps),):
            raise ValueError("one value per timestamp")
        if np.any(~(v > 0)):
            raise ValueError("hashrate values must be positive")
        if any(b <= a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise ValueError("timestamps must be increasing")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return len(self.timestamps)

    def years(self) -> FloatArray:
        """Elapsed time since the first sample, in years of 365.25 days."""
        t0 = self.timestamps[0]
        return np.array([(t - t0).total_seconds() / SECONDS_PER_YEAR for t in self.timestamps])


class SeriesFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _parse_time(text: str) -> datetime:
    text = text.strip()
    if text.endswith(("Z", "z")):  # not accepted by fromisoformat before 3.11
        text = text[:-1] + "+00:00"
    t = datetime.fromisoformat(text)
    return t if t.tzinfo else t.replace(tzinfo=timezone.utc)


def load_hashrate_csv(path) -> HashrateSeries:
    """Read ``timestamp,hashrate`` rows; errors name the offending line."""
    stamps: list[datetime] = []
    vals: list[float] = []
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["timestamp", "hashrate"]:
            raise SeriesFormatError(1, "header must be 'timestamp,hashrate'")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise SeriesFormatError(line, f"expected 2 fields, got {len(row)}")
            try:
                t = _parse_time(row[0])
            except ValueError:
                raise SeriesFormatError(line, f"bad ISO-8601 timestamp {row[0]!r}") from None
            try:
                v = float(row[1])
            except ValueError:
                raise SeriesFormatError(line, f"bad hashrate {row[1]!r}") from None
            if not (math.isfinite(v) and v > 0):
                raise SeriesFormatError(line, "hashrate must be positive")
            if stamps and t <= stamps[-1]:
                raise SeriesFormatError(line, "timestamps must be strictly increasing")
            stamps.append(t)
            vals.append(v)
    if not stamps:
        raise SeriesFormatError(2, "no data rows")
    return HashrateSeries(tuple(stamps), np.array(vals))


def to_real_series(series: HashrateSeries, delta: float) -> HashrateSeries:
    """Deflate by technological progress: ``P_t exp(-delta (t - t0))`` with t in years."""
    if not (math.isfinite(delta) and delta >= 0):
        raise ParameterError("delta", "must be finite and >= 0")
    return HashrateSeries(series.timestamps, series.values * np.exp(-delta * series.years()))
