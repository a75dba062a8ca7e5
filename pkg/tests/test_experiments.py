import math
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from powmfg.core import ModelParams, ParameterError, SolverError
from powmfg.det1d import stationary_state_closed_form
from powmfg.experiments import (
    DEFAULT_DELTAS,
    DEFAULT_LAMBDAS,
    SeriesFormatError,
    argmax_profit_delta,
    load_hashrate_csv,
    pde_cross_check,
    sweep_delta,
    sweep_lambda,
    to_real_series,
    total_profit,
)

WIDE = (0.001, 2.0)


def strictly(seq, up):
    d = np.diff(seq)
    return bool(np.all(d > 0)) if up else bool(np.all(d < 0))


def test_default_ranges():
    assert DEFAULT_LAMBDAS.size == 41 and DEFAULT_LAMBDAS[0] == pytest.approx(0.1) and DEFAULT_LAMBDAS[-1] == pytest.approx(10)
    assert DEFAULT_DELTAS.size == 40 and DEFAULT_DELTAS[0] == 0.05 and DEFAULT_DELTAS[-1] == 2.0


def test_lambda_sweep_directions(baseline):
    s = sweep_lambda(baseline)
    assert strictly(s.k_star, up=True)
    assert strictly(s.u_star, up=False)
    assert strictly(s.pi_star, up=False)


def test_delta_sweep_directions(baseline):
    s = sweep_delta(baseline)
    assert strictly(s.k_star, up=False)
    assert strictly(s.u_star, up=True)


def test_sweep_rows_satisfy_identities(baseline):
    for s in (sweep_lambda(baseline), sweep_delta(baseline)):
        for v, r in zip(s.values, s.reports):
            q = baseline.replace(**{"lam" if s.param == "lambda" else "delta": float(v)})
            assert r.pi_star == pytest.approx(q.delta * r.k_star**2 / q.lam, rel=1e-12)
            assert r.u_star == pytest.approx((1 / (r.k_star + q.eps) - q.c) / (q.r + q.delta), rel=1e-12)
            assert r.k_star == stationary_state_closed_form(q)


def test_parallel_sweep_matches_serial(baseline):
    a = sweep_delta(baseline, jobs=1)
    b = sweep_delta(baseline, jobs=4)
    assert list(a.rows()) == list(b.rows())


def test_sweep_rejects_unsorted_or_nonpositive(baseline):
    with pytest.raises(ParameterError):
        sweep_lambda(baseline, [1.0, 0.5])
    with pytest.raises(ParameterError):
        sweep_delta(baseline, [0.0, 0.5])


def test_pde_cross_check_agrees(baseline):
    s = sweep_lambda(baseline, np.logspace(-1, 1, 11))
    assert pde_cross_check(baseline, s, points=4) <= 1e-4


def test_baseline_profit_is_decreasing_on_default_range(baseline):
    pi = sweep_delta(baseline).pi_star
    assert strictly(pi, up=False)
    with pytest.raises(SolverError):
        argmax_profit_delta(baseline)


def test_argmax_on_wide_bracket_is_a_maximizer(baseline):
    d = argmax_profit_delta(baseline, WIDE)
    best = total_profit(baseline, d)
    probes = np.linspace(*WIDE, 100)
    assert all(best >= total_profit(baseline, x) - 1e-12 for x in probes)
    # first-order condition
    step = 1e-5
    assert total_profit(baseline, d - step) <= best and total_profit(baseline, d + step) <= best


def test_argmax_moves_continuously_with_lambda(baseline):
    d0 = argmax_profit_delta(baseline, WIDE)
    for f in (0.9, 1.1):
        d = argmax_profit_delta(baseline.replace(lam=baseline.lam * f), WIDE)
        assert abs(d - d0) < 0.1 * (WIDE[1] - WIDE[0])


def test_interior_maximum_exists_for_costlier_mining():
    p = ModelParams(c=0.5)
    d = argmax_profit_delta(p)
    assert 0.05 < d < 2.0
    probes = np.linspace(0.05, 2.0, 100)
    best = total_profit(p, d)
    assert all(best >= total_profit(p, x) - 1e-12 for x in probes)


def test_bad_bracket(baseline):
    with pytest.raises(ParameterError):
        argmax_profit_delta(baseline, (1.0, 0.5))


# --- hashrate series ---------------------------------------------------------------


def write(tmp_path, text, name="h.csv"):
    f = tmp_path / name
    f.write_text(text)
    return f


def test_two_row_file(tmp_path):
    f = write(tmp_path, "timestamp,hashrate\n2020-01-01T00:00:00Z,100\n2021-01-01T00:00:00Z,150\n")
    s = load_hashrate_csv(f)
    assert len(s) == 2
    assert s.timestamps[0].tzinfo is not None
    assert s.years()[1] == pytest.approx(366 / 365.25)


def test_zero_delta_keeps_series(tmp_path):
    f = write(tmp_path, "timestamp,hashrate\n2020-01-01,1e18\n2020-06-01,2e18\n")
    s = load_hashrate_csv(f)
    assert np.array_equal(to_real_series(s, 0.0).values, s.values)


def test_exponential_series_deflates_to_constant(tmp_path):
    delta = 0.7
    t0 = datetime(2015, 1, 1, tzinfo=timezone.utc)
    lines = ["timestamp,hashrate"]
    for k in range(30):
        t = t0 + timedelta(days=45 * k)
        y = (t - t0).total_seconds() / (365.25 * 86400)
        lines.append(f"{t.isoformat()},{repr(3e15 * math.exp(delta * y))}")
    s = load_hashrate_csv(write(tmp_path, "\n".join(lines) + "\n"))
    real = to_real_series(s, delta).values
    assert np.allclose(real, 3e15, rtol=1e-12, atol=0)


@pytest.mark.parametrize(
    "body,line",
    [
        ("time,hashrate\n2020-01-01,1\n", 1),
        ("timestamp,hashrate\n2020-01-01,1\nnot-a-date,2\n", 3),
        ("timestamp,hashrate\n2020-01-01,1\n2020-01-02,abc\n", 3),
        ("timestamp,hashrate\n2020-01-01,1\n2020-01-02,-5\n", 3),
        ("timestamp,hashrate\n2020-01-02,1\n2020-01-01,2\n", 3),
        ("timestamp,hashrate\n2020-01-01,1,7\n", 2),
        ("timestamp,hashrate\n", 2),
    ],
)
def test_malformed_files_report_line(tmp_path, body, line):
    with pytest.raises(SeriesFormatError) as ei:
        load_hashrate_csv(write(tmp_path, body))
    assert ei.value.line == line
    assert f"line {line}" in str(ei.value)


def test_negative_delta_rejected(tmp_path):
    s = load_hashrate_csv(write(tmp_path, "timestamp,hashrate\n2020-01-01,1\n"))
    with pytest.raises(ParameterError):
        to_real_series(s, -0.1)
