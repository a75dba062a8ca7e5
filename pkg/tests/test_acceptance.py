"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` (the lines are repeated in the
terminal summary) or ``python tests/test_acceptance.py``.
"""

import json
import math
import time

import numpy as np
import pytest

from powmfg.cli import main as cli_main
from powmfg.common_noise import (
    PriceProcess,
    default_grids,
    drift_sign_violations,
    simulate_sde,
    solve_master_2d,
    target_curve,
)
from powmfg.core import Grid1D, ModelParams
from powmfg.det1d import (
    default_grid,
    numerical_stationary_state,
    simulate_trajectory,
    solve_master_1d,
    stationary_report,
    stationary_state_closed_form,
    value_oracle,
)
from powmfg.experiments import argmax_profit_delta, sweep_delta, sweep_lambda
from powmfg.obstacle import convergence_study, simulate_obstacle_trajectory, solve_penalized
from powmfg.potential import potential_check, solve_hjb
from powmfg.two_pop import (
    Grid2D,
    TwoPopParams,
    monotone_coupling_violation,
    solve_2pop_noise,
    solve_system,
    stationary_state_2pop,
)

try:
    from conftest import root_oracle
except ImportError:  # direct execution from the repository root
    from tests.conftest import root_oracle

BASE = ModelParams()
RESULTS: dict[int, str] = {}


def record(n: int, ok: bool, detail: str):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def elapsed(fn):
    t = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t


# 1 -------------------------------------------------------------------------------


def test_criterion_01_closed_form_stationary_state():
    stationary_report(BASE)  # warm-up
    times = []
    for _ in range(50):
        rep, dt = elapsed(lambda: stationary_report(BASE))
        times.append(dt)
    runtime = float(np.median(times))
    ok = (
        abs(rep.k_star - 4.2766) <= 1e-3
        and abs(rep.u_star - 0.85532) <= 1e-3
        and abs(rep.pi_star - 3.6578) <= 1e-3
        and runtime < 1e-3
    )
    record(1, ok, f"K*={rep.k_star:.6f} U*={rep.u_star:.6f} Pi*={rep.pi_star:.6f} in {runtime * 1e6:.1f} us")


# 2 -------------------------------------------------------------------------------

MIN_CELLS = 40  # the first-order root error scales like h^2 / K*


def random_draws(count=20, seed=2024):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        p = ModelParams(
            r=rng.uniform(0.01, 0.1),
            delta=rng.uniform(0.05, 1.0),
            lam=math.exp(rng.uniform(math.log(0.2), math.log(5.0))),
            c=math.exp(rng.uniform(math.log(0.005), math.log(0.1))),
            eps=rng.uniform(0.0, 0.5),
        )
        if stationary_state_closed_form(p) >= MIN_CELLS * default_grid(p, 4000).h:
            out.append(p)
    return out


def test_criterion_02_pde_matches_closed_form():
    draws = random_draws()

    def run():
        worst = 0.0
        for p in draws:
            u = solve_master_1d(p, default_grid(p, 4000))
            k = numerical_stationary_state(u, p)
            worst = max(worst, abs(k - stationary_state_closed_form(p)) / stationary_state_closed_form(p))
        return worst

    worst, runtime = elapsed(run)
    record(2, worst <= 1e-4 and runtime < 5.0, f"20 draws, max relative gap {worst:.2e} in {runtime:.2f} s")


# 3 -------------------------------------------------------------------------------


def test_criterion_03_oracle_equivalence():
    k_star = root_oracle(BASE)

    def run():
        u = solve_master_1d(BASE, Grid1D(default_grid(BASE).k_max, 40001))
        return max(abs(u.at(k) - value_oracle(BASE, u, k, 100.0)) for k in (1.0, k_star, 10.0))

    gap, runtime = elapsed(run)
    record(3, gap <= 1e-3 and runtime < 1.0, f"max |U - oracle| = {gap:.2e} at K in {{1, K*, 10}} in {runtime:.2f} s")


# 4 -------------------------------------------------------------------------------


def test_criterion_04_monotonicity_suite():
    slices = []
    u1 = solve_master_1d(BASE)
    slices.append(u1.values)
    for p in random_draws(5, seed=7):
        slices.append(solve_master_1d(p).values)
    _, sols, obst = convergence_study(BASE, [1.0, 1e-2, 1e-4, 1e-6], default_grid(BASE))
    slices += [s.values for s in sols] + [obst.u.values]
    pp = PriceProcess.ornstein_uhlenbeck(kappa=0.5, mean=0.0, nu=0.05, reward_kind="exponential-capped")
    u2 = solve_master_2d(BASE, pp, default_grids(BASE, pp, nK=751, nP=41))
    slices += [u2.values[:, j] for j in range(u2.gridP.n)]
    bad_1d = sum(int(np.any(np.diff(s) > 0)) for s in slices)

    pairs = [solve_system(TwoPopParams()), solve_system(TwoPopParams(c2=0.02))]
    noise, _ = solve_2pop_noise(TwoPopParams(), pp, Grid2D(75.0, 31), nP=5)
    pairs += [noise.slice(j) for j in range(5)]
    bad_pair = sum(int(not uv.is_monotone()) for uv in pairs)
    coupling = max(monotone_coupling_violation(uv, 10_000, seed=s) for s, uv in enumerate(pairs))
    ok = bad_1d == 0 and bad_pair == 0 and coupling <= 0.0
    record(
        4,
        ok,
        f"{len(slices)} K-slices ({bad_1d} bad), {len(pairs)} pair solutions ({bad_pair} bad), "
        f"max coupling form {coupling:.2e} on 1e4 pairs each",
    )


# 5 -------------------------------------------------------------------------------


def test_criterion_05_trajectory_convergence():
    u = solve_master_1d(BASE)
    k_star = stationary_state_closed_form(BASE)
    gaps = []
    for k0 in (0.0, 2.0 * k_star):
        path = simulate_trajectory(BASE, u, k0, 250.0)
        gaps.append(abs(path.K[-1] - k_star))
    record(5, max(gaps) <= 1e-3, f"|K_T - K*| = {gaps[0]:.2e} (k0=0), {gaps[1]:.2e} (k0=2K*) at T=250")


# 6 -------------------------------------------------------------------------------


def test_criterion_06_common_noise_degeneracy():
    ident = PriceProcess.ornstein_uhlenbeck(kappa=1.0, mean=0.5, nu=0.1)
    gK, gP = default_grids(BASE, ident)
    u2 = solve_master_2d(BASE, ident, (gK, gP))
    u1 = solve_master_1d(BASE, gK)
    gap = float(np.max(np.abs(u2.values - u1.values[:, None])))

    capped = PriceProcess.ornstein_uhlenbeck(kappa=1.0, mean=0.5, nu=0.1, reward_kind="exponential-capped")
    v = solve_master_2d(BASE, capped)
    curve = target_curve(v, BASE)
    path = simulate_sde(BASE, capped, v, 0.0, 0.5, 10.0, dt=1e-3, seed=12345)
    bad = drift_sign_violations(path, curve, v.gridK.h)
    steps = len(path) - 1
    ok = gap <= 1e-4 and bad == 0 and steps >= 10_000
    record(6, ok, f"sup |U2D - U1D| = {gap:.2e} over {gP.n} slices; {bad} drift-sign violations in {steps} steps")


# 7 -------------------------------------------------------------------------------


def test_criterion_07_two_population_equilibria():
    grid = Grid2D(60.0, 481)
    asym = TwoPopParams()
    x0, y0 = stationary_state_2pop(asym, solve_system(asym, grid))
    sym = TwoPopParams(c2=0.02)
    xs, ys = stationary_state_2pop(sym, solve_system(sym, grid))
    ok = (
        abs(x0 - 4.2766) <= 1e-3
        and abs(y0) <= 1e-3
        and abs(xs - 2.9686) <= 1e-3
        and abs(ys - 2.9686) <= 1e-3
    )
    record(7, ok, f"asymmetric ({x0:.5f}, {y0:.1e}); symmetric ({xs:.5f}, {ys:.5f})")


# 8 -------------------------------------------------------------------------------


def test_criterion_08_obstacle_limit():
    g = default_grid(BASE)
    etas = [1e-2, 1e-4, 1e-6]
    rows, _, obst = convergence_study(BASE, etas, g)
    contact_ok = abs(obst.k_star - 50.0) <= g.h
    rel = max(abs(r.k_star_eta - root_oracle(BASE.replace(lam=1 / r.eta))) / r.k_star_eta for r in rows)
    ks = [r.k_star_eta for r in rows]
    approach = all(a < b < 50.0 for a, b in zip(ks, ks[1:])) and ks[-1] < 50.0
    dt = 0.01
    up = simulate_obstacle_trajectory(BASE, obst, 10.0, 10.0, dt)
    flat = bool(np.all(up.K[up.times > 0] == obst.k_star)) and up.K[0] == 10.0
    down = simulate_obstacle_trajectory(BASE, obst, 100.0, 10.0, dt)
    hit = float(down.times[np.argmax(down.K <= obst.k_star)])
    hit_ok = abs(hit - math.log(2.0) / 0.2) <= dt
    ok = contact_ok and rel <= 1e-10 and approach and flat and hit_ok
    record(
        8,
        ok,
        f"contact {obst.k_star:.4f} (h={g.h:.4f}); eta states {[round(k, 4) for k in ks]}, "
        f"rel gap {rel:.1e}; k0=10 flat={flat}; k0=100 hits 50 at t={hit:.3f}",
    )


# 9 -------------------------------------------------------------------------------


def test_criterion_09_potential_check():
    p = ModelParams(eps=1e-3)
    g = default_grid(p, 4000)
    fine = Grid1D(g.k_max, 2 * (g.n - 1) + 1)
    gaps = [potential_check(solve_hjb(p, gg), solve_master_1d(p, gg)) for gg in (g, fine)]
    ratio = gaps[1] / gaps[0]
    ok = gaps[0] <= 5 * g.h and 0.4 <= ratio <= 0.6
    record(9, ok, f"sup |Phi' - U| = {gaps[0]:.3e} vs 5h = {5 * g.h:.3e}; doubling ratio {ratio:.3f}")


# 10 ------------------------------------------------------------------------------


def test_criterion_10_comparative_statics():
    sl = sweep_lambda(BASE)
    sd = sweep_delta(BASE)
    inc = lambda a: bool(np.all(np.diff(a) > 0))
    dec = lambda a: bool(np.all(np.diff(a) < 0))
    directions = inc(sl.k_star) and dec(sl.u_star) and dec(sl.pi_star) and dec(sd.k_star) and inc(sd.u_star)
    pi = sd.pi_star
    peak = int(np.argmax(pi))
    unimodal = 0 < peak < pi.size - 1 and inc(pi[: peak + 1]) and dec(pi[peak:])
    try:
        d_star = argmax_profit_delta(BASE)
        where = f"maximizer {d_star:.4f}"
        in_range = 0.4 <= d_star <= 0.8
    except Exception as e:  # no interior maximum is a failure of the criterion, not a crash
        where = f"maximizer search: {e}"
        in_range = False
    ok = directions and unimodal and in_range
    record(
        10,
        ok,
        f"directions {'hold' if directions else 'broken'}; Pi*(delta) peak index {peak} of {pi.size} "
        f"(unimodal={unimodal}); {where}",
    )


# 11 ------------------------------------------------------------------------------

CLI_RUNS = {
    "stationary": [],
    "solve1d": [],
    "trajectory": [],
    "noise": ["--set", "noise.nK=301", "--set", "noise.nP=21", "--seed", "99"],
    "twopop": ["--set", "twopop.n=61"],
    "obstacle": [],
    "sweep": ["--jobs", "4"],
}


def _files(out):
    res = {}
    for f in sorted(out.iterdir()):
        if f.name == "manifest.json":  # wall time is the only non-deterministic field
            m = json.loads(f.read_text())
            m.pop("wall_time")
            res[f.name] = json.dumps(m, sort_keys=True).encode()
        else:
            res[f.name] = f.read_bytes()
    return res


def test_criterion_11_determinism(tmp_path):
    mismatched = []
    for name, extra in CLI_RUNS.items():
        snaps = []
        for rep in ("a", "b"):
            out = tmp_path / rep / name
            assert cli_main([name, "--out", str(out), *extra]) == 0
            snaps.append(_files(out))
        if snaps[0] != snaps[1]:
            mismatched.append(name)
    record(11, not mismatched, f"{len(CLI_RUNS)} subcommands run twice; mismatches: {mismatched or 'none'}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s"]))
