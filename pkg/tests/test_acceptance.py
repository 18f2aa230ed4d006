"""Acceptance criteria, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines are printed
past output capture so they show up in a plain run.  Every criterion is
checked at its stated tolerance.  A FAIL line carries the measured numbers.
"""
import time
from functools import lru_cache

import numpy as np
import pytest

from hetspec.baseline import full_reuse_y, orthogonal_y
from hetspec.cli import main
from hetspec.conservative import capacity, solve_p1
from hetspec.model import build_efficiency_table
from hetspec.queueing import (DETERMINISTIC, EXPONENTIAL, ServiceMoments, delay_general, delay_mm1,
                              delay_vacation)
from hetspec.scenario import generate_topology, save_topology
from hetspec.sim import SimConfig, simulate, simulate_queue
from hetspec.allocation import sparsity_check
from hetspec.utilization import UtilizationState, fixed_point_srp, solve_p2, solve_p3

pytestmark = pytest.mark.slow

SWEEP = [5.0 * q for q in range(1, 13)]  # 5:5:60 pkts/s per group
UTIL_SIM = SimConfig(mode="utilization", packets=200_000, seed=0)


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}", flush=True)
        return ok
    return emit


@lru_cache(maxsize=None)
def _p1(seed):
    t = generate_topology(seed)
    tab = build_efficiency_table(t)
    t0 = time.perf_counter()
    alloc, rep = solve_p1(t, tab)
    return t, tab, alloc, rep, time.perf_counter() - t0


@lru_cache(maxsize=None)
def _default():
    t = generate_topology(0)
    return t, build_efficiency_table(t)


def _sweep_point(load):
    """Conservative and utilization allocations at a uniform load, both simulated in utilization mode."""
    t, tab = _default()
    tl = t.with_arrival_rates(load)
    out = {"load": load}
    a1, r1 = solve_p1(tl, tab)
    out["p1"] = r1
    out["sim_c"] = simulate(tl, a1, UTIL_SIM, tab) if r1.feasible else None
    a2, state, r2 = solve_p2(tl, tab)
    out["p2"] = r2
    out["p2_state"] = state
    out["sim_u"] = simulate(tl, a2, UTIL_SIM, tab) if r2.feasible else None
    return out


@pytest.fixture(scope="module")
def uniform_capacity():
    t, tab = _default()
    unit = t.with_arrival_rates(1.0)
    return {"conservative": capacity(unit, tab).scale,
            "full_reuse": capacity(unit, tab, y_fixed=full_reuse_y(t)).scale,
            "orthogonal": capacity(unit, tab, y_fixed=orthogonal_y(t)).scale}


@pytest.fixture(scope="module")
def sweep(uniform_capacity):
    # the 5:5:60 surface plus light points at 10/20/30 % of conservative capacity
    light = [round(f * uniform_capacity["conservative"], 6) for f in (0.1, 0.2, 0.3)]
    points = {}
    for load in sorted(set(SWEEP) | set(light)):
        if load > uniform_capacity["conservative"]:
            points[load] = {"load": load, "p1": None, "p2": None, "sim_c": None, "sim_u": None}
            continue
        points[load] = _sweep_point(load)
    return points


def test_criterion_1_queue_formulas(verdict):
    r = 10.0
    lines, ok = [], True
    slowest = 0.0
    for rho in (0.3, 0.5, 0.7):
        lam = rho * r
        t0 = time.perf_counter()
        mean, ci, n = simulate_queue(r, lam, packets=1_000_000, seed=1)
        slowest = max(slowest, time.perf_counter() - t0)
        err = abs(mean - delay_mm1(r, lam)) / delay_mm1(r, lam)
        ok &= err <= 0.03
        lines.append(f"M/M/1 rho={rho} err={err:.2%}")
        for nu in (0.0025, 0.01):
            if lam * (1 / r + np.sqrt(nu)) >= 0.9:
                continue
            t0 = time.perf_counter()
            mean, ci, n = simulate_queue(r, lam, nu=nu, packets=1_000_000, seed=2, vacation="deterministic")
            slowest = max(slowest, time.perf_counter() - t0)
            ref = delay_vacation(r, lam, nu)
            err = abs(mean - ref) / ref
            ok &= err <= 0.05
            lines.append(f"vacation rho={rho} nu={nu} sim={mean:.4g} formula={ref:.4g} err={err:.1%}")
    ok &= slowest <= 120.0
    verdict(1, ok, "; ".join(lines) + f"; slowest point {slowest:.1f}s")
    assert ok


def test_criterion_2_general_service(verdict):
    r, lam = 10.0, 5.0
    mean, ci, n = simulate_queue(r, lam, packets=1_000_000, seed=3, packet_dist="deterministic",
                                 beta=1.0, eta=1.0)
    formula = delay_general(r, lam, DETERMINISTIC)
    rho = lam / r
    classical = 1 / r + rho / (2 * r * (1 - rho))
    err = abs(mean - formula) / formula
    cross = abs(formula - classical)
    worst = 0.0
    for rr in np.linspace(0.5, 50.0, 40):
        for u in np.linspace(0.01, 0.99, 25):
            ll = u * rr
            worst = max(worst, abs(delay_general(rr, ll, EXPONENTIAL) - delay_mm1(rr, ll)) / delay_mm1(rr, ll))
            for nu in (0.0, 0.0025, 0.01, 1.0):
                ref = delay_vacation(rr, ll, nu)
                worst = max(worst, abs(delay_general(rr, ll, EXPONENTIAL, nu) - ref) / ref)
    ok = err <= 0.05 and cross <= 1e-12 and worst <= 1e-12
    verdict(2, ok, f"M/D/1 sim={mean:.5g} formula={formula:.5g} err={err:.2%}; "
                   f"closed-form gap {cross:.1e}; reduction identities worst rel {worst:.1e}")
    assert ok


def test_criterion_3_p3_reduces_to_p1(verdict):
    t, tab = _default()
    _, _, _, rep1, _ = _p1(0)
    _, rep3 = solve_p3(t, tab, UtilizationState.initial(t))
    rel = abs(rep3.objective - rep1.objective) / rep1.objective
    ok = rel <= 1e-6
    verdict(3, ok, f"P3 {rep3.objective:.10g} vs P1 {rep1.objective:.10g}, rel {rel:.1e}")
    assert ok


def test_criterion_4_monotone_sweeps_and_fixed_point(verdict, sweep):
    bad_sweeps, fp_bad, fp_states, worst_iter = [], [], 0, 0
    for seed in range(20):
        t, tab, alloc, rep, _ = _p1(seed)
        h = rep.history
        if any(b > a + 1e-12 * max(abs(a), 1.0) for a, b in zip(h, h[1:])):
            bad_sweeps.append(seed)
        state = fixed_point_srp(t, tab, alloc, eps=1e-6, max_iter=10_000)
        fp_states += 1
        worst_iter = max(worst_iter, state.iterations)
        if not state.converged:
            fp_bad.append(f"seed {seed}")
    # every state met inside the utilization outer loop on the default scenario
    for load, pt in sweep.items():
        if pt["p2"] is None or pt["p2"].trace is None:
            continue
        tr = pt["p2"].trace
        fp_states += len(tr.fixed_point_converged)
        worst_iter = max([worst_iter] + tr.fixed_point_iterations)
        fp_bad += [f"load {load}" for c in tr.fixed_point_converged if not c]
    ok = not bad_sweeps and not fp_bad
    verdict(4, ok, f"non-monotone P1 seeds {bad_sweeps}; fixed point {fp_states} states, "
                   f"max {worst_iter} iterations, unconverged {fp_bad}")
    assert ok


def test_criterion_5_sparsity(verdict):
    good, failures, slowest = 0, [], 0.0
    for seed in range(50):
        _, _, alloc, rep, took = _p1(seed)
        slowest = max(slowest, took)
        sp = sparsity_check(alloc, tol=1e-5)
        if max(sp.pattern_counts) <= 15 and max(sp.multi_ap_groups) <= 4:
            good += 1
        else:
            failures.append((seed, sp.pattern_counts, sp.multi_ap_groups))
    ok = good >= 0.95 * 50
    verdict(5, ok, f"{good}/50 instances within bounds; failures {failures}; slowest solve {slowest:.0f}s")
    assert ok


def _stable(res):
    return res is not None and np.isfinite(res.network_mean) and res.stable_fraction == 1.0


def test_criterion_6_capacity_and_delay_ordering(verdict, uniform_capacity, sweep):
    cap = uniform_capacity
    cap_ok = cap["full_reuse"] < cap["conservative"] and cap["orthogonal"] < cap["conservative"]
    violations, asserted, overlapping = [], 0, 0
    lightest = None
    for load in SWEEP:
        pt = sweep[load]
        if not (_stable(pt["sim_c"]) and _stable(pt["sim_u"])):
            continue
        u, c = pt["sim_u"], pt["sim_c"]
        if lightest is None:
            lightest = (load, u.network_mean / c.network_mean)
        if u.network_mean - u.network_ci > c.network_mean + c.network_ci:
            violations.append(f"X={load:g}: util {u.network_mean:.4g} > cons {c.network_mean:.4g}")
            asserted += 1
        elif c.network_mean - c.network_ci > u.network_mean + u.network_ci:
            asserted += 1
        else:
            overlapping += 1
    # the ordering has to be shown somewhere: no stable point means nothing was demonstrated
    ok = cap_ok and lightest is not None and not violations
    soft = "no stable point" if lightest is None else (
        f"lightest X={lightest[0]:g} ratio {lightest[1]:.3f} "
        + ("meets 0.8x" if lightest[1] <= 0.8 else "soft check missed" if lightest[1] <= 1.0 else "above 1.0x"))
    verdict(6, ok, f"uniform capacity cons {cap['conservative']:.3f} full-reuse {cap['full_reuse']:.3f} "
                   f"orthogonal {cap['orthogonal']:.3f} pkts/s/group; {asserted} separated points, "
                   f"{overlapping} overlapping, violations {violations}; {soft}")
    assert ok


def test_criterion_7_p2_against_simulation(verdict, uniform_capacity, sweep):
    limit = 0.3 * uniform_capacity["conservative"]
    light, heavy = [], []
    for load in sorted(sweep):
        pt = sweep[load]
        if pt["p2"] is None or not pt["p2"].feasible or pt["sim_u"] is None:
            continue
        sim = pt["sim_u"].network_mean
        gap = abs(pt["p2"].objective - sim) / sim
        (light if load <= limit else heavy).append((load, pt["p2"].objective, sim, gap))
    ok = bool(light) and all(g <= 0.20 for *_, g in light)
    def fmt(rows):
        return ", ".join(f"X={x:g} P2={a:.4g} sim={s:.4g} gap={g:.0%}" for x, a, s, g in rows)
    verdict(7, ok, f"loads <= {limit:.3g}: {fmt(light) or 'none'}; higher loads (reported): {fmt(heavy)}")
    assert ok


def _second_differences(func, r, lam, hr, hl):
    f0 = func(r, lam)
    d_r = (func(r + hr, lam) - 2 * f0 + func(r - hr, lam)) / hr ** 2
    d_l = (func(r, lam + hl) - 2 * f0 + func(r, lam - hl)) / hl ** 2
    return d_r, d_l


def test_criterion_8_convexity(verdict):
    general = ServiceMoments(1.5, 3.0)
    cases = {
        "M/M/1": (lambda r, l: l * delay_mm1(r, l), 1.0, True),
        "vacation": (lambda r, l: l * delay_vacation(r, l, 0.01), 1.0, True),
        "M/D/1": (lambda r, l: l * delay_general(r, l, DETERMINISTIC), 1.0, False),
        "M/G/1 vacation": (lambda r, l: l * delay_general(r, l, general, 0.01), general.beta, False),
    }
    worst = {}
    for name, (func, beta, joint) in cases.items():
        low = np.inf
        for r in np.linspace(1.0, 50.0, 20):
            for u in np.linspace(0.02, 0.95, 20):
                lam = u * r / beta
                # steps stay inside the stable region
                hr = 1e-3 * r
                hl = 1e-3 * min(lam, r / beta - lam)
                d_r, d_l = _second_differences(func, r, lam, hr, hl)
                low = min(low, d_r, d_l)
                if joint:
                    for sgn in (1.0, -1.0):
                        g = lambda s: func(r + s * hr, lam + sgn * s * hl)
                        low = min(low, (g(1) - 2 * g(0) + g(-1)) / (hr ** 2 + hl ** 2))
        worst[name] = low
    ok = all(v >= -1e-7 for v in worst.values())
    verdict(8, ok, "min second difference " + ", ".join(f"{k} {v:.3g}" for k, v in worst.items()))
    assert ok


def test_criterion_9_determinism(verdict, tmp_path):
    scn = tmp_path / "scenario.json"
    save_topology(generate_topology(5, n_aps=3, k_groups=5), scn)
    args = ["run", "--scenario", str(scn), "--scheme", "all", "--simulate", "--packets", "20000",
            "--sweep", "1:1:2"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    differ = [f for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    ok = not differ and "sweep.csv" in files and "simulation.csv" in files
    verdict(9, ok, f"{len(files)} output files compared, differing: {differ}")
    assert ok
