import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetspec.allocation import Allocation
from hetspec.conservative import solve_p1
from hetspec.model import AccessPoint, Topology, UeGroup, build_efficiency_table
from hetspec.queueing import ServiceMoments
from hetspec.scenario import default_rats, generate_topology
from hetspec.sim import SimConfig, _packet_work, empirical_utilization, lindley, simulate, simulate_queue


def _lindley_loop(a, s, v):
    start, dep = np.empty_like(a), np.empty_like(a)
    free = -np.inf
    for idx in range(a.size):
        start[idx] = max(a[idx], free)
        dep[idx] = start[idx] + s[idx]
        free = dep[idx] + v[idx]
    return start, dep


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 31), size=st.integers(1, 60), vac=st.floats(0.0, 0.5))
def test_lindley_matches_loop(seed, size, vac):
    rng = np.random.default_rng(seed)
    a = np.cumsum(rng.exponential(0.3, size))
    s = rng.exponential(0.25, size)
    v = np.full(size, vac)
    start, dep = lindley(a, s, v)
    s2, d2 = _lindley_loop(a, s, v)
    assert np.allclose(start, s2, rtol=0, atol=1e-9)
    assert np.allclose(dep, d2, rtol=0, atol=1e-9)
    assert np.all(start >= a)


def test_lindley_empty():
    s, d = lindley(np.array([]), np.array([]), np.array([]))
    assert s.size == 0 and d.size == 0


def _vacation_pk(r, lam, vac, es2_x):
    """Exact mean sojourn with a deterministic vacation after every packet: M/G/1 on S = X + V."""
    ex = 1.0 / r
    es = ex + vac
    es2 = es2_x + 2 * ex * vac + vac * vac
    return lam * es2 / (2 * (1 - lam * es)) + ex


@pytest.mark.parametrize("rho", [0.3, 0.7])
def test_mm1_mean_sojourn(rho):
    r = 10.0
    mean, ci, cnt = simulate_queue(r, rho * r, packets=300_000, seed=7)
    assert cnt > 250_000
    assert mean == pytest.approx(1.0 / (r - rho * r), rel=0.03)
    assert 0 < ci < 0.05 * mean


def test_md1_mean_sojourn():
    r, lam = 4.0, 2.0
    mean, _, _ = simulate_queue(r, lam, packets=300_000, seed=3, packet_dist="deterministic")
    assert mean == pytest.approx(1 / r + 0.5 / (2 * r * 0.5), rel=0.02)


@pytest.mark.parametrize("nu", [0.0025, 0.01])
def test_vacation_queue_matches_effective_service_oracle(nu):
    r, lam = 10.0, 3.0
    vac = np.sqrt(nu)
    mean, _, _ = simulate_queue(r, lam, nu, packets=300_000, seed=11)
    assert mean == pytest.approx(_vacation_pk(r, lam, vac, 2 / r ** 2), rel=0.03)


def test_gamma_work_matches_moments():
    rng = np.random.default_rng(0)
    w = _packet_work(rng, 400_000, "matched", 1.0, 1.5)
    assert w.mean() == pytest.approx(1.0, rel=0.01)
    assert (w ** 2).mean() == pytest.approx(1.5, rel=0.02)
    assert np.all(_packet_work(rng, 10, "matched", 2.0, 4.0) == 2.0)


def test_empty_queue():
    mean, ci, cnt = simulate_queue(10.0, 0.0)
    assert cnt == 0 and np.isnan(mean)


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(mode="optimistic")
    with pytest.raises(ValueError):
        SimConfig(batches=1)
    with pytest.raises(ValueError):
        SimConfig(engine="fast")


def test_simulate_is_deterministic(small, small_table, small_p1):
    alloc, _ = small_p1
    cfg = SimConfig(mode="utilization", packets=20_000, seed=5)
    a = simulate(small, alloc, cfg, small_table)
    b = simulate(small, alloc, cfg, small_table)
    assert a.mean_sojourn.tobytes() == b.mean_sojourn.tobytes()
    assert a.ap_busy.tobytes() == b.ap_busy.tobytes()
    c = simulate(small, alloc, SimConfig(mode="utilization", packets=20_000, seed=6), small_table)
    assert c.mean_sojourn.tobytes() != a.mean_sojourn.tobytes()


def test_event_engine_agrees_with_lindley(small, small_table, small_p1):
    alloc, _ = small_p1
    a = simulate(small, alloc, SimConfig(packets=20_000, seed=2), small_table)
    b = simulate(small, alloc, SimConfig(packets=20_000, seed=2, engine="events"), small_table)
    used = a.arrival_rate > 0
    assert np.allclose(a.mean_sojourn[used], b.mean_sojourn[used], rtol=1e-9, equal_nan=True)
    assert np.array_equal(a.count, b.count)


def test_littles_law(small, small_table, small_p1):
    alloc, _ = small_p1
    res = simulate(small, alloc, SimConfig(packets=200_000, seed=1), small_table)
    used = res.count > 1000
    lhs = res.mean_in_system[used]
    rhs = res.arrival_rate[used] * res.mean_sojourn[used]
    assert np.allclose(lhs, rhs, rtol=0.05)


def test_conservative_sim_matches_analytic(small, small_table, small_p1):
    alloc, rep = small_p1
    res = simulate(small, alloc, SimConfig(packets=400_000, seed=4), small_table)
    assert res.stable_fraction == 1.0
    assert res.network_mean == pytest.approx(rep.objective, rel=0.05)


def _single_ap(lams, nu=0.0):
    aps = [AccessPoint("a", 0.0, 0.0)]
    ues = [UeGroup(f"u{j}", 15.0 + 20 * j, 5.0, lam, nu) for j, lam in enumerate(lams)]
    return Topology(aps, ues, default_rats())


def test_single_ap_modes_coincide():
    t = _single_ap([5.0, 9.0], nu=0.01)
    tab = build_efficiency_table(t)
    alloc, _ = solve_p1(t, tab)
    a = simulate(t, alloc, SimConfig(mode="conservative", packets=20_000, seed=3), tab)
    b = simulate(t, alloc, SimConfig(mode="utilization", packets=20_000, seed=3), tab)
    used = a.arrival_rate > 0
    assert np.allclose(a.mean_sojourn[used], b.mean_sojourn[used], rtol=1e-9, equal_nan=True)


def test_saturated_queue_is_flagged():
    t = _single_ap([5.0])
    tab = build_efficiency_table(t)
    x = np.zeros((2, 2, 1, 1))
    x[0, 1, 0, 0] = 4.0 / tab.s[0, 1, 0, 0]  # rate 4 < lambda 5
    alloc = Allocation(np.array([[0.0, 1.0], [0.0, 1.0]]), x, np.array([[5.0], [0.0]]))
    res = simulate(t, alloc, SimConfig(packets=20_000), tab)
    assert not res.stable[0, 0]
    assert res.stable_fraction == 0.0
    assert empirical_utilization(res)[0, 0] > 0.99


def test_zero_capacity_queue_is_dead():
    t = _single_ap([5.0])
    tab = build_efficiency_table(t)
    alloc = Allocation(np.array([[0.0, 1.0], [0.0, 1.0]]), np.zeros((2, 2, 1, 1)), np.array([[5.0], [0.0]]))
    res = simulate(t, alloc, SimConfig(packets=1000), tab)
    assert not res.stable[0, 0] and np.isinf(res.network_mean)


def test_zero_load_gives_empty_result():
    t = _single_ap([0.0])
    tab = build_efficiency_table(t)
    alloc, _ = solve_p1(t, tab)
    res = simulate(t, alloc, SimConfig(packets=1000), tab)
    assert res.count.sum() == 0 and res.rows() == [] and res.stable_fraction == 1.0


def test_invalid_allocation_rejected(small, small_table, small_p1):
    alloc = small_p1[0].copy()
    alloc.y[0, 1] += 0.5
    with pytest.raises(ValueError, match="invalid allocation"):
        simulate(small, alloc, SimConfig(packets=100), small_table)


def test_utilization_mode_faster_than_always_on(small, small_table, small_p1):
    # fewer active interferers can only raise rates, so sojourn cannot grow on average
    alloc, _ = small_p1
    a = simulate(small, alloc, SimConfig(mode="conservative", packets=100_000, seed=9), small_table)
    b = simulate(small, alloc, SimConfig(mode="utilization", packets=100_000, seed=9), small_table)
    assert b.network_mean <= a.network_mean * 1.02


def test_result_rows_and_dict(small, small_table, small_p1):
    alloc, _ = small_p1
    res = simulate(small, alloc, SimConfig(packets=5_000), small_table)
    rows = res.rows()
    assert len(rows) == int((alloc.lambda_split > 0).sum())
    assert set(rows[0]) == {"ue_group", "rat", "arrivals", "mean_sojourn_s", "ci_s", "mean_service_s", "stable"}
    d = res.to_dict()
    assert d["mode"] == "conservative" and d["config"]["packets"] == 5_000


def test_deterministic_packets_follow_topology_moments():
    t = Topology(_single_ap([3.0]).aps, _single_ap([3.0]).ue_groups, default_rats(),
                 moments=ServiceMoments(1.0, 1.0))
    tab = build_efficiency_table(t)
    alloc, _ = solve_p1(t, tab)
    res = simulate(t, alloc, SimConfig(packets=2_000), tab)
    used = res.count > 0
    rates = np.einsum("laik,laik->lk", tab.s, alloc.x)
    assert np.allclose(res.mean_service[used], 1.0 / rates[used], rtol=1e-9)
