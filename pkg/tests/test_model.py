import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetspec.model import (MAX_APS, AccessPoint, PatternBudgetError, Rat, Topology, UeGroup,
                           build_efficiency_table, conditional_rates, conservative_rate, dbm_to_watts,
                           enumerate_patterns, interference_psd, members, spectral_efficiency,
                           utilization_rate)
from hetspec.scenario import default_rats, generate_topology


def _topo(ap_xy, ue_xy, lam=1.0, nu=0.0):
    aps = [AccessPoint(f"a{i}", *p) for i, p in enumerate(ap_xy)]
    ues = [UeGroup(f"u{j}", *p, lam, nu) for j, p in enumerate(ue_xy)]
    return Topology(aps, ues, default_rats())


def test_pattern_counts():
    assert len(enumerate_patterns(3)) == 7
    assert enumerate_patterns(1) == [1]
    assert len(enumerate_patterns(5)) == 31
    pats = enumerate_patterns(8)
    assert len(set(pats)) == len(pats) == 255
    assert pats == sorted(pats)


@pytest.mark.parametrize("n", [0, MAX_APS + 1])
def test_pattern_budget(n):
    with pytest.raises(PatternBudgetError, match="budget"):
        enumerate_patterns(n)


def test_rat_validation():
    with pytest.raises(ValueError):
        Rat(0, 0.0, 1.0, True, 1e-9)
    with pytest.raises(ValueError):
        Rat(0, 1e7, 1.5, True, 1e-9)


def test_topology_rejects_bad_groups():
    with pytest.raises(ValueError):
        Topology([AccessPoint("a", 0, 0)], [], default_rats())
    with pytest.raises(ValueError):
        _topo([(0, 0)], [(1, 1)], lam=-1.0)


def test_interference_single_member_is_noise():
    t = _topo([(0, 0), (50, 0)], [(10, 10)])
    assert interference_psd(t, 0, 0b01, 0, 0) == t.noise_psd_w_hz
    with pytest.raises(ValueError):
        interference_psd(t, 0, 0b10, 0, 0)


def test_interference_colocated_pair():
    t = _topo([(0, 0), (0, 0)], [(30, 40)])
    g = t.gains()[1, 0]
    psd = t.rats[0].tx_psd_w_hz
    assert interference_psd(t, 0, 0b11, 0, 0) == pytest.approx(t.noise_psd_w_hz + psd * g, rel=1e-14)


def test_interference_three_aps_term_by_term():
    t = _topo([(0, 0), (40, 0), (0, 80)], [(20, 30)])
    d = [np.hypot(20 - x, 30 - y) for x, y in [(0, 0), (40, 0), (0, 80)]]
    g = [10 ** (-(140.7 + 36.7 * np.log10(v / 1000)) / 10) for v in d]
    p = dbm_to_watts(23.0) / 1e7
    expect = dbm_to_watts(-174.0) + p * g[0] + p * g[2]
    assert interference_psd(t, 1, 0b111, 1, 0) == pytest.approx(expect, rel=1e-12)


def test_efficiency_at_sinr_cap():
    t = _topo([(0, 0)], [(1, 0)])  # 1 m away: far above 30 dB
    s = spectral_efficiency(t, 0, 1, 0, 0)
    assert s == pytest.approx(1e7 / 5e5 * np.log2(1001.0), rel=1e-12)
    assert s == pytest.approx(199.34, abs=5e-3)
    # unlicensed RAT carries the 0.5 discount
    assert spectral_efficiency(t, 1, 1, 0, 0) == pytest.approx(0.5 * s, rel=1e-12)


def test_efficiency_zero_outside_pattern():
    t = _topo([(0, 0), (80, 0)], [(40, 10)])
    assert spectral_efficiency(t, 0, 0b10, 0, 0) == 0.0


def test_table_matches_scalar_function():
    t = generate_topology(5, n_aps=3, k_groups=4)
    tab = build_efficiency_table(t)
    for l, a, i, j in itertools.product(range(2), range(8), range(3), range(4)):
        assert tab.s[l, a, i, j] == pytest.approx(spectral_efficiency(t, l, a, i, j), rel=1e-12, abs=0)


def test_table_shape_single_cell():
    t = _topo([(0, 0)], [(30, 0)])
    tab = build_efficiency_table(t)
    assert tab.s.shape == (2, 2, 1, 1)
    assert np.count_nonzero(tab.s) == 2


def test_table_monotone_random_pairs(rng):
    t = generate_topology(11, n_aps=5, k_groups=15)
    s = build_efficiency_table(t).s
    full = 32
    for _ in range(1000):
        l, i, j = rng.integers(2), rng.integers(5), rng.integers(15)
        a = int(rng.integers(1, full)) | (1 << i)
        b = a | int(rng.integers(0, full))
        assert s[l, a, i, j] >= s[l, b, i, j]
    outside = ((np.arange(full)[:, None] >> np.arange(5)) & 1) == 0
    assert np.all(s[:, outside, :] == 0)


def test_table_is_deterministic():
    t = generate_topology(2)
    a = build_efficiency_table(t).s
    b = build_efficiency_table(generate_topology(2)).s
    assert a.tobytes() == b.tobytes()


def _brute_rate(s, x, l, j, active=None):
    full, n = s.shape[1], s.shape[2]
    total = 0.0
    for a in range(full):
        for i in range(n):
            eff = s[l, a if active is None else a & active, i, j]
            total += eff * x[l, a, i, j]
    return total


def _random_x(rng, m, n, k):
    x = rng.uniform(0, 1, size=(m, 1 << n, n, k))
    member = (np.arange(1 << n)[:, None] >> np.arange(n)) & 1
    return x * member[None, :, :, None]


def test_rates_zero_and_single_term():
    t = _topo([(0, 0)], [(1, 0)])
    tab = build_efficiency_table(t)
    x = np.zeros((2, 2, 1, 1))
    assert conservative_rate(tab, x, 0, 0) == 0.0
    x[0, 1, 0, 0] = 0.5
    assert conservative_rate(tab, x, 0, 0) == pytest.approx(0.5 * tab.s[0, 1, 0, 0])


def test_rates_match_brute_force(rng):
    t = generate_topology(8, n_aps=3, k_groups=4)
    tab = build_efficiency_table(t)
    x = _random_x(rng, 2, 3, 4)
    for l in range(2):
        for j in range(4):
            assert conservative_rate(tab, x, l, j) == pytest.approx(_brute_rate(tab.s, x, l, j), rel=1e-12)
            assert utilization_rate(tab, x, l, j, 0b111) == pytest.approx(conservative_rate(tab, x, l, j))
            for active in range(8):
                assert utilization_rate(tab, x, l, j, active) == pytest.approx(
                    _brute_rate(tab.s, x, l, j, active), rel=1e-12, abs=1e-12)


def test_single_server_rate_dominates():
    t = generate_topology(9, n_aps=3, k_groups=2)
    tab = build_efficiency_table(t)
    x = np.zeros((2, 8, 3, 2))
    x[0, 0b111, 1, 0] = 0.4
    assert utilization_rate(tab, x, 0, 0, 0b010) >= conservative_rate(tab, x, 0, 0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), active=st.integers(0, 15))
def test_rate_dominance_when_servers_active(seed, active):
    rng = np.random.default_rng(seed)
    t = generate_topology(seed, n_aps=4, k_groups=3)
    tab = build_efficiency_table(t)
    x = _random_x(rng, 2, 4, 3) * (rng.uniform(size=(1, 1, 4, 1)) < 0.6)
    for l in range(2):
        for j in range(3):
            servers = 0
            for i in range(4):
                if x[l, :, i, j].sum() > 0:
                    servers |= 1 << i
            if servers & ~active:
                continue
            assert utilization_rate(tab, x, l, j, active) >= conservative_rate(tab, x, l, j) * (1 - 1e-12)


def test_conditional_rates_count_server_as_active(rng):
    t = generate_topology(4, n_aps=3, k_groups=3)
    tab = build_efficiency_table(t)
    x = _random_x(rng, 2, 3, 3)
    r = conditional_rates(tab, x, 0)
    for I in range(8):
        for j in range(3):
            expect = sum(tab.s[0, (a & I) | (1 << i), i, j] * x[0, a, i, j]
                         for a in range(8) for i in members(a))
            assert r[I, j] == pytest.approx(expect, rel=1e-12)
    assert np.allclose(r[7], [conservative_rate(tab, x, 0, j) for j in range(3)])
