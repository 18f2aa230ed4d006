"""Packet-level simulation of an allocation under Poisson traffic.

Every (RAT, group) pair is a FIFO queue.  In conservative mode each queue
drains at its always-on-interference rate, so queues are independent and a
Lindley recursion gives exact event times.  In utilization mode the drain
rate follows the set of APs currently transmitting on that RAT, and an event
engine tracks it with remaining work carried across rate changes.  Servers on
a RAT with vacations pause once after every packet.
"""
from __future__ import annotations

import heapq
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from .allocation import Allocation
from .model import EfficiencyTable, Topology, build_efficiency_table, conditional_rates

log = logging.getLogger(__name__)

MODES = ("conservative", "utilization")
PACKET_DISTS = ("exponential", "deterministic", "matched")
VACATION_DISTS = ("deterministic", "exponential")

# Event kinds, in tie-breaking order.
DEPART, VACATION_END, ARRIVAL = 0, 1, 2


@dataclass(frozen=True)
class SimConfig:
    mode: str = "conservative"
    packets: Optional[int] = 200_000  # expected arrivals over the horizon, all queues together
    duration_s: Optional[float] = None  # overrides ``packets`` when set
    warmup: float = 0.1  # fraction of the horizon discarded
    seed: int = 0
    packet_dist: Optional[str] = None  # None follows the topology's service moments
    vacation: str = "deterministic"
    batches: int = 20
    engine: str = "auto"  # "events" forces the event engine in conservative mode too
    serve_tol: float = 1e-4  # AP counts as serving a queue above this share of its rate
    drain: float = 1.0  # event engine: extra horizon fraction to let measured packets finish

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.warmup <= 0.5:
            raise ValueError("warmup fraction must lie in [0, 0.5]")
        if self.packet_dist is not None and self.packet_dist not in PACKET_DISTS:
            raise ValueError(f"packet_dist must be one of {PACKET_DISTS}")
        if self.vacation not in VACATION_DISTS:
            raise ValueError(f"vacation must be one of {VACATION_DISTS}")
        if self.duration_s is None and (self.packets is None or self.packets < 0):
            raise ValueError("need a packet budget or a duration")
        if self.duration_s is not None and self.duration_s <= 0:
            raise ValueError("duration must be positive")
        if self.batches < 2:
            raise ValueError("need at least two batches")
        if self.engine not in ("auto", "events"):
            raise ValueError("engine must be 'auto' or 'events'")


@dataclass
class SimResult:
    mode: str
    horizon_s: float
    warmup_s: float
    count: np.ndarray  # (m, k) measured packets
    mean_sojourn: np.ndarray  # (m, k) s, nan without packets
    ci: np.ndarray  # (m, k) 95% half-width of the sojourn mean, s
    mean_service: np.ndarray  # (m, k) transmission time, s
    mean_in_system: np.ndarray  # (m, k) time-average packets in the queue
    stable: np.ndarray  # (m, k) bool
    arrival_rate: np.ndarray  # (m, k) offered packets/s
    network_mean: float
    network_ci: float
    ap_busy: np.ndarray  # (m, n) fraction of time each AP had a queue in service
    config: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        m, k = self.count.shape
        for j in range(k):
            for l in range(m):
                if self.arrival_rate[l, j] <= 0:
                    continue
                out.append({
                    "ue_group": j,
                    "rat": l,
                    "arrivals": int(self.count[l, j]),
                    "mean_sojourn_s": float(self.mean_sojourn[l, j]),
                    "ci_s": float(self.ci[l, j]),
                    "mean_service_s": float(self.mean_service[l, j]),
                    "stable": bool(self.stable[l, j]),
                })
        return out

    @property
    def stable_fraction(self) -> float:
        used = self.arrival_rate > 0
        return float(self.stable[used].mean()) if used.any() else 1.0

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "horizon_s": self.horizon_s,
            "warmup_s": self.warmup_s,
            "network_mean_sojourn_s": self.network_mean,
            "network_ci_s": self.network_ci,
            "ap_busy_fraction": self.ap_busy.tolist(),
            "queues": self.rows(),
            "config": self.config,
        }


def empirical_utilization(result: SimResult) -> np.ndarray:
    """Per-RAT, per-AP fraction of measured time with at least one served queue in service."""
    return result.ap_busy.copy()


# ---------------------------------------------------------------- random streams

def _streams(seed: int, l: int, j: int):
    arr, work, vac = np.random.SeedSequence([seed, l, j]).spawn(3)
    return np.random.default_rng(arr), np.random.default_rng(work), np.random.default_rng(vac)


def _arrival_times(rng, lam: float, until: float) -> np.ndarray:
    chunks, t = [], 0.0
    size = int(lam * until + 6.0 * np.sqrt(lam * until) + 16)
    while t <= until:
        a = t + np.cumsum(rng.exponential(1.0 / lam, size))
        chunks.append(a)
        t = a[-1]
    a = np.concatenate(chunks)
    return a[a < until]


def _packet_work(rng, count: int, dist: str, beta: float, eta: float) -> np.ndarray:
    """Service requirement in units of mean-packet transmissions at rate 1."""
    if dist == "deterministic":
        return np.full(count, beta)
    if dist == "exponential":
        return rng.exponential(beta, count)
    var = eta - beta * beta
    if var <= 1e-15 * beta * beta:
        return np.full(count, beta)
    if abs(var - beta * beta) <= 1e-12 * beta * beta:
        return rng.exponential(beta, count)
    return rng.gamma(beta * beta / var, var / beta, count)


def _vacations(rng, count: int, nu: float, dist: str) -> np.ndarray:
    if nu <= 0:
        return np.zeros(count)
    if dist == "deterministic":
        return np.full(count, np.sqrt(nu))
    return rng.exponential(np.sqrt(nu / 2.0), count)


def _packet_dist(topology: Topology, config: SimConfig) -> str:
    if config.packet_dist is not None:
        return config.packet_dist
    return "matched"


# ---------------------------------------------------------------- kernels

def lindley(arrivals, service, vacation):
    """Service start and departure times of a FIFO server with a vacation after every packet."""
    if arrivals.size == 0:
        return arrivals.copy(), arrivals.copy()
    inc = np.empty_like(arrivals)
    inc[0] = 0.0
    inc[1:] = service[:-1] + vacation[:-1] - np.diff(arrivals)
    walk = np.cumsum(inc)
    wait = walk - np.minimum.accumulate(np.minimum(walk, 0.0))
    start = arrivals + wait
    return start, start + service


@dataclass
class _Queue:
    l: int
    j: int
    lam: float
    serving: int  # bitmask of serving APs
    arrivals: np.ndarray
    work: np.ndarray
    vac: np.ndarray
    start: np.ndarray = None
    depart: np.ndarray = None


def _event_engine(queues: list[_Queue], rate_of, m: int, n: int, horizon: float, t_stop: float, fixed: bool):
    """Run all queues jointly; ``rate_of(l, mask, j)`` gives the drain rate under active set ``mask``."""
    nq = len(queues)
    for q in queues:
        q.start = np.full(q.arrivals.size, np.inf)
        q.depart = np.full(q.arrivals.size, np.inf)
    head = [0] * nq  # next packet to serve
    arrived = [0] * nq
    status = [0] * nq  # 0 idle, 1 busy, 2 vacation
    remaining = [0.0] * nq
    rate = [0.0] * nq
    last = [0.0] * nq
    version = [0] * nq
    counts = [[0] * n for _ in range(m)]
    mask = [0] * m
    busy = [set() for _ in range(m)]
    serving_aps = [[i for i in range(n) if q.serving >> i & 1] for q in queues]
    pending = sum(int(np.searchsorted(q.arrivals, horizon)) for q in queues)
    heap = []
    for qi, q in enumerate(queues):
        if q.arrivals.size:
            heap.append((float(q.arrivals[0]), ARRIVAL, qi, 0))
    heapq.heapify(heap)

    def reschedule(qi, t):
        version[qi] += 1
        r = rate[qi]
        if r > 0:
            heapq.heappush(heap, (t + remaining[qi] / r, DEPART, qi, version[qi]))

    def refresh(l, t):
        for b in busy[l]:
            remaining[b] = max(remaining[b] - rate[b] * (t - last[b]), 0.0)
            last[b] = t
            rate[b] = rate_of(l, mask[l], queues[b].j)
            reschedule(b, t)

    def set_active(qi, delta):
        l = queues[qi].l
        before = mask[l]
        c = counts[l]
        for i in serving_aps[qi]:
            c[i] += delta
            if c[i] == 0:
                mask[l] &= ~(1 << i)
            else:
                mask[l] |= 1 << i
        return mask[l] != before

    def begin(qi, t):
        q = queues[qi]
        h = head[qi]
        status[qi] = 1
        q.start[h] = t
        remaining[qi] = float(q.work[h])
        last[qi] = t
        busy[q.l].add(qi)
        if set_active(qi, +1) and not fixed:
            refresh(q.l, t)
        else:
            rate[qi] = rate_of(q.l, mask[q.l], q.j)
            reschedule(qi, t)

    while heap:
        t, kind, qi, ver = heapq.heappop(heap)
        if t > t_stop:
            break
        q = queues[qi]
        if kind == ARRIVAL:
            arrived[qi] += 1
            if arrived[qi] < q.arrivals.size:
                heapq.heappush(heap, (float(q.arrivals[arrived[qi]]), ARRIVAL, qi, 0))
            if status[qi] == 0:
                begin(qi, t)
        elif kind == DEPART:
            if ver != version[qi]:
                continue
            h = head[qi]
            q.depart[h] = t
            if q.arrivals[h] < horizon:
                pending -= 1
            head[qi] = h + 1
            busy[q.l].discard(qi)
            status[qi] = 0
            if set_active(qi, -1) and not fixed:
                refresh(q.l, t)
            v = float(q.vac[h])
            if v > 0:
                status[qi] = 2
                heapq.heappush(heap, (t + v, VACATION_END, qi, 0))
            elif head[qi] < arrived[qi]:
                begin(qi, t)
            if pending == 0 and t >= horizon:
                break
        else:
            status[qi] = 0
            if head[qi] < arrived[qi]:
                begin(qi, t)


# ---------------------------------------------------------------- statistics

def _batch_ci(times, values, t0: float, t1: float, batches: int) -> float:
    if values.size < 2:
        return float("nan") if values.size == 0 else 0.0
    edges = np.linspace(t0, t1, batches + 1)
    idx = np.clip(np.searchsorted(edges, times, side="right") - 1, 0, batches - 1)
    sums = np.bincount(idx, weights=values, minlength=batches)
    cnt = np.bincount(idx, minlength=batches)
    means = sums[cnt > 0] / cnt[cnt > 0]
    if means.size < 2:
        return float(np.std(values, ddof=1) * 1.96 / np.sqrt(values.size))
    half = stats.t.ppf(0.975, means.size - 1) * np.std(means, ddof=1) / np.sqrt(means.size)
    if half <= 0:
        half = np.std(values, ddof=1) / np.sqrt(values.size) or np.finfo(float).tiny
    return float(half)


def _union_length(starts, ends, t0: float, t1: float) -> float:
    s = np.clip(starts, t0, t1)
    e = np.clip(ends, t0, t1)
    keep = e > s
    s, e = s[keep], e[keep]
    if s.size == 0:
        return 0.0
    order = np.argsort(s, kind="stable")
    s, e = s[order], e[order]
    reach = np.maximum.accumulate(e)
    new = np.empty(s.size, dtype=bool)
    new[0] = True
    new[1:] = s[1:] > reach[:-1]
    first = np.flatnonzero(new)
    seg_end = np.append(reach[first[1:] - 1], reach[-1])
    return float(np.sum(seg_end - s[first]))


def _serving_masks(topology: Topology, table: EfficiencyTable, allocation: Allocation, tol: float):
    """Bitmask of APs carrying at least ``tol`` of each queue's always-on rate."""
    m, n, k = topology.m, topology.n, topology.k
    masks = np.zeros((m, k), dtype=np.int64)
    for l in range(m):
        contrib = np.einsum("aik,aik->ik", table.s[l], allocation.x[l])  # (n, k)
        total = contrib.sum(axis=0)
        keep = (contrib >= tol * total[None, :]) & (total[None, :] > 0)
        masks[l] = (keep * (1 << np.arange(n))[:, None]).sum(axis=0)
    return masks


def simulate(topology: Topology, allocation: Allocation, config: SimConfig = SimConfig(),
             table: Optional[EfficiencyTable] = None) -> SimResult:
    problems = allocation.violations(topology)
    if problems:
        raise ValueError("invalid allocation: " + "; ".join(problems))
    table = table or build_efficiency_table(topology)
    m, n, k = topology.m, topology.n, topology.k
    lam = allocation.lambda_split
    rates = [conditional_rates(table, allocation.x, l) for l in range(m)]
    cons = np.array([r[-1] for r in rates])  # full interferer set
    total = float(lam[lam > 0].sum())
    if config.duration_s is not None:
        horizon = float(config.duration_s)
    elif total > 0 and config.packets:
        horizon = config.packets / total
    else:
        horizon = 0.0
    warm = config.warmup * horizon
    dist = _packet_dist(topology, config)
    beta, eta = topology.moments.beta, topology.moments.eta
    serving = _serving_masks(topology, table, allocation, config.serve_tol)
    nu = topology.nu
    fixed = config.mode == "conservative"
    use_events = not fixed or config.engine == "events"
    t_stop = horizon * (1.0 + config.drain) if use_events else horizon

    queues = []
    dead = np.zeros((m, k), dtype=bool)
    for j in range(k):
        for l in range(m):
            if lam[l, j] <= 0 or horizon <= 0:
                continue
            if cons[l, j] <= 0:
                dead[l, j] = True
                continue
            ra, rw, rv = _streams(config.seed, l, j)
            a = _arrival_times(ra, lam[l, j], t_stop)
            w = _packet_work(rw, a.size, dist, beta, eta)
            v = _vacations(rv, a.size, nu[l, j], config.vacation)
            queues.append(_Queue(l, j, float(lam[l, j]), int(serving[l, j]), a, w, v))

    if use_events:
        if fixed:
            def rate_of(l, mask, j):
                return cons[l, j]
        else:
            def rate_of(l, mask, j):
                return rates[l][mask, j]
        _event_engine(queues, rate_of, m, n, horizon, t_stop, fixed)
    else:
        for q in queues:
            q.start, q.depart = lindley(q.arrivals, q.work / cons[q.l, q.j], q.vac)

    shape = (m, k)
    count = np.zeros(shape, dtype=int)
    mean_soj = np.full(shape, np.nan)
    ci = np.full(shape, np.nan)
    mean_srv = np.full(shape, np.nan)
    in_system = np.zeros(shape)
    stable = np.ones(shape, dtype=bool)
    stable[dead] = False
    mean_soj[dead] = np.inf
    span = max(horizon - warm, 0.0)
    pooled_t, pooled_v = [], []
    for q in queues:
        a, d = q.arrivals, q.depart
        inside = a < horizon
        meas = inside & (a >= warm)
        late = meas & (d > horizon)
        done = meas & np.isfinite(d)
        cnt = int(meas.sum())
        count[q.l, q.j] = cnt
        if done.any():
            soj = d[done] - a[done]
            mean_soj[q.l, q.j] = soj.mean()
            mean_srv[q.l, q.j] = (d[done] - q.start[done]).mean()
            ci[q.l, q.j] = _batch_ci(a[done], soj, warm, horizon, config.batches)
            pooled_t.append(a[done])
            pooled_v.append(soj)
        if span > 0:
            dd = np.minimum(d[inside], horizon)
            in_system[q.l, q.j] = np.sum(np.clip(dd, warm, horizon) - np.clip(a[inside], warm, horizon)) / span
        if cnt and late.sum() > max(0.01 * cnt, 3):
            stable[q.l, q.j] = False
        if cnt and not done.all():
            mean_soj[q.l, q.j] = np.inf if not done.any() else mean_soj[q.l, q.j]

    ap_busy = np.zeros((m, n))
    if span > 0:
        for l in range(m):
            for i in range(n):
                mine = [q for q in queues if q.l == l and q.serving >> i & 1]
                if mine:
                    s = np.concatenate([q.start for q in mine])
                    e = np.concatenate([q.depart for q in mine])
                    ok = np.isfinite(s)
                    ap_busy[l, i] = _union_length(s[ok], np.minimum(e[ok], horizon), warm, horizon) / span

    if pooled_v:
        times = np.concatenate(pooled_t)
        vals = np.concatenate(pooled_v)
        net_mean = float(vals.mean())
        net_ci = _batch_ci(times, vals, warm, horizon, config.batches)
    else:
        net_mean, net_ci = float("nan"), float("nan")
    if dead.any():
        net_mean = float("inf")
    return SimResult(config.mode, horizon, warm, count, mean_soj, ci, mean_srv, in_system, stable,
                     lam.copy(), net_mean, net_ci, ap_busy, asdict(config))


def simulate_queue(rate: float, lam: float, nu: float = 0.0, packets: int = 1_000_000, seed: int = 0,
                   packet_dist: str = "exponential", vacation: str = "deterministic",
                   warmup: float = 0.1, batches: int = 20, beta: float = 1.0, eta: float = 2.0):
    """Single FIFO queue at a fixed rate; returns ``(mean_sojourn, ci_half_width, packets_measured)``."""
    if lam <= 0:
        return float("nan"), float("nan"), 0
    horizon = packets / lam
    ra, rw, rv = _streams(seed, 0, 0)
    a = _arrival_times(ra, lam, horizon)
    w = _packet_work(rw, a.size, packet_dist, beta, eta)
    v = _vacations(rv, a.size, nu, vacation)
    start, depart = lindley(a, w / rate, v)
    meas = a >= warmup * horizon
    soj = depart[meas] - a[meas]
    return float(soj.mean()), _batch_ci(a[meas], soj, warmup * horizon, horizon, batches), int(meas.sum())
