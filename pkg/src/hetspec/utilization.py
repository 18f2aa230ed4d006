"""Utilization-aware allocation: the sigma/rho/p fixed point and the outer loop around it.

Queue utilizations ``sigma`` determine AP activity ``rho``, which fixes a
product-form distribution ``p`` over active AP sets.  With ``sigma``, ``rho``
and ``p`` frozen the allocation problem is the conservative one with rates
replaced by a mixture over active sets and one extra utilization cap per queue.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .allocation import Allocation, DelayReport
from .conservative import (RateMixture, SolverConfig, capacity, delay_report, initial_feasible_allocation,
                           mixture_objective, over_capacity, solve_mixture, solve_multistart, zero_load)
from .model import EfficiencyTable, Topology, build_efficiency_table, conditional_rates, membership_matrix
from .queueing import active_set_probabilities

log = logging.getLogger(__name__)

CAP_SLACK = 1e-3  # extra headroom when a frozen utilization cap has to be relaxed


@dataclass
class UtilizationState:
    sigma: np.ndarray  # (m, k) queue utilization
    rho: np.ndarray  # (m, n) AP utilization
    p: np.ndarray  # (m, 2^n) probability of each active AP set
    iterations: int = 0
    converged: bool = True
    clamped: int = 0  # AP utilizations pulled back into [0, 1]
    degenerate: int = 0  # APs with no bandwidth on a RAT

    @classmethod
    def initial(cls, topology: Topology) -> "UtilizationState":
        """Everything busy: sigma = rho = 1 and all mass on the full AP set."""
        m, n, k = topology.m, topology.n, topology.k
        p = np.zeros((m, 1 << n))
        p[:, -1] = 1.0
        return cls(np.ones((m, k)), np.ones((m, n)), p)

    def to_dict(self) -> dict:
        return {
            "sigma": self.sigma.tolist(),
            "rho": self.rho.tolist(),
            "active_set_probabilities": {str(l): {str(a): float(v) for a, v in enumerate(row) if v > 0}
                                         for l, row in enumerate(self.p)},
            "iterations": self.iterations,
            "converged": self.converged,
            "clamped": self.clamped,
            "degenerate": self.degenerate,
        }


def queue_utilization(rates: np.ndarray, lam: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Expected busy fraction ``sum_I p[I] lam / r[I]`` for one RAT; rates shaped (2^n, k).

    Sets with negligible probability are skipped; a used queue with zero rate
    on a reachable set is saturated.
    """
    reach = p > 1e-12
    r = rates[reach]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(r > 0, 1.0 / r, np.inf)
    load = np.where(lam > 0, lam, 0.0)
    out = np.zeros(rates.shape[1])
    busy = lam > 0
    if busy.any():
        out[busy] = p[reach] @ (inv[:, busy] * load[busy])
    return out


def ap_utilizations(allocation: Allocation, sigma: np.ndarray, member: Optional[np.ndarray] = None):
    """Spectrum-weighted AP utilization for every RAT, clamped to [0, 1].

    Returns ``(rho, clamped, degenerate)``; an AP without bandwidth gets 0.
    """
    m, full, n, k = allocation.x.shape
    member = membership_matrix(n) if member is None else member
    bandwidth = allocation.y @ member  # (m, n)
    used = np.einsum("lain,ln->li", allocation.x * member[None, :, :, None], sigma)
    degenerate = bandwidth <= 0
    raw = np.where(degenerate, 0.0, used / np.where(degenerate, 1.0, bandwidth))
    rho = np.clip(raw, 0.0, 1.0)
    return rho, int(np.sum(rho != raw)), int(degenerate.sum())


def fixed_point_srp(topology: Topology, table: EfficiencyTable, allocation: Allocation,
                    start: Optional[UtilizationState] = None, eps: float = 1e-6,
                    max_iter: int = 10_000) -> UtilizationState:
    """Iterate sigma -> rho -> p until sigma moves by less than ``eps`` (sup norm)."""
    start = start or UtilizationState.initial(topology)
    m, n = topology.m, topology.n
    rates = [conditional_rates(table, allocation.x, l) for l in range(m)]
    lam = allocation.lambda_split
    member = membership_matrix(n)
    sigma = start.sigma.copy()
    p = start.p.copy()
    rho = start.rho.copy()
    clamped = degenerate = 0
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        new = np.array([queue_utilization(rates[l], lam[l], p[l]) for l in range(m)])
        over = new > 1.0
        if over.any():
            clamped += int(over.sum())
            new = np.minimum(new, 1.0)
        rho, c, degenerate = ap_utilizations(allocation, new, member)
        clamped += c
        p = np.array([active_set_probabilities(rho[l]) for l in range(m)])
        delta = float(np.abs(new - sigma).max()) if new.size else 0.0
        sigma = new
        if delta < eps:
            converged = True
            break
    if not converged:
        log.warning("utilization fixed point stopped after %d iterations", it)
    return UtilizationState(sigma, rho, p, it, converged, clamped, degenerate)


def p3_relaxation(topology: Topology, table: EfficiencyTable, state: UtilizationState,
                  allocation: Allocation) -> float:
    """Smallest uniform factor on ``sigma`` that leaves ``allocation`` strictly inside the caps."""
    worst = 0.0
    for l in range(topology.m):
        rates = conditional_rates(table, allocation.x, l)
        util = queue_utilization(rates, allocation.lambda_split[l], state.p[l])
        busy = allocation.lambda_split[l] > 0
        if not busy.any():
            continue
        cap = state.sigma[l][busy]
        ratio = np.where(cap > 0, util[busy] / np.where(cap > 0, cap, 1.0), np.inf)
        worst = max(worst, float(ratio.max()))
    if worst < 1.0 / (1.0 + CAP_SLACK):
        return 1.0
    return worst * (1.0 + CAP_SLACK)


def objective_p2(topology: Topology, allocation: Allocation, state: UtilizationState,
                 table: Optional[EfficiencyTable] = None) -> float:
    """Traffic-weighted mean delay with rates averaged over the active-set distribution."""
    table = table or build_efficiency_table(topology)
    return mixture_objective(topology, table, RateMixture.from_probabilities(state.p),
                             allocation.x, allocation.lambda_split)


def solve_p3(topology: Topology, table: Optional[EfficiencyTable], state: UtilizationState,
             start: Optional[Allocation] = None, config: SolverConfig = SolverConfig()):
    """Allocate with ``sigma``, ``rho`` and ``p`` frozen; returns ``(Allocation, DelayReport)``.

    When ``start`` breaks a utilization cap the caps are scaled up uniformly
    by the smallest factor that restores strict feasibility; the factor is
    reported as ``DelayReport.relaxation``.
    """
    table = table or build_efficiency_table(topology)
    if topology.arrival_rates.sum() <= 0:
        alloc, rep = zero_load(topology, "utilization")
        rep.utilization = np.zeros((topology.m, topology.k))
        return alloc, rep
    cap = capacity(topology, table)
    fresh = start is None
    if fresh:
        start = initial_feasible_allocation(topology, table, config, scheme="utilization") \
            if cap.scale > 1.0 else None
        if start is None:
            return over_capacity(topology, cap, "utilization")
    relax = p3_relaxation(topology, table, state, start)
    if relax > 1.0:
        log.info("utilization caps relaxed by a factor %.6g", relax)
    mixture = RateMixture.from_probabilities(state.p, state.sigma * relax)
    if fresh:
        # random starts only respect the caps when they are loose (sigma = 1 on the first pass)
        sol = solve_multistart(topology, table, mixture, start, config, cap=cap) if np.all(state.sigma * relax >= 1.0) \
            else solve_mixture(topology, table, mixture, start, config)
    else:
        sol = solve_mixture(topology, table, mixture, start, config)
    alloc = sol.allocation
    alloc.scheme = "utilization"
    rep = delay_report(topology, table, mixture, alloc, sol.objective, sol.alternation, cap)
    rep.relaxation = relax
    rep.utilization = np.array([queue_utilization(conditional_rates(table, alloc.x, l),
                                                  alloc.lambda_split[l], state.p[l])
                                for l in range(topology.m)])
    if relax > 1.0:
        rep.message = (rep.message + "; " if rep.message else "") + f"utilization caps relaxed x{relax:.6g}"
    return alloc, rep


@dataclass
class OuterTrace:
    objectives: list = field(default_factory=list)  # P2 objective after each outer pass
    best: list = field(default_factory=list)  # best objective seen so far
    x_change: list = field(default_factory=list)
    relaxations: list = field(default_factory=list)
    fixed_point_iterations: list = field(default_factory=list)
    fixed_point_converged: list = field(default_factory=list)


def solve_p2(topology: Topology, table: Optional[EfficiencyTable] = None,
             config: SolverConfig = SolverConfig(), eps_fp: float = 1e-6, eps_outer: float = 1e-4,
             max_outer: int = 50):
    """Alternate the frozen-utilization allocation with the utilization fixed point.

    Returns ``(Allocation, UtilizationState, DelayReport)`` for the pass with
    the lowest P2 objective; ``report.history`` holds the raw per-pass
    objectives and ``report.sweeps`` the number of passes.
    """
    table = table or build_efficiency_table(topology)
    state = UtilizationState.initial(topology)
    if topology.arrival_rates.sum() <= 0:
        alloc, rep = solve_p3(topology, table, state, config=config)
        idle = np.zeros((topology.m, 1 << topology.n))
        idle[:, 0] = 1.0
        return alloc, UtilizationState(np.zeros((topology.m, topology.k)),
                                       np.zeros((topology.m, topology.n)), idle), rep
    trace = OuterTrace()
    x_prev = np.ones((topology.m, 1 << topology.n, topology.n, topology.k))  # sentinel
    alloc = None
    best = None
    converged = False
    for it in range(max_outer):
        alloc, rep = solve_p3(topology, table, state, start=alloc, config=config)
        if not rep.feasible:
            return alloc, state, rep
        state = fixed_point_srp(topology, table, alloc, state, eps=eps_fp)
        obj = objective_p2(topology, alloc, state, table)
        change = float(np.abs(alloc.x - x_prev).max())
        trace.objectives.append(obj)
        trace.x_change.append(change)
        trace.relaxations.append(rep.relaxation)
        trace.fixed_point_iterations.append(state.iterations)
        trace.fixed_point_converged.append(state.converged)
        if best is None or obj < best[0]:
            best = (obj, alloc.copy(), state, rep)
        trace.best.append(best[0])
        x_prev = alloc.x.copy()
        if change < eps_outer:
            converged = True
            break
    obj, alloc, state, rep = best
    mixture = RateMixture.from_probabilities(state.p)
    final = delay_report(topology, table, mixture, alloc, obj)
    final.capacity_scale, final.bottleneck = rep.capacity_scale, rep.bottleneck
    final.history = trace.objectives
    final.sweeps = len(trace.objectives)
    final.converged = converged
    final.relaxation = max(trace.relaxations)
    final.utilization = state.sigma.copy()
    if not converged:
        final.message = f"outer loop stopped after {max_outer} passes; best pass returned"
    final.trace = trace
    return alloc, state, final
