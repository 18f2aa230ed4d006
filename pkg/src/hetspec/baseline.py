"""Reference allocators with the pattern shares frozen.

Both keep the association and traffic split optimized by the conservative
machinery, so the comparison isolates the value of choosing patterns.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .allocation import Allocation
from .conservative import (RateMixture, SolverConfig, capacity, delay_report, initial_feasible_allocation,
                           objective_p1, orthogonal_shares, over_capacity, purify, solve_multistart, zero_load)
from .model import EfficiencyTable, Topology, build_efficiency_table

BASELINES = ("orthogonal", "full_reuse")


def orthogonal_y(topology: Topology) -> np.ndarray:
    """Every AP alone on an equal band of each RAT."""
    return orthogonal_shares(topology.n, topology.m)


def full_reuse_y(topology: Topology) -> np.ndarray:
    """All APs on the whole band of each RAT."""
    y = np.zeros((topology.m, 1 << topology.n))
    y[:, -1] = 1.0
    return y


def solve_fixed_patterns(topology: Topology, y: np.ndarray, scheme: str,
                         table: Optional[EfficiencyTable] = None, config: SolverConfig = SolverConfig()):
    """Conservative delay minimization over ``x`` and the traffic split with ``y`` frozen.

    Returns ``(Allocation, DelayReport)``; beyond the capacity of the frozen
    partition the report is marked infeasible.
    """
    table = table or build_efficiency_table(topology)
    y = np.asarray(y, dtype=float)
    if topology.arrival_rates.sum() <= 0:
        return zero_load(topology, scheme, y)
    cap = capacity(topology, table, y_fixed=y)
    start = initial_feasible_allocation(topology, table, config, y_fixed=y, scheme=scheme) \
        if cap.scale > 1.0 else None
    if start is None:
        alloc, rep = over_capacity(topology, cap, scheme)
        alloc.y = y.copy()
        return alloc, rep
    mixture = RateMixture.conservative(topology.n, topology.m)
    sol = solve_multistart(topology, table, mixture, start, config, y_fixed=y, cap=cap)
    alloc = purify(topology, table, sol.allocation, y_fixed=y) if config.vertex else sol.allocation
    alloc.y = y.copy()
    alloc.scheme = scheme
    return alloc, delay_report(topology, table, mixture, alloc, objective_p1(topology, alloc, table),
                               sol.alternation, cap)


def solve_orthogonal(topology: Topology, table: Optional[EfficiencyTable] = None,
                     config: SolverConfig = SolverConfig()):
    return solve_fixed_patterns(topology, orthogonal_y(topology), "orthogonal", table, config)


def solve_full_reuse(topology: Topology, table: Optional[EfficiencyTable] = None,
                     config: SolverConfig = SolverConfig()):
    return solve_fixed_patterns(topology, full_reuse_y(topology), "full_reuse", table, config)


def allocate_orthogonal(topology: Topology, table: Optional[EfficiencyTable] = None,
                        config: SolverConfig = SolverConfig()) -> Allocation:
    return solve_orthogonal(topology, table, config)[0]


def allocate_full_reuse(topology: Topology, table: Optional[EfficiencyTable] = None,
                        config: SolverConfig = SolverConfig()) -> Allocation:
    return solve_full_reuse(topology, table, config)[0]
