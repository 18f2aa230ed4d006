"""Allocation container, validation, sparsity accounting and JSON form."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .model import Topology, membership_matrix


@dataclass
class Allocation:
    """Spectrum decision for both RATs.

    ``y[l, A]``: fraction of RAT ``l`` given to pattern ``A`` (mask 0 unused).
    ``x[l, A, i, j]``: share of that slice AP ``i`` spends on UE group ``j``.
    ``lambda_split[l, j]``: traffic of group ``j`` routed to RAT ``l``.
    """

    y: np.ndarray
    x: np.ndarray
    lambda_split: np.ndarray
    scheme: str = "conservative"

    @property
    def m(self) -> int:
        return self.x.shape[0]

    @property
    def n(self) -> int:
        return self.x.shape[2]

    @property
    def k(self) -> int:
        return self.x.shape[3]

    def copy(self) -> "Allocation":
        return Allocation(self.y.copy(), self.x.copy(), self.lambda_split.copy(), self.scheme)

    def violations(self, topology: Topology, tol: float = 1e-8) -> list[str]:
        """Human-readable list of constraint violations (empty when valid)."""
        out = []
        n, k = topology.n, topology.k
        if self.x.shape != (topology.m, 1 << n, n, k):
            return [f"x has shape {self.x.shape}, expected {(topology.m, 1 << n, n, k)}"]
        if self.y.shape != (topology.m, 1 << n) or self.lambda_split.shape != (topology.m, k):
            return ["y or lambda_split has the wrong shape"]
        if self.y.min() < -tol:
            out.append("negative pattern share")
        if self.x.min() < -tol:
            out.append("negative link share")
        for l in range(topology.m):
            if abs(self.y[l].sum() - 1.0) > 1e-6:
                out.append(f"RAT {l}: pattern shares sum to {self.y[l].sum():.9g}")
        member = membership_matrix(n)
        stray = np.abs(self.x[:, ~member, :]).max() if (~member).any() else 0.0
        if stray > tol:
            out.append("bandwidth assigned to an AP outside its pattern")
        over = self.x.sum(axis=3) - self.y[:, :, None]
        if over.max() > tol:
            out.append(f"AP slice overcommitted by {over.max():.3g}")
        lam = topology.arrival_rates
        if np.any(self.lambda_split < -tol):
            out.append("negative traffic split")
        short = lam - self.lambda_split.sum(axis=0)
        if short.max() > 1e-7 * max(1.0, lam.max()):
            out.append("traffic split does not cover the arrival rates")
        return out

    def to_dict(self, tol: float = 0.0) -> dict:
        m, full, n, k = self.x.shape
        entries = [
            [int(l), int(a), int(i), int(j), float(self.x[l, a, i, j])]
            for l, a, i, j in zip(*np.nonzero(np.abs(self.x) > tol))
        ]
        return {
            "scheme": self.scheme,
            "rats": m,
            "aps": n,
            "ue_groups": k,
            "y": [{str(a): float(v) for a, v in enumerate(row) if v > tol} for row in self.y],
            "lambda_split_pkts_s": self.lambda_split.tolist(),
            "x_entries": entries,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Allocation":
        m, n, k = d["rats"], d["aps"], d["ue_groups"]
        y = np.zeros((m, 1 << n))
        for l, row in enumerate(d["y"]):
            for a, v in row.items():
                y[l, int(a)] = v
        x = np.zeros((m, 1 << n, n, k))
        for l, a, i, j, v in d["x_entries"]:
            x[l, a, i, j] = v
        return cls(y, x, np.asarray(d["lambda_split_pkts_s"], dtype=float), d.get("scheme", "conservative"))


@dataclass
class DelayReport:
    objective: float
    delays: np.ndarray  # (m, k) mean sojourn time per group and RAT, s
    rates: np.ndarray  # (m, k) conservative service rates, packets/s
    lambda_split: np.ndarray
    feasible: bool = True
    capacity_scale: float = float("nan")
    bottleneck: tuple[int, ...] = ()
    history: list[float] = field(default_factory=list)
    sweeps: int = 0
    converged: bool = True
    message: str = ""
    utilization: Optional[np.ndarray] = None  # (m, k) UE utilization when modelled
    relaxation: float = 1.0  # factor applied to frozen utilization caps (1 = none)
    trace: Any = None  # per-pass record of the utilization outer loop

    def to_dict(self) -> dict:
        out = {
            "objective_s": self.objective,
            "feasible": self.feasible,
            "capacity_scale": self.capacity_scale,
            "bottleneck_groups": list(self.bottleneck),
            "sweeps": self.sweeps,
            "converged": self.converged,
            "message": self.message,
            "delays_s": np.where(np.isfinite(self.delays), self.delays, -1.0).tolist(),
            "rates_pkts_s": self.rates.tolist(),
        }
        if self.utilization is not None:
            out["utilization"] = self.utilization.tolist()
            out["utilization_cap_relaxation"] = self.relaxation
        return out


@dataclass(frozen=True)
class SparsityReport:
    pattern_counts: tuple[int, ...]
    multi_ap_groups: tuple[int, ...]
    pattern_bound: int
    group_bound: int

    @property
    def ok(self) -> bool:
        return (max(self.pattern_counts) <= self.pattern_bound
                and max(self.multi_ap_groups) <= self.group_bound)


def sparsity_check(allocation: Allocation, tol: float = 1e-5) -> SparsityReport:
    """Count active patterns and UE groups served by more than one AP, per RAT."""
    patterns = tuple(int((allocation.y[l] > tol).sum()) for l in range(allocation.m))
    per_ap = allocation.x.sum(axis=1)  # (m, n, k)
    multi = tuple(int(((per_ap[l] > tol).sum(axis=0) >= 2).sum()) for l in range(allocation.m))
    return SparsityReport(patterns, multi, allocation.k, allocation.n - 1)
