"""Delay-minimizing allocation under the worst-case (always-on) interference model.

The same block machinery also serves the utilization-aware problem: rates
there are a mixture over interferer sets, and the conservative model is the
one-atom mixture that puts all mass on the full AP set.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .allocation import Allocation, DelayReport, SparsityReport, sparsity_check
from .model import EfficiencyTable, Topology, build_efficiency_table, conditional_rates
from .optim import (AlternationResult, ConvexSubproblem, LocalConstraint, SolveError,
                    alternate, solve_convex)
from .queueing import weighted_delay_lam, weighted_delay_r

log = logging.getLogger(__name__)

__all__ = [
    "Allocation", "DelayReport", "SparsityReport", "sparsity_check", "SolverConfig",
    "RateMixture", "CapacityResult", "capacity", "initial_feasible_allocation",
    "objective_p1", "mixture_objective", "solve_p1", "solve_mixture",
]

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class SolverConfig:
    eps_alt: float = 1e-6
    max_sweeps: int = 100
    eps_stab: float = 1e-3  # stability margin r >= beta*lam*(1+eps_stab)
    max_newton: int = 500
    start_mix: float = 0.1  # weight of the uniform component in the interior start
    vertex: bool = True  # move the final conservative solution to a vertex of its optimal face
    starts: int = 3  # heuristic start plus seeded random ones; the problem is only bi-convex
    screen_sweeps: int = 3  # sweeps given to every start before the best one is finished
    start_seed: int = 0


@dataclass(frozen=True)
class RateMixture:
    """Distribution of interferer sets per RAT plus optional UE utilization caps.

    ``masks[l]`` and ``probs[l]`` list the interferer sets with probability
    above ``PROB_FLOOR``.  ``sigma_cap[l, j]`` bounds the expected busy fraction
    of queue ``(l, j)``; ``None`` leaves it unconstrained.
    """

    masks: tuple
    probs: tuple
    sigma_cap: Optional[np.ndarray] = None

    @classmethod
    def conservative(cls, n: int, m: int) -> "RateMixture":
        full = np.array([(1 << n) - 1])
        return cls(tuple(full for _ in range(m)), tuple(np.ones(1) for _ in range(m)))

    @classmethod
    def from_probabilities(cls, p: np.ndarray, sigma_cap=None) -> "RateMixture":
        masks, probs = [], []
        for row in p:
            keep = np.flatnonzero(row > PROB_FLOOR)
            masks.append(keep)
            probs.append(row[keep] / row[keep].sum())
        return cls(tuple(masks), tuple(probs), sigma_cap)

    def maximal(self, l: int) -> np.ndarray:
        """Atoms not strictly contained in another atom; their rates are the smallest."""
        ms = self.masks[l]
        keep = [a for a, ma in enumerate(ms)
                if not any(mb != ma and (ma & mb) == ma for mb in ms)]
        return np.array(keep, dtype=int)


@dataclass(frozen=True)
class LinkLayout:
    patterns: np.ndarray  # masks of patterns that may receive bandwidth
    link_mask: np.ndarray
    link_ap: np.ndarray
    link_pattern: np.ndarray  # position of each link's pattern in ``patterns``

    @property
    def size(self) -> int:
        return len(self.link_mask)


def link_layout(n: int, y_row: Optional[np.ndarray] = None) -> LinkLayout:
    if y_row is None:
        pats = np.arange(1, 1 << n)
    else:
        pats = np.flatnonzero(y_row > 0)
        pats = pats[pats > 0]
    lm, la, lp = [], [], []
    for pi, a in enumerate(pats):
        for i in range(n):
            if a >> i & 1:
                lm.append(a)
                la.append(i)
                lp.append(pi)
    return LinkLayout(pats, np.array(lm, dtype=int), np.array(la, dtype=int), np.array(lp, dtype=int))


def rate_matrix(table: EfficiencyTable, l: int, layout: LinkLayout, masks) -> np.ndarray:
    """Coefficients C[a, j, link] so that rate under interferer set a is C[a, j] @ x_j."""
    masks = np.asarray(masks)
    idx = (layout.link_mask[None, :] & masks[:, None]) | (1 << layout.link_ap)[None, :]
    return np.transpose(table.s[l][idx, layout.link_ap[None, :], :], (0, 2, 1))


def mixture_rates(table, mixture: RateMixture, x) -> list[np.ndarray]:
    return [conditional_rates(table, x, l)[mixture.masks[l]] for l in range(table.m)]


def queue_delays(topology: Topology, table, mixture: RateMixture, x, lam_split):
    """Expected sojourn time of each (RAT, group) queue under the mixture (inf if unstable)."""
    beta = topology.moments.beta
    nu = topology.nu
    out = np.zeros((topology.m, topology.k))
    for l, rates in enumerate(mixture_rates(table, mixture, x)):
        lam = lam_split[l]
        ok = np.all(rates > beta * lam[None, :], axis=0)
        safe = np.where(ok[None, :], rates, 2.0 * beta * lam[None, :] + 1.0)
        b, e = beta, topology.moments.eta
        t = ((0.5 * e - b * b) * lam + b * safe + 0.5 * nu[l] * lam * safe ** 2) / (safe * (safe - b * lam))
        out[l] = np.where(ok, mixture.probs[l] @ t, np.inf)
    return out


def mixture_objective(topology: Topology, table, mixture: RateMixture, x, lam_split) -> float:
    total_lam = topology.arrival_rates.sum()
    if total_lam <= 0:
        return 0.0
    d = queue_delays(topology, table, mixture, x, lam_split)
    used = lam_split > 0
    if np.any(~np.isfinite(d[used])):
        return float("inf")
    return float(np.sum(lam_split[used] * d[used]) / total_lam)


def _require_valid(topology: Topology, allocation: Allocation) -> None:
    problems = allocation.violations(topology)
    if problems:
        raise ValueError("invalid allocation: " + "; ".join(problems))


def objective_p1(topology: Topology, allocation: Allocation, table: Optional[EfficiencyTable] = None) -> float:
    """Traffic-weighted mean delay with always-on interference; inf if any used queue is unstable."""
    _require_valid(topology, allocation)
    table = table or build_efficiency_table(topology)
    return mixture_objective(topology, table, RateMixture.conservative(topology.n, topology.m),
                             allocation.x, allocation.lambda_split)


# ---------------------------------------------------------------- capacity LP

@dataclass
class CapacityResult:
    scale: float  # largest uniform load multiplier that some allocation can stabilize
    bottleneck: tuple[int, ...]
    allocation: Optional[Allocation] = None


def capacity(topology: Topology, table: EfficiencyTable, margin: float = 0.0,
             y_fixed: Optional[np.ndarray] = None) -> CapacityResult:
    """Exact stabilizable load scale under always-on interference, from one LP.

    Maximizes zeta such that zeta * lambda admits rates r >= beta*(1+margin)*lambda
    on every used queue.  ``y_fixed`` freezes the pattern shares.
    """
    n, k, m = topology.n, topology.k, topology.m
    lam = topology.arrival_rates
    beta = topology.moments.beta
    if lam.sum() <= 0:
        return CapacityResult(float("inf"), ())
    layouts = [link_layout(n, None if y_fixed is None else y_fixed[l]) for l in range(m)]
    offs, pos = [], 0
    for lay in layouts:
        nx = k * lay.size
        ny = 0 if y_fixed is not None else len(lay.patterns)
        offs.append((pos, pos + nx, ny))
        pos += nx + ny
    lam_off = pos
    zeta = lam_off + m * k
    nvar = zeta + 1
    rows, cols, vals, rhs = [], [], [], []
    eq_rows, eq_cols, eq_vals = [], [], []
    r = 0
    for l, lay in enumerate(layouts):
        x0, y0, _ = offs[l]
        coef = rate_matrix(table, l, lay, [(1 << n) - 1])[0]  # (k, L)
        for j in range(k):
            cols.extend(x0 + j * lay.size + np.arange(lay.size))
            vals.extend(-coef[j])
            rows.extend([r] * lay.size)
            rows.append(r)
            cols.append(lam_off + l * k + j)
            vals.append(beta * (1.0 + margin))
            rhs.append(0.0)
            r += 1
    demand_rows = {}
    for j in range(k):
        if lam[j] <= 0:
            continue
        demand_rows[j] = r
        for l in range(m):
            rows.append(r)
            cols.append(lam_off + l * k + j)
            vals.append(-1.0)
        rows.append(r)
        cols.append(zeta)
        vals.append(lam[j])
        rhs.append(0.0)
        r += 1
    for l, lay in enumerate(layouts):
        x0, y0, ny = offs[l]
        for li in range(lay.size):
            rows.extend([r] * k)
            cols.extend(x0 + np.arange(k) * lay.size + li)
            vals.extend([1.0] * k)
            if ny:
                rows.append(r)
                cols.append(y0 + lay.link_pattern[li])
                vals.append(-1.0)
                rhs.append(0.0)
            else:
                rhs.append(float(y_fixed[l][lay.link_mask[li]]))
            r += 1
        if ny:
            eq_rows.extend([l] * ny)
            eq_cols.extend(y0 + np.arange(ny))
            eq_vals.extend([1.0] * ny)
    a_ub = sp.csr_matrix((vals, (rows, cols)), shape=(r, nvar))
    kw = {}
    if eq_rows:
        kw["A_eq"] = sp.csr_matrix((eq_vals, (eq_rows, eq_cols)), shape=(m, nvar))
        kw["b_eq"] = np.ones(m)
    c = np.zeros(nvar)
    c[zeta] = -1.0
    res = linprog(c, A_ub=a_ub, b_ub=np.array(rhs), bounds=(0, None), method="highs", **kw)
    if res.status != 0:
        raise SolveError(f"capacity LP failed: {res.message}")
    scale = float(res.x[zeta])
    duals = res.ineqlin.marginals
    bottleneck = tuple(sorted(j for j, row in demand_rows.items() if abs(duals[row]) > 1e-9))
    alloc = _unpack_lp(topology, layouts, offs, lam_off, res.x, y_fixed)
    return CapacityResult(scale, bottleneck, alloc)


def _unpack_lp(topology, layouts, offs, lam_off, v, y_fixed) -> Allocation:
    n, k, m = topology.n, topology.k, topology.m
    x = np.zeros((m, 1 << n, n, k))
    y = np.zeros((m, 1 << n))
    for l, lay in enumerate(layouts):
        x0, y0, ny = offs[l]
        xs = np.maximum(v[x0:x0 + k * lay.size].reshape(k, lay.size), 0.0)
        x[l][lay.link_mask, lay.link_ap, :] = xs.T
        if ny:
            y[l][lay.patterns] = np.maximum(v[y0:y0 + ny], 0.0)
        else:
            y[l] = y_fixed[l]
    lam_split = np.maximum(v[lam_off:lam_off + m * k].reshape(m, k), 0.0)
    return Allocation(y, x, lam_split)


# ---------------------------------------------------------------- starting point

def orthogonal_shares(n: int, m: int) -> np.ndarray:
    y = np.zeros((m, 1 << n))
    for i in range(n):
        y[:, 1 << i] = 1.0 / n
    return y


def _heuristic_x(table: EfficiencyTable, y: np.ndarray, mix: float) -> np.ndarray:
    """Each group takes its best link (shared evenly), plus a small share of every link."""
    m, full, n, k = table.s.shape
    x = np.zeros((m, full, n, k))
    for l in range(m):
        lay = link_layout(n, y[l])
        eff = table.s[l][lay.link_mask, lay.link_ap, :] * y[l][lay.link_mask][:, None]  # (L, k)
        best = np.argmax(eff, axis=0)
        w = np.zeros((lay.size, k))
        w[best, np.arange(k)] = 1.0
        w /= np.maximum(w.sum(axis=1, keepdims=True), 1.0)
        share = (1.0 - mix) * ((1.0 - mix) * w + mix / k)
        x[l][lay.link_mask, lay.link_ap, :] = y[l][lay.link_mask][:, None] * share
    return x


def _stable_split(topology, rates, lam, eps) -> Optional[np.ndarray]:
    beta = topology.moments.beta
    need = beta * (1 + eps) * (1 + 1e-9)
    even = np.tile(lam / topology.m, (topology.m, 1))
    if np.all((even == 0) | (rates > need * even)):
        return even
    total = rates.sum(axis=0)
    if np.all((lam == 0) | (total > need * lam)):
        return np.where(total > 0, lam * rates / np.where(total > 0, total, 1.0), 0.0)
    return None


def initial_feasible_allocation(topology: Topology, table: EfficiencyTable,
                                config: SolverConfig = SolverConfig(),
                                y_fixed: Optional[np.ndarray] = None,
                                scheme: str = "conservative") -> Optional[Allocation]:
    """Strictly feasible start: orthogonal bands, strongest-AP links, even traffic split.

    Falls back to mixing in the capacity-LP solution when the heuristic is
    unstable.  Returns ``None`` when the load is beyond capacity.
    """
    n, m = topology.n, topology.m
    tau = config.start_mix
    if y_fixed is None:
        y = (1.0 - tau) * orthogonal_shares(n, m) + tau / ((1 << n) - 1)
        y[:, 0] = 0.0
    else:
        y = np.array(y_fixed, dtype=float)
    x = _heuristic_x(table, y, tau)
    lam = topology.arrival_rates
    cons = RateMixture.conservative(n, m)
    rates = np.array([r[0] for r in mixture_rates(table, cons, x)])
    split = _stable_split(topology, rates, lam, config.eps_stab)
    if split is not None:
        return Allocation(y, x, split, scheme)
    cap = capacity(topology, table, margin=config.eps_stab, y_fixed=y_fixed)
    if not cap.scale > 1.0:
        return None
    # Blend towards the LP vertex: the LP part alone carries 1/c of the load with margin.
    c = (1.0 + cap.scale) / (2.0 * cap.scale)
    theta = 0.5 * (1.0 + c)
    lp = cap.allocation
    log.debug("heuristic start unstable; mixing in capacity LP point (scale %.4g)", cap.scale)
    return Allocation(theta * lp.y + (1 - theta) * y if y_fixed is None else y,
                      theta * lp.x + (1 - theta) * x, c * lp.lambda_split, scheme)


def random_start(topology: Topology, table: EfficiencyTable, rng, cap: CapacityResult,
                 config: SolverConfig = SolverConfig(), y_fixed: Optional[np.ndarray] = None,
                 scheme: str = "conservative", tries: int = 20) -> Optional[Allocation]:
    """Random strictly feasible point: random pattern shares, blended toward the capacity LP point."""
    m, full, n, k = table.s.shape
    cons = RateMixture.conservative(n, m)
    lam = topology.arrival_rates
    lp = cap.allocation
    if lp is None:
        return None
    for _ in range(tries):
        if y_fixed is None:
            y = np.zeros((m, full))
            y[:, 1:] = rng.dirichlet(np.full(full - 1, 0.5), size=m)
        else:
            y = np.array(y_fixed, dtype=float)
        x = _heuristic_x(table, y, rng.uniform(0.05, 0.9))
        theta = rng.uniform(0.0, 0.95)
        yb = y if y_fixed is not None else theta * lp.y + (1 - theta) * y
        xb = theta * lp.x + (1 - theta) * x
        rates = np.array([r[0] for r in mixture_rates(table, cons, xb)])
        split = _stable_split(topology, rates, lam, config.eps_stab)
        if split is not None:
            return Allocation(yb, xb, split, scheme)
    return None


# ---------------------------------------------------------------- block subproblems

def _x_step(topology, table, mixture: RateMixture, state: Allocation, l: int,
            y_fixed: Optional[np.ndarray], config: SolverConfig):
    """Optimize bandwidth on RAT ``l`` for a fixed traffic split.

    Rates are lifted to explicit variables ``r[j, a] <= C[a, j] @ x_j`` so the
    objective is separable; the bound is tight at the optimum because delay
    decreases in every rate.
    """
    n, k = topology.n, topology.k
    beta = topology.moments.beta
    total_lam = topology.arrival_rates.sum()
    lam = state.lambda_split[l]
    active = np.flatnonzero(lam > 0)
    lay = link_layout(n, None if y_fixed is None else y_fixed[l])
    L = lay.size
    na = len(active)
    if na == 0 or L == 0:
        return state.x[l], state.y[l], None
    C = rate_matrix(table, l, lay, mixture.masks[l])[:, active, :]  # (nA, na, L)
    n_atoms = C.shape[0]
    p = mixture.probs[l]
    lam_a = lam[active]
    nu_a = topology.nu[l][active]
    nx = na * L
    nr = na * n_atoms
    ny = len(lay.patterns) if y_fixed is None else 0
    size = nx + nr + ny
    r_sl = slice(nx, nx + nr)

    def objective(v, order):
        R = v[r_sl].reshape(na, n_atoms).T  # (nA, na)
        if not np.all(R > beta * lam_a[None, :]):
            return np.inf if order == 0 else (np.inf, None, None)
        f, f1, f2 = weighted_delay_r(R, lam_a[None, :], nu_a[None, :], topology.moments)
        val = float(p @ f.sum(axis=1)) / total_lam
        if order == 0:
            return val
        g = np.zeros(size)
        g[r_sl] = (p[:, None] * f1).T.reshape(-1) / total_lam
        curv = (p[:, None] * f2).T / total_lam  # (na, nA)
        return val, g, {nx + jj: np.diag(curv[jj]) for jj in range(na)}

    # Blocks: every x and y variable alone, then one block of atom rates per group.
    blocks = [np.array([q]) for q in range(nx)]
    blocks += [nx + jj * n_atoms + np.arange(n_atoms) for jj in range(na)]
    blocks += [np.array([nx + nr + q]) for q in range(ny)]

    gi, gj, gv = [], [], []
    for li in range(L):
        gi.extend([li] * na)
        gj.extend(np.arange(na) * L + li)
        gv.extend([1.0] * na)
        if ny:
            gi.append(li)
            gj.append(nx + nr + lay.link_pattern[li])
            gv.append(-1.0)
    row = L
    for jj in range(na):
        for a in range(n_atoms):
            gi.extend([row] * (L + 1))
            gj.extend(list(jj * L + np.arange(L)) + [nx + jj * n_atoms + a])
            gv.extend(list(-C[a, jj]) + [1.0])
            row += 1
    G = sp.csr_matrix((gv, (gi, gj)), shape=(row, size))
    h = np.zeros(row)
    if not ny:
        h[:L] = y_fixed[l][lay.link_mask]
    A = b = None
    if ny:
        A = np.zeros((1, size))
        A[0, nx + nr:] = 1.0
        b = np.ones(1)
    floor = beta * lam_a * (1.0 + config.eps_stab)
    lower = np.zeros(size)
    lower[r_sl] = np.repeat(floor, n_atoms)

    cap = None if mixture.sigma_cap is None else mixture.sigma_cap[l][active]
    capped = [] if cap is None else [jj for jj in range(na) if cap[jj] < 1.0 / (beta * (1.0 + config.eps_stab))]
    # Eliminate each group's links and rates together with its rate rows; the
    # link budget rows and pattern shares couple everything and go last.
    groups = [np.concatenate([jj * L + np.arange(L), blocks[nx + jj]]) for jj in range(na)]

    x0 = state.x[l][lay.link_mask, lay.link_ap, :][:, active].T  # (na, L)
    rates0 = np.einsum("ajl,jl->ja", C, x0)  # (na, nA)
    r0 = floor[:, None] + 0.99 * (rates0 - floor[:, None])
    for jj in capped:
        # Shrinking rates towards the floor raises utilization; stay strictly under the cap.
        for theta in (0.99, 0.999, 1.0 - 1e-5, 1.0 - 1e-8):
            r0[jj] = floor[jj] + theta * (rates0[jj] - floor[jj])
            if lam_a[jj] * float(p @ (1.0 / r0[jj])) < cap[jj]:
                break
    start = np.concatenate([x0.reshape(-1), r0.reshape(-1),
                            state.y[l][lay.patterns] if ny else np.zeros(0)])

    def solve(local):
        prob = ConvexSubproblem(size, objective, blocks, lower=lower, G=G, h=h, A=A, b=b, local=local,
                                groups=groups)
        return solve_convex(prob, start, max_iter=config.max_newton)

    # Utilization caps rarely bind and slow the barrier down a lot, so try
    # without them first: a relaxed optimum that meets the caps is optimal.
    v, report = solve([])
    if capped:
        util = lam_a[capped] * ((1.0 / v[r_sl].reshape(na, n_atoms)[capped]) @ p)
        if np.any(util >= cap[capped]):
            v, report = solve([LocalConstraint(nx + jj, _util_cap(p, lam_a[jj], cap[jj])) for jj in capped])
    x_new = np.zeros_like(state.x[l])
    block = np.zeros((L, k))
    block[:, active] = v[:nx].reshape(na, L).T
    x_new[lay.link_mask, lay.link_ap, :] = block
    y_new = state.y[l].copy()
    if ny:
        y_new[:] = 0.0
        y_new[lay.patterns] = v[nx + nr:]
    return x_new, y_new, report


def _util_cap(p, lam, sigma):
    """Expected busy fraction ``lam * sum_a p_a / r_a`` capped at ``sigma``."""

    def fun(r):
        util = lam * float(p @ (1.0 / r))
        jac = -lam * p / r ** 2
        return np.array([util - sigma]), jac[None, :], [(np.eye(len(r)), 2.0 * lam * p / r ** 3)]

    return fun


def _lambda_bounds(topology, table, mixture: RateMixture, x, config):
    beta = topology.moments.beta
    rates = mixture_rates(table, mixture, x)
    ub = np.zeros((topology.m, topology.k))
    for l, R in enumerate(rates):
        rmin = R[mixture.maximal(l)].min(axis=0)
        ub[l] = rmin / (beta * (1.0 + config.eps_stab))
        if mixture.sigma_cap is not None:
            with np.errstate(divide="ignore"):
                inv = mixture.probs[l] @ (1.0 / np.where(R > 0, R, np.inf))
            cap = np.where(inv > 0, mixture.sigma_cap[l] / np.where(inv > 0, inv, 1.0), np.inf)
            ub[l] = np.minimum(ub[l], cap)
    return rates, ub


def _lambda_step(topology, table, mixture: RateMixture, state: Allocation, config: SolverConfig):
    lam = topology.arrival_rates
    total_lam = lam.sum()
    m, k = topology.m, topology.k
    rates, ub = _lambda_bounds(topology, table, mixture, state.x, config)
    free = (ub > 1e-12 * max(1.0, lam.max())) & (lam[None, :] > 0)
    groups = [j for j in range(k) if free[:, j].any()]
    if any(lam[j] > 0 and ub[:, j][free[:, j]].sum() <= lam[j] * (1 + 1e-12) for j in range(k)):
        return state.lambda_split.copy()
    var_l, var_j, blocks = [], [], []
    for j in groups:
        ls = np.flatnonzero(free[:, j])
        blocks.append(np.arange(len(var_l), len(var_l) + len(ls)))
        var_l.extend(ls)
        var_j.extend([j] * len(ls))
    var_l, var_j = np.array(var_l), np.array(var_j)
    size = len(var_l)
    if size == 0:
        return state.lambda_split.copy()
    nu = topology.nu[var_l, var_j]
    # Rates and atom weights per variable; padding repeats the first atom with weight 0.
    width = max(len(pr) for pr in mixture.probs)
    R = np.ones((size, width))
    P = np.zeros((size, width))
    for q, (l, j) in enumerate(zip(var_l, var_j)):
        na = len(mixture.probs[l])
        R[q, :na] = rates[l][:, j]
        P[q, :na] = mixture.probs[l]
        R[q, na:] = R[q, 0]
    beta = topology.moments.beta

    def objective(v, order):
        if not np.all(R > beta * v[:, None]):
            return np.inf if order == 0 else (np.inf, None, None)
        a, b1, b2 = weighted_delay_lam(R, v[:, None], nu[:, None], topology.moments)
        f = (P * a).sum(axis=1)
        f1 = (P * b1).sum(axis=1)
        f2 = (P * b2).sum(axis=1)
        val = float(f.sum()) / total_lam
        if order == 0:
            return val
        hess = [np.diag(f2[blk] / total_lam) for blk in blocks]
        return val, f1 / total_lam, hess

    G = sp.csr_matrix((-np.ones(size), (np.searchsorted(groups, var_j), np.arange(size))),
                      shape=(len(groups), size))
    h = -lam[groups]
    upper = ub[var_l, var_j]
    start = np.zeros(size)
    for j, blk in zip(groups, blocks):
        u = upper[blk]
        theta = 0.5 * (1.0 + lam[j] / u.sum())
        start[blk] = u * theta
    prob = ConvexSubproblem(size, objective, blocks, lower=np.zeros(size), upper=upper, G=G, h=h)
    v, _ = solve_convex(prob, start, max_iter=config.max_newton)
    split = np.zeros((m, k))
    split[var_l, var_j] = v
    tot = split.sum(axis=0)
    scale = np.where(tot > lam, lam / np.where(tot > 0, tot, 1.0), 1.0)
    return split * scale[None, :]


@dataclass
class MixtureSolve:
    allocation: Allocation
    objective: float
    alternation: AlternationResult
    reports: list = field(default_factory=list)


def solve_mixture(topology: Topology, table: EfficiencyTable, mixture: RateMixture, start: Allocation,
                  config: SolverConfig = SolverConfig(), y_fixed: Optional[np.ndarray] = None) -> MixtureSolve:
    """Alternate between the per-RAT bandwidth blocks and the traffic-split block."""
    reports = []

    def x_step(state: Allocation) -> Allocation:
        new = state.copy()
        for l in range(topology.m):
            new.x[l], new.y[l], rep = _x_step(topology, table, mixture, state, l, y_fixed, config)
            if rep is not None:
                reports.append(rep)
        return new

    def lam_step(state: Allocation) -> Allocation:
        new = state.copy()
        new.lambda_split = _lambda_step(topology, table, mixture, state, config)
        return new

    def objective(state: Allocation) -> float:
        return mixture_objective(topology, table, mixture, state.x, state.lambda_split)

    first = start.copy()
    # Close the traffic split onto equality so every sweep starts from the same kind of point.
    lam = topology.arrival_rates
    tot = first.lambda_split.sum(axis=0)
    first.lambda_split *= np.where(tot > lam, lam / np.where(tot > 0, tot, 1.0), 1.0)[None, :]
    result = alternate([x_step, lam_step], objective, first, tol=config.eps_alt, max_sweeps=config.max_sweeps)
    if result.failure:
        log.warning("alternation stopped early: %s", result.failure)
    return MixtureSolve(result.state, result.history[-1], result, reports)


def solve_multistart(topology: Topology, table: EfficiencyTable, mixture: RateMixture, first: Allocation,
                     config: SolverConfig = SolverConfig(), y_fixed: Optional[np.ndarray] = None,
                     cap: Optional[CapacityResult] = None) -> MixtureSolve:
    """Screen ``first`` and ``config.starts - 1`` random starts for a few sweeps, then finish the best.

    Alternation only reaches a partial optimum, and different starts land in
    different ones.  The returned history runs from the chosen start.
    """
    if config.starts <= 1:
        return solve_mixture(topology, table, mixture, first, config, y_fixed)
    cap = cap or capacity(topology, table, y_fixed=y_fixed)
    rng = np.random.default_rng(config.start_seed)
    starts = [first]
    for _ in range(config.starts - 1):
        st = random_start(topology, table, rng, cap, config, y_fixed, first.scheme)
        if st is not None:
            starts.append(st)
    screen = replace(config, max_sweeps=config.screen_sweeps)
    runs = [solve_mixture(topology, table, mixture, st, screen, y_fixed) for st in starts]
    best = min(range(len(runs)), key=lambda q: runs[q].objective)
    head = runs[best]
    if head.alternation.converged or head.alternation.failure:
        return head
    tail = solve_mixture(topology, table, mixture, head.allocation, config, y_fixed)
    alt = AlternationResult(tail.alternation.state, head.alternation.history + tail.alternation.history[1:],
                            head.alternation.sweeps + tail.alternation.sweeps, tail.alternation.converged,
                            tail.alternation.failure)
    return MixtureSolve(tail.allocation, tail.objective, alt, head.reports + tail.reports)


def delay_report(topology, table, mixture, allocation: Allocation, objective: float,
                 alt: Optional[AlternationResult] = None, cap: Optional[CapacityResult] = None) -> DelayReport:
    cons = RateMixture.conservative(topology.n, topology.m)
    rates = np.array([r[0] for r in mixture_rates(table, cons, allocation.x)])
    delays = queue_delays(topology, table, mixture, allocation.x, allocation.lambda_split)
    rep = DelayReport(objective=objective, delays=delays, rates=rates,
                      lambda_split=allocation.lambda_split.copy())
    if alt is not None:
        rep.history = list(alt.history)
        rep.sweeps = alt.sweeps
        rep.converged = alt.converged
        rep.message = alt.failure or ""
    if cap is not None:
        rep.capacity_scale = cap.scale
        rep.bottleneck = cap.bottleneck
    return rep


def _vertex_rat(s, y, x, lam, shrink, y_fixed=None):
    """Basic solution of the LP that keeps every group's rate on one RAT.

    Variables are the pattern shares and link shares; rates may only grow.
    The linear cost charges links away from each group's dominant AP double,
    which steers the vertex toward single-AP association.
    """
    full, n, k = x.shape
    rate = np.where(lam > 0, np.einsum("aij,aij->j", s, x), 0.0)
    pats = np.arange(1, full)
    links = [(a, i) for a in pats for i in range(n) if a >> i & 1]
    ny, nl = full - 1, len(links)
    nv = ny + nl * k
    dom = x.sum(axis=0).argmax(axis=0)
    la = np.array([a for a, _ in links])
    li = np.array([i for _, i in links])
    xcol = ny + np.arange(nl * k).reshape(nl, k)
    cost = np.zeros(nv)
    cost[ny:] = (1.0 + (li[:, None] != dom[None, :])).ravel()
    cap = sp.csr_matrix((np.concatenate([np.ones(nl * k), -np.ones(nl)]),
                         (np.concatenate([np.repeat(np.arange(nl), k), np.arange(nl)]),
                          np.concatenate([xcol.ravel(), la - 1]))), shape=(nl, nv))
    coef = s[la, li, :]  # (nl, k)
    rates = sp.csr_matrix((-coef.ravel(), (np.tile(np.arange(k), nl), xcol.ravel())), shape=(k, nv))
    bounds = [(0, None)] * nv
    if y_fixed is not None:
        bounds[:ny] = [(v, v) for v in y_fixed[1:]]
    res = linprog(cost, A_ub=sp.vstack([cap, rates]).tocsr(),
                  b_ub=np.concatenate([np.zeros(nl), -rate * (1.0 - shrink)]),
                  A_eq=sp.csr_matrix(np.concatenate([np.ones((1, ny)), np.zeros((1, nl * k))], axis=1)),
                  b_eq=[1.0], bounds=bounds, method="highs-ds")
    if res.status != 0:
        return None
    v = np.maximum(res.x, 0.0)
    y2 = np.zeros(full)
    y2[1:] = v[:ny]
    y2 /= y2.sum()
    x2 = np.zeros_like(x)
    x2[la, li, :] = v[xcol]
    over = x2.sum(axis=2) / np.maximum(y2[:, None], 1e-300)
    x2 /= np.maximum(over, 1.0)[:, :, None]
    return y2, x2


def purify(topology: Topology, table: EfficiencyTable, allocation: Allocation, shrink: float = 1e-10,
           y_fixed: Optional[np.ndarray] = None) -> Allocation:
    """Move a conservative solution to a vertex of its optimal face.

    Barrier solutions sit in the middle of the face when the optimum is not
    unique, spreading groups over many APs.  The delay depends on ``x`` only
    through the per-queue rates, so any allocation keeping those rates is
    equally good; this picks a basic one.  Falls back to the input when the
    LP fails or the objective would rise by more than ``10 * shrink`` relative.
    """
    out = allocation.copy()
    # Traffic dust on a RAT would need a rate below the LP tolerance; hand it to the main RAT.
    lam = out.lambda_split
    total = lam.sum(axis=0)
    dust = (lam > 0) & (lam < 1e-9 * total[None, :])
    if dust.any():
        main = lam.argmax(axis=0)
        moved = np.where(dust, lam, 0.0).sum(axis=0)
        lam[dust] = 0.0
        lam[main, np.arange(topology.k)] += moved
    for l in range(topology.m):
        got = _vertex_rat(table.s[l], allocation.y[l], allocation.x[l], lam[l], shrink,
                          None if y_fixed is None else y_fixed[l])
        if got is None:
            log.info("RAT %d: vertex LP failed, keeping the barrier solution", l)
            return allocation
        out.y[l], out.x[l] = got
    if out.violations(topology):
        return allocation
    before = objective_p1(topology, allocation, table)
    after = objective_p1(topology, out, table)
    if not after <= before * (1.0 + 10.0 * shrink):
        return allocation
    return out


def over_capacity(topology, cap: CapacityResult, scheme: str):
    n, m, k = topology.n, topology.m, topology.k
    alloc = Allocation(orthogonal_shares(n, m), np.zeros((m, 1 << n, n, k)),
                       np.tile(topology.arrival_rates / m, (m, 1)), scheme)
    rep = DelayReport(objective=float("inf"), delays=np.full((m, k), np.inf), rates=np.zeros((m, k)),
                      lambda_split=alloc.lambda_split, feasible=False, capacity_scale=cap.scale,
                      bottleneck=cap.bottleneck, converged=False,
                      message=f"over capacity: load admits at most {cap.scale:.6g} x the requested rates")
    return alloc, rep


def zero_load(topology, scheme: str, y=None):
    n, m, k = topology.n, topology.m, topology.k
    y = orthogonal_shares(n, m) if y is None else np.array(y, dtype=float)
    alloc = Allocation(y, np.zeros((m, 1 << n, n, k)), np.zeros((m, k)), scheme)
    rep = DelayReport(objective=0.0, delays=np.zeros((m, k)), rates=np.zeros((m, k)),
                      lambda_split=alloc.lambda_split, capacity_scale=float("inf"))
    return alloc, rep


def solve_p1(topology: Topology, table: Optional[EfficiencyTable] = None,
             config: SolverConfig = SolverConfig()):
    """Minimize the traffic-weighted mean delay with always-on interference.

    Returns ``(Allocation, DelayReport)``; beyond capacity the report has
    ``feasible=False`` and carries the stabilizable load scale and bottleneck groups.
    """
    table = table or build_efficiency_table(topology)
    if topology.arrival_rates.sum() <= 0:
        return zero_load(topology, "conservative")
    cap = capacity(topology, table)
    start = initial_feasible_allocation(topology, table, config) if cap.scale > 1.0 else None
    if start is None:
        return over_capacity(topology, cap, "conservative")
    mixture = RateMixture.conservative(topology.n, topology.m)
    sol = solve_multistart(topology, table, mixture, start, config, cap=cap)
    alloc = purify(topology, table, sol.allocation) if config.vertex else sol.allocation
    alloc.scheme = "conservative"
    return alloc, delay_report(topology, table, mixture, alloc, objective_p1(topology, alloc, table),
                               sol.alternation, cap)
