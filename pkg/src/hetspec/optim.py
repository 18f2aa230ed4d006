"""Log-barrier interior-point solver and the alternating block driver.

Each Newton step solves the augmented system

    [ H    G^T   A^T ] [dx]   [-grad]
    [ G   -D^-1   0  ] [ u] = [  0  ]
    [ A    0      0  ] [ w]   [ rb  ]

with a sparse LU, where ``H`` holds the block-diagonal objective and
local-constraint curvature plus the bound barriers and ``D`` the barrier
curvature of the coupling rows ``G x <= h``.  Barrier Hessians become very
ill-conditioned as ``mu -> 0``; the augmented form stays accurate where
explicit block inverses and Woodbury updates do not.  The LU uses a fixed
elimination order (each group's variables, then its private rows) without
pivoting, which keeps fill low; iterative refinement checks the result and a
pivoted factorization takes over when it is not accurate enough.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spl

log = logging.getLogger(__name__)


class SolveError(RuntimeError):
    pass


class InfeasibleStartError(SolveError):
    pass


@dataclass
class LocalConstraint:
    """Convex constraints ``g(x_b) <= 0`` that only touch one objective block.

    ``fun`` maps the block's variables to ``(values, jacobian, hessians)``.
    ``hessians`` is ``None`` for linear rows or a per-row list whose entries
    are ``None``, a dense matrix, or a factored pair ``(R, M)`` meaning
    ``R.T @ M @ R`` (``M`` may be a weight vector).
    """

    block: int
    fun: Callable[[np.ndarray], tuple]


@dataclass
class ConvexSubproblem:
    """``objective(x, order)`` returns ``f`` for order 0, else ``(f, grad, hessians)``.

    ``hessians`` is a per-block list (or a ``{block: term}`` dict for sparse
    curvature) in the same forms accepted for local-constraint Hessians.
    """

    size: int
    objective: Callable
    blocks: list[np.ndarray]
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    G: Any = None  # coupling rows, G @ x <= h
    h: Optional[np.ndarray] = None
    A: Optional[np.ndarray] = None  # equality rows, A @ x == b
    b: Optional[np.ndarray] = None
    local: list[LocalConstraint] = field(default_factory=list)
    # Elimination hint: each group's variables go first together with the
    # coupling rows that only touch that group.  Defaults to the blocks.
    groups: Optional[list[np.ndarray]] = None


@dataclass
class SolveReport:
    objective: float
    iterations: int
    feasibility_residual: float
    kkt_residual: float
    converged: bool
    wall_time: float
    mu: float
    stages: int = 0
    kept_start: bool = False


class _Structure:
    """Index bookkeeping that stays fixed across Newton steps."""

    def __init__(self, prob: ConvexSubproblem):
        n = prob.size
        self.n = n
        self.blocks = [np.asarray(b, dtype=int) for b in prob.blocks]
        covered = np.concatenate(self.blocks) if self.blocks else np.zeros(0, int)
        if covered.size != n or np.unique(covered).size != n:
            raise ValueError("blocks must partition the variable indices")
        lo = prob.lower if prob.lower is not None else np.full(n, -np.inf)
        hi = prob.upper if prob.upper is not None else np.full(n, np.inf)
        self.lower, self.upper = np.asarray(lo, float), np.asarray(hi, float)
        self.has_lo = np.isfinite(self.lower)
        self.has_hi = np.isfinite(self.upper)
        if prob.G is not None and prob.G.shape[0] > 0:
            self.G = sp.csr_matrix(prob.G)
            self.h = np.asarray(prob.h, float)
        else:
            self.G = None
            self.h = np.zeros(0)
        if prob.A is not None and np.size(prob.A):
            self.A = sp.csr_matrix(np.atleast_2d(prob.A))
            self.b = np.atleast_1d(np.asarray(prob.b, float))
        else:
            self.A = None
            self.b = np.zeros(0)
        self.local = prob.local
        self.objective = prob.objective
        # Sparsity pattern of the block-diagonal part of H.
        rows, cols = [], []
        for blk in self.blocks:
            rows.append(np.repeat(blk, len(blk)))
            cols.append(np.tile(blk, len(blk)))
        self.h_rows = np.concatenate(rows)
        self.h_cols = np.concatenate(cols)
        self.h_offsets = np.cumsum([0] + [len(blk) ** 2 for blk in self.blocks])
        self.diag_pos = np.empty(n, dtype=int)
        for bi, blk in enumerate(self.blocks):
            sz = len(blk)
            self.diag_pos[blk] = self.h_offsets[bi] + np.arange(sz) * (sz + 1)
        self.local_blocks = sorted({c.block for c in self.local})
        self.mg = 0 if self.G is None else self.G.shape[0]
        self.me = 0 if self.A is None else self.A.shape[0]
        dim = n + self.mg + self.me
        fixed = []
        if self.G is not None:
            gc = self.G.tocoo()
            fixed.append((gc.row + n, gc.col, gc.data))
            fixed.append((gc.col, gc.row + n, gc.data))
        if self.A is not None:
            ac = self.A.tocoo()
            fixed.append((ac.row + n + self.mg, ac.col, ac.data))
            fixed.append((ac.col, ac.row + n + self.mg, ac.data))
        r0, c0, v0 = (tuple(np.concatenate(part) for part in zip(*fixed)) if fixed
                      else (np.zeros(0, int), np.zeros(0, int), np.zeros(0)))
        self.fixed_vals = v0
        self.dim = dim
        self.order = self._elimination_order(prob.groups or self.blocks)
        inv = np.empty(dim, dtype=np.int64)
        inv[self.order] = np.arange(dim)
        # Fixed CSC pattern of the permuted KKT matrix; each Newton step only refills data.
        gdiag = np.arange(n, n + self.mg)
        rows = inv[np.concatenate([self.h_rows, r0, gdiag]).astype(np.int64)]
        cols = inv[np.concatenate([self.h_cols, c0, gdiag]).astype(np.int64)]
        order = np.lexsort((rows, cols))
        self.kkt_perm = order
        self.kkt_indices = rows[order].astype(np.int32)
        self.kkt_indptr = np.searchsorted(cols[order], np.arange(dim + 1)).astype(np.int32)
        order_h = np.lexsort((self.h_cols, self.h_rows))
        self.h_perm = order_h
        self.h_indices = self.h_cols[order_h].astype(np.int32)
        self.h_indptr = np.searchsorted(self.h_rows[order_h], np.arange(n + 1)).astype(np.int32)


    def _elimination_order(self, groups) -> np.ndarray:
        """Group variables followed by their local rows; shared rows and the rest last."""
        n = self.n
        owner = np.full(n, -1)
        for gi, grp in enumerate(groups):
            owner[np.asarray(grp, dtype=int)] = gi
        local = [[] for _ in groups]
        shared = []
        if self.G is not None:
            indptr, idx = self.G.indptr, self.G.indices
            for row in range(self.mg):
                own = np.unique(owner[idx[indptr[row]:indptr[row + 1]]])
                if own.size == 1 and own[0] >= 0:
                    local[own[0]].append(n + row)
                else:
                    shared.append(n + row)
        order = []
        for grp, rows in zip(groups, local):
            order.extend(np.asarray(grp, dtype=int).tolist())
            order.extend(rows)
        order.extend(np.flatnonzero(owner < 0).tolist())
        order.extend(shared)
        order.extend(range(n + self.mg, self.dim))
        order = np.asarray(order, dtype=np.int64)
        if order.size != self.dim or np.unique(order).size != self.dim:
            raise ValueError("elimination groups must not overlap")
        return order


def _slacks(st: _Structure, x):
    s_lo = x[st.has_lo] - st.lower[st.has_lo]
    s_hi = st.upper[st.has_hi] - x[st.has_hi]
    s_g = st.h - st.G @ x if st.G is not None else np.zeros(0)
    return s_lo, s_hi, s_g


def _barrier(st: _Structure, x, mu):
    s_lo, s_hi, s_g = _slacks(st, x)
    if (s_lo.size and s_lo.min() <= 0) or (s_hi.size and s_hi.min() <= 0) or (s_g.size and s_g.min() <= 0):
        return np.inf
    phi = np.log(s_lo).sum() + np.log(s_hi).sum() + np.log(s_g).sum()
    for c in st.local:
        vals = c.fun(x[st.blocks[c.block]])[0]
        if np.any(vals >= 0):
            return np.inf
        phi += np.log(-vals).sum()
    f = st.objective(x, 0)
    if not np.isfinite(f):
        return np.inf
    return f - mu * phi


def _dense(term, size):
    """Expand a Hessian term (dense matrix or factored ``(R, M)``) to a dense block."""
    if isinstance(term, tuple):
        r, m = term
        r = np.atleast_2d(np.asarray(r, float))
        m = np.asarray(m, float)
        return (r.T * m) @ r if m.ndim == 1 else r.T @ m @ r
    return np.asarray(term, float).reshape(size, size)


def _factor(kkt, pivoting: bool = False):
    """LU of the permuted KKT matrix.

    The structured elimination order keeps fill low as long as diagonal
    pivots are usable; ``pivoting`` switches to a symmetric minimum-degree
    ordering with threshold pivoting for the rare badly scaled system.
    """
    if pivoting:
        return spl.splu(kkt, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.1,
                        options={"SymmetricMode": True})
    return spl.splu(kkt, permc_spec="NATURAL", diag_pivot_thresh=0.0, options={"SymmetricMode": True})


class _NewtonSystem:
    """Sparse LU of the augmented barrier Newton system."""

    def __init__(self, st: _Structure, diag: np.ndarray, d_g: np.ndarray, terms: dict):
        self.st = st
        n = st.n
        vals = np.zeros(st.h_offsets[-1])
        vals[st.diag_pos] = diag
        for bi, tl in terms.items():
            blk = st.blocks[bi]
            sz = len(blk)
            hb = sum(_dense(t, sz) for t in tl)
            lo, hi = st.h_offsets[bi], st.h_offsets[bi + 1]
            vals[lo:hi] += (0.5 * (hb + hb.T)).reshape(-1)
        self.diag = diag
        self.d_g = d_g
        parts = [vals, st.fixed_vals]
        if st.mg:
            parts.append(-1.0 / d_g)
        data = np.concatenate(parts)[st.kkt_perm]
        self.kkt = sp.csc_matrix((data, st.kkt_indices, st.kkt_indptr), shape=(st.dim, st.dim))
        self.h_block = sp.csr_matrix((vals[st.h_perm], st.h_indices, st.h_indptr), shape=(n, n))
        self.pivoting = False
        self.lu = self._factorize(False)

    def _factorize(self, pivoting: bool):
        self.pivoting = pivoting
        try:
            return _factor(self.kkt, pivoting)
        except RuntimeError:
            if not pivoting:
                return self._factorize(True)
            st = self.st
            vals = np.abs(self.kkt.data).max() if self.kkt.nnz else 1.0
            reg = np.concatenate([np.full(st.n, 1e-14 * max(1.0, vals)), np.full(st.mg + st.me, -1e-14)])
            reg_perm = sp.diags(reg[st.order])
            return _factor((self.kkt + reg_perm).tocsc(), True)

    def apply_h(self, v):
        out = self.h_block @ v
        if self.st.G is not None:
            out += self.st.G.T @ (self.d_g * (self.st.G @ v))
        return out

    def solve(self, rhs, rb, passes: int = 3):
        """Solve H dx + A^T w = rhs, A dx = rb, refining against the exact operator."""
        dx, w, res = self._refine(rhs, rb, passes)
        if res > 1e-6 and not self.pivoting:
            self.lu = self._factorize(True)
            dx, w, res = self._refine(rhs, rb, passes)
        return dx, w

    def _refine(self, rhs, rb, passes):
        st = self.st
        n = st.n
        dx = np.zeros(n)
        w = np.zeros(st.me)
        rb = np.asarray(rb, float)
        r1, r2 = rhs.copy(), rb.copy()
        scale = max(np.abs(rhs).max(), np.abs(r2).max() if r2.size else 0.0, 1e-300)
        full = np.zeros(st.dim)
        z = np.empty(st.dim)
        best = np.inf
        res = np.inf
        for _ in range(passes + 1):
            full[:n] = r1
            full[n + st.mg:] = r2
            z[st.order] = self.lu.solve(full[st.order])
            dx += z[:n]
            w += z[n + st.mg:]
            r1 = rhs - self.apply_h(dx)
            r2 = rb.copy()
            if st.A is not None:
                r1 -= st.A.T @ w
                r2 = r2 - st.A @ dx
            res = max(np.abs(r1).max(), np.abs(r2).max() if r2.size else 0.0) / scale
            if res < 1e-14 or res > 0.5 * best:
                break
            best = res
        return dx, w, min(res, best)


def _derivatives(st: _Structure, x, mu):
    f, g, hobj = st.objective(x, 2)
    g = np.asarray(g, dtype=float)
    grad = g.copy()
    s_lo, s_hi, s_g = _slacks(st, x)
    diag = np.zeros(st.n)
    grad[st.has_lo] -= mu / s_lo
    diag[st.has_lo] += mu / s_lo ** 2
    grad[st.has_hi] += mu / s_hi
    diag[st.has_hi] += mu / s_hi ** 2
    d_g = np.zeros(0)
    if st.G is not None:
        grad += st.G.T @ (mu / s_g)
        d_g = mu / s_g ** 2
    if hobj is None:
        items = ()
    elif isinstance(hobj, dict):
        items = hobj.items()
    else:
        items = enumerate(hobj)
    terms = {bi: [t] for bi, t in items if t is not None}
    duals_local = []
    for c in st.local:
        b = st.blocks[c.block]
        vals, jac, hess = c.fun(x[b])
        vals = np.atleast_1d(vals)
        jac = np.atleast_2d(jac)
        neg = -vals
        grad[b] += mu * (jac / neg[:, None]).sum(axis=0)
        terms.setdefault(c.block, []).append((jac, mu / neg ** 2))
        if hess is not None:
            for q, hq in enumerate(hess):
                if hq is None:
                    continue
                if isinstance(hq, tuple):
                    r, m = hq
                    terms[c.block].append((r, np.asarray(m, float) * (mu / neg[q])))
                else:
                    terms[c.block].append(np.asarray(hq, float) * (mu / neg[q]))
        duals_local.append((c, mu / neg, jac))
    return f, g, grad, diag, d_g, terms, duals_local


def _max_step(st: _Structure, x, dx):
    alpha = np.inf
    s_lo, s_hi, s_g = _slacks(st, x)
    d_lo = dx[st.has_lo]
    neg = d_lo < 0
    if neg.any():
        alpha = min(alpha, np.min(s_lo[neg] / -d_lo[neg]))
    d_hi = dx[st.has_hi]
    pos = d_hi > 0
    if pos.any():
        alpha = min(alpha, np.min(s_hi[pos] / d_hi[pos]))
    if st.G is not None:
        gd = st.G @ dx
        pos = gd > 0
        if pos.any():
            alpha = min(alpha, np.min(s_g[pos] / gd[pos]))
    return alpha


def feasibility_residual(prob: ConvexSubproblem, x) -> float:
    """Largest violation over all constraints (0 when strictly feasible)."""
    st = prob if isinstance(prob, _Structure) else _Structure(prob)
    s_lo, s_hi, s_g = _slacks(st, x)
    worst = 0.0
    for s in (s_lo, s_hi, s_g):
        if s.size:
            worst = max(worst, float(-s.min()))
    for c in st.local:
        vals = np.atleast_1d(c.fun(x[st.blocks[c.block]])[0])
        worst = max(worst, float(vals.max()))
    if st.A is not None:
        worst = max(worst, float(np.abs(st.A @ x - st.b).max()))
    return worst


def solve_convex(prob: ConvexSubproblem, start, *, mu0=1.0, mu_factor: float = 0.2,
                 mu_stop: float = 1e-9, max_iter: int = 500, center_tol: float = 1e-5,
                 final_tol: float = 1e-13, eq_tol: float = 1e-10):
    """Minimize a convex problem from a strictly feasible start.

    Returns ``(x, SolveReport)``.  The returned point never has a larger
    objective than ``start``; on hitting ``max_iter`` the best iterate so far is
    returned with ``converged=False``.  ``mu0="auto"`` picks the first barrier
    weight from the gradient balance at ``start``.
    """
    t0 = time.perf_counter()
    st = _Structure(prob)
    x = np.array(start, dtype=float)
    if st.A is not None and np.abs(st.A @ x - st.b).max() > eq_tol:
        raise InfeasibleStartError("start violates the equality constraints")
    if not np.isfinite(_barrier(st, x, 1.0)):
        raise InfeasibleStartError("start is not strictly feasible")
    f_start = st.objective(x, 0)
    mu = _initial_mu(st, x, mu_stop) if mu0 == "auto" else float(mu0)
    iters = 0
    stages = 0
    converged = False
    while True:
        stages += 1
        tol = final_tol if mu * mu_factor < mu_stop or mu < mu_stop else center_tol
        psi = _barrier(st, x, mu)
        while iters < max_iter:
            f, g_obj, grad, diag, d_g, terms, _ = _derivatives(st, x, mu)
            system = _NewtonSystem(st, diag, d_g, terms)
            rb = st.b - st.A @ x if st.A is not None else np.zeros(0)
            dx, _ = system.solve(-grad, rb)
            dec2 = float(dx @ system.apply_h(dx))
            iters += 1
            if dec2 / 2.0 <= tol:
                break
            alpha = min(1.0, 0.99 * _max_step(st, x, dx))
            slope = float(grad @ dx)
            while alpha > 1e-16:
                trial = x + alpha * dx
                psi_t = _barrier(st, trial, mu)
                if psi_t <= psi + 0.01 * alpha * slope:
                    break
                alpha *= 0.5
            else:
                log.debug("line search stalled at mu=%g", mu)
                break
            if psi_t >= psi and alpha < 1e-12:
                break
            x, psi = trial, psi_t
        else:
            break
        if mu < mu_stop:
            converged = True
            break
        mu *= mu_factor
    f_final = st.objective(x, 0)
    kkt = _kkt_residual(st, x, mu)
    feas = feasibility_residual(st, x)
    kept = False
    if not f_final <= f_start:
        x = np.array(start, dtype=float)
        f_final = f_start
        kept = True
    report = SolveReport(objective=float(f_final), iterations=iters, feasibility_residual=feas,
                         kkt_residual=kkt, converged=converged, wall_time=time.perf_counter() - t0,
                         mu=mu, stages=stages, kept_start=kept)
    return x, report


def _initial_mu(st: _Structure, x, mu_stop: float) -> float:
    """Barrier weight that best balances the objective gradient at ``x`` (least squares).

    A warm start near an optimum gets a small weight, so the path is not
    dragged back towards the analytic center.
    """
    _, g_obj, grad, *_ = _derivatives(st, x, 1.0)
    b = grad - g_obj  # gradient of the barrier term at unit weight
    bb = float(b @ b)
    if bb <= 0:
        return 1.0
    return float(np.clip(-(g_obj @ b) / bb, mu_stop, 1.0))


def _kkt_residual(st: _Structure, x, mu) -> float:
    """Relative Lagrangian stationarity with first-order multiplier estimates.

    Multipliers are ``mu / slack`` corrected by one Newton step, which removes
    the stiffness of the barrier terms near active constraints.
    """
    f, g_obj, grad, diag, d_g, terms, locals_ = _derivatives(st, x, mu)
    system = _NewtonSystem(st, diag, d_g, terms)
    rb = st.b - st.A @ x if st.A is not None else np.zeros(0)
    dx, w = system.solve(-grad, rb)
    s_lo, s_hi, s_g = _slacks(st, x)
    r = g_obj.copy()
    r[st.has_lo] -= mu / s_lo * (1.0 - dx[st.has_lo] / s_lo)
    r[st.has_hi] += mu / s_hi * (1.0 + dx[st.has_hi] / s_hi)
    if st.G is not None:
        r += st.G.T @ (mu / s_g * (1.0 + (st.G @ dx) / s_g))
    for c, u, jac in locals_:
        b = st.blocks[c.block]
        neg = mu / u
        r[b] += jac.T @ (u * (1.0 + (jac @ dx[b]) / neg))
    if st.A is not None:
        r += st.A.T @ w
    return float(np.abs(r).max() / max(1.0, np.abs(g_obj).max()))


@dataclass
class AlternationResult:
    state: Any
    history: list[float]
    sweeps: int
    converged: bool
    failure: Optional[str] = None


def alternate(steps: Sequence[Callable[[Any], Any]], objective: Callable[[Any], float], state,
              *, tol: float = 1e-6, max_sweeps: int = 100) -> AlternationResult:
    """Block-coordinate descent: apply each step in turn, keeping only non-worsening moves.

    Stops when a full sweep improves the objective by less than ``tol``
    (relative) or after ``max_sweeps`` sweeps.
    """
    current = objective(state)
    history = [current]
    for sweep in range(1, max_sweeps + 1):
        for step in steps:
            try:
                cand = step(state)
            except SolveError as exc:
                return AlternationResult(state, history, sweep, False, failure=str(exc))
            value = objective(cand)
            if value <= current:
                state, current = cand, value
        prev = history[-1]
        history.append(current)
        if current > prev * (1 + 1e-12) + 1e-300:
            raise AssertionError(f"alternation objective increased: {prev!r} -> {current!r}")
        if not np.isfinite(prev) or prev - current > tol * abs(prev):
            continue
        return AlternationResult(state, history, sweep, True)
    return AlternationResult(state, history, max_sweeps, False)
