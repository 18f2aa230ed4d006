"""Closed-form delay and utilization formulas for the per-UE queues.

All delay functions return ``inf`` outside the stability region instead of
raising, so optimizers can treat instability as an infinite objective.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

INF = float("inf")


@dataclass(frozen=True)
class ServiceMoments:
    """Service-time moments E[X] = beta/r and E[X^2] = eta/r^2.

    ``beta=1, eta=2`` is exponential service, ``beta=1, eta=1`` deterministic.
    """

    beta: float = 1.0
    eta: float = 2.0

    def __post_init__(self):
        if self.beta <= 0 or self.eta <= 0:
            raise ValueError("beta and eta must be positive")
        if self.eta < self.beta ** 2 * (1 - 1e-12):
            raise ValueError(f"eta={self.eta} < beta^2={self.beta ** 2} is not a valid second moment")


EXPONENTIAL = ServiceMoments(1.0, 2.0)
DETERMINISTIC = ServiceMoments(1.0, 1.0)


def delay_mm1(r: float, lam: float) -> float:
    if r > lam:
        return 1.0 / (r - lam)
    return INF


def delay_vacation(r: float, lam: float, nu: float) -> float:
    """Mean sojourn time with a single vacation (E[V^2] = nu) after every packet."""
    if r > lam:
        return (2.0 + r * lam * nu) / (2.0 * (r - lam))
    return INF


def delay_general(r: float, lam: float, moments: ServiceMoments = EXPONENTIAL, nu: float = 0.0) -> float:
    b, e = moments.beta, moments.eta
    if r > b * lam:
        return ((0.5 * e - b * b) * lam + b * r + 0.5 * nu * lam * r * r) / (r * (r - b * lam))
    return INF


def weighted_delay_r(r, lam, nu, moments: ServiceMoments = EXPONENTIAL):
    """``lam * t(r, lam)`` and its first two derivatives in ``r`` (vectorized).

    Inputs must lie in the stable region ``r > beta * lam``.
    """
    b, e = moments.beta, moments.eta
    r = np.asarray(r, dtype=float)
    c0 = (0.5 * e - b * b) * lam
    c2 = 0.5 * nu * lam
    num = c0 + b * r + c2 * r * r
    dnum = b + 2.0 * c2 * r
    ddnum = 2.0 * c2
    den = r * r - b * lam * r
    dden = 2.0 * r - b * lam
    f = num / den
    f1 = (dnum - f * dden) / den
    f2 = (ddnum - 2.0 * f1 * dden - 2.0 * f) / den
    return lam * f, lam * f1, lam * f2


def weighted_delay_lam(r, lam, nu, moments: ServiceMoments = EXPONENTIAL):
    """``lam * t(r, lam)`` and its first two derivatives in ``lam`` (vectorized)."""
    b, e = moments.beta, moments.eta
    r = np.asarray(r, dtype=float)
    lam = np.asarray(lam, dtype=float)
    a0 = b * r
    a1 = (0.5 * e - b * b) + 0.5 * nu * r * r
    d0 = r * r
    d1 = b * r
    den = d0 - d1 * lam
    h = (a0 + a1 * lam) / den
    h1 = (a1 + h * d1) / den
    h2 = 2.0 * h1 * d1 / den
    return lam * h, h + lam * h1, 2.0 * h1 + lam * h2


def active_set_probabilities(rho) -> np.ndarray:
    """Product-form probability of every active AP set, indexed by bitmask (length 2^n)."""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0) or np.any(rho > 1):
        raise ValueError("utilizations must lie in [0, 1]")
    p = np.ones(1)
    for q in rho:
        # Bit i of the mask is AP i, so AP i doubles the table with the high half active.
        p = np.concatenate([p * (1.0 - q), p * q])
    return p


def active_set_probability(rho, active: int) -> float:
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0) or np.any(rho > 1):
        raise ValueError("utilizations must lie in [0, 1]")
    out = 1.0
    for i, q in enumerate(rho):
        out *= q if active >> i & 1 else 1.0 - q
    return float(out)


def _mixture(probs, values) -> float:
    total = 0.0
    for q, v in zip(probs, values):
        if q > 0:
            if v == INF:
                return INF
            total += q * v
    return total


def expected_delay_licensed(rates, lam: float, rho) -> float:
    p = active_set_probabilities(rho)
    return _mixture(p, [delay_mm1(r, lam) for r in rates])


def expected_delay_unlicensed(rates, lam: float, nu: float, rho) -> float:
    p = active_set_probabilities(rho)
    return _mixture(p, [delay_vacation(r, lam, nu) for r in rates])


def expected_delay_general(rates, lam: float, rho, moments: ServiceMoments = EXPONENTIAL,
                           nu: float = 0.0) -> float:
    p = active_set_probabilities(rho)
    return _mixture(p, [delay_general(r, lam, moments, nu) for r in rates])


def ue_utilization(rates, lam: float, rho) -> float:
    """Expected fraction of time the UE queue is in service, averaged over active sets."""
    if lam == 0:
        return 0.0
    p = active_set_probabilities(rho)
    total = 0.0
    for q, r in zip(p, rates):
        if q > 0:
            if r <= 0:
                raise ValueError("zero service rate on an active set with positive probability")
            total += q * lam / r
    return total


class ApUtilization(NamedTuple):
    value: float
    degenerate: bool  # AP has no usable bandwidth on this RAT
    clamped: bool


def ap_utilization(allocation, sigma, rat: int, i: int) -> ApUtilization:
    """Spectrum-weighted utilization of AP ``i`` on ``rat``, clamped to [0, 1]."""
    y = allocation.y[rat]
    x = allocation.x[rat]
    held = (np.arange(y.shape[0]) >> i) & 1 == 1
    bandwidth = y[held].sum()
    if bandwidth <= 0:
        return ApUtilization(0.0, True, False)
    used = float(np.sum(x[held, i, :] * np.asarray(sigma)[None, :]))
    value = used / bandwidth
    clipped = min(max(value, 0.0), 1.0)
    return ApUtilization(clipped, False, clipped != value)


def convexity_probe(func: Callable[[float, float], float], r_range, lam_range,
                    points: int = 20, tol: float = 1e-7) -> bool:
    """Check numerical convexity of ``func(r, lam)`` separately along each axis.

    Central second differences on a ``points x points`` grid are compared
    against the rounding scale of the three samples involved.
    """
    rs = np.linspace(*r_range, points)
    ls = np.linspace(*lam_range, points)
    hr = (rs[-1] - rs[0]) / (points - 1) / 4 if points > 1 else 1e-3
    hl = (ls[-1] - ls[0]) / (points - 1) / 4 if points > 1 else 1e-3
    hl = hl or 1e-4
    hr = hr or 1e-4
    for r in rs:
        for lam in ls:
            for f_lo, f_mid, f_hi in (
                (func(r - hr, lam), func(r, lam), func(r + hr, lam)),
                (func(r, lam - hl), func(r, lam), func(r, lam + hl)),
            ):
                if not all(np.isfinite(v) for v in (f_lo, f_mid, f_hi)):
                    return False
                second = f_lo - 2.0 * f_mid + f_hi
                scale = abs(f_lo) + 2.0 * abs(f_mid) + abs(f_hi)
                if second < -tol * max(scale, 1e-300):
                    return False
    return True
