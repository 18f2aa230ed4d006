"""Network model: APs, UE groups, RATs, interference patterns and link efficiencies.

Patterns are subsets of APs encoded as integer bitmasks (bit ``i`` set means
AP ``i`` belongs to the pattern).  Mask ``0`` is the empty pattern and is kept
in every per-pattern array so that ``A & I`` can be used directly as an index.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .queueing import ServiceMoments

MAX_APS = 12


class PatternBudgetError(ValueError):
    """Raised when full pattern enumeration would exceed the AP budget."""


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


@dataclass(frozen=True)
class Rat:
    index: int
    bandwidth_hz: float
    discount: float
    licensed: bool
    tx_psd_w_hz: float

    def __post_init__(self):
        if not self.bandwidth_hz > 0:
            raise ValueError(f"RAT {self.index}: bandwidth_hz must be > 0")
        if not 0 < self.discount <= 1:
            raise ValueError(f"RAT {self.index}: discount must lie in (0, 1]")
        if self.tx_psd_w_hz < 0:
            raise ValueError(f"RAT {self.index}: transmit PSD must be >= 0")

    @classmethod
    def from_power(cls, index, bandwidth_hz, discount, licensed, power_dbm):
        """Flat PSD obtained by spreading the total transmit power over the band."""
        return cls(index, bandwidth_hz, discount, licensed, dbm_to_watts(power_dbm) / bandwidth_hz)


@dataclass(frozen=True)
class AccessPoint:
    id: str
    x_m: float
    y_m: float


@dataclass(frozen=True)
class UeGroup:
    id: str
    x_m: float
    y_m: float
    arrival_rate: float  # packets/s
    vacation_second_moment: float  # s^2, E[V^2] on the unlicensed RAT


@dataclass(frozen=True)
class Topology:
    aps: tuple[AccessPoint, ...]
    ue_groups: tuple[UeGroup, ...]
    rats: tuple[Rat, ...]
    noise_psd_w_hz: float = dbm_to_watts(-174.0)
    pathloss_offset_db: float = 140.7
    pathloss_slope_db: float = 36.7
    min_distance_m: float = 1.0
    mean_packet_bits: float = 0.5e6
    sinr_cap_db: float = 30.0
    moments: ServiceMoments = field(default_factory=ServiceMoments)

    def __post_init__(self):
        object.__setattr__(self, "aps", tuple(self.aps))
        object.__setattr__(self, "ue_groups", tuple(self.ue_groups))
        object.__setattr__(self, "rats", tuple(self.rats))
        if not self.aps:
            raise ValueError("topology needs at least one AP")
        if not self.ue_groups:
            raise ValueError("topology needs at least one UE group")
        if len(self.aps) > MAX_APS:
            raise PatternBudgetError(
                f"{len(self.aps)} APs exceeds the pattern enumeration budget of {MAX_APS}")
        if len(self.rats) != 2:
            raise ValueError("exactly two RATs (licensed + unlicensed) are supported")
        for g in self.ue_groups:
            if g.arrival_rate < 0 or g.vacation_second_moment < 0:
                raise ValueError(f"UE group {g.id}: arrival rate and nu must be >= 0")
        if self.mean_packet_bits <= 0:
            raise ValueError("mean_packet_bits must be > 0")

    @property
    def n(self) -> int:
        return len(self.aps)

    @property
    def k(self) -> int:
        return len(self.ue_groups)

    @property
    def m(self) -> int:
        return len(self.rats)

    @property
    def arrival_rates(self) -> np.ndarray:
        return np.array([g.arrival_rate for g in self.ue_groups], dtype=float)

    @property
    def nu(self) -> np.ndarray:
        """Per-(RAT, UE) vacation second moments; zero on licensed RATs."""
        base = np.array([g.vacation_second_moment for g in self.ue_groups], dtype=float)
        return np.array([np.zeros_like(base) if r.licensed else base for r in self.rats])

    def with_arrival_rates(self, rates) -> "Topology":
        rates = np.broadcast_to(np.asarray(rates, dtype=float), (self.k,))
        groups = tuple(
            UeGroup(g.id, g.x_m, g.y_m, float(lam), g.vacation_second_moment)
            for g, lam in zip(self.ue_groups, rates))
        return replace(self, ue_groups=groups)

    def distances_m(self) -> np.ndarray:
        ap = np.array([[a.x_m, a.y_m] for a in self.aps])
        ue = np.array([[g.x_m, g.y_m] for g in self.ue_groups])
        d = np.sqrt(((ap[:, None, :] - ue[None, :, :]) ** 2).sum(axis=-1))
        return np.maximum(d, self.min_distance_m)

    def gains(self) -> np.ndarray:
        """Linear path gains, shape (n, k); distance enters the dB model in km."""
        pl_db = self.pathloss_offset_db + self.pathloss_slope_db * np.log10(self.distances_m() / 1000.0)
        return 10.0 ** (-pl_db / 10.0)


def enumerate_patterns(n: int) -> list[int]:
    """All nonempty subsets of ``n`` APs as bitmasks, in ascending mask order."""
    if not 1 <= n <= MAX_APS:
        raise PatternBudgetError(
            f"cannot enumerate patterns for n={n}: budget is 1 <= n <= {MAX_APS}")
    return list(range(1, 1 << n))


def members(mask: int) -> list[int]:
    return [i for i in range(mask.bit_length()) if mask >> i & 1]


def membership_matrix(n: int) -> np.ndarray:
    """Boolean (2^n, n) matrix; row ``A`` flags the APs in pattern ``A``."""
    masks = np.arange(1 << n)
    return (masks[:, None] >> np.arange(n)[None, :]) & 1 == 1


def _check_indices(topology: Topology, rat: int, i: int, j: int) -> None:
    if not 0 <= rat < topology.m:
        raise IndexError(f"RAT index {rat} out of range")
    if not 0 <= i < topology.n:
        raise IndexError(f"AP index {i} out of range")
    if not 0 <= j < topology.k:
        raise IndexError(f"UE group index {j} out of range")


def interference_psd(topology: Topology, rat: int, pattern: int, i: int, j: int) -> float:
    """Noise plus interference PSD (W/Hz) seen by UE ``j`` from the other APs in ``pattern``."""
    _check_indices(topology, rat, i, j)
    if not pattern >> i & 1:
        raise ValueError(f"serving AP {i} is not a member of pattern {pattern:#b}")
    g = topology.gains()
    psd = topology.rats[rat].tx_psd_w_hz
    total = topology.noise_psd_w_hz
    for other in members(pattern):
        if other != i:
            total += psd * g[other, j]
    return float(total)


def spectral_efficiency(topology: Topology, rat: int, pattern: int, i: int, j: int) -> float:
    """Link efficiency in packets/s per unit fraction of the band (Shannon, capped SINR)."""
    _check_indices(topology, rat, i, j)
    if not pattern >> i & 1:
        return 0.0
    r = topology.rats[rat]
    signal = r.tx_psd_w_hz * topology.gains()[i, j]
    sinr = signal / interference_psd(topology, rat, pattern, i, j)
    cap = 10.0 ** (topology.sinr_cap_db / 10.0)
    return float(r.discount * r.bandwidth_hz / topology.mean_packet_bits * np.log2(1.0 + min(sinr, cap)))


@dataclass(frozen=True)
class EfficiencyTable:
    """Link efficiencies ``s[l, A, i, j]`` in packets/s, indexed by pattern mask ``A``."""

    s: np.ndarray

    @property
    def m(self) -> int:
        return self.s.shape[0]

    @property
    def n(self) -> int:
        return self.s.shape[2]

    @property
    def k(self) -> int:
        return self.s.shape[3]

    def __getitem__(self, key):
        return self.s[key]


def build_efficiency_table(topology: Topology) -> EfficiencyTable:
    n, k = topology.n, topology.k
    enumerate_patterns(n)
    member = membership_matrix(n).astype(float)  # (2^n, n)
    g = topology.gains()
    cap = 10.0 ** (topology.sinr_cap_db / 10.0)
    s = np.zeros((topology.m, 1 << n, n, k))
    for l, rat in enumerate(topology.rats):
        rx = rat.tx_psd_w_hz * g  # (n, k)
        coef = rat.discount * rat.bandwidth_hz / topology.mean_packet_bits
        for i in range(n):
            # Sequential accumulation in fixed AP order keeps interference monotone in the pattern.
            interf = np.full((1 << n, k), topology.noise_psd_w_hz)
            for other in range(n):
                if other != i:
                    interf = interf + member[:, other:other + 1] * rx[other][None, :]
            sinr = np.minimum(rx[i][None, :] / interf, cap)
            s[l, :, i, :] = member[:, i:i + 1] * coef * np.log2(1.0 + sinr)
    s.setflags(write=False)
    return EfficiencyTable(s)


def conservative_rate(table: EfficiencyTable, x: np.ndarray, rat: int, j: int) -> float:
    """Service rate of UE ``j`` on ``rat`` assuming every pattern member always transmits.

    ``x`` is the full bandwidth array of shape (m, 2^n, n, k).
    """
    return float(np.sum(table.s[rat, :, :, j] * x[rat, :, :, j]))


def utilization_rate(table: EfficiencyTable, x: np.ndarray, rat: int, j: int, active: int) -> float:
    """Service rate of UE ``j`` when only the APs in bitmask ``active`` transmit.

    Links whose serving AP is outside ``active`` contribute nothing.
    """
    masks = np.arange(table.s.shape[1]) & active
    return float(np.sum(table.s[rat, masks, :, j] * x[rat, :, :, j]))


def conditional_rates(table: EfficiencyTable, x: np.ndarray, rat: int) -> np.ndarray:
    """Rates r[I, j] seen while UE j is served and the interferer set is ``I``.

    The serving AP of each link is always counted as active, so every
    entry is at least the conservative rate.  Shape (2^n, k).
    """
    n = table.n
    full = 1 << n
    masks = np.arange(full)
    out = np.zeros((full, table.k))
    s = table.s[rat]
    for i in range(n):
        bit = 1 << i
        holders = masks[(masks & bit) != 0]
        xi = x[rat, holders, i, :]  # (|holders|, k)
        if not xi.any():
            continue
        idx = (masks[:, None] & holders[None, :]) | bit
        out += np.einsum("ahk,hk->ak", s[idx, i, :], xi)
    return out
