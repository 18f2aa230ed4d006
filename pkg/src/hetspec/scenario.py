"""Seeded topology generation and the JSON scenario format.

Every physical field carries its unit in the key name.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import AccessPoint, Rat, Topology, UeGroup, dbm_to_watts
from .queueing import ServiceMoments

SCHEMA_VERSION = 1
NU_LEVELS = (1.0, 0.01, 0.0025)


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class RatSpec:
    bandwidth_hz: float = 10e6
    power_dbm: float = 23.0
    discount: float = 1.0
    licensed: bool = True


DEFAULT_RATS = (RatSpec(10e6, 23.0, 1.0, True), RatSpec(10e6, 23.0, 0.5, False))


def default_rats(specs: Sequence[RatSpec] = DEFAULT_RATS) -> tuple[Rat, ...]:
    return tuple(Rat.from_power(l, s.bandwidth_hz, s.discount, s.licensed, s.power_dbm)
                 for l, s in enumerate(specs))


def generate_topology(seed: int, area_m=(100.0, 200.0), n_aps: int = 5, k_groups: int = 15,
                      lam_range=(1.0, 20.0), nu_levels=NU_LEVELS,
                      rats: Sequence[RatSpec] = DEFAULT_RATS) -> Topology:
    """Uniform random drop of APs and UE groups; rates and nu levels drawn per group."""
    if n_aps < 1 or k_groups < 1:
        raise ValueError("need at least one AP and one UE group")
    w, h = area_m
    lo, hi = lam_range
    if w <= 0 or h <= 0:
        raise ValueError("area dimensions must be positive")
    if lo < 0 or hi < lo:
        raise ValueError(f"invalid arrival-rate range {lam_range}")
    if not nu_levels or min(nu_levels) < 0:
        raise ValueError("nu levels must be a nonempty list of nonnegative values")
    rng = np.random.default_rng(seed)
    ap_xy = rng.uniform((0, 0), (w, h), size=(n_aps, 2))
    ue_xy = rng.uniform((0, 0), (w, h), size=(k_groups, 2))
    lam = rng.uniform(lo, hi, size=k_groups)
    nu = rng.choice(np.asarray(nu_levels, dtype=float), size=k_groups)
    aps = tuple(AccessPoint(f"ap{i}", float(x), float(y)) for i, (x, y) in enumerate(ap_xy))
    ues = tuple(UeGroup(f"ue{j}", float(x), float(y), float(a), float(v))
                for j, ((x, y), a, v) in enumerate(zip(ue_xy, lam, nu)))
    return Topology(aps, ues, default_rats(rats))


def topology_to_dict(t: Topology) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "noise_psd_dbm_hz": float(10 * np.log10(t.noise_psd_w_hz) + 30),
        "pathloss_offset_db": t.pathloss_offset_db,
        "pathloss_slope_db_per_decade_km": t.pathloss_slope_db,
        "min_distance_m": t.min_distance_m,
        "mean_packet_bits": t.mean_packet_bits,
        "sinr_cap_db": t.sinr_cap_db,
        "service_beta": t.moments.beta,
        "service_eta": t.moments.eta,
        "rats": [{
            "bandwidth_hz": r.bandwidth_hz,
            "power_dbm": float(10 * np.log10(r.tx_psd_w_hz * r.bandwidth_hz) + 30) if r.tx_psd_w_hz > 0 else None,
            "discount": r.discount,
            "licensed": r.licensed,
        } for r in t.rats],
        "aps": [{"id": a.id, "x_m": a.x_m, "y_m": a.y_m} for a in t.aps],
        "ue_groups": [{
            "id": g.id, "x_m": g.x_m, "y_m": g.y_m,
            "arrival_rate_pkts_s": g.arrival_rate,
            "vacation_second_moment_s2": g.vacation_second_moment,
        } for g in t.ue_groups],
    }


def _field(d: dict, key: str, where: str, kind=float):
    if key not in d:
        raise ScenarioError(f"{where}: missing field '{key}'")
    try:
        return kind(d[key])
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{where}.{key}: {exc}") from None


def topology_from_dict(d: dict) -> Topology:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ScenarioError(f"schema_version must be {SCHEMA_VERSION}, got {d.get('schema_version')!r}")
    for key in ("rats", "aps", "ue_groups"):
        if not isinstance(d.get(key), list):
            raise ScenarioError(f"field '{key}' must be a list")
    if not d["ue_groups"]:
        raise ScenarioError("ue_groups: at least one UE group is required")
    if not d["aps"]:
        raise ScenarioError("aps: at least one AP is required")
    rats = []
    for l, r in enumerate(d["rats"]):
        where = f"rats[{l}]"
        power = r.get("power_dbm")
        bw = _field(r, "bandwidth_hz", where)
        psd = 0.0 if power is None else dbm_to_watts(float(power)) / bw
        rats.append(Rat(l, bw, _field(r, "discount", where), bool(r.get("licensed", l == 0)), psd))
    aps = [AccessPoint(str(a.get("id", f"ap{i}")), _field(a, "x_m", f"aps[{i}]"), _field(a, "y_m", f"aps[{i}]"))
           for i, a in enumerate(d["aps"])]
    ues = []
    for j, g in enumerate(d["ue_groups"]):
        where = f"ue_groups[{j}]"
        ues.append(UeGroup(str(g.get("id", f"ue{j}")), _field(g, "x_m", where), _field(g, "y_m", where),
                           _field(g, "arrival_rate_pkts_s", where),
                           _field(g, "vacation_second_moment_s2", where)))
    kw = {}
    if "noise_psd_dbm_hz" in d:
        kw["noise_psd_w_hz"] = dbm_to_watts(float(d["noise_psd_dbm_hz"]))
    for src, dst in (("pathloss_offset_db", "pathloss_offset_db"),
                     ("pathloss_slope_db_per_decade_km", "pathloss_slope_db"),
                     ("min_distance_m", "min_distance_m"), ("mean_packet_bits", "mean_packet_bits"),
                     ("sinr_cap_db", "sinr_cap_db")):
        if src in d:
            kw[dst] = float(d[src])
    if "service_beta" in d or "service_eta" in d:
        kw["moments"] = ServiceMoments(float(d.get("service_beta", 1.0)), float(d.get("service_eta", 2.0)))
    try:
        return Topology(tuple(aps), tuple(ues), tuple(rats), **kw)
    except ValueError as exc:
        raise ScenarioError(str(exc)) from None


def load_topology(path) -> Topology:
    text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return topology_from_dict(d)


def save_topology(t: Topology, path) -> None:
    Path(path).write_text(json.dumps(topology_to_dict(t), indent=2) + "\n")
