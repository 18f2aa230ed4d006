"""Command-line driver: scenarios, allocations, simulation and load sweeps.

Scenario files are JSON with the unit in every physical key::

    {"schema_version": 1, "noise_psd_dbm_hz": -174, "sinr_cap_db": 30,
     "mean_packet_bits": 5e5, "service_beta": 1, "service_eta": 2,
     "pathloss_offset_db": 140.7, "pathloss_slope_db_per_decade_km": 36.7,
     "min_distance_m": 1,
     "rats": [{"bandwidth_hz": 1e7, "power_dbm": 23, "discount": 1, "licensed": true}, ...],
     "aps": [{"id": "ap0", "x_m": 10, "y_m": 20}, ...],
     "ue_groups": [{"id": "ue0", "x_m": 5, "y_m": 7, "arrival_rate_pkts_s": 4.2,
                    "vacation_second_moment_s2": 0.01}, ...]}

Every CSV starts with a ``# manifest_sha256=...`` comment line.  The
manifest covers the scenario, scheme list, tolerances and simulation
settings, so two runs with the same hash produce identical numbers.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import platform
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import scipy

from . import __version__
from .allocation import Allocation, sparsity_check
from .baseline import solve_full_reuse, solve_orthogonal
from .conservative import SolverConfig, objective_p1, solve_p1
from .model import Topology, build_efficiency_table
from .optim import SolveError
from .scenario import ScenarioError, generate_topology, load_topology, save_topology, topology_to_dict
from .sim import SimConfig, simulate
from .utilization import solve_p2

log = logging.getLogger("hetspec")

SCHEMES = ("conservative", "utilization", "orthogonal", "full-reuse")
SWEEP_COLUMNS = ("scheme", "load_pkts_s", "objective_s", "simulated_mean_s", "simulated_ci_s",
                 "stable_fraction", "licensed_pattern_count", "unlicensed_pattern_count", "multi_ap_groups")
DELAY_COLUMNS = ("scheme", "status", "ue_group", "rat", "lambda_pkts_s", "rate_pkts_s", "delay_s")
SIM_COLUMNS = ("scheme", "ue_group", "rat", "arrivals", "mean_sojourn_s", "ci_s", "mean_service_s", "stable")


@dataclass(frozen=True)
class Tolerances:
    eps_alt: float = 1e-6
    eps_fp: float = 1e-6
    eps_outer: float = 1e-4


@dataclass
class RunOutcome:
    scheme: str
    allocation: Allocation
    report: object
    objective: float


def solve_scheme(topology: Topology, scheme: str, tol: Tolerances = Tolerances(), table=None) -> RunOutcome:
    table = table or build_efficiency_table(topology)
    config = SolverConfig(eps_alt=tol.eps_alt)
    if scheme == "conservative":
        alloc, rep = solve_p1(topology, table, config)
    elif scheme == "utilization":
        alloc, _, rep = solve_p2(topology, table, config, eps_fp=tol.eps_fp, eps_outer=tol.eps_outer)
    elif scheme == "orthogonal":
        alloc, rep = solve_orthogonal(topology, table, config)
    elif scheme == "full-reuse":
        alloc, rep = solve_full_reuse(topology, table, config)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    return RunOutcome(scheme, alloc, rep, float(rep.objective))


def parse_sweep(text: str) -> list[float]:
    """``start:step:stop`` with both ends included, e.g. ``5:5:60``."""
    try:
        start, step, stop = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"sweep must look like start:step:stop, got {text!r}") from None
    if start <= 0 or step <= 0 or stop < start:
        raise argparse.ArgumentTypeError("sweep loads must be positive and increasing")
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + q * step, 12) for q in range(count)]


def manifest(topology: Topology, schemes, tol: Tolerances, sim: Optional[SimConfig], extra=None) -> dict:
    out = {
        "scenario": topology_to_dict(topology),
        "schemes": list(schemes),
        "tolerances": asdict(tol),
        "simulation": None if sim is None else asdict(sim),
        "versions": {"hetspec": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
    }
    if extra:
        out.update(extra)
    return out


def manifest_hash(man: dict) -> str:
    return hashlib.sha256(json.dumps(man, sort_keys=True).encode()).hexdigest()


def _num(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def write_csv(path: Path, columns, rows, digest: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# manifest_sha256={digest}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_num(row[c]) for c in columns])


def delay_rows(out: RunOutcome) -> list[dict]:
    rep = out.report
    if not rep.feasible:
        return [{"scheme": out.scheme, "status": "over capacity", "ue_group": -1, "rat": -1,
                 "lambda_pkts_s": float("nan"), "rate_pkts_s": float("nan"), "delay_s": float("inf")}]
    rows = []
    m, k = rep.delays.shape
    for j in range(k):
        for l in range(m):
            if rep.lambda_split[l, j] > 0:
                rows.append({"scheme": out.scheme, "status": "ok", "ue_group": j, "rat": l,
                             "lambda_pkts_s": rep.lambda_split[l, j], "rate_pkts_s": rep.rates[l, j],
                             "delay_s": rep.delays[l, j]})
    return rows


def _topology(args) -> Topology:
    if args.scenario:
        return load_topology(args.scenario)
    return generate_topology(args.seed)


def _tolerances(args) -> Tolerances:
    return Tolerances(args.eps_alt, args.eps_fp, args.eps_outer)


def _schemes(name: str):
    return SCHEMES if name == "all" else (name,)


def _sim_config(args, seed: int) -> SimConfig:
    return SimConfig(mode=args.sim_mode, packets=args.packets, seed=seed)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _allocate(topology, schemes, tol, out_dir: Path, digest: str, table) -> dict:
    results = {}
    rows = []
    for scheme in schemes:
        log.info("solving %s", scheme)
        res = solve_scheme(topology, scheme, tol, table)
        results[scheme] = res
        tag = scheme.replace("-", "_")
        _write_json(out_dir / f"allocation_{tag}.json", res.allocation.to_dict())
        _write_json(out_dir / f"report_{tag}.json", res.report.to_dict())
        sp = sparsity_check(res.allocation)
        _write_json(out_dir / f"sparsity_{tag}.json",
                    {"pattern_counts": list(sp.pattern_counts), "multi_ap_groups": list(sp.multi_ap_groups),
                     "pattern_bound": sp.pattern_bound, "group_bound": sp.group_bound, "ok": sp.ok})
        rows.extend(delay_rows(res))
        if not res.report.feasible:
            log.warning("%s: %s", scheme, res.report.message)
    write_csv(out_dir / "delays.csv", DELAY_COLUMNS, rows, digest)
    return results


def _simulate_all(topology, allocations: dict, sim: SimConfig, out_dir: Path, digest: str, table) -> dict:
    rows, summary = [], {}
    for scheme, alloc in allocations.items():
        log.info("simulating %s (%s mode)", scheme, sim.mode)
        sr = simulate(topology, alloc, sim, table)
        summary[scheme] = {"network_mean_sojourn_s": sr.network_mean, "network_ci_s": sr.network_ci,
                           "stable_fraction": sr.stable_fraction, "ap_busy_fraction": sr.ap_busy.tolist()}
        rows.extend(dict(r, scheme=scheme) for r in sr.rows())
    write_csv(out_dir / "simulation.csv", SIM_COLUMNS, rows, digest)
    return summary


def sweep_point(topology, scheme, load, tol, sim: Optional[SimConfig], table) -> dict:
    res = solve_scheme(topology.with_arrival_rates(load), scheme, tol, table)
    row = {"scheme": scheme, "load_pkts_s": load, "objective_s": res.objective,
           "simulated_mean_s": float("nan"), "simulated_ci_s": float("nan"), "stable_fraction": 0.0,
           "licensed_pattern_count": 0, "unlicensed_pattern_count": 0, "multi_ap_groups": 0}
    if not res.report.feasible:
        return row
    sp = sparsity_check(res.allocation)
    row.update(licensed_pattern_count=sp.pattern_counts[0], unlicensed_pattern_count=sp.pattern_counts[1],
               multi_ap_groups=max(sp.multi_ap_groups))
    if sim is not None:
        sr = simulate(topology.with_arrival_rates(load), res.allocation, sim, table)
        row.update(simulated_mean_s=sr.network_mean, simulated_ci_s=sr.network_ci,
                   stable_fraction=sr.stable_fraction)
    return row


def monotonicity_violations(rows) -> list[dict]:
    """Sweep points where the analytic objective drops as load grows."""
    out = []
    for scheme in dict.fromkeys(r["scheme"] for r in rows):
        pts = sorted((r["load_pkts_s"], r["objective_s"]) for r in rows if r["scheme"] == scheme)
        for (a, fa), (b, fb) in zip(pts, pts[1:]):
            if fb < fa * (1.0 - 1e-6):
                out.append({"scheme": scheme, "load_from": a, "load_to": b, "objective_from": fa, "objective_to": fb})
    return out


def run_sweep(topology, schemes, loads, tol, sim: Optional[SimConfig], out_dir: Path, digest: str, table):
    rows = [sweep_point(topology, s, x, tol, sim, table) for s in schemes for x in loads]
    write_csv(out_dir / "sweep.csv", SWEEP_COLUMNS, rows, digest)
    bad = monotonicity_violations(rows)
    for v in bad:
        log.warning("objective not monotone for %s between loads %g and %g", v["scheme"], v["load_from"], v["load_to"])
    _write_json(out_dir / "sweep_report.json", {"monotonicity_violations": bad, "points": len(rows)})
    return rows, bad


# ---------------------------------------------------------------- verbs

def cmd_generate(args) -> int:
    topo = generate_topology(args.seed, n_aps=args.aps, k_groups=args.groups)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_topology(topo, out / "scenario.json")
    print(out / "scenario.json")
    return 0


def cmd_allocate(args) -> int:
    topo = _topology(args)
    tol = _tolerances(args)
    schemes = _schemes(args.scheme)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = manifest(topo, schemes, tol, None)
    digest = manifest_hash(man)
    _write_json(out / "manifest.json", dict(man, sha256=digest))
    results = _allocate(topo, schemes, tol, out, digest, build_efficiency_table(topo))
    for s, r in results.items():
        print(f"{s}: objective {r.objective:.6g} s" + ("" if r.report.feasible else " (over capacity)"))
    return 0


def cmd_simulate(args) -> int:
    topo = _topology(args)
    alloc = Allocation.from_dict(json.loads(Path(args.allocation).read_text()))
    problems = alloc.violations(topo)
    if problems:
        print("invalid allocation: " + "; ".join(problems), file=sys.stderr)
        return 1
    sim = _sim_config(args, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = manifest(topo, [alloc.scheme], _tolerances(args), sim, {"allocation": alloc.to_dict()})
    digest = manifest_hash(man)
    _write_json(out / "manifest.json", dict(man, sha256=digest))
    summary = _simulate_all(topo, {alloc.scheme: alloc}, sim, out, digest, build_efficiency_table(topo))
    s = summary[alloc.scheme]
    print(f"network mean sojourn {s['network_mean_sojourn_s']:.6g} s +/- {s['network_ci_s']:.3g}, "
          f"stable fraction {s['stable_fraction']:.3g}")
    return 0


def cmd_validate(args) -> int:
    topo = _topology(args)
    alloc = Allocation.from_dict(json.loads(Path(args.allocation).read_text()))
    problems = alloc.violations(topo)
    sp = sparsity_check(alloc) if not problems else None
    if problems:
        for p in problems:
            print("violation:", p)
        return 1
    print(f"valid; objective {objective_p1(topo, alloc):.6g} s; patterns per RAT {list(sp.pattern_counts)}; "
          f"multi-AP groups per RAT {list(sp.multi_ap_groups)}")
    return 0


def cmd_sweep(args) -> int:
    topo = _topology(args)
    tol = _tolerances(args)
    schemes = _schemes(args.scheme)
    loads = args.sweep
    sim = None if args.no_simulate else _sim_config(args, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = manifest(topo, schemes, tol, sim, {"loads_pkts_s": loads})
    digest = manifest_hash(man)
    _write_json(out / "manifest.json", dict(man, sha256=digest))
    rows, bad = run_sweep(topo, schemes, loads, tol, sim, out, digest, build_efficiency_table(topo))
    print(f"{len(rows)} sweep points written to {out / 'sweep.csv'}; {len(bad)} monotonicity violations")
    return 0


def cmd_run(args) -> int:
    topo = _topology(args)
    tol = _tolerances(args)
    schemes = _schemes(args.scheme)
    sim = _sim_config(args, args.seed) if (args.simulate or args.sweep) else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = manifest(topo, schemes, tol, sim, {"loads_pkts_s": args.sweep, "simulate": bool(args.simulate)})
    digest = manifest_hash(man)
    _write_json(out / "manifest.json", dict(man, sha256=digest))
    save_topology(topo, out / "scenario.json")
    table = build_efficiency_table(topo)
    results = _allocate(topo, schemes, tol, out, digest, table)
    if args.simulate:
        feasible = {s: r.allocation for s, r in results.items() if r.report.feasible}
        _simulate_all(topo, feasible, sim, out, digest, table)
    if args.sweep:
        run_sweep(topo, schemes, args.sweep, tol, sim, out, digest, table)
    for s, r in results.items():
        print(f"{s}: objective {r.objective:.6g} s" + ("" if r.report.feasible else " (over capacity)"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hetspec", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(q, scheme=True, sim=False):
        q.add_argument("--seed", type=int, default=0, help="topology and simulation seed")
        q.add_argument("--scenario", help="scenario JSON (default: seeded random drop)")
        q.add_argument("--out", default="out", help="output directory")
        q.add_argument("--eps-alt", type=float, default=Tolerances.eps_alt)
        q.add_argument("--eps-fp", type=float, default=Tolerances.eps_fp)
        q.add_argument("--eps-outer", type=float, default=Tolerances.eps_outer)
        if scheme:
            q.add_argument("--scheme", choices=SCHEMES + ("all",), default="conservative")
        if sim:
            q.add_argument("--packets", type=int, default=SimConfig.packets,
                           help="expected packets per simulation run, all queues together")
            q.add_argument("--sim-mode", choices=("utilization", "conservative"), default="utilization",
                           help="interference model inside the simulator")

    q = sub.add_parser("generate", help="write a seeded random scenario")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--aps", type=int, default=5)
    q.add_argument("--groups", type=int, default=15)
    q.add_argument("--out", default="out")
    q.set_defaults(func=cmd_generate)

    q = sub.add_parser("allocate", help="solve one or all schemes")
    common(q)
    q.set_defaults(func=cmd_allocate)

    q = sub.add_parser("simulate", help="simulate an allocation file")
    common(q, scheme=False, sim=True)
    q.add_argument("--allocation", required=True)
    q.set_defaults(func=cmd_simulate)

    q = sub.add_parser("sweep", help="uniform-load sweep over schemes")
    common(q, sim=True)
    q.add_argument("--sweep", type=parse_sweep, default=parse_sweep("5:5:60"), help="start:step:stop, pkts/s")
    q.add_argument("--no-simulate", action="store_true")
    q.set_defaults(func=cmd_sweep)

    q = sub.add_parser("validate", help="audit an allocation file")
    common(q, scheme=False)
    q.add_argument("--allocation", required=True)
    q.set_defaults(func=cmd_validate)

    q = sub.add_parser("run", help="allocate, optionally simulate and sweep")
    common(q, sim=True)
    q.add_argument("--simulate", action="store_true")
    q.add_argument("--sweep", type=parse_sweep, default=None)
    q.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 2
    except (SolveError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
