"""Analytic delay of each scheme against packet simulation over a load range.

Writes a CSV with one row per (scheme, load): the optimizer's objective and
the simulated network mean in both simulator modes.
"""
import argparse
import csv
import sys

from hetspec.cli import Tolerances, parse_sweep, solve_scheme
from hetspec.model import build_efficiency_table
from hetspec.scenario import generate_topology, load_topology
from hetspec.sim import SimConfig, simulate

COLUMNS = ("scheme", "load_pkts_s", "objective_s", "sim_conservative_s", "sim_conservative_ci_s",
           "sim_utilization_s", "sim_utilization_ci_s", "stable_fraction")


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--scenario")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--loads", type=parse_sweep, default=parse_sweep("2:2:20"))
    ap.add_argument("--schemes", default="conservative,utilization")
    ap.add_argument("--packets", type=int, default=200_000)
    ap.add_argument("--out", default="-")
    args = ap.parse_args()
    topo = load_topology(args.scenario) if args.scenario else generate_topology(args.seed)
    table = build_efficiency_table(topo)
    fh = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
    w = csv.DictWriter(fh, COLUMNS, lineterminator="\n")
    w.writeheader()
    for scheme in args.schemes.split(","):
        for load in args.loads:
            t = topo.with_arrival_rates(load)
            res = solve_scheme(t, scheme, Tolerances(), table)
            row = dict.fromkeys(COLUMNS, float("nan"))
            row.update(scheme=scheme, load_pkts_s=load, objective_s=res.objective)
            if res.report.feasible:
                for mode in ("conservative", "utilization"):
                    sr = simulate(t, res.allocation, SimConfig(mode=mode, packets=args.packets, seed=args.seed), table)
                    row[f"sim_{mode}_s"], row[f"sim_{mode}_ci_s"] = sr.network_mean, sr.network_ci
                    if mode == "utilization":
                        row["stable_fraction"] = sr.stable_fraction
            w.writerow(row)
            fh.flush()
    if fh is not sys.stdout:
        fh.close()


if __name__ == "__main__":
    main()
