"""Single-queue simulation against the closed-form delays.

Prints one row per (queue type, load): simulated mean sojourn, its batch-means
CI, the formula used by the optimizer and, for vacation queues, the M/G/1
value with the vacation folded into the service time.
"""
import argparse

import numpy as np

from hetspec.queueing import DETERMINISTIC, delay_general, delay_mm1, delay_vacation
from hetspec.sim import simulate_queue


def vacation_pk(r, lam, v):
    # the server is held for packet + vacation v; a packet leaves after its own transmission
    es = 1 / r + v
    es2 = 2 / r ** 2 + 2 * v / r + v * v
    if lam * es >= 1:
        return float("inf")
    return lam * es2 / (2 * (1 - lam * es)) + 1 / r


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--rate", type=float, default=10.0)
    ap.add_argument("--packets", type=int, default=1_000_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    r = args.rate
    print(f"{'queue':<22}{'rho':>6}{'sim':>11}{'ci':>10}{'formula':>11}{'err':>8}{'pk':>11}")
    for rho in (0.3, 0.5, 0.7, 0.9):
        lam = rho * r
        mean, ci, _ = simulate_queue(r, lam, packets=args.packets, seed=args.seed)
        f = delay_mm1(r, lam)
        print(f"{'M/M/1':<22}{rho:>6.2f}{mean:>11.5f}{ci:>10.5f}{f:>11.5f}{(mean - f) / f:>8.1%}{'':>11}")
        mean, ci, _ = simulate_queue(r, lam, packets=args.packets, seed=args.seed, packet_dist="deterministic",
                                     beta=1.0, eta=1.0)
        f = delay_general(r, lam, DETERMINISTIC)
        print(f"{'M/D/1':<22}{rho:>6.2f}{mean:>11.5f}{ci:>10.5f}{f:>11.5f}{(mean - f) / f:>8.1%}{'':>11}")
        for nu in (0.0025, 0.01):
            v = np.sqrt(nu)
            f = delay_vacation(r, lam, nu)
            pk = vacation_pk(r, lam, v)
            if not np.isfinite(pk):
                print(f"{'vacation nu=' + str(nu):<22}{rho:>6.2f}{'unstable':>11}{'':>10}{f:>11.5f}")
                continue
            mean, ci, _ = simulate_queue(r, lam, nu=nu, packets=args.packets, seed=args.seed)
            print(f"{'vacation nu=' + str(nu):<22}{rho:>6.2f}{mean:>11.5f}{ci:>10.5f}{f:>11.5f}"
                  f"{(mean - f) / f:>8.1%}{pk:>11.5f}")


if __name__ == "__main__":
    main()
