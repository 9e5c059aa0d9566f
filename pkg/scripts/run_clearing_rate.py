"""Clearing error against population size, Monte Carlo next to the exact tree value.

    python3 scripts/run_clearing_rate.py --K 6 --outer 4000 --out out/clearing_rate.csv
"""
import argparse

import numpy as np

from mfprice.clearing import atom_positions, clearing_sweep, exact_clearing_error
from mfprice.io import write_csv
from mfprice.lattice import NoiseLattice
from mfprice.meanfield import solve_fixed_point
from mfprice.model import AgentType, LiabilitySpec, MarketModel, PopulationLaw, TimeGrid


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--K", type=int, default=6)
    ap.add_argument("--amplitude", type=float, default=0.04)
    ap.add_argument("--outer", type=int, default=4000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--N", type=int, nargs="+", default=[4, 16, 64, 256])
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    lat = NoiseLattice(TimeGrid(1.0, args.K))
    market = MarketModel.constant(np.array([[1.0]]))
    F = LiabilitySpec.mixed_sign(args.amplitude)
    pop = PopulationLaw(((0.5, AgentType(0, 1.0, F)), (0.5, AgentType(0, 2.0, F))), 1.0, 2.0)
    mf = solve_fixed_point(lat, market, pop)
    rep = clearing_sweep(lat, market, pop, mf.theta_mfg, args.N, args.outer, args.seed, args.threads)
    pos = atom_positions(lat, market, pop, mf.theta_mfg)
    rows = []
    print(f"{'N':>6} {'estimate':>12} {'stderr':>10} {'tree':>12}")
    for r in rep.rows:
        exact = exact_clearing_error(lat, pos, r.N)
        rows.append([r.N, r.estimate, r.stderr, exact])
        print(f"{r.N:>6} {r.estimate:12.4e} {r.stderr:10.2e} {exact:12.4e}")
    print(f"slope {rep.slope:.4f}  intercept {rep.intercept:.4f}")
    if args.out:
        write_csv(args.out, ["N", "estimate", "stderr", "tree_value"], rows)


if __name__ == "__main__":
    main()
