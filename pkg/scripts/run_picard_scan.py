"""Picard diagnostics as the liability grows past the contraction threshold.

    python3 scripts/run_picard_scan.py --K 5
"""
import argparse

import numpy as np

from mfprice.errors import DivergenceError, NumericalError
from mfprice.lattice import NoiseLattice
from mfprice.meanfield import solve_fixed_point
from mfprice.model import AgentType, LiabilitySpec, MarketModel, PopulationLaw, TimeGrid


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--K", type=int, default=5)
    ap.add_argument("--amplitudes", type=float, nargs="+", default=[0.01, 0.04, 0.1, 0.3, 1.0])
    args = ap.parse_args()
    lat = NoiseLattice(TimeGrid(1.0, args.K))
    market = MarketModel.constant(np.array([[1.0]]))
    print(f"{'|F|':>6} {'regime':>12} {'iters':>5} {'max ratio':>10} {'max bmo':>10} {'R^2':>10} {'theta_0':>10}")
    for a in args.amplitudes:
        F = LiabilitySpec.mixed_sign(a)
        pop = PopulationLaw(((0.5, AgentType(0, 1.0, F)), (0.5, AgentType(0, 2.0, F))), 1.0, 2.0)
        try:
            mf = solve_fixed_point(lat, market, pop, tol=1e-12, strict=False)
        except (DivergenceError, NumericalError) as exc:
            print(f"{a:6.3f} failed: {exc}")
            continue
        c = mf.constants
        rs = [d.ratio for d in mf.diagnostics[1:]] or [0.0]
        print(f"{a:6.3f} {'in-theory' if c.in_theory else 'exploratory':>12} {mf.iterations:5d} "
              f"{max(rs):10.3g} {max(d.bmo for d in mf.diagnostics):10.3g} {c.R ** 2:10.3g} "
              f"{float(mf.theta0[0]):10.4g}")


if __name__ == "__main__":
    main()
