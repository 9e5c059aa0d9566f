"""Time-step refinement tables for the single-agent solver.

Three experiments: explicit scheme against the tree log-expectation,
martingale drift of the optimal wealth-utility process, and the P versus Q
formulations under a state-dependent premium.

    python3 scripts/run_convergence.py
"""
import numpy as np

from mfprice.bsde import optimal_strategy, solve_agent_bsde, solve_agent_bsde_qmeasure, solve_closed_form
from mfprice.lattice import NoiseLattice
from mfprice.model import AgentType, LiabilitySpec, MarketModel, TimeGrid
from mfprice.oracle import verify_condition_r


def terminal(w):
    return np.asarray(w)[..., -1, 0]


def table(title, Ks, values):
    print(title)
    for i, (K, v) in enumerate(zip(Ks, values)):
        r = f"{values[i - 1] / v:6.3f}" if i else "     -"
        print(f"  K={K:>3}  {v:12.4e}  ratio {r}")


def main():
    m = MarketModel.constant(np.array([[1.0]]))
    agent = AgentType(0, 1.0, LiabilitySpec.idio(lambda w: np.clip(terminal(w), -3, 3) / 3, 1.0))
    Ks, gaps = (1, 2, 4, 8), []
    for K in Ks:
        lat = NoiseLattice(TimeGrid(1.0, K))
        y = solve_closed_form(lat, lat.terminal_values(agent.liability))[0][0, 0]
        gaps.append(abs(solve_agent_bsde(lat, m, agent, 0.0).y0 - y))
    table("scheme vs log-expectation, |Y0 gap|", Ks, gaps)

    agent = AgentType(0, 2.0, LiabilitySpec.idio(lambda w: 0.1 * np.tanh(terminal(w)), 0.1))
    Ks, drift = (2, 4, 8), []
    for K in Ks:
        lat = NoiseLattice(TimeGrid(1.0, K))
        sol = solve_agent_bsde(lat, m, agent, 0.2)
        drift.append(verify_condition_r(lat, agent, 0.2, sol, optimal_strategy(sol, 0.2, 2.0, m)).aggregate_drift)
    table("optimal utility process, aggregate relative drift", Ks, drift)

    m0 = MarketModel.constant(np.array([[1.0]]), d=0)
    agent = AgentType(0, 2.0, LiabilitySpec.common(lambda w: 0.2 * np.tanh(terminal(w)), 0.2))
    theta = lambda k, w: 0.2 + 0.3 * np.tanh(w)
    Ks, gaps = (2, 4, 8, 16), []
    for K in Ks:
        lat = NoiseLattice(TimeGrid(1.0, K), d=0)
        gaps.append(abs(solve_agent_bsde(lat, m0, agent, theta).y0
                        - solve_agent_bsde_qmeasure(lat, m0, agent, theta).y0))
    table("P vs Q formulation, |Y0 gap|", Ks, gaps)


if __name__ == "__main__":
    main()
