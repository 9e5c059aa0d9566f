"""Command line front end.

    mfprice {solve-agent,equilibrium,clearing-sweep,verify} --config run.json
            [--seed U64] [--threads N] [--out DIR]

Exit codes: 0 ok, 2 config error, 3 validation error, 4 numerical failure,
5 oracle failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .bsde import optimal_strategy, solve_agent_bsde
from .clearing import atom_positions, clearing_sweep, exact_clearing_error
from .config import RunConfig, regime_label, theta_spec
from .errors import ConfigError, MfpriceError, OracleFailure
from .meanfield import GammaConstants, solve_additive, solve_fixed_point
from .oracle import run_oracle_suite

log = logging.getLogger("mfprice")

CROSS_CHECK_TOL = 1e-9


def _constants(pop) -> dict:
    c = GammaConstants.from_population(pop)
    return {"gamma_hat": c.gamma_hat, "c_gamma": c.c_gamma, "C_gamma": c.C_gamma,
            "liability_sup": c.liability_sup, "R": c.R, "threshold": c.threshold,
            "regime": regime_label(pop)}


def cmd_solve_agent(cfg: RunConfig, out: Path, threads: int) -> tuple:
    lattice, market, pop = cfg.build()
    theta = theta_spec(cfg, lattice.d0)
    atoms = []
    files = []
    for a, agent in enumerate(pop.agents):
        sol = solve_agent_bsde(lattice, market, agent, theta)
        st = optimal_strategy(sol, theta, agent.gamma, market)
        files.append(io.write_solution(out / f"solution_atom{a}.csv", sol, st))
        atoms.append({"atom": a, "gamma": agent.gamma, "y0": sol.y0,
                      "p_star_t0": st.p[0][0, 0], "pi_star_t0": st.pi[0][0, 0],
                      "max_abs_y": sol.max_abs_y, "bmo": sol.bmo})
    return {"theta": theta, "atoms": atoms, "constants": _constants(pop)}, files


def _equilibrium(cfg: RunConfig):
    lattice, market, pop = cfg.build()
    extra = {}
    if pop.all_additive:
        mf = solve_additive(lattice, market, pop)
        pic = solve_fixed_point(lattice, market, pop, cfg.solver.tol, cfg.solver.max_iter,
                                strict=False)
        dy = max(float(np.max(np.abs(a - b))) for a, b in zip(mf.representative.Y, pic.representative.Y))
        dt = max(float(np.max(np.abs(a - b))) for a, b in zip(mf.theta_mfg, pic.theta_mfg))
        extra["cross_check"] = {"max_abs_dY": dy, "max_abs_dtheta": dt, "tol": CROSS_CHECK_TOL,
                                "picard_iterations": pic.iterations}
        if max(dy, dt) > CROSS_CHECK_TOL:
            raise OracleFailure(f"additive solution and Picard iteration disagree by {max(dy, dt):.3g}")
        mf.diagnostics = pic.diagnostics
    else:
        mf = solve_fixed_point(lattice, market, pop, cfg.solver.tol, cfg.solver.max_iter)
    return lattice, market, pop, mf, extra


def _mf_summary(pop, mf) -> dict:
    return {"theta_mfg_t0": mf.theta0, "method": mf.method, "iterations": mf.iterations,
            "converged": mf.converged, "all_in_ball": all(d.in_ball for d in mf.diagnostics),
            "max_abs_y": mf.representative.max_abs_y, "y_within_bound": mf.y_within_bound,
            "bmo": mf.representative.bmo, "constants": _constants(pop)}


def cmd_equilibrium(cfg: RunConfig, out: Path, threads: int) -> tuple:
    lattice, market, pop, mf, extra = _equilibrium(cfg)
    st = optimal_strategy(mf.representative, mf.theta_mfg, pop.gammas, market)
    files = [io.write_theta(out / "theta_mfg.csv", mf.theta_mfg),
             io.write_diagnostics(out / "diagnostics.csv", mf.diagnostics),
             io.write_solution(out / "solution.csv", mf.representative, st, n_atoms=len(pop.atoms))]
    return {**_mf_summary(pop, mf), **extra}, files


def cmd_clearing_sweep(cfg: RunConfig, out: Path, threads: int) -> tuple:
    lattice, market, pop, mf, extra = _equilibrium(cfg)
    rep = clearing_sweep(lattice, market, pop, mf.theta_mfg, cfg.clearing.N_list,
                         cfg.clearing.outer_samples, cfg.seed, threads)
    pos = atom_positions(lattice, market, pop, mf.theta_mfg)
    files = [io.write_clearing(out / "clearing.csv", rep),
             io.write_theta(out / "theta_mfg.csv", mf.theta_mfg)]
    summary = {**_mf_summary(pop, mf), **extra, "clearing_slope": rep.slope,
               "clearing_intercept": rep.intercept, "clearing_warning": rep.warning,
               "max_relative_stderr": rep.max_relative_stderr,
               "exact_tree_values": {str(N): exact_clearing_error(lattice, pos, N) for N in rep.N_list}}
    return summary, files


def cmd_verify(cfg: RunConfig, out: Path, threads: int) -> tuple:
    lattice, market, pop = cfg.build()
    theta = theta_spec(cfg, lattice.d0)
    checks = run_oracle_suite(lattice, market, pop.agents[0], theta)
    report = {"checks": [{"name": c.name, "passed": c.passed, "hard": c.hard, "details": c.details}
                         for c in checks],
              "passed": all(c.passed for c in checks)}
    files = [io.write_json(out / "verify.json", report)]
    summary = {"passed": report["passed"],
               "failed": [c.name for c in checks if not c.passed], "constants": _constants(pop)}
    return summary, files


COMMANDS = {"solve-agent": cmd_solve_agent, "equilibrium": cmd_equilibrium,
            "clearing-sweep": cmd_clearing_sweep, "verify": cmd_verify}


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mfprice", description=__doc__.split("\n")[0] if __doc__ else None)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--seed", type=_u64, default=None, help="overrides the config seed")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--out", type=Path, default=None, help="overrides the config output directory")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("must be >= 1", "--threads")
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        out = args.out if args.out is not None else Path(cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        summary, files = COMMANDS[args.command](cfg, out, args.threads)
        files.append(io.write_json(out / "summary.json", {"command": args.command, **summary}))
        io.write_manifest(out, args.command, cfg.to_dict(), cfg.seed, args.threads,
                          time.perf_counter() - t0, files)
        if args.command == "verify" and not summary["passed"]:
            raise OracleFailure(f"oracle checks failed: {', '.join(summary['failed'])}")
    except MfpriceError as exc:
        print(f"mfprice: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
