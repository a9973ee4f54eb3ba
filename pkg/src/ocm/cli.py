"""Command-line experiment driver.

Every subcommand loads or builds a model, runs its experiment, and drops
CSV artifacts plus a JSON manifest (configuration echo, library
versions, seed, wall times) into the output directory.  Reruns with the
same flags and seed produce byte-identical CSVs; only the manifest
timestamp moves.

Exit codes follow the error hierarchy: 2 for configuration problems, 3
for convergence failures, 4 for resource caps, 1 for anything else.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from datetime import datetime, timezone

import numpy as np
import scipy

from . import sim
from .bayes import BetaParams, build_bayes_walk, solve_bayes_finite
from .errors import ConfigError, OcmError
from .model import (build_ctmc_chain, build_random_walk, build_two_state_toy,
                    load_model)
from .policy import extract_policy, toy_closed_form, waiting_time_table
from .qvi import QviSystem
from .solver import (FiniteHorizonSystem, PenaltyConfig, solve_finite_horizon,
                     solve_qvi)

# Stock experiment grids; the builtin tags carry the flagship parameters
# so the headline runs are single commands.
TABLE1_COSTS = (0.0, 0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 6.0)
GRID_COSTS = (0.1, 0.25, 0.5, 0.75)
GRID_PRIORS = ((2, 5), (3, 3), (5, 2))
TOY_PS = (0.5, 0.8, 0.9, 0.95)
TOY_GAMMAS = (0.8, 0.9, 0.99)
TOY_COSTS = (0.0, 0.1, 0.5, 1.0)


# =====================================================================
# CSV output
# =====================================================================

def _field(v):
    """One CSV field: 17 significant digits for floats, RFC-4180 quoting."""
    if isinstance(v, (np.generic,)):
        v = v.item()
    if isinstance(v, bool):
        s = "true" if v else "false"
    elif isinstance(v, float):
        s = format(v, ".17g")
    else:
        s = str(v)
    if any(ch in s for ch in (",", '"', "\n", "\r")):
        s = '"' + s.replace('"', '""') + '"'
    return s


def emit_csv(header, rows, path):
    """Write a rectangular table with a header row and LF line endings."""
    width = len(header)
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ConfigError(
                f"csv row {i} has {len(row)} fields, header has {width}")
    try:
        with open(path, "w", newline="") as f:
            f.write(",".join(_field(v) for v in header) + "\n")
            for row in rows:
                f.write(",".join(_field(v) for v in row) + "\n")
    except OSError as e:
        raise ConfigError(f"cannot write {path}: {e}") from e


def _write_manifest(args, out_dir, wall_times, extra=None):
    doc = {
        "subcommand": args.command,
        "config": {k: v for k, v in sorted(vars(args).items())
                   if k not in ("command", "func")},
        "versions": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "artifact": _package_version(),
        },
        "seed": args.seed,
        "ocm_threads": os.environ.get("OCM_THREADS"),
        "wall_times": {k: round(v, 3) for k, v in wall_times.items()},
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    if extra:
        doc.update(extra)
    path = os.path.join(out_dir, f"{args.command}_manifest.json")
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True, default=str)
        f.write("\n")


def _package_version():
    try:
        from importlib.metadata import version
        return version("artifact")
    except Exception:
        return "unknown"


# =====================================================================
# Model selection
# =====================================================================

def _build_model(args, c_obs=None):
    kwargs = {}
    if c_obs is not None:
        kwargs["c_obs"] = c_obs
    if args.model:
        model = load_model(args.model)
        if c_obs is not None:
            from dataclasses import replace
            model = replace(model, c_obs=c_obs)
        return model
    tag = args.builtin
    if tag == "toy":
        return build_two_state_toy(0.9, horizon=args.horizon or 800, **kwargs)
    if tag == "random-walk":
        return build_random_walk(0.75, 50, "inverse", gamma=0.99,
                                 horizon=args.horizon or 500,
                                 switch_cost=args.switch_cost, **kwargs)
    if tag == "ctmc":
        return build_ctmc_chain(horizon=args.horizon or 60, **kwargs)
    raise ConfigError("pass --model FILE or --builtin {toy,random-walk,ctmc}")


def _penalty_config(args):
    return PenaltyConfig(rho=args.rho0, doublings=args.doublings,
                         rel_tol=args.tol)


# =====================================================================
# Subcommands
# =====================================================================

def cmd_solve(args, out_dir):
    model = _build_model(args, args.cobs[0] if args.cobs else None)
    system = QviSystem(model)
    t0 = time.perf_counter()
    _, report = solve_qvi(system, _penalty_config(args))
    wall = time.perf_counter() - t0
    header = ["quantity"] + [f"rho_{r:g}" for r in report.rhos]
    rows = [["newton_iterations"] + report.newton_iterations,
            ["increment", ""] + report.increments]
    emit_csv(header, rows, os.path.join(out_dir, "solve_report.csv"))
    print(f"solved {system.size} unknowns, final residual "
          f"{report.final_residual:.3e}, {wall:.1f}s")
    return {"solve": wall}


def cmd_toy(args, out_dir):
    costs = args.cobs or list(TOY_COSTS)
    config = _penalty_config(args)
    rho_max = config.rho * 2 ** config.doublings
    header = ["p", "gamma", "c_obs", "closed_form_v1", "solver_v1",
              "abs_gap", "gap_bound", "t_star"]
    rows = []
    t0 = time.perf_counter()
    for p in TOY_PS:
        for gamma in TOY_GAMMAS:
            for c in costs:
                closed = toy_closed_form(p, gamma, c)
                model = build_two_state_toy(p, c_obs=c, gamma=gamma,
                                            horizon=args.horizon or 800)
                u, _ = solve_qvi(QviSystem(model), config)
                v1 = float(u[0, 0, 0])
                rows.append([p, gamma, c, closed.v1, v1,
                             abs(v1 - closed.v1), 5.0 / rho_max,
                             closed.T_star])
    emit_csv(header, rows, os.path.join(out_dir, "toy_comparison.csv"))
    print(f"{len(rows)} toy instances, worst gap "
          f"{max(r[5] for r in rows):.3e}")
    return {"toy_grid": time.perf_counter() - t0}


def cmd_table1(args, out_dir):
    costs = args.cobs or list(TABLE1_COSTS)
    config = _penalty_config(args)
    rho_cols = [config.rho * 2 ** k for k in range(config.doublings + 1)]
    header = (["c_obs", "quantity"] + [f"rho_{r:g}" for r in rho_cols])
    rows = []
    walls = {}
    for c in costs:
        model = build_random_walk(0.75, 50, "inverse", c_obs=c, gamma=0.99,
                                  horizon=args.horizon or 500,
                                  switch_cost=args.switch_cost)
        t0 = time.perf_counter()
        _, report = solve_qvi(QviSystem(model), config)
        walls[f"c={c:g}"] = time.perf_counter() - t0
        rows.append([c, "newton_iterations"] + report.newton_iterations)
        rows.append([c, "increment", ""] + report.increments)
        print(f"c_obs={c:g}: iterations {report.newton_iterations} "
              f"({walls[f'c={c:g}']:.0f}s)")
    emit_csv(header, rows, os.path.join(out_dir, "table1.csv"))
    return walls


def cmd_waiting(args, out_dir):
    costs = args.cobs or list(TABLE1_COSTS)
    config = _penalty_config(args)
    policies = {}
    walls = {}
    for c in costs:
        model = build_random_walk(0.75, 50, "inverse", c_obs=c, gamma=0.99,
                                  horizon=args.horizon or 500,
                                  switch_cost=args.switch_cost)
        system = QviSystem(model)
        t0 = time.perf_counter()
        u, _ = solve_qvi(system, config)
        walls[f"c={c:g}"] = time.perf_counter() - t0
        policies[f"c={c:g}"] = extract_policy(system, u)
    L = next(iter(policies.values())).waiting_time.shape[0]
    states = np.arange(L)
    table = waiting_time_table(policies, states)
    labels = list(policies)
    header = ["x"] + [f"{lab}:a={a}" for lab in labels for a in (0, 1)]
    half = (L - 1) // 2
    rows = []
    for i, x in enumerate(states):
        row = [int(x) - half]
        for lab in labels:
            row.extend(float(w) for w in table[lab][i])
        rows.append(row)
    emit_csv(header, rows, os.path.join(out_dir, "waiting_times.csv"))
    return walls


def cmd_bayes(args, out_dir):
    costs = args.cobs or list(GRID_COSTS)
    prior = BetaParams(args.alpha, args.beta)
    header = ["c_obs", "root_value", "root_action", "horizon"]
    rows = []
    walls = {}
    for c in costs:
        model = build_bayes_walk(prior, c, horizon=args.horizon or 50,
                                 reward_kind=args.reward,
                                 true_theta=args.theta,
                                 switch_cost=args.switch_cost)
        t0 = time.perf_counter()
        sol = solve_bayes_finite(model)
        dt = time.perf_counter() - t0
        walls[f"c={c:g}"] = dt
        rows.append([c, sol.root_value(), sol.root_action(), model.horizon])
        print(f"c_obs={c:g}: root value {sol.root_value():.6f} ({dt:.1f}s)")
    emit_csv(header, rows, os.path.join(out_dir, "bayes_values.csv"))
    return walls


def cmd_simulate(args, out_dir):
    costs = args.cobs or list(GRID_COSTS)
    horizon = args.horizon or 50
    walls = {}

    # statistics grid, one belief-lattice policy per (prior, cost) cell
    t0 = time.perf_counter()
    header = ["prior", "stat"] + [f"c_obs={c:g}" for c in costs]
    mean_rows, se_rows = [], []
    for (a, b) in GRID_PRIORS:
        cells = []
        for c in costs:
            model = build_bayes_walk(BetaParams(a, b), c, horizon=horizon,
                                     reward_kind=args.reward,
                                     true_theta=args.theta,
                                     switch_cost=args.switch_cost)
            sol = solve_bayes_finite(model)
            trajs = sim.simulate_many(model, sol, args.seed,
                                      args.trajectories)
            cells.append(sim.mc_stats(trajs))
        label = f"Beta({a},{b})"
        mean_rows.append([label, "observations"]
                         + [st.avg_observations for st in cells])
        mean_rows.append([label, "profit"] + [st.avg_profit for st in cells])
        mean_rows.append([label, "hdi_width"]
                         + [st.avg_hdi_width for st in cells])
        se_rows.append([label, "observations"]
                       + [st.se_observations for st in cells])
        se_rows.append([label, "profit"] + [st.se_profit for st in cells])
        se_rows.append([label, "hdi_width"]
                       + [st.se_hdi_width for st in cells])
    emit_csv(header, mean_rows, os.path.join(out_dir, "stats_grid.csv"))
    emit_csv(header, se_rows, os.path.join(out_dir, "stats_grid_stderr.csv"))
    walls["stats_grid"] = time.perf_counter() - t0

    # regret curves under the decaying reward, prior Beta(3,3)
    t0 = time.perf_counter()
    c = costs[0]
    model = build_bayes_walk(BetaParams(3, 3), c, horizon=horizon,
                             reward_kind="inverse", true_theta=args.theta,
                             switch_cost=args.switch_cost)
    sol = solve_bayes_finite(model)
    trajs = sim.simulate_many(model, sol, args.seed, args.trajectories)
    J_full = sim.reference_profit_full(args.theta, horizon,
                                       model.reward)
    walk = build_random_walk(args.theta, horizon, "inverse", c_obs=c,
                             gamma=0.99, horizon=horizon)
    fh = solve_finite_horizon(FiniteHorizonSystem(walk, K=horizon))
    J_adj = sim.reference_profit_policy(walk, fh)
    m_full, se_full = sim.regret(trajs, J_full, mode="full")
    m_adj, se_adj = sim.regret(trajs, J_adj, mode="cost-adjusted")
    rows = [[t, m_full[t], se_full[t], m_adj[t], se_adj[t]]
            for t in range(horizon + 1)]
    emit_csv(["time", "full_mean", "full_stderr",
              "cost_adjusted_mean", "cost_adjusted_stderr"],
             rows, os.path.join(out_dir, "regret.csv"))
    walls["regret"] = time.perf_counter() - t0
    return walls


def cmd_validate(args, out_dir):
    if not args.model:
        raise ConfigError("validate needs --model FILE")
    t0 = time.perf_counter()
    model = load_model(args.model)
    print(f"{args.model}: ok ({model.num_states} states, "
          f"{model.num_actions} actions, horizon {model.horizon})")
    return {"validate": time.perf_counter() - t0}


# =====================================================================
# Argument handling
# =====================================================================

def _cost_list(text):
    try:
        vals = [float(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad cost list {text!r}: {e}")
    if not vals:
        raise argparse.ArgumentTypeError("cost list is empty")
    return vals


_HANDLERS = {
    "solve": cmd_solve, "toy": cmd_toy, "table1": cmd_table1,
    "waiting": cmd_waiting, "bayes": cmd_bayes, "simulate": cmd_simulate,
    "validate": cmd_validate,
}


def build_parser():
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--model", help="JSON model file")
    shared.add_argument("--builtin", choices=("toy", "random-walk", "ctmc"),
                        help="stock model with its flagship parameters")
    shared.add_argument("--rho0", type=float, default=1e3,
                        help="first penalty weight (default 1e3)")
    shared.add_argument("--doublings", type=int, default=6)
    shared.add_argument("--tol", type=float, default=1e-8,
                        help="Newton relative-increment tolerance")
    shared.add_argument("--cobs", type=_cost_list, default=None,
                        help="comma-separated observation costs")
    shared.add_argument("--switch-cost", type=float, default=0.0)
    shared.add_argument("--horizon", type=int, default=None)
    shared.add_argument("--seed", type=int, default=20240823)
    shared.add_argument("--trajectories", type=int, default=5000)
    shared.add_argument("--alpha", type=float, default=3.0,
                        help="prior Beta alpha (bayes/simulate)")
    shared.add_argument("--beta", type=float, default=3.0,
                        help="prior Beta beta (bayes/simulate)")
    shared.add_argument("--theta", type=float, default=0.3,
                        help="true drift success probability")
    shared.add_argument("--reward", choices=("peak", "inverse"),
                        default="peak")
    shared.add_argument("--out", default=".", help="output directory")

    parser = argparse.ArgumentParser(
        prog="ocm",
        description="Observation-cost MDP solvers and experiments")
    subs = parser.add_subparsers(dest="command", required=True)
    for name, handler in _HANDLERS.items():
        sub = subs.add_parser(name, parents=[shared],
                              help=handler.__doc__ or name)
        sub.set_defaults(func=handler)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        os.makedirs(args.out, exist_ok=True)
        wall_times = args.func(args, args.out)
        _write_manifest(args, args.out, wall_times)
    except OcmError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
