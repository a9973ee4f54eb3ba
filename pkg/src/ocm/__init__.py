"""Solvers and experiment harnesses for MDPs with costly observation.

The augmented state (n, x, a) — time since the last observation, the
state seen then, and the action locked in since — turns the partially
observed control problem into a finite quasi-variational inequality.
`qvi`/`solver` assemble and solve it by penalisation plus semismooth
Newton; `policy` turns value arrays into inspection rules and supplies
closed-form oracles; `bayes` handles unknown transition parameters on a
conjugate belief lattice; `sim` rolls policies forward under the true
dynamics; `cli` packages the experiments.
"""

from .bayes import (BayesOcmModel, BayesSolution, BetaParams,
                    FiniteThetaBelief, GridKernel, bayes_update_finite,
                    beta_binomial_pmf, build_bayes_walk, grid_kernel,
                    inverse_reward, peak_reward, posterior_update_beta,
                    predictive_nstep, solve_bayes_finite,
                    solve_grid_value_iteration)
from .errors import (ConfigError, ConvergenceError, NumericError, OcmError,
                     ResourceError)
from .model import (OcmModel, OpenLoopActionSet, PowerCache, RateModel,
                    build_ctmc_chain, build_random_walk, build_two_state_toy,
                    expm, load_model, n_step_matrix, open_loop_matrix,
                    validate_generator)
from .policy import (OcmPolicy, ToyClosedForm, evaluate_policy,
                     extract_policy, toy_closed_form, waiting_time_table)
from .qvi import QviSystem, ResidualVector
from .sim import (McStats, Trajectory, hdi_width, mc_stats,
                  reference_profit_full, reference_profit_policy, regret,
                  regret_exponent, simulate, simulate_many)
from .solver import (FiniteHorizonSolution, FiniteHorizonSystem,
                     PenaltyConfig, SolveReport, assemble_initial_guess,
                     newton_solve, penalised_residual, solve_finite_horizon,
                     solve_qvi, value_iteration_oracle)

__all__ = [name for name in dir() if not name.startswith("_")]
