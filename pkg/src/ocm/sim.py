"""Monte Carlo rollout of observation policies under a hidden drift.

Trajectories follow the +1/-1 walk with the true step probability while
the controller only sees what it pays for; the summary statistics and
regret curves quantify what the observation charges and the parameter
uncertainty cost.  Reference profit curves for the regret metrics are
computed exactly (distribution propagation, no sampling).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import beta as beta_dist

from .bayes import BayesOcmModel, BayesSolution, BetaParams
from .errors import ConfigError
from .solver import FiniteHorizonSolution


@dataclass(eq=False)
class Trajectory:
    """One rollout: the path, the decisions, and the belief history.

    states[t] is the position after t steps; actions[t] the action index
    (0 = drift +1) in force during step t+1; inspections[t] flags a paid
    observation at time t (the time-0 look is free and not flagged);
    rewards[t] = r(x_t) - c_obs * inspections[t].  posteriors holds the
    Beta belief at the start plus after each paid observation.
    """

    seed: object
    states: np.ndarray
    actions: np.ndarray
    inspections: np.ndarray
    rewards: np.ndarray
    posteriors: list = field(default_factory=list)

    def __post_init__(self):
        frozen = ~self.inspections[1:]
        if np.any(self.actions[1:][frozen] != self.actions[:-1][frozen]):
            raise AssertionError(
                "inadmissible trajectory: action changed without an observation")

    @property
    def observations(self):
        """Number of paid observations."""
        return int(self.inspections.sum())

    @property
    def profit(self):
        return float(self.rewards.sum())

    def cumulative_profit(self):
        return np.cumsum(self.rewards)


def simulate(model: BayesOcmModel, policy, seed, *,
             true_theta=None, horizon=None) -> Trajectory:
    """Roll one trajectory under the hidden true drift probability.

    policy is either a BayesSolution (belief-lattice policy) or a
    FiniteHorizonSolution (known-parameter policy on the walk's state
    space).  Decisions run at times 1..N-1; the walk starts observed at
    the origin for free; the action may change only at observations.
    true_theta and horizon override the model's fields when given.
    """
    theta = model.true_theta if true_theta is None else float(true_theta)
    if theta is None:
        raise ConfigError("a true theta is required to simulate")
    if not (0.0 <= theta <= 1.0):
        raise ConfigError(f"true theta must lie in [0, 1], got {theta}")
    N = model.horizon if horizon is None else int(horizon)
    rng = np.random.default_rng(seed)

    bayes_pol = isinstance(policy, BayesSolution)
    if bayes_pol:
        a_idx = policy.root_action()
    elif isinstance(policy, FiniteHorizonSolution):
        L_states = policy.reward.shape[0]
        origin = (L_states - 1) // 2
        if policy.K != N or origin < N:
            raise ConfigError(
                f"policy lattice (K={policy.K}, states={L_states}) does not "
                f"cover horizon {N} from the origin")
        a_idx = policy.root_action(origin)
    else:
        raise ConfigError(f"unsupported policy type {type(policy).__name__}")

    r_table = np.asarray(model.reward(np.arange(-N, N + 1)), dtype=float)
    states = np.zeros(N + 1, dtype=np.int64)
    actions = np.zeros(N + 1, dtype=np.int8)
    flags = np.zeros(N + 1, dtype=bool)
    rewards = np.empty(N + 1)
    rewards[0] = r_table[N]
    posteriors = [model.prior]
    actions[0] = a_idx

    x = 0
    k = 0            # time of last observation
    x_k = 0          # position seen then
    u = 0            # banked Bernoulli successes
    ups = 0          # up-moves since the last observation
    steps = rng.random(N)

    for t in range(1, N + 1):
        p_up = theta if a_idx == 0 else 1.0 - theta
        if steps[t - 1] < p_up:
            x += 1
            ups += 1
        else:
            x -= 1
        states[t] = x

        observe = False
        if t < N:
            m = t - k
            if bayes_pol:
                observe = bool(policy.inspect[(t, k)][(x_k + k) // 2, a_idx, u])
            else:
                observe = bool(policy.inspect[t][k, origin + x_k, a_idx])
        if observe:
            if bayes_pol:
                u += ups if a_idx == 0 else m - ups
                a_idx = int(policy.post_action[t][a_idx, (x + t) // 2, u])
                posteriors.append(BetaParams(model.prior.alpha + u,
                                             model.prior.beta + (t - u)))
            else:
                a_idx = int(policy.post_action[t][a_idx, origin + x])
            k, x_k, ups = t, x, 0
            flags[t] = True
        actions[t] = a_idx
        rewards[t] = r_table[x + N] - (model.c_obs if flags[t] else 0.0)

    return Trajectory(seed=seed, states=states, actions=actions,
                      inspections=flags, rewards=rewards,
                      posteriors=posteriors)


def simulate_many(model: BayesOcmModel, policy, root_seed, count):
    """Independent trajectories from one root seed, one spawned stream
    each, so any subset reproduces identically regardless of order."""
    if count < 1:
        raise ConfigError(f"trajectory count must be >= 1, got {count}")
    children = np.random.SeedSequence(root_seed).spawn(count)
    return [simulate(model, policy, child) for child in children]


# =====================================================================
# Summary statistics
# =====================================================================

@dataclass(eq=False)
class McStats:
    """Monte Carlo cell summary: means with standard errors."""

    avg_observations: float
    avg_profit: float
    avg_hdi_width: float
    se_observations: float
    se_profit: float
    se_hdi_width: float
    trajectories: int


_HDI_CACHE = {}


def hdi_width(params: BetaParams, mass=0.95):
    """Width of the narrowest interval holding `mass` posterior mass.

    Scans lower-quantile offsets at 1e-4 resolution through the Beta
    quantile function; robust for parameters below 1 (no mode descent).
    """
    if not (0.0 < mass < 1.0):
        raise ConfigError(f"mass must lie in (0, 1), got {mass}")
    key = (params.alpha, params.beta, mass)
    if key not in _HDI_CACHE:
        lo = np.arange(0.0, 1.0 - mass + 1e-12, 1e-4)
        widths = (beta_dist.ppf(lo + mass, params.alpha, params.beta)
                  - beta_dist.ppf(lo, params.alpha, params.beta))
        _HDI_CACHE[key] = float(widths.min())
    return _HDI_CACHE[key]


def _mean_se(values):
    # Compensated sums so aggregation order cannot perturb the mean.
    vals = [float(v) for v in values]
    n = len(vals)
    mean = math.fsum(vals) / n
    var = math.fsum((v - mean) ** 2 for v in vals) / (n - 1)
    return mean, math.sqrt(var / n)


def mc_stats(trajectories, posteriors=None) -> McStats:
    """Averages across trajectories: observations, profit, final HDI.

    posteriors optionally supplies the final Beta belief per trajectory;
    by default each trajectory's own last recorded posterior is used.
    """
    if len(trajectories) < 2:
        raise ConfigError("need at least 2 trajectories for standard errors")
    obs, obs_se = _mean_se([t.observations for t in trajectories])
    prof, prof_se = _mean_se([t.profit for t in trajectories])
    if posteriors is None:
        posteriors = [t.posteriors[-1] for t in trajectories]
    widths = [hdi_width(p) for p in posteriors]
    hdi, hdi_se = _mean_se(widths)
    return McStats(avg_observations=obs, avg_profit=prof, avg_hdi_width=hdi,
                   se_observations=obs_se, se_profit=prof_se,
                   se_hdi_width=hdi_se, trajectories=len(trajectories))


# =====================================================================
# Exact reference curves and regret
# =====================================================================

def reference_profit_full(theta, horizon, reward_fn):
    """Cumulative expected profit of the fully informed controller.

    The controller sees every state for free (no observation charge) and
    plays the finite-horizon optimum for the true drift.  Backward
    induction on the parity lattice, then exact forward propagation of
    the optimal state distribution.  Returns J[0..N].
    """
    N = horizon
    r_level = [np.asarray(reward_fn(2 * np.arange(t + 1) - t), dtype=float)
               for t in range(N + 1)]
    # V[t][i]: optimal reward-to-go from level-t node i (collected at t+1..N)
    V = [None] * (N + 1)
    best_a = [None] * N
    V[N] = np.zeros(N + 1)
    for t in range(N - 1, -1, -1):
        nxt = r_level[t + 1] + V[t + 1]
        up = theta * nxt[1:] + (1.0 - theta) * nxt[:-1]
        down = (1.0 - theta) * nxt[1:] + theta * nxt[:-1]
        V[t] = np.maximum(up, down)
        best_a[t] = np.where(up >= down, 0, 1)     # ties -> drift +1
    J = np.empty(N + 1)
    J[0] = r_level[0][0]
    dist = np.array([1.0])
    for t in range(1, N + 1):
        a = best_a[t - 1]
        nxt = np.zeros(t + 1)
        p_up = np.where(a == 0, theta, 1.0 - theta)
        np.add.at(nxt, np.arange(t), dist * (1.0 - p_up))
        np.add.at(nxt, np.arange(t) + 1, dist * p_up)
        dist = nxt
        J[t] = J[t - 1] + dist @ r_level[t]
    return J


def reference_profit_policy(model, solution: FiniteHorizonSolution):
    """Cumulative expected profit of a known-parameter observation policy.

    Exact forward propagation over the observation atoms (k, x_k, a):
    between observations only the summary state matters, so the
    distribution stays small.  model must be the walk the policy was
    solved on (its transition powers supply the window distributions).
    Returns J[0..K] including every observation charge.
    """
    K = solution.K
    L = model.num_states
    origin = (L - 1) // 2
    r = model.reward
    powers = model.powers
    J = np.empty(K + 1)
    J[0] = r[origin, 0]
    a0 = solution.root_action(origin)
    atoms = {(0, origin, a0): 1.0}

    for t in range(1, K + 1):
        J[t] = J[t - 1]
        new_atoms = {}
        for (k, xi, a), mass in atoms.items():
            m = t - k
            row = powers.power(a, m)[xi]
            row = row.toarray().ravel() if hasattr(row, "toarray") else row
            observe = t < K and bool(solution.inspect[t][k, xi, a])
            if observe:
                J[t] -= mass * model.c_obs
                nz = np.nonzero(row)[0]
                acts = solution.post_action[t][a, nz]
                J[t] += mass * float(row[nz] @ r[nz, 0])
                for x_new, p, a_new in zip(nz, row[nz], acts):
                    key = (t, int(x_new), int(a_new))
                    new_atoms[key] = new_atoms.get(key, 0.0) + mass * p
            else:
                J[t] += mass * float(row @ r[:, a])
                new_atoms[(k, xi, a)] = new_atoms.get((k, xi, a), 0.0) + mass
        atoms = new_atoms
    return J


def regret(trajectories, reference, mode="full"):
    """Mean regret curve against an exact reference profit curve.

    reference[t] is the benchmark cumulative expected profit; the mode
    string only labels which benchmark was supplied (the no-cost fully
    informed optimum for "full", the same-cost known-parameter optimum
    for "cost-adjusted").  Returns (mean, stderr) arrays over time.
    """
    if mode not in ("full", "cost-adjusted"):
        raise ConfigError(f"unknown regret mode {mode!r}")
    reference = np.asarray(reference, dtype=float)
    gaps = np.stack([reference - t.cumulative_profit() for t in trajectories])
    mean = gaps.mean(axis=0)
    se = gaps.std(axis=0, ddof=1) / np.sqrt(len(trajectories))
    return mean, se


def regret_exponent(mean_curve, t_lo=10, t_hi=None):
    """Least-squares growth exponent of a regret curve on [t_lo, t_hi]."""
    curve = np.asarray(mean_curve, dtype=float)
    if t_hi is None:
        t_hi = curve.size - 1
    if not (0 < t_lo < t_hi < curve.size):
        raise ConfigError(f"window [{t_lo}, {t_hi}] outside curve")
    ts = np.arange(t_lo, t_hi + 1)
    ys = curve[t_lo:t_hi + 1]
    if np.any(ys <= 0):
        raise ConfigError("regret curve must be positive on the fit window")
    return float(np.polyfit(np.log(ts), np.log(ys), 1)[0])
