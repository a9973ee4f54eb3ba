"""Parameter uncertainty for drift-controlled walks: conjugate Beta
posteriors, the belief-lattice backward recursion, finite-support
posterior filtering, and a simplex-grid kernel for the infinite-horizon
case.

The controlled chain moves +1 with probability theta under drift action
+1 and -1 with probability theta under drift action -1.  Every step is
one Bernoulli(theta) outcome, and the displacement revealed at an
observation determines the exact success count in between, so a Beta
prior stays Beta with integer-offset parameters.  That makes the belief
component of the augmented state a small integer lattice: after k total
steps with u successes the posterior is Beta(alpha0 + u, beta0 + k - u).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import betaln, gammaln

from .errors import ConfigError, NumericError, ResourceError


@dataclass(frozen=True)
class BetaParams:
    """Parameters of a Beta distribution."""

    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ConfigError(
                f"Beta parameters must be positive, got ({self.alpha}, {self.beta})")

    @property
    def mean(self):
        return self.alpha / (self.alpha + self.beta)


@dataclass(eq=False)
class FiniteThetaBelief:
    """Probability weights over a finite set of kernel parameters."""

    weights: np.ndarray
    theta_values: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        t = np.asarray(self.theta_values, dtype=float)
        if w.shape != t.shape or w.ndim != 1:
            raise ConfigError("weights and theta_values must be equal-length vectors")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError("belief weights must be a probability vector")
        self.weights = w
        self.theta_values = t


@dataclass(eq=False)
class BayesOcmModel:
    """Drift-controlled walk with unknown step probability.

    reward maps integer positions to per-step utility (vectorized);
    prior is the Beta belief over theta; true_theta is only consulted by
    the simulator, never by the solver.  Drift actions are written +1
    and -1 throughout this module; index 0 means drift +1.
    """

    reward: object               # callable: int array -> float array
    prior: BetaParams
    c_obs: float
    horizon: int
    switch_cost: float = 0.0
    true_theta: float | None = None

    def __post_init__(self):
        if self.c_obs < 0:
            raise ConfigError(f"c_obs must be nonnegative, got {self.c_obs}")
        if self.horizon < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")
        if self.switch_cost < 0:
            raise ConfigError("switch_cost must be nonnegative")
        if self.true_theta is not None and not (0.0 <= self.true_theta <= 1.0):
            raise ConfigError(f"true_theta must lie in [0, 1], got {self.true_theta}")


def peak_reward(x):
    """r(0) = 2, r(+/-2) = -1, zero elsewhere."""
    x = np.asarray(x)
    return np.where(x == 0, 2.0, np.where(np.abs(x) == 2, -1.0, 0.0))


def inverse_reward(x):
    """r(x) = 1/(|x| + 1)."""
    return 1.0 / (np.abs(np.asarray(x)) + 1.0)


def build_bayes_walk(prior, c_obs, *, horizon=50, reward_kind="peak",
                     true_theta=None, switch_cost=0.0) -> BayesOcmModel:
    """Uncertain-drift walk with the stock reward shapes."""
    kinds = {"peak": peak_reward, "inverse": inverse_reward}
    if reward_kind not in kinds:
        raise ConfigError(f"unknown reward_kind {reward_kind!r}")
    if not isinstance(prior, BetaParams):
        prior = BetaParams(*prior)
    return BayesOcmModel(reward=kinds[reward_kind], prior=prior, c_obs=c_obs,
                         horizon=horizon, switch_cost=switch_cost,
                         true_theta=true_theta)


# =====================================================================
# Conjugate machinery
# =====================================================================

def beta_binomial_pmf(k, n, alpha, beta):
    """P(K = k) for K ~ BetaBinomial(n, alpha, beta), in log space.

    Accepts array k (and broadcasting alpha/beta); exact to ~1e-13
    relative for n up to 1e4.
    """
    k_arr = np.asarray(k)
    if np.any(k_arr < 0) or np.any(k_arr > n):
        raise ConfigError(f"count k must lie in 0..{n}")
    if not (np.all(np.asarray(alpha) > 0) and np.all(np.asarray(beta) > 0)):
        raise ConfigError("alpha and beta must be positive")
    log_pmf = (gammaln(n + 1) - gammaln(k_arr + 1) - gammaln(n - k_arr + 1)
               + betaln(k_arr + alpha, n - k_arr + beta) - betaln(alpha, beta))
    out = np.exp(log_pmf)
    return out if out.shape else float(out)


def _bb_matrix(m, alphas, betas):
    """Rows of Beta-binomial pmfs: out[i, j] = pmf(j | m, alphas[i], betas[i])."""
    j = np.arange(m + 1)
    return beta_binomial_pmf(j[None, :], m, alphas[:, None], betas[:, None])


def posterior_update_beta(prior: BetaParams, action, n, k) -> BetaParams:
    """Conjugate update after observing displacement 2k - n over n steps.

    k counts up-moves; under drift +1 those are the successes, under
    drift -1 the down-moves are.  n = 0 returns the prior unchanged.
    """
    if not (0 <= k <= n):
        raise ConfigError(f"up-move count {k} outside 0..{n}")
    if action == 1:
        return BetaParams(prior.alpha + k, prior.beta + n - k)
    if action == -1:
        return BetaParams(prior.alpha + n - k, prior.beta + k)
    raise ConfigError(f"drift action must be +1 or -1, got {action}")


def predictive_nstep(x, a, n, prior: BetaParams):
    """Posterior-predictive distribution of the position after n steps.

    Returns (states, probs): states = x + 2j - n for j = 0..n (the
    parity-reachable set, no boundary), probs the Beta-binomial mixture
    over the binomial up-move counts.  a is the drift, +1 or -1.
    """
    if n < 1:
        raise ConfigError(f"step count must be >= 1, got {n}")
    j = np.arange(n + 1)
    probs = beta_binomial_pmf(j, n, prior.alpha, prior.beta)
    if a == -1:
        probs = probs[::-1].copy()
    elif a != 1:
        raise ConfigError(f"drift action must be +1 or -1, got {a}")
    return x + 2 * j - n, probs


def bayes_update_finite(belief: FiniteThetaBelief, transitions, x, a, steps,
                        observed) -> FiniteThetaBelief:
    """Reweight a finite-support belief by an m-step observation.

    transitions[i] is the per-action transition stack (d, L, L) of the
    i-th candidate parameter; the likelihood of seeing state index
    `observed` after `steps` steps from index x under action index a
    multiplies each weight.
    """
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    lik = np.empty(belief.weights.size)
    for i in range(lik.size):
        P = np.asarray(transitions[i][a], dtype=float)
        lik[i] = np.linalg.matrix_power(P, steps)[x, observed]
    total = belief.weights * lik
    mass = total.sum()
    if mass <= 0.0:
        raise NumericError(
            f"observation {observed} has zero likelihood under every candidate "
            "parameter (model misspecification)")
    return FiniteThetaBelief(weights=total / mass,
                             theta_values=belief.theta_values.copy())


# =====================================================================
# Belief-lattice backward recursion
# =====================================================================

@dataclass(eq=False)
class BayesSolution:
    """Backward-recursion output on the integer belief lattice.

    values[(n, k)] has shape (k+1, 2, k+1) indexed (x_idx, a_idx, u):
    position x = 2*x_idx - k on the level-k lattice, action index 0 for
    drift +1 and 1 for drift -1, u successes out of the k steps taken so
    far.  inspect[(n, k)] marks the observe decision (present for
    n < N); post_action[n] has shape (2, n+1, n+1) indexed
    (a_idx, x_idx', u') giving the action index adopted on observing.
    """

    model: BayesOcmModel
    values: dict
    inspect: dict
    post_action: dict

    def root_value(self):
        """Expected total profit from an observed start at the origin."""
        r0 = float(np.asarray(self.model.reward(np.array([0])))[0])
        return r0 + float(self.values[(1, 0)][0, :, 0].max())

    def root_action(self):
        """Action index chosen at time 0 (ties to the lower index)."""
        return int(self.values[(1, 0)][0, :, 0].argmax())


def _lattice_entries(N):
    # two actions; (k+1)^2 (x_idx, u) pairs per (n, k) layer
    return 2 * sum((k + 1) ** 2 for n in range(1, N + 1) for k in range(n))


def solve_bayes_finite(model: BayesOcmModel, *,
                       max_entries=50_000_000) -> BayesSolution:
    """Exact backward recursion of the uncertain-parameter program.

    The unknown is v(n, k, x_idx, a, u): time n, last observation at
    time k < n, observed position index x_idx on the level-k lattice,
    running drift a, and u Bernoulli successes banked so far.  At each
    time before the horizon the controller either continues (collect
    the posterior-predictive expected reward, keep the posterior) or
    observes (pay c_obs, see the binomially displaced position, bank
    its success count, re-optimize the drift).  The terminal layer
    collects the predictive expected reward only.  Undiscounted.

    The walk is unbounded (no reflecting boundary); that is what keeps
    the conjugate lattice exact.
    """
    N = model.horizon
    a0, b0 = model.prior.alpha, model.prior.beta
    g = model.switch_cost
    c_obs = model.c_obs
    entries = _lattice_entries(N)
    if entries > max_entries:
        raise ResourceError(
            f"belief lattice needs {entries} value entries "
            f"(> cap {max_entries}); lower the horizon or raise max_entries")

    values, inspect, post_action = {}, {}, {}

    for n in range(N, 0, -1):
        q = np.asarray(model.reward(2 * np.arange(n + 1) - n), dtype=float)

        if n < N:
            # Fold the freshly observed slice of level n+1 into the
            # post-observation payoff Z[a, s, u'] = r(x'_s) + best
            # continuation over a' (switching away from a costs g).
            fresh = values[(n + 1, n)]                     # (n+1, 2, n+1)
            Z = np.empty((2, n + 1, n + 1))
            post_action[n] = np.empty((2, n + 1, n + 1), dtype=np.int8)
            for ai in range(2):
                cand = np.stack([fresh[:, 0, :] - (g if ai != 0 else 0.0),
                                 fresh[:, 1, :] - (g if ai != 1 else 0.0)])
                post_action[n][ai] = cand.argmax(axis=0)   # ties -> lower a'
                Z[ai] = q[:, None] + cand.max(axis=0)

        for k in range(n - 1, -1, -1):
            m = n - k
            u = np.arange(k + 1)
            G_up = _bb_matrix(m, a0 + u, b0 + k - u)       # (k+1, m+1)
            G_dn = G_up[:, ::-1]
            # Qg[x_idx, j] = r at level-n index x_idx + j
            idx = np.arange(k + 1)[:, None] + np.arange(m + 1)[None, :]
            Qg = q[idx]
            er = np.empty((k + 1, 2, k + 1))
            er[:, 0, :] = np.einsum("xj,uj->xu", Qg, G_up)
            er[:, 1, :] = np.einsum("xj,uj->xu", Qg, G_dn)

            if n == N:
                values[(n, k)] = er
                continue

            cont = er + values[(n + 1, k)]

            # Observation branch: expectation of Z over the displacement
            # j, with the banked successes moving to u + j (drift +1) or
            # u + m - j (drift -1).
            ju = np.arange(m + 1)
            up_u = u[:, None] + ju[None, :]                # (k+1, m+1)
            dn_u = u[:, None] + (m - ju)[None, :]
            obs = np.empty((k + 1, 2, k + 1))
            for ai, (Ga, uprime) in enumerate(((G_up, up_u), (G_dn, dn_u))):
                W = Z[ai][idx[:, None, :], uprime[None, :, :]]  # (x, u, j)
                obs[:, ai, :] = np.einsum("uj,xuj->xu", Ga, W) - c_obs

            values[(n, k)] = np.maximum(cont, obs)
            inspect[(n, k)] = obs > cont

    return BayesSolution(model=model, values=values, inspect=inspect,
                         post_action=post_action)


# =====================================================================
# Simplex-grid approximation for finite-support, infinite-horizon runs
# =====================================================================

def _simplex_nodes(parts, G):
    """All weight vectors with entries i/G, lexicographically sorted."""
    nodes = []

    def rec(prefix, remaining, slots):
        if slots == 1:
            nodes.append(prefix + [remaining])
            return
        for c in range(remaining + 1):
            rec(prefix + [c], remaining - c, slots - 1)

    rec([], G, parts)
    return np.array(sorted(nodes), dtype=float) / G


@dataclass(eq=False)
class GridKernel:
    """Belief-simplex grid over a finite parameter set.

    nodes rows are probability vectors over thetas with spacing 1/G,
    sorted lexicographically; posterior images are mapped to the nearest
    node (ties to the lexicographically smallest, i.e. the first in row
    order).  Mass moves to projected nodes wholesale, so every derived
    transition row still sums to one exactly.
    """

    thetas: np.ndarray           # (T,)
    transitions: np.ndarray      # (T, d, L, L)
    G: int
    nodes: np.ndarray            # (Q, T)

    def __post_init__(self):
        self._power_cache = {}

    @property
    def num_nodes(self):
        return self.nodes.shape[0]

    def project(self, weights) -> int:
        w = np.asarray(weights, dtype=float)
        dist = np.linalg.norm(self.nodes - w[None, :], axis=1)
        best = dist.min()
        return int(np.nonzero(dist <= best + 1e-12)[0][0])

    def _power(self, t, a, n):
        key = (t, a, n)
        if key not in self._power_cache:
            self._power_cache[key] = np.linalg.matrix_power(
                self.transitions[t, a], n)
        return self._power_cache[key]

    def mixture_power(self, node_idx, a, n):
        """sum_t w_t P_t^n under the node's weights."""
        w = self.nodes[node_idx]
        L = self.transitions.shape[2]
        out = np.zeros((L, L))
        for t, wt in enumerate(w):
            if wt:
                out += wt * self._power(t, a, n)
        return out

    def posterior_node(self, node_idx, a, n, x, x_obs) -> int:
        """Projected posterior after seeing x_obs in n steps from x."""
        w = self.nodes[node_idx]
        lik = np.array([self._power(t, a, n)[x, x_obs]
                        for t in range(self.thetas.size)])
        total = w * lik
        mass = total.sum()
        if mass <= 0.0:
            return int(node_idx)     # unreachable branch; belief unchanged
        return self.project(total / mass)


def grid_kernel(thetas, transitions, G) -> GridKernel:
    """Build the belief grid for candidate parameters `thetas`.

    transitions has shape (T, d, L, L): one per-action stack per
    candidate.  G is the grid resolution (spacing 1/G).
    """
    if G < 2:
        raise ConfigError(f"grid resolution must be >= 2, got {G}")
    thetas = np.asarray(thetas, dtype=float)
    transitions = np.asarray(transitions, dtype=float)
    if transitions.ndim != 4 or transitions.shape[0] != thetas.size:
        raise ConfigError("transitions must be (num_thetas, d, L, L)")
    return GridKernel(thetas=thetas, transitions=transitions, G=G,
                      nodes=_simplex_nodes(thetas.size, G))


def solve_grid_value_iteration(kernel: GridKernel, reward, c_obs, gamma,
                               horizon, *, switching_cost=None, tol=1e-10,
                               max_sweeps=200_000):
    """Fixed-point sweep of the belief-augmented program on the grid.

    The unknown v(n, x, a, q) carries the grid belief q alongside the
    usual augmented state; continuation discounts v(n+1) and collects
    the mixture expected reward, the inspection branch draws the
    observed state from the mixture kernel, re-optimizes the action,
    and jumps to the projected posterior node; the horizon layer holds
    the inspection branch with equality.  Plain synchronous iteration;
    the discount makes it a contraction.
    """
    T, d, L, _ = kernel.transitions.shape
    Q = kernel.num_nodes
    N = horizon
    reward = np.asarray(reward, dtype=float)
    if reward.shape != (L, d):
        raise ConfigError(f"reward must be ({L}, {d}), got {reward.shape}")
    if switching_cost is None:
        switching_cost = np.zeros((d, d))
    g = np.asarray(switching_cost, dtype=float)
    if not (tol > 0):
        raise ConfigError("tol must be positive")

    # Static pieces: mixture powers, mixture expected rewards, posterior maps.
    EP = np.empty((Q, d, N, L, L))
    for q in range(Q):
        for a in range(d):
            for n in range(1, N + 1):
                EP[q, a, n - 1] = kernel.mixture_power(q, a, n)
    er = np.einsum("qanxy,ya->qanx", EP, reward)
    post = np.empty((Q, d, N, L, L), dtype=np.int32)
    for q in range(Q):
        for a in range(d):
            for n in range(1, N + 1):
                for x in range(L):
                    for y in range(L):
                        post[q, a, n - 1, x, y] = kernel.posterior_node(
                            q, a, n, x, y)

    er_nlaq = np.moveaxis(er, (0, 1, 2, 3), (3, 2, 0, 1))  # (N, L, d, Q)
    cols = np.arange(L)[None, :]
    v = np.zeros((N, L, d, Q))
    for _ in range(max_sweeps):
        # best[a, y, q'] = max_a' (gamma*v(1,y,a',q') + r(y,a') - g[a,a'])
        base = gamma * v[0] + reward[:, :, None]          # (y, a', q')
        cand = base[None] - g[:, None, :, None]           # (a, y, a', q')
        best = cand.max(axis=2)                           # (a, y, q')
        Mv = np.empty((N, L, d, Q))
        for q in range(Q):
            for a in range(d):
                for n in range(N):
                    # entry (x, y): post-observation value at y under the
                    # belief the (x -> y) likelihood column induces
                    B = best[a, cols, post[q, a, n]]
                    Mv[n, :, a, q] = np.einsum("xy,xy->x", EP[q, a, n], B)
        Mv -= c_obs
        nxt = np.empty_like(v)
        nxt[:-1] = np.maximum(gamma * v[1:] + er_nlaq[:-1], Mv[:-1])
        nxt[-1] = Mv[-1]
        delta = np.max(np.abs(nxt - v))
        v = nxt
        if delta <= tol:
            return v
    raise NumericError(f"grid value iteration did not reach {tol} "
                       f"within {max_sweeps} sweeps")
