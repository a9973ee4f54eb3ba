"""Policy extraction, waiting times, and the two-state closed form.

A solved value array induces a policy: at each augmented state either
keep the running action one more step or pay to observe; on observing,
the post-observation action is the inner argmax of the inspection
bracket.  The closed-form solution of the two-state hold-your-state
model doubles as an analytic oracle for the solver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import ConfigError, OcmError
from .qvi import QviSystem


@dataclass(eq=False)
class OcmPolicy:
    """Observation/action policy read off a solved value array.

    inspect[n-1, x, a] says "observe now" at elapsed time n; the final
    layer is always True (the truncation forces an observation).
    post_obs_action[a, x'] is the action adopted on seeing x' while a
    was running; it depends on the current action only through the
    switching charge and on the elapsed time not at all, so it is stored
    once rather than per n.  waiting_time[x, a] is the first elapsed
    time with inspect set, or inf for rows that never observe (pinned
    absorbing states).
    """

    inspect: np.ndarray          # (N, L, d) bool
    post_obs_action: np.ndarray  # (d, L) int
    waiting_time: np.ndarray     # (L, d) float, inf-sentinel

    def __post_init__(self):
        if self.waiting_time[np.isfinite(self.waiting_time)].size:
            if self.waiting_time[np.isfinite(self.waiting_time)].min() < 1:
                raise ConfigError("waiting times start at elapsed time 1")


def extract_policy(sys: QviSystem, v) -> OcmPolicy:
    """Classify each augmented state by which branch attains the minimum.

    Ties (within 1e-9) go to continuation, so a symmetric zero-cost model
    reads as "wait until the chain could have moved somewhere better".
    Pinned absorbing rows never observe.
    """
    u = sys.reshape(np.asarray(v, dtype=float))
    F = sys.continuation_values(u)
    Mu = sys.obstacle(u)
    _, amax = sys.switch_value(u)

    inspect = np.empty((sys.N, sys.L, sys.d), dtype=bool)
    inspect[:-1] = (u - Mu)[:-1] < F - 1e-9
    inspect[-1] = True
    if sys.pinned_index.size:
        inspect.reshape(-1)[sys.pinned_index] = False

    first = np.argmax(inspect, axis=0)           # first True per (x, a)
    any_inspect = inspect.any(axis=0)
    waiting = np.where(any_inspect, first + 1.0, math.inf)
    return OcmPolicy(inspect=inspect, post_obs_action=amax,
                     waiting_time=waiting)


def evaluate_policy(sys: QviSystem, policy: OcmPolicy):
    """Value of a *fixed* policy by one sparse linear solve.

    Rows where the policy continues read u(n) = gamma*u(n+1) + (P^n r);
    rows where it observes read u(n) = inspection value with the argmax
    frozen to the policy's action map.  Used to confirm that the
    extracted policy actually earns the solved value.
    """
    N, L, d, gamma = sys.N, sys.L, sys.d, sys.gamma
    size = sys.size
    model = sys.model
    discounted = model.discount_observed_reward

    rows, cols, vals = [], [], []
    rhs = np.zeros(size)
    idx = np.arange(size)
    rows.append(idx)
    cols.append(idx)
    vals.append(np.ones(size))

    inspect = policy.inspect.copy()
    inspect[-1] = True
    flat_inspect = inspect.reshape(-1)
    if sys.pinned_index.size:
        flat_inspect[sys.pinned_index] = False

    # Continuation rows: -gamma at (n+1, x, a), rhs = expected reward.
    cont = ~flat_inspect & ~sys.pinned_mask
    cont[(N - 1) * L * d:] = False
    cont_idx = idx[cont]
    rows.append(cont_idx)
    cols.append(cont_idx + L * d)
    vals.append(np.full(cont_idx.size, -gamma))
    rhs[cont] = sys.expected_reward.reshape(-1)[cont]

    # Inspection rows: scatter -gamma * P^n_a(x, .) onto (1, x', a*(x')).
    amax = policy.post_obs_action
    gather = np.take_along_axis(model.reward, amax.T, axis=1).T  # (d, L) r(x', a*)
    gswitch = np.take_along_axis(
        np.broadcast_to(model.switching_cost[:, None, :], (d, L, d)),
        amax[:, :, None], axis=2)[:, :, 0]
    payout = gather - gswitch                                    # (d, L)
    ins = flat_inspect.reshape(N, L, d)
    for a in range(d):
        colmap = amax[a] + np.arange(L) * d                      # (1, x', a*) flat
        for n in np.nonzero(ins[:, :, a].any(axis=1))[0]:
            xs = np.nonzero(ins[n, :, a])[0]
            Pn = model.powers.power(a, n + 1)
            block = Pn[xs].toarray() if sp.issparse(Pn) else Pn[xs]
            r_idx, c_idx = np.nonzero(block)
            rows.append((n * L + xs[r_idx]) * d + a)
            cols.append(colmap[c_idx])
            vals.append(-gamma * block[r_idx, c_idx])
            base = block @ payout[a]
            if discounted:
                base = gamma * base
            rhs[(n * L + xs) * d + a] = base - model.c_obs

    if sys.pinned_index.size:
        rhs[sys.pinned_index] = sys.pinned_value

    A = sp.coo_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))),
                      shape=(size, size)).tocsc()
    try:
        u = splu(A).solve(rhs)
    except RuntimeError as e:
        raise OcmError(f"fixed-policy system is singular: {e}") from e
    return sys.reshape(u)


def waiting_time_table(policies: dict, states) -> dict:
    """Waiting times over `states` for a family of solved policies.

    `policies` maps a column label (e.g. a cost value) to an OcmPolicy;
    the result maps each label to the waiting-time row restricted to the
    requested states, ready for CSV serialization column-by-column.
    Waiting times are reported per (state, action).
    """
    states = list(states)
    table = {}
    for label, pol in policies.items():
        table[label] = np.stack([pol.waiting_time[x] for x in states])
    return table


# =====================================================================
# Two-state closed form
# =====================================================================

@dataclass(eq=False)
class ToyClosedForm:
    """Explicit solution of the hold-your-state model.

    v1 is the value at elapsed time 1 in the matched state; T_star the
    optimal inspection interval (1 = observe every step, math.inf if the
    supremum is only approached in the limit of never observing).
    values[n-1] holds v(n) for n = 1..len(values); tail_bound bounds the
    candidate values ignored beyond the m_max cutoff.
    """

    p: float
    gamma: float
    c_obs: float
    v1: float
    T_star: float
    values: np.ndarray
    tail_bound: float


def toy_closed_form(p, gamma, c_obs, m_max=2000) -> ToyClosedForm:
    """Optimal value of the two-state model by interval search.

    Inspecting every m steps and seeing the matched state each time is
    worth (p * sum_{k<m-1} (gamma*p)^k + gamma^(m-1) * (1 - c_obs)) /
    (1 - gamma^m); observing every step is worth (1 - c_obs)/(1 - gamma);
    never observing earns the matched-state annuity p/(1 - gamma*p).
    The best of these is the value, and the attaining interval the
    optimal waiting time.
    """
    if not (0.0 < p < 1.0):
        raise ConfigError(f"p must lie in (0, 1), got {p}")
    if not (0.0 < gamma < 1.0):
        raise ConfigError(f"gamma must lie in (0, 1), got {gamma}")
    if m_max < 2:
        raise ConfigError(f"m_max must be >= 2, got {m_max}")

    every_step = (1.0 - c_obs) / (1.0 - gamma)
    never = p / (1.0 - gamma * p)

    ms = np.arange(2, m_max + 1)
    partial = p * (1.0 - (gamma * p) ** (ms - 1)) / (1.0 - gamma * p)
    cand = (partial + gamma ** (ms - 1) * (1.0 - c_obs)) / (1.0 - gamma ** ms)
    best = int(np.argmax(cand))

    v1 = every_step
    T_star = 1.0
    if cand[best] > v1:
        v1 = float(cand[best])
        T_star = float(ms[best])
    if never > v1 + 1e-15:
        v1 = never
        T_star = math.inf

    tail_bound = ((p * (gamma * p) ** (m_max - 1) / (1.0 - gamma * p)
                   + gamma ** (m_max - 1) * (abs(1.0 - c_obs) + never))
                  / (1.0 - gamma ** m_max))

    if math.isinf(T_star):
        n = np.arange(1, m_max + 1)
        values = p ** n / (1.0 - gamma * p)
    else:
        T = int(T_star)
        values = np.empty(T)
        if T == 1:
            values[0] = v1
        else:
            values[T - 1] = 1.0 - c_obs + gamma * v1
            for n in range(T - 1, 0, -1):
                values[n - 1] = p ** n + gamma * values[n]
    return ToyClosedForm(p=p, gamma=gamma, c_obs=c_obs, v1=v1,
                         T_star=T_star, values=values, tail_bound=tail_bound)
