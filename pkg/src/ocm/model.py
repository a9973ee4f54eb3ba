"""Model definitions and matrix machinery.

An :class:`OcmModel` is a finite Markov decision process in which the
controller only sees the state when it pays an observation fee: per-action
transition matrices, a reward table, the observation cost, a discount
factor, optional action-switching costs, and the time-truncation horizon.

The module also provides the n-step transition powers (memoized, because
system assembly touches every elapsed time up to the horizon), ordered
open-loop matrix products, a matrix exponential for generator-specified
chains, the built-in example models, and a JSON model-file loader.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, NumericError

# Matrices with more states than this are cached in CSR form instead of dense.
SPARSE_THRESHOLD = 512


# =====================================================================
# Core model types
# =====================================================================

@dataclass(frozen=True, eq=False)
class OcmModel:
    """A Markov decision process with costly state observation.

    Fields
    ------
    transition : (d, L, L) array, row-stochastic per action
    reward     : (L, d) array, utility per step
    c_obs      : cost paid each time the state is observed
    gamma      : discount factor in (0, 1)
    switching_cost : (d, d) array g with zero diagonal; g[a, a'] is paid
        when an observation is followed by a switch from a to a'
    horizon    : truncation time N (elapsed-time domain is 1..N)
    absorbing  : mapping state -> pinned value; those rows of the value
        array are held fixed at the pinned constant
    discount_observed_reward : if True, the reward credited at an
        observation epoch is discounted together with the restarted value
        (the whole observation payout arrives one period ahead); if False
        (default) that reward is credited undiscounted at the epoch itself.
        Only the inspection branch is affected.
    """

    transition: np.ndarray
    reward: np.ndarray
    c_obs: float
    gamma: float
    switching_cost: np.ndarray
    horizon: int
    absorbing: dict = field(default_factory=dict)
    discount_observed_reward: bool = False

    def __post_init__(self):
        P = np.ascontiguousarray(np.asarray(self.transition, dtype=float))
        r = np.ascontiguousarray(np.asarray(self.reward, dtype=float))
        g = np.ascontiguousarray(np.asarray(self.switching_cost, dtype=float))
        if P.ndim != 3 or P.shape[1] != P.shape[2]:
            raise ConfigError(f"transition must be (d, L, L), got {P.shape}")
        d, L, _ = P.shape
        if r.shape != (L, d):
            raise ConfigError(f"reward must be ({L}, {d}), got {r.shape}")
        if g.shape != (d, d):
            raise ConfigError(f"switching_cost must be ({d}, {d}), got {g.shape}")
        for a in range(d):
            if np.any(P[a] < 0):
                raise ConfigError(f"transition[{a}] has negative entries")
            bad = np.nonzero(np.abs(P[a].sum(axis=1) - 1.0) > 1e-12)[0]
            if bad.size:
                raise ConfigError(
                    f"transition[{a}] row {bad[0]} sums to {P[a][bad[0]].sum()!r}, not 1")
        if np.any(np.diag(g) != 0.0):
            raise ConfigError("switching_cost must have zero diagonal")
        if np.any(g < 0):
            raise ConfigError("switching_cost must be nonnegative")
        if not (0.0 < self.gamma < 1.0):
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.c_obs < 0:
            raise ConfigError(f"c_obs must be nonnegative, got {self.c_obs}")
        if self.horizon < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")
        for x in self.absorbing:
            if not (0 <= int(x) < L):
                raise ConfigError(f"absorbing state {x} outside 0..{L - 1}")
        for arr in (P, r, g):
            arr.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "switching_cost", g)
        object.__setattr__(self, "absorbing",
                           {int(x): float(v) for x, v in self.absorbing.items()})
        object.__setattr__(self, "_powers", PowerCache(P))

    @property
    def num_states(self):
        return self.transition.shape[1]

    @property
    def num_actions(self):
        return self.transition.shape[0]

    @property
    def powers(self) -> "PowerCache":
        return self._powers


@dataclass(frozen=True, eq=False)
class RateModel:
    """A continuous-time chain given by per-action generator matrices.

    The embedded one-period transition matrices are P_a = expm(Q_a).
    `pinned_value` fixes the value of `absorbing_state` (e.g. a terminal
    failure state whose per-period loss l is locked in forever, giving
    l/(1-gamma) under discounting).
    """

    generator: np.ndarray          # (d, L, L), rows sum to 0
    reward: np.ndarray             # (L, d)
    c_obs: float
    gamma: float
    horizon: int
    absorbing_state: int | None = None
    pinned_value: float = 0.0

    def to_ocm(self, switching_cost=None) -> OcmModel:
        Q = np.asarray(self.generator, dtype=float)
        d = Q.shape[0]
        P = np.stack([expm(Q[a]) for a in range(d)])
        if switching_cost is None:
            switching_cost = np.zeros((d, d))
        absorbing = {}
        if self.absorbing_state is not None:
            absorbing[int(self.absorbing_state)] = float(self.pinned_value)
        return OcmModel(transition=P, reward=self.reward, c_obs=self.c_obs,
                        gamma=self.gamma, switching_cost=switching_cost,
                        horizon=self.horizon, absorbing=absorbing)


@dataclass(frozen=True)
class OpenLoopActionSet:
    """Parametrised time-inhomogeneous open-loop action schedules.

    `schedules[theta]` lists the base action applied at steps 1, 2, ... .
    """

    schedules: dict

    def action_at(self, theta, k):
        """Base action for 1-based step index k under parameter theta."""
        sched = self.schedules[theta]
        if not (1 <= k <= len(sched)):
            raise ConfigError(f"step index {k} outside schedule for {theta!r}")
        return sched[k - 1]


# =====================================================================
# n-step transition powers
# =====================================================================

class PowerCache:
    """Memoized powers P_a^n, grown consecutively per action.

    Dense storage for L <= SPARSE_THRESHOLD, CSR above.  Thread-safe:
    fills happen under a lock and are idempotent (last writer wins with
    identical content).
    """

    def __init__(self, transition):
        d, L, _ = transition.shape
        self._L = L
        if L <= SPARSE_THRESHOLD:
            base = [np.asarray(transition[a], dtype=float) for a in range(d)]
            eye = np.eye(L)
        else:
            base = [sp.csr_matrix(transition[a]) for a in range(d)]
            eye = sp.identity(L, format="csr")
        self._chains = [[eye, base[a]] for a in range(d)]
        self._lock = threading.Lock()

    def power(self, a, n):
        """Return P_a^n (n = 0 gives the identity)."""
        if n < 0:
            raise ConfigError(f"power index must be nonnegative, got {n}")
        chain = self._chains[a]
        if n < len(chain):
            return chain[n]
        with self._lock:
            chain = self._chains[a]
            P = chain[1]
            while len(chain) <= n:
                chain.append(chain[-1] @ P)
        return chain[n]


def n_step_matrix(model: OcmModel, a, n):
    """The n-step transition matrix P_a^n."""
    if not (0 <= a < model.num_actions):
        raise ConfigError(f"action index {a} outside 0..{model.num_actions - 1}")
    return model.powers.power(a, n)


def open_loop_matrix(model: OcmModel, actions: OpenLoopActionSet, theta, n):
    """Ordered product P_{f(1)} ... P_{f(n)} for the schedule f = f_theta."""
    if n < 1:
        raise ConfigError(f"open-loop product needs n >= 1, got {n}")
    out = None
    for k in range(1, n + 1):
        a = actions.action_at(theta, k)
        Pk = n_step_matrix(model, a, 1)
        out = Pk if out is None else out @ Pk
    return out


# =====================================================================
# Matrix exponential for generator-specified chains
# =====================================================================

# Order-13 rational approximant coefficients and its validity radius.
_PADE13 = (64764752532480000., 32382376266240000., 7771770303897600.,
           1187353796428800., 129060195264000., 10559470521600.,
           670442572800., 33522128640., 1323241920., 40840800.,
           960960., 16380., 182., 1.)
_THETA13 = 5.371920351148152


def validate_generator(Q, tol=1e-10):
    """Check Q has nonnegative off-diagonal entries and zero row sums."""
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ConfigError(f"generator must be square, got {Q.shape}")
    off = Q - np.diag(np.diag(Q))
    if np.any(off < -tol):
        i, j = np.argwhere(off < -tol)[0]
        raise ConfigError(f"generator entry ({i}, {j}) is negative off-diagonal")
    sums = Q.sum(axis=1)
    bad = np.nonzero(np.abs(sums) > tol)[0]
    if bad.size:
        raise ConfigError(f"generator row {bad[0]} sums to {sums[bad[0]]!r}, not 0")
    return Q


def expm(Q):
    """Matrix exponential of a generator, returning a stochastic matrix.

    Scaling-and-squaring with the fixed order-13 approximant: scale so
    that ||Q/2^s||_1 <= 5.37, evaluate the rational approximant, square s
    times.  Output rows are renormalized only when the deviation from row
    sum 1 is below 1e-9; larger deviations raise.
    """
    A = validate_generator(Q)
    L = A.shape[0]
    norm = np.linalg.norm(A, 1)
    s = max(0, int(math.ceil(math.log2(norm / _THETA13)))) if norm > _THETA13 else 0
    A = A / (2.0 ** s)

    b = _PADE13
    I = np.eye(L)
    A2 = A @ A
    A4 = A2 @ A2
    A6 = A2 @ A4
    U = A @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2)
             + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * I)
    V = (A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2)
         + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * I)
    P = np.linalg.solve(V - U, V + U)
    for _ in range(s):
        P = P @ P

    sums = P.sum(axis=1)
    dev = np.max(np.abs(sums - 1.0))
    if dev >= 1e-9:
        raise NumericError(f"expm row sums deviate by {dev:.3e} (> 1e-9)")
    return P / sums[:, None]


# =====================================================================
# Built-in models
# =====================================================================

def build_random_walk(theta, L, reward_kind="inverse", *, c_obs=0.25,
                      gamma=0.99, horizon=500, switch_cost=0.0):
    """Controlled +/-1 random walk on {-L..L} with reflecting boundaries.

    Action 0 drifts up (step +1 with probability theta), action 1 drifts
    down (step -1 with probability theta).  A blocked step at a boundary
    stays put.  State x is stored at index x + L.

    reward_kind "inverse" gives r(x) = 1/(|x|+1); "peak" gives r(0) = 2,
    r(+/-2) = -1 and 0 elsewhere.

    The walk uses the discounted-observation-payout convention
    (``discount_observed_reward=True``).
    """
    if not (0.0 < theta < 1.0):
        raise ConfigError(f"theta must lie in (0, 1), got {theta}")
    if L < 1:
        raise ConfigError(f"half-width must be >= 1, got {L}")
    n = 2 * L + 1
    up = np.zeros((n, n))
    for i in range(n):
        if i + 1 < n:
            up[i, i + 1] = theta
        else:
            up[i, i] = theta          # blocked up-step at +L
        if i - 1 >= 0:
            up[i, i - 1] = 1.0 - theta
        else:
            up[i, i] += 1.0 - theta   # blocked down-deviation at -L
    down = np.zeros((n, n))
    for i in range(n):
        if i - 1 >= 0:
            down[i, i - 1] = theta
        else:
            down[i, i] = theta
        if i + 1 < n:
            down[i, i + 1] = 1.0 - theta
        else:
            down[i, i] += 1.0 - theta

    xs = np.arange(-L, L + 1)
    if reward_kind == "inverse":
        r = 1.0 / (np.abs(xs) + 1.0)
    elif reward_kind == "peak":
        r = np.zeros(n)
        r[xs == 0] = 2.0
        r[np.abs(xs) == 2] = -1.0
    else:
        raise ConfigError(f"unknown reward_kind {reward_kind!r}")
    reward = np.column_stack([r, r])

    g = np.array([[0.0, switch_cost], [switch_cost, 0.0]])
    return OcmModel(transition=np.stack([up, down]), reward=reward,
                    c_obs=c_obs, gamma=gamma, switching_cost=g,
                    horizon=horizon, discount_observed_reward=True)


def build_two_state_toy(p, *, c_obs=0.1, gamma=0.9, horizon=800):
    """Two-state chain where each action tries to hold its matching state.

    States and actions are both {0, 1}; reward 1 when x == a, else 0.
    Under action a the matched state persists with probability p and the
    mismatched state is a trap.
    """
    if not (0.0 < p < 1.0):
        raise ConfigError(f"p must lie in (0, 1), got {p}")
    P0 = np.array([[p, 1.0 - p], [0.0, 1.0]])
    P1 = np.array([[1.0, 0.0], [1.0 - p, p]])
    reward = np.array([[1.0, 0.0], [0.0, 1.0]])
    return OcmModel(transition=np.stack([P0, P1]), reward=reward,
                    c_obs=c_obs, gamma=gamma,
                    switching_cost=np.zeros((2, 2)), horizon=horizon)


def build_ctmc_chain(*, c_obs=0.1, gamma=0.95, horizon=60):
    """Synthetic 16-state birth-death chain specified through generators.

    Two treatments: action 0 lets the load climb (birth rate 1.2), action
    1 suppresses it (death rate 1.0).  State 15 is an absorbing failure
    state with per-period loss -1 pinned at -1/(1-gamma).
    """
    n = 16
    rates = ((1.2, 0.4), (0.3, 1.0))   # (birth, death) per action
    Qs = []
    for birth, death in rates:
        Q = np.zeros((n, n))
        for i in range(n - 1):         # state 15 is absorbing: zero rates out
            if i + 1 < n:
                Q[i, i + 1] = birth
            if i - 1 >= 0:
                Q[i, i - 1] = death
            Q[i, i] = -Q[i].sum()
        Qs.append(Q)
    r = 1.0 / (1.0 + np.arange(n))
    r[n - 1] = -1.0
    reward = np.column_stack([r, r - 0.02])   # suppression carries a small cost
    rate = RateModel(generator=np.stack(Qs), reward=reward, c_obs=c_obs,
                     gamma=gamma, horizon=horizon, absorbing_state=n - 1,
                     pinned_value=-1.0 / (1.0 - gamma))
    return rate.to_ocm()


# =====================================================================
# Model files
# =====================================================================

def _require(doc, key, path="model"):
    if key not in doc:
        raise ConfigError(f"{path}: missing key {key!r}")
    return doc[key]


def load_model(path) -> OcmModel:
    """Load an OcmModel from a JSON model file.

    Expected keys: states, actions, transition (list of row-major L x L
    matrices) or generator (run through expm), reward, c_obs, gamma,
    horizon; optional switching_cost and absorbing (list of
    {state, pinned_value}).  Validation errors name the offending key
    path and row index.
    """
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read model file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"model file {path} is not valid JSON: {e}") from e

    L = int(_require(doc, "states"))
    d = int(_require(doc, "actions"))

    if "transition" in doc:
        mats = doc["transition"]
        key = "transition"
    elif "generator" in doc:
        mats = doc["generator"]
        key = "generator"
    else:
        raise ConfigError("model: needs either 'transition' or 'generator'")
    if len(mats) != d:
        raise ConfigError(f"model.{key}: expected {d} matrices, got {len(mats)}")
    stacked = np.zeros((d, L, L))
    for a, mat in enumerate(mats):
        if len(mat) != L:
            raise ConfigError(f"model.{key}[{a}]: expected {L} rows, got {len(mat)}")
        for i, row in enumerate(mat):
            if len(row) != L:
                raise ConfigError(
                    f"model.{key}[{a}] row {i}: expected {L} entries, got {len(row)}")
            stacked[a, i] = row
    if key == "generator":
        try:
            stacked = np.stack([expm(stacked[a]) for a in range(d)])
        except ConfigError as e:
            raise ConfigError(f"model.generator: {e}") from e

    reward = np.asarray(_require(doc, "reward"), dtype=float)
    if reward.shape != (L, d):
        raise ConfigError(f"model.reward: expected shape ({L}, {d}), got {reward.shape}")

    g = np.asarray(doc.get("switching_cost", np.zeros((d, d))), dtype=float)
    absorbing = {}
    for entry in doc.get("absorbing", []):
        absorbing[int(_require(entry, "state", "model.absorbing[]"))] = \
            float(_require(entry, "pinned_value", "model.absorbing[]"))

    try:
        return OcmModel(transition=stacked, reward=reward,
                        c_obs=float(_require(doc, "c_obs")),
                        gamma=float(_require(doc, "gamma")),
                        switching_cost=g,
                        horizon=int(_require(doc, "horizon")),
                        absorbing=absorbing,
                        discount_observed_reward=bool(
                            doc.get("discount_observed_reward", False)))
    except ConfigError as e:
        raise ConfigError(f"model file {path}: {e}") from e
