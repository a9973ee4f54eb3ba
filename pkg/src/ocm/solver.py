"""Penalty + semismooth Newton solver and independent fixed-point oracles.

The complementarity system min{F(u), u - Mu} = 0 is approximated by the
penalised equation

    G_rho(u) = F(u) - rho * (Mu - u)^+ = 0,

whose solutions increase monotonically to the true value as rho grows.
Each G_rho is piecewise linear, so plain semismooth Newton with an exact
sparse direct linear solve converges in a handful of iterations; the
solver sweeps a geometric rho schedule and records the increments between
consecutive rho levels (they shrink at first order in 1/rho).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import ConfigError, ConvergenceError
from .qvi import FiniteHorizonSystem, QviSystem


@dataclass
class PenaltyConfig:
    """Knobs for the penalised Newton sweep.

    rho is the first penalty weight; the schedule doubles it `doublings`
    times.  Every rho level is started from the uncoupled rho = 0 guess
    unless warm_start is set, in which case each level starts from the
    previous level's solution (warm starting converges in fewer, uneven
    iteration counts; the cold default keeps counts flat across the
    schedule).
    """

    rho: float = 1e3
    doublings: int = 6
    rel_tol: float = 1e-8
    max_newton_iters: int = 200
    linear_solver: str = "sparse-direct"
    warm_start: bool = False

    def __post_init__(self):
        if self.rho <= 0:
            raise ConfigError(f"rho must be positive, got {self.rho}")
        if self.rel_tol <= 0:
            raise ConfigError(f"rel_tol must be positive, got {self.rel_tol}")
        if self.doublings < 0:
            raise ConfigError(f"doublings must be >= 0, got {self.doublings}")
        if self.linear_solver != "sparse-direct":
            raise ConfigError(f"unknown linear solver {self.linear_solver!r}")


@dataclass
class SolveReport:
    """What happened during a solve: one entry per rho level."""

    rhos: list = field(default_factory=list)
    newton_iterations: list = field(default_factory=list)
    increments: list = field(default_factory=list)
    final_residual: float = np.nan
    wall_time: float = 0.0
    threads: int = 1

    def rows(self):
        """Two labelled rows (iteration counts, increments) per rho column."""
        return [["rho"] + [f"{r:g}" for r in self.rhos],
                ["newton_iterations"] + [str(k) for k in self.newton_iterations],
                ["increment"] + [""] + [f"{v:.7f}" for v in self.increments]]


# =====================================================================
# Penalised residual and its generalized Jacobian
# =====================================================================

def penalised_residual(sys: QviSystem, u, rho):
    """G_rho(u) with the unpenalised equality row at the horizon."""
    u3 = sys.reshape(u)
    Mu = sys.obstacle(u3)
    out = np.empty((sys.N, sys.L, sys.d))
    out[:-1] = sys.continuation_values(u3)
    if rho:
        out[:-1] -= rho * np.maximum(Mu[:-1] - u3[:-1], 0.0)
    out[-1] = u3[-1] - Mu[-1]
    flat = out.reshape(-1)
    if sys.pinned_index.size:
        flat[sys.pinned_index] = u3.reshape(-1)[sys.pinned_index] - sys.pinned_value
    return flat


def generalized_jacobian(sys: QviSystem, u, rho):
    """A Clarke-derivative selection of G_rho at u, as CSR.

    Rows are unit diagonal plus the -gamma shift onto (n+1, x, a); where
    the penalty is strictly active the row gains +rho on the diagonal and
    scatters -rho*gamma*P_a^n(x, x') onto the columns (1, x', a*(x'))
    picked by the current inner argmax.  At the kink (Mu - u = 0) the
    inactive selection (zero) is used, so rho = 0 reproduces the plain
    block-bidiagonal continuation system.  Horizon rows differentiate the
    unpenalised equality u - Mu.
    """
    N, L, d = sys.N, sys.L, sys.d
    u3 = sys.reshape(u)
    _, amax = sys.switch_value(u3)
    Mu = sys.obstacle(u3)
    pinned3 = sys.pinned_mask.reshape(N, L, d)
    idx3 = np.arange(sys.size).reshape(N, L, d)

    rows = [np.arange(sys.size)]
    cols = [np.arange(sys.size)]
    data = [np.ones(sys.size)]

    shift = ~pinned3
    shift[-1] = False
    shifted = idx3[shift]
    rows.append(shifted)
    cols.append(shifted + L * d)
    data.append(np.full(shifted.size, -sys.gamma))

    active = Mu - u3 > 0.0
    active[-1] = False
    active &= ~pinned3
    act_idx = idx3[active]
    rows.append(act_idx)
    cols.append(act_idx)
    data.append(np.full(act_idx.size, float(rho)))

    # colmap[a, x'] = flat index of (1, x', amax[a, x'])
    colmap = np.arange(L)[None, :] * d + amax

    for a in range(d):
        for ni in range(N):
            if ni < N - 1:
                xs = np.nonzero(active[ni, :, a])[0]
                coef = -rho * sys.gamma
            else:
                xs = np.nonzero(~pinned3[ni, :, a])[0]
                coef = -sys.gamma
            if xs.size == 0:
                continue
            Pn = sys.model.powers.power(a, ni + 1)
            if sp.issparse(Pn):
                sub = Pn[xs].tocoo()
                rows.append(idx3[ni, xs[sub.row], a])
                cols.append(colmap[a, sub.col])
                data.append(coef * sub.data)
            else:
                block = Pn[xs]
                rnz, cnz = np.nonzero(block)
                rows.append(idx3[ni, xs[rnz], a])
                cols.append(colmap[a, cnz])
                data.append(coef * block[rnz, cnz])

    J = sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(sys.size, sys.size))
    return J.tocsr()


# =====================================================================
# Newton iteration
# =====================================================================

def newton_solve(sys: QviSystem, u0, config: PenaltyConfig, rho=None):
    """Semismooth Newton at a single rho; the factorization is rebuilt
    every iteration (active sets move) and there is no line search."""
    if rho is None:
        rho = config.rho
    t0 = time.perf_counter()
    u = sys.reshape(u0).reshape(-1).astype(float).copy()
    for it in range(1, config.max_newton_iters + 1):
        G = penalised_residual(sys, u, rho)
        J = generalized_jacobian(sys, u, rho)
        try:
            delta = splu(J.tocsc()).solve(G)
        except RuntimeError as e:
            raise ConvergenceError(
                f"singular Jacobian at Newton iteration {it} (rho={rho:g}): {e}",
                iterations=it) from e
        u -= delta
        inc = np.max(np.abs(delta)) / max(1.0, np.max(np.abs(u)))
        if inc <= config.rel_tol:
            report = SolveReport(rhos=[rho], newton_iterations=[it],
                                 wall_time=time.perf_counter() - t0)
            report.final_residual = float(
                np.max(np.abs(sys.qvi_residual(u).values)))
            return sys.reshape(u.copy()), report
    raise ConvergenceError(
        f"Newton did not converge in {config.max_newton_iters} iterations "
        f"(rho={rho:g})",
        iterations=config.max_newton_iters,
        residual=float(np.max(np.abs(penalised_residual(sys, u, rho)))))


def assemble_initial_guess(sys: QviSystem):
    """Solution of the uncoupled rho = 0 system, per action.

    Backward substitution v(n) = gamma*v(n+1) + (P^n r) with the
    *uncoupled* terminal rule v(N) = P^N(gamma*v(1) + r) - c_obs (the
    post-observation max collapsed to the same action; the reward moves
    inside the discount when the model says so).  Substituting the
    backward sweep into the terminal rule leaves one L x L linear solve
    per action:  (I - gamma^N P^N) v(N) = gamma P^N b + P^N r - c_obs,
    with b the discounted sum of the one-shot rewards up to N-1.
    """
    N, L, d, gamma = sys.N, sys.L, sys.d, sys.gamma
    er = sys.expected_reward
    r_weight = gamma if sys.model.discount_observed_reward else 1.0
    guess = np.empty((N, L, d))
    for a in range(d):
        b = np.zeros(L)                        # b = sum_{j=1}^{N-1} gamma^(j-1) er_j
        for j in range(1, N):
            b += gamma ** (j - 1) * er[j - 1, :, a]
        PN = sys.model.powers.power(a, N)
        dense = PN.toarray() if sp.issparse(PN) else PN
        A = np.eye(L) - gamma ** N * dense
        rhs = gamma * (dense @ b) + r_weight * er[N - 1, :, a] - sys.model.c_obs
        try:
            vN = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError as e:
            raise ConvergenceError(f"singular terminal coupling for action {a}") from e
        guess[N - 1, :, a] = vN
        for n in range(N - 1, 0, -1):
            guess[n - 1, :, a] = gamma * guess[n, :, a] + er[n - 1, :, a]
    flat = guess.reshape(-1)
    if sys.pinned_index.size:
        flat[sys.pinned_index] = sys.pinned_value
    return guess


def solve_qvi(sys: QviSystem, config: PenaltyConfig = None):
    """Sweep the geometric rho schedule; report counts and increments."""
    if config is None:
        config = PenaltyConfig()
    t0 = time.perf_counter()
    guess = assemble_initial_guess(sys)
    report = SolveReport()
    u = guess
    prev = None
    for k in range(config.doublings + 1):
        rho = config.rho * 2 ** k
        u0 = u if config.warm_start else guess
        u, rep = newton_solve(sys, u0, config, rho)
        report.rhos.append(rho)
        report.newton_iterations.append(rep.newton_iterations[0])
        if prev is not None:
            report.increments.append(float(np.max(np.abs(u - prev))))
        prev = u
    report.final_residual = float(np.max(np.abs(sys.qvi_residual(u).values)))
    report.wall_time = time.perf_counter() - t0
    return u, report


# =====================================================================
# Fixed-point oracles
# =====================================================================

def value_iteration_oracle(sys: QviSystem, tol=1e-9, max_sweeps=200_000):
    """Gamma-contraction fixed point of u = max(continuation, Mu).

    Entirely independent of the Newton path: no penalisation, no
    linearization, just repeated application of the dynamic-programming
    update with the forced terminal inspection.
    """
    if tol <= 0:
        raise ConfigError(f"tolerance must be positive, got {tol}")
    N = sys.N
    er = sys.expected_reward
    u = np.zeros((N, sys.L, sys.d))
    pin = sys.pinned_index
    for _ in range(max_sweeps):
        Mu = sys.obstacle(u)
        new = np.empty_like(u)
        new[:-1] = np.maximum(sys.gamma * u[1:] + er[:-1], Mu[:-1])
        new[-1] = Mu[-1]
        if pin.size:
            new.reshape(-1)[pin] = sys.pinned_value
        inc = np.max(np.abs(new - u))
        u = new
        if inc <= tol:
            return u
    raise ConvergenceError(f"value iteration stalled above tol={tol:g}",
                           residual=float(inc))


# =====================================================================
# Finite horizon
# =====================================================================

@dataclass(eq=False)
class FiniteHorizonSolution:
    """Backward-recursion output over the (n, k) triangle.

    values[n] has shape (n, L, d) holding v(n, k, x, a) for k < n;
    inspect[n] marks the observe decision at times 1..K-1; post_action[n]
    has shape (d, L): the action adopted when inspecting at time n
    reveals x', given the action previously running (rows collapse to one
    another when there are no switching costs).
    """

    values: list
    inspect: dict
    post_action: dict
    K: int
    reward: np.ndarray

    def value(self, n, k):
        return self.values[n][k]

    def root_action(self, x0):
        """Best initial action at an observed starting state."""
        return int(np.argmax(self.reward[x0] + self.values[1][0][x0]))

    def root_value(self, x0):
        """Total expected reward from time 0, including r(x0, a0)."""
        return float(np.max(self.reward[x0] + self.values[1][0][x0]))


def solve_finite_horizon(fhs: FiniteHorizonSystem) -> FiniteHorizonSolution:
    """Exact (penalty-free) backward recursion of the finite system."""
    model = fhs.model
    K = fhs.K
    L, d = model.num_states, model.num_actions
    r = model.reward
    g = model.switching_cost

    er = {m: np.stack([model.powers.power(a, m) @ r[:, a] for a in range(d)],
                      axis=1) for m in range(1, K + 1)}

    values = [None] * (K + 1)
    values[K] = np.stack([er[K - k] for k in range(K)]) if K >= 1 else None
    inspect = {}
    post_action = {}

    for n in range(K - 1, 0, -1):
        fresh = values[n + 1][n]                        # v(n+1, n, x', a')
        cand = (fresh + r)[None, :, :] - g[:, None, :]  # (a, x', a')
        s = cand.max(axis=2)
        post_action[n] = cand.argmax(axis=2)
        layer = np.empty((n, L, d))
        flags = np.empty((n, L, d), dtype=bool)
        for k in range(n):
            m = n - k
            cont = values[n + 1][k] + er[m]
            o = np.stack([model.powers.power(a, m) @ s[a] for a in range(d)],
                         axis=1) - model.c_obs
            layer[k] = np.maximum(cont, o)
            flags[k] = o > cont
        values[n] = layer
        inspect[n] = flags

    return FiniteHorizonSolution(values=values, inspect=inspect,
                                 post_action=post_action, K=K, reward=r)
