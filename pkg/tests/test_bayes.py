"""Beta-binomial machinery and the belief-lattice recursion.

The heavyweight check here is a conjugacy-free brute force: beliefs are
carried as quadrature weights over theta (Gauss-Jacobi nodes, exact for
polynomial likelihoods) and the decision tree is walked history by
history, with no lattice, no Beta-binomial pmf, and no shared code with
the solver.  Both routes must price the walk identically.
"""

import math

import numpy as np
import pytest
from scipy.special import roots_jacobi
from scipy.stats import betabinom

from ocm import (
    BetaParams,
    ConfigError,
    FiniteThetaBelief,
    NumericError,
    QviSystem,
    OcmModel,
    ResourceError,
    bayes_update_finite,
    beta_binomial_pmf,
    build_bayes_walk,
    grid_kernel,
    inverse_reward,
    peak_reward,
    posterior_update_beta,
    predictive_nstep,
    solve_bayes_finite,
    solve_grid_value_iteration,
    value_iteration_oracle,
)


def _prior_nodes(alpha, beta, nq):
    """Quadrature nodes/weights integrating the Beta(alpha, beta) density."""
    t, w = roots_jacobi(nq, beta - 1.0, alpha - 1.0)
    return (1.0 + t) / 2.0, w / w.sum()


def _brute_root(prior, c_obs, N, reward, switch=0.0):
    """History-tree optimum of the uncertain-drift walk, by quadrature."""
    nq = N + int(math.ceil(prior.alpha + prior.beta)) + 4
    theta, w0 = _prior_nodes(prior.alpha, prior.beta, nq)
    r = lambda x: float(np.asarray(reward(np.array([x])))[0])

    def value(n, k, x, a, w):
        m = n - k
        p = theta if a == 0 else 1.0 - theta
        tot = w.sum()
        pj = [float((w * math.comb(m, j) * p ** j * (1.0 - p) ** (m - j)).sum()
                    / tot) for j in range(m + 1)]
        er = sum(pj[j] * r(x + 2 * j - m) for j in range(m + 1))
        if n == N:
            return er
        cont = er + value(n + 1, k, x, a, w)
        obs = -c_obs
        for j in range(m + 1):
            xp = x + 2 * j - m
            wp = w * math.comb(m, j) * p ** j * (1.0 - p) ** (m - j)
            obs += pj[j] * max(
                r(xp) - (switch if ap != a else 0.0)
                + value(n + 1, n, xp, ap, wp) for ap in (0, 1))
        return max(cont, obs)

    return r(0) + max(value(1, 0, 0, a, w0) for a in (0, 1))


class TestBetaParams:
    def test_mean(self):
        assert BetaParams(2.0, 5.0).mean == pytest.approx(2.0 / 7.0)

    @pytest.mark.parametrize("a,b", [(0.0, 1.0), (1.0, 0.0), (-2.0, 3.0)])
    def test_positivity(self, a, b):
        with pytest.raises(ConfigError):
            BetaParams(a, b)


class TestBetaBinomialPmf:
    def test_matches_scipy(self):
        k = np.arange(13)
        for a, b in ((2.0, 5.0), (0.5, 0.5), (7.0, 1.0)):
            np.testing.assert_allclose(beta_binomial_pmf(k, 12, a, b),
                                       betabinom.pmf(k, 12, a, b),
                                       rtol=1e-12)

    def test_normalization(self):
        probs = beta_binomial_pmf(np.arange(201), 200, 3.3, 1.7)
        assert math.fsum(probs) == pytest.approx(1.0, abs=1e-13)

    def test_validation(self):
        with pytest.raises(ConfigError):
            beta_binomial_pmf(5, 4, 1.0, 1.0)
        with pytest.raises(ConfigError):
            beta_binomial_pmf(1, 4, 0.0, 1.0)


class TestPosteriorUpdate:
    def test_drift_conventions(self):
        """Up-moves are successes under drift +1, failures under drift -1."""
        prior = BetaParams(2.0, 3.0)
        up = posterior_update_beta(prior, 1, 5, 4)
        assert (up.alpha, up.beta) == (6.0, 4.0)
        down = posterior_update_beta(prior, -1, 5, 4)
        assert (down.alpha, down.beta) == (3.0, 7.0)

    def test_zero_steps_identity(self):
        prior = BetaParams(2.0, 3.0)
        out = posterior_update_beta(prior, 1, 0, 0)
        assert (out.alpha, out.beta) == (2.0, 3.0)

    def test_validation(self):
        with pytest.raises(ConfigError):
            posterior_update_beta(BetaParams(1, 1), 0, 5, 2)
        with pytest.raises(ConfigError):
            posterior_update_beta(BetaParams(1, 1), 1, 5, 6)


class TestPredictive:
    def test_support_and_mean(self):
        """E[x_n] = x + n*(2*mu - 1) under drift +1, reflected under -1."""
        prior = BetaParams(3.0, 2.0)
        states, probs = predictive_nstep(4, 1, 6, prior)
        np.testing.assert_array_equal(states, 4 + 2 * np.arange(7) - 6)
        assert probs.sum() == pytest.approx(1.0, abs=1e-13)
        assert (states * probs).sum() == pytest.approx(
            4 + 6 * (2 * prior.mean - 1), abs=1e-12)
        states, probs = predictive_nstep(4, -1, 6, prior)
        assert (states * probs).sum() == pytest.approx(
            4 - 6 * (2 * prior.mean - 1), abs=1e-12)

    def test_validation(self):
        with pytest.raises(ConfigError):
            predictive_nstep(0, 1, 0, BetaParams(1, 1))
        with pytest.raises(ConfigError):
            predictive_nstep(0, 2, 3, BetaParams(1, 1))


class TestFiniteBelief:
    def test_belief_validation(self):
        with pytest.raises(ConfigError):
            FiniteThetaBelief(weights=np.array([0.5, 0.6]),
                              theta_values=np.array([0.2, 0.8]))
        with pytest.raises(ConfigError):
            FiniteThetaBelief(weights=np.array([1.0]),
                              theta_values=np.array([0.2, 0.8]))

    def test_reweighting_by_hand(self):
        P_lo = np.array([[[0.9, 0.1], [0.9, 0.1]]])
        P_hi = np.array([[[0.1, 0.9], [0.1, 0.9]]])
        belief = FiniteThetaBelief(weights=np.array([0.5, 0.5]),
                                   theta_values=np.array([0.1, 0.9]))
        out = bayes_update_finite(belief, [P_lo, P_hi], 0, 0, 1, 1)
        np.testing.assert_allclose(out.weights, [0.1, 0.9])

    def test_zero_likelihood_raises(self):
        P = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        belief = FiniteThetaBelief(weights=np.array([1.0]),
                                   theta_values=np.array([0.5]))
        with pytest.raises(NumericError, match="zero likelihood"):
            bayes_update_finite(belief, [P], 0, 0, 1, 1)


class TestLatticeRecursion:
    def test_brute_force_certification(self):
        """Lattice DP == quadrature history tree, to machine precision."""
        cases = [((2.0, 5.0), 0.1, 4, peak_reward, 0.0),
                 ((2.0, 5.0), 0.6, 4, peak_reward, 0.0),
                 ((1.0, 1.0), 0.6, 4, inverse_reward, 0.0),
                 ((3.0, 3.0), 0.1, 4, peak_reward, 0.15),
                 ((2.5, 4.5), 0.2, 4, peak_reward, 0.0),
                 ((5.0, 2.0), 0.05, 5, peak_reward, 0.0)]
        for (a, b), c, N, reward, g in cases:
            prior = BetaParams(a, b)
            kind = "peak" if reward is peak_reward else "inverse"
            sol = solve_bayes_finite(build_bayes_walk(
                prior, c, horizon=N, reward_kind=kind, switch_cost=g))
            want = _brute_root(prior, c, N, reward, g)
            assert sol.root_value() == pytest.approx(want, abs=1e-12), \
                (a, b, c, N, kind, g)

    def test_frozen_roots(self):
        sol = solve_bayes_finite(build_bayes_walk(BetaParams(2, 5), 0.3,
                                                  horizon=8))
        assert sol.root_value() == pytest.approx(4.9527222777222786,
                                                 rel=1e-12)
        assert sol.root_action() == 0
        sol = solve_bayes_finite(build_bayes_walk(BetaParams(3, 3), 0.1,
                                                  horizon=50))
        assert sol.root_value() == pytest.approx(13.8866332645719, rel=1e-10)

    def test_mirror_prior_symmetry(self):
        """Swapping Beta(a, b) for Beta(b, a) relabels the drift actions;
        with a symmetric reward the optimal value cannot move."""
        lo = solve_bayes_finite(build_bayes_walk(BetaParams(2, 5), 0.25,
                                                 horizon=12))
        hi = solve_bayes_finite(build_bayes_walk(BetaParams(5, 2), 0.25,
                                                 horizon=12))
        assert lo.root_value() == pytest.approx(hi.root_value(), rel=1e-12)

    def test_root_value_nonincreasing_in_cost(self):
        vals = [solve_bayes_finite(build_bayes_walk(BetaParams(2, 5), c,
                                                    horizon=10)).root_value()
                for c in (0.05, 0.2, 0.5)]
        assert vals[0] >= vals[1] >= vals[2]

    def test_layer_shapes(self):
        sol = solve_bayes_finite(build_bayes_walk(BetaParams(1, 1), 0.2,
                                                  horizon=5))
        for (n, k), arr in sol.values.items():
            assert 0 <= k < n <= 5
            assert arr.shape == (k + 1, 2, k + 1)
        total = sum(arr.size for arr in sol.values.values())
        assert total == 2 * sum((k + 1) ** 2
                                for n in range(1, 6) for k in range(n))

    def test_resource_cap(self):
        model = build_bayes_walk(BetaParams(1, 1), 0.2, horizon=40)
        with pytest.raises(ResourceError) as exc:
            solve_bayes_finite(model, max_entries=1000)
        assert exc.value.exit_code == 4

    def test_model_validation(self):
        with pytest.raises(ConfigError):
            build_bayes_walk(BetaParams(1, 1), -0.1)
        with pytest.raises(ConfigError):
            build_bayes_walk(BetaParams(1, 1), 0.1, reward_kind="exp")
        with pytest.raises(ConfigError):
            build_bayes_walk(BetaParams(1, 1), 0.1, true_theta=1.5)


class TestGridKernel:
    def _chain(self, theta):
        """Three-state drift chain with reflecting ends for parameter theta."""
        L = 3
        P = np.zeros((2, L, L))
        for i in range(L):
            P[0, i, min(i + 1, L - 1)] += theta
            P[0, i, max(i - 1, 0)] += 1 - theta
            P[1, i, max(i - 1, 0)] += theta
            P[1, i, min(i + 1, L - 1)] += 1 - theta
        return P

    def test_node_count_and_projection(self):
        k = grid_kernel([0.2, 0.8], np.stack([self._chain(0.2),
                                              self._chain(0.8)]), G=4)
        assert k.num_nodes == 5                # {0,1/4,...,1} x complement
        for q in range(k.num_nodes):
            assert k.project(k.nodes[q]) == q
        with pytest.raises(ConfigError):
            grid_kernel([0.5], self._chain(0.5)[None], G=1)

    def test_corner_belief_matches_known_theta(self):
        """A corner node never moves, so its value column must equal the
        known-parameter QVI value."""
        theta = 0.8
        trans = np.stack([self._chain(0.2), self._chain(theta)])
        kernel = grid_kernel([0.2, theta], trans, G=3)
        reward = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 0.0]])
        v = solve_grid_value_iteration(kernel, reward, c_obs=0.15, gamma=0.9,
                                       horizon=6, tol=1e-11)
        corner = kernel.project(np.array([0.0, 1.0]))
        model = OcmModel(transition=self._chain(theta), reward=reward,
                         c_obs=0.15, gamma=0.9,
                         switching_cost=np.zeros((2, 2)), horizon=6)
        u = value_iteration_oracle(QviSystem(model), tol=1e-11)
        np.testing.assert_allclose(v[:, :, :, corner], u, atol=1e-8)

    def test_posterior_node_corner_stable(self):
        trans = np.stack([self._chain(0.2), self._chain(0.8)])
        kernel = grid_kernel([0.2, 0.8], trans, G=3)
        corner = kernel.project(np.array([1.0, 0.0]))
        for obs in range(3):
            assert kernel.posterior_node(corner, 0, 2, 1, obs) == corner
