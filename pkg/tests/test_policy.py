"""Policy extraction, fixed-policy evaluation, and the two-state closed form."""

import math

import numpy as np
import pytest

from ocm import (
    ConfigError,
    OcmPolicy,
    PenaltyConfig,
    QviSystem,
    build_two_state_toy,
    evaluate_policy,
    extract_policy,
    solve_qvi,
    toy_closed_form,
    value_iteration_oracle,
    waiting_time_table,
)


def _solved_toy(p=0.9, c_obs=0.1, gamma=0.9, horizon=150):
    sys_ = QviSystem(build_two_state_toy(p, c_obs=c_obs, gamma=gamma,
                                         horizon=horizon))
    u, _ = solve_qvi(sys_, PenaltyConfig())
    return sys_, u


class TestToyClosedForm:
    """The interval-search solution of the hold-your-state model."""

    def test_observe_every_step_regime(self):
        # (1 - c)/(1 - gamma) dominates: 0.9/0.1 = 9, and with no cost 10
        t = toy_closed_form(0.9, 0.9, 0.1)
        assert t.v1 == pytest.approx(9.0, rel=1e-12)
        assert t.T_star == 1.0
        t = toy_closed_form(0.9, 0.9, 0.0)
        assert t.v1 == pytest.approx(10.0, rel=1e-12)

    def test_hand_worked_small_case(self):
        """p=0.5, gamma=0.5, c=0.2: every-step pays 1.6; the two-step cycle
        pays (0.5 + 0.5*0.8)/0.75 = 1.2; longer cycles decay further."""
        t = toy_closed_form(0.5, 0.5, 0.2)
        assert t.v1 == pytest.approx(1.6, rel=1e-12)
        assert t.T_star == 1.0

    def test_interior_interval_regime(self):
        t = toy_closed_form(0.9, 0.9, 1.0)
        assert t.T_star == 5.0
        assert t.v1 == pytest.approx(6.58784132255623, rel=1e-12)
        # values obey the backward recursion v(n) = p^n + gamma*v(n+1)
        for n in range(1, 4):
            assert t.values[n - 1] == pytest.approx(
                0.9 ** n + 0.9 * t.values[n], rel=1e-12)

    def test_never_observe_regime(self):
        """When every finite cycle stays visibly below the matched-state
        annuity, the interval is reported as infinite."""
        t = toy_closed_form(0.5, 0.999, 3.0)
        assert math.isinf(t.T_star)
        never = 0.5 / (1.0 - 0.999 * 0.5)
        assert t.v1 == pytest.approx(never, rel=1e-12)
        np.testing.assert_allclose(
            t.values[:5], 0.5 ** np.arange(1, 6) / (1.0 - 0.999 * 0.5),
            rtol=1e-12)

    def test_high_cost_long_interval_matches_annuity(self):
        """At gamma = 0.8 a cost of 2 leaves a finite interval whose value
        ties the never-observe annuity to machine precision."""
        t = toy_closed_form(0.5, 0.8, 2.0)
        assert t.v1 == pytest.approx(0.5 / 0.6, rel=1e-12)

    def test_tail_bound_is_small(self):
        assert toy_closed_form(0.9, 0.99, 0.5).tail_bound < 1e-6

    @pytest.mark.parametrize("bad", [dict(p=0.0), dict(p=1.0),
                                     dict(gamma=0.0), dict(gamma=1.0),
                                     dict(m_max=1)])
    def test_validation(self, bad):
        kw = dict(p=0.5, gamma=0.9, c_obs=0.1)
        kw.update(bad)
        with pytest.raises(ConfigError):
            toy_closed_form(kw["p"], kw["gamma"], kw["c_obs"],
                            m_max=kw.get("m_max", 2000))


class TestExtractPolicy:
    def test_toy_observes_every_step(self):
        """At c=0.1 the closed form says inspect immediately (T* = 1)."""
        sys_, u = _solved_toy()
        pol = extract_policy(sys_, u)
        assert pol.waiting_time[0, 0] == 1.0
        assert pol.waiting_time[1, 1] == 1.0
        assert pol.inspect[-1].all()

    def test_toy_interior_interval(self):
        """At c=1 the closed form waits 5 steps between looks."""
        sys_, u = _solved_toy(c_obs=1.0)
        pol = extract_policy(sys_, u)
        assert pol.waiting_time[0, 0] == toy_closed_form(0.9, 0.9, 1.0).T_star

    def test_post_observation_action_matches_state(self):
        sys_, u = _solved_toy()
        pol = extract_policy(sys_, u)
        # seeing x' while either action runs, adopt the matching action
        np.testing.assert_array_equal(pol.post_obs_action,
                                      [[0, 1], [0, 1]])

    def test_waiting_time_guard(self):
        with pytest.raises(ConfigError, match="waiting times"):
            OcmPolicy(inspect=np.ones((2, 1, 1), bool),
                      post_obs_action=np.zeros((1, 1), int),
                      waiting_time=np.array([[0.5]]))


class TestEvaluatePolicy:
    def test_extracted_policy_earns_the_solved_value(self):
        """Evaluating the extracted policy reproduces the closed form to
        linear-solver precision -- the policy, not the penalised value."""
        sys_, u = _solved_toy()
        pol = extract_policy(sys_, u)
        w = evaluate_policy(sys_, pol)
        assert w[0, 0, 0] == pytest.approx(9.0, abs=1e-10)

    def test_evaluation_matches_oracle_on_toy_interval(self):
        sys_, u = _solved_toy(c_obs=1.0)
        w = evaluate_policy(sys_, extract_policy(sys_, u))
        v = value_iteration_oracle(sys_, tol=1e-11)
        assert w[0, 0, 0] == pytest.approx(v[0, 0, 0], abs=1e-8)

    def test_random_instance_policy_is_optimal(self, make_random_ocm):
        """On small instances the extracted policy evaluates back to the
        exact QVI value (the classification thresholds are safe)."""
        rng = np.random.default_rng(11)
        for _ in range(5):
            sys_ = QviSystem(make_random_ocm(rng))
            u, _ = solve_qvi(sys_, PenaltyConfig())
            w = evaluate_policy(sys_, extract_policy(sys_, u))
            v = value_iteration_oracle(sys_, tol=1e-11)
            assert np.max(np.abs(w - v)) <= 1e-6


class TestWaitingTimeTable:
    def test_table_layout(self):
        sys_, u = _solved_toy(horizon=80)
        pol = extract_policy(sys_, u)
        table = waiting_time_table({"0.1": pol}, states=[0, 1])
        assert list(table) == ["0.1"]
        assert table["0.1"].shape == (2, 2)
        np.testing.assert_array_equal(table["0.1"][0], pol.waiting_time[0])

    def test_waiting_time_monotone_in_cost(self):
        """Looking less often is optimal as observation gets dearer."""
        waits = []
        for c in (0.1, 0.5, 1.0, 2.0):
            sys_, u = _solved_toy(c_obs=c, horizon=120)
            waits.append(extract_policy(sys_, u).waiting_time[0, 0])
        assert all(a <= b for a, b in zip(waits, waits[1:]))
