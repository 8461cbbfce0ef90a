import numpy as np
import pytest

from stopgame.game import GameModel, ObservationModel, point_belief
from stopgame.strategy import (
    UNIFORMS_PER_STEP,
    AttackerDecisions,
    ConstantAttacker,
    ConstantDefender,
    DefenderDecisions,
    LookupDefender,
    OutOfRange,
    StrategyProfile,
    ThresholdAttacker,
    ThresholdDefender,
    evaluate_cost,
    simulate,
    truncation_bound,
)

from .oracles import markov_cost


def test_threshold_defender():
    d = ThresholdDefender(0.6)
    np.testing.assert_array_equal(d.stop_probs(np.array([[0.5, 0.5], [0.4, 0.6], [0.1, 0.9]])), [0, 1, 1])
    assert d.stop_prob(np.array([0.2, 0.3, 0.5])) == 1.0  # P[S >= 1] = 0.8
    with pytest.raises(OutOfRange):
        ThresholdDefender(1.5)


def test_threshold_attacker_only_attacks_healthy_state():
    a = ThresholdAttacker(0.5)
    np.testing.assert_array_equal(a.stop_probs(np.array([[0.9, 0.1], [0.2, 0.8]])), [[1, 0], [0, 0]])
    assert a.stop_prob(np.array([0.9, 0.1]), 1) == 0.0


def test_constant_and_lookup():
    np.testing.assert_array_equal(ConstantAttacker(0.3).stop_probs(np.array([[1.0, 0.0]])), [[0.3, 0.3]])
    assert ConstantDefender(0.2).stop_prob(np.array([0.5, 0.5])) == 0.2
    lk = LookupDefender((0.0, 0.5, 1.0), (0.0, 0.5, 1.0))
    np.testing.assert_array_equal(lk.stop_probs(np.array([[0.9, 0.1], [0.45, 0.55], [0.0, 1.0]])), [0, 0.5, 1])


def test_decision_overrides():
    d = DefenderDecisions(ThresholdDefender(0.9))
    b = np.array([0.3, 0.7])
    d2 = d.with_decision(b, 1.0)
    assert len(d) == 0 and len(d2) == 1
    np.testing.assert_array_equal(d2.stop_probs(np.array([b, [0.31, 0.69], b + [1e-12, -1e-12]])), [1, 0, 1])
    a = AttackerDecisions(ConstantAttacker(0.0)).with_decision(b, [1.0, 0.0])
    np.testing.assert_array_equal(a.stop_probs(np.array([b, [0.5, 0.5]])), [[1, 0], [0, 0]])


def test_many_overrides_vectorized_lookup():
    rng = np.random.default_rng(3)
    d = DefenderDecisions(ConstantDefender(0.0))
    pts = rng.dirichlet([1, 1, 1], size=200)
    for i, b in enumerate(pts):
        d = d.with_decision(b, float(i % 2))
    got = d.stop_probs(np.vstack([pts, rng.dirichlet([1, 1, 1], size=50)]))
    np.testing.assert_array_equal(got[:200], np.arange(200) % 2)
    np.testing.assert_array_equal(got[200:], 0.0)


@pytest.mark.parametrize("stop_prob,attack_prob", [(0.0, 1.0), (0.3, 0.5), (0.1, 0.0)])
def test_evaluate_cost_matches_markov_chain(stop_prob, attack_prob):
    z = ObservationModel(np.array([[0.6, 0.4], [0.3, 0.7], [0.2, 0.8]]))
    m = GameModel(2, 0.4, 0.8, z)
    exact = markov_cost(m, stop_prob, attack_prob)
    profile = StrategyProfile(ConstantDefender(stop_prob), ConstantAttacker(attack_prob))
    for s in range(3):
        est = evaluate_cost(m, profile, point_belief(s, 2), 60, 4000, np.random.default_rng(s))
        assert abs(est.mean - exact[s]) <= 4 * est.stderr + est.tail_bound
        assert est.attacker_mean == -est.mean


def test_simulate_respects_fixed_actions(small_model):
    profile = StrategyProfile(ConstantDefender(0.0), ConstantAttacker(0.0))
    u = np.random.default_rng(0).random((5, 3, UNIFORMS_PER_STEP))
    start = np.ones(5, dtype=int)
    beliefs = np.tile([0.0, 1.0], (5, 1))
    traj = simulate(small_model, profile, start, beliefs, u, fixed_defender=np.ones((5, 1)))
    # stop at s=1 costs -1, then healthy and idle forever
    np.testing.assert_allclose(traj.costs, -1.0)
    np.testing.assert_array_equal(traj.states, 0)


def test_truncation_bound(small_model):
    assert truncation_bound(small_model, 10) == pytest.approx(0.9**10 * 1.0 / 0.1)


def test_evaluate_cost_is_seeded(small_model):
    profile = StrategyProfile(ThresholdDefender(0.5), ConstantAttacker(0.2))
    b = np.array([1.0, 0.0])
    a = evaluate_cost(small_model, profile, b, 20, 50, np.random.default_rng(7))
    c = evaluate_cost(small_model, profile, b, 20, 50, np.random.default_rng(7))
    assert a.mean == c.mean
    with pytest.raises(ValueError):
        evaluate_cost(small_model, profile, b, 0, 50, np.random.default_rng(7))
