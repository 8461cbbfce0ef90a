import numpy as np
import pytest

from stopgame.game import Action, GameModel, ObservationModel, point_belief
from stopgame.rollout import (
    ATTACKER,
    DEFENDER,
    BudgetExceeded,
    CostToGo,
    RolloutAttacker,
    RolloutConfig,
    RolloutDefender,
    estimate_cost_to_go,
    rollout_action,
    rollout_decision,
)
from stopgame.strategy import AttackerDecisions, ConstantAttacker, ConstantDefender, StrategyProfile, ThresholdAttacker, ThresholdDefender

from .conftest import random_belief, random_model
from .oracles import one_step_defender_q


def quadratic_leaf(b, s=None):
    return float(b @ np.linspace(-1.0, 2.0, b.size) + b[-1] ** 2)


def test_defender_one_step_matches_enumeration(rng):
    for _ in range(20):
        m = random_model(rng, int(rng.integers(1, 4)), int(rng.integers(1, 5)))
        b = random_belief(rng, m.n_states)
        vec = rng.uniform(size=m.n_states)
        opp = AttackerDecisions(ConstantAttacker(0.0)).with_decision(b, vec)
        d = rollout_decision(DEFENDER, m, b, None, opp, ThresholdDefender(0.5), quadratic_leaf, RolloutConfig())
        ref = one_step_defender_q(m, b, vec, quadratic_leaf)
        np.testing.assert_allclose(d.sequence_values, ref, atol=1e-12)
        assert d.action == Action(int(ref[1] < ref[0] - 1e-9))


def test_attacker_one_step_by_hand():
    z = np.array([[0.7, 0.3], [0.2, 0.8]])
    m = GameModel(1, 0.6, 0.9, ObservationModel(z))
    b = np.array([0.8, 0.2])
    leaf = {0: 0.5, 1: 2.0}  # attacker-signed terminal values depending only on the state

    def j_bar(bb, s):
        return leaf[s]

    defender = ConstantDefender(0.25)
    d = rollout_decision(ATTACKER, m, b, 0, defender, ConstantAttacker(0.0), j_bar, RolloutConfig())
    g = m.discount
    # defender stops (prob .25): cost 1 to the defender, state resets
    stop_part = 0.25 * (-1.0 + g * leaf[0])
    wait = stop_part + 0.75 * (0.0 + g * leaf[0])
    attack = stop_part + 0.75 * (0.0 + g * (0.4 * leaf[0] + 0.6 * leaf[1]))
    np.testing.assert_allclose(d.sequence_values, [wait, attack], atol=1e-12)
    assert d.action == Action.CONTINUE  # the signed terminal value is worse after a compromise here


@pytest.mark.parametrize("n_obs", [2, 3])
def test_defender_node_count_formula(n_obs):
    z = np.full((2, n_obs), 1.0 / n_obs)
    m = GameModel(1, 0.5, 0.9, ObservationModel(z))
    for L in (1, 2, 3):
        d = rollout_decision(DEFENDER, m, np.array([0.5, 0.5]), None, ConstantAttacker(0.5), ThresholdDefender(0.5),
                             quadratic_leaf, RolloutConfig(lookahead=L))
        assert d.nodes == sum((2 * n_obs) ** k for k in range(1, L + 1))
        assert d.sequence_values.shape == (2**L,)


def test_tie_break_modes():
    z = np.array([[0.5, 0.5], [0.5, 0.5]])
    m = GameModel(1, 0.5, 0.9, ObservationModel(z), cost_stop_base=0.0)
    b = point_belief(0, 1)
    args = (DEFENDER, m, b, None, ConstantAttacker(0.0), ThresholdDefender(0.5), lambda bb, s=None: 0.0)
    assert rollout_action(*args, RolloutConfig()) == Action.CONTINUE
    assert rollout_action(*args, RolloutConfig(tie_break="stop-first")) == Action.STOP


def test_budget_exceeded(small_model):
    with pytest.raises(BudgetExceeded):
        rollout_decision(DEFENDER, small_model, np.array([0.5, 0.5]), None, ConstantAttacker(0.5),
                         ThresholdDefender(0.5), quadratic_leaf, RolloutConfig(lookahead=3, node_limit=50))


def test_cost_to_go_is_deterministic_and_signed(small_model):
    profile = StrategyProfile(ThresholdDefender(0.6), ConstantAttacker(0.3))
    b = np.array([0.7, 0.3])
    j1 = CostToGo(small_model, profile, DEFENDER, 200, 40, seed=5)
    j2 = CostToGo(small_model, profile, DEFENDER, 200, 40, seed=5)
    ja = CostToGo(small_model, profile, ATTACKER, 200, 40, seed=5)
    assert j1(b) == j2(b) == -ja(b)
    assert j1(b, 1) == j2(b, 1)
    n = j1.n_evaluations
    j1(b)
    assert j1.n_evaluations == n
    rough = estimate_cost_to_go(small_model, profile, b, RolloutConfig(cost_to_go_samples=4000), np.random.default_rng(0))
    assert rough == pytest.approx(j1(b), abs=0.3)


def test_monte_carlo_close_to_exact(small_model):
    profile = StrategyProfile(ThresholdDefender(0.6), ConstantAttacker(0.3))
    j_bar = CostToGo(small_model, profile, DEFENDER, 50, 30, seed=1)
    b = np.array([0.6, 0.4])
    args = (DEFENDER, small_model, b, None, profile.attacker, profile.defender, j_bar)
    ex = rollout_decision(*args, RolloutConfig(lookahead=2))
    mc = rollout_decision(*args, RolloutConfig(lookahead=2, mode="mc", n_traj=5000), np.random.default_rng(2))
    assert np.all(np.abs(mc.sequence_values - ex.sequence_values) <= 4 * mc.sequence_stderr + 1e-12)
    with pytest.raises(ValueError):
        rollout_decision(*args, RolloutConfig(mode="mc"))


def test_rollout_policies_memoize(small_model):
    profile = StrategyProfile(ThresholdDefender(0.6), ConstantAttacker(0.3))
    j_d = CostToGo(small_model, profile, DEFENDER, 30, 20, seed=1)
    pol = RolloutDefender(small_model, profile.attacker, profile.defender, j_d, RolloutConfig())
    beliefs = np.array([[0.9, 0.1], [0.1, 0.9], [0.9, 0.1]])
    first = pol.stop_probs(beliefs)
    assert first[0] == first[2] and len(pol._memo) == 2
    j_a = CostToGo(small_model, profile, ATTACKER, 30, 20, seed=1)
    att = RolloutAttacker(small_model, profile.defender, ThresholdAttacker(0.5), j_a, RolloutConfig())
    assert att.stop_probs(beliefs).shape == (3, 2)
    with pytest.raises(ValueError):
        RolloutDefender(small_model, profile.attacker, profile.defender, j_d, RolloutConfig(mode="mc"))


def test_config_validation():
    with pytest.raises(ValueError):
        RolloutConfig(lookahead=0)
    with pytest.raises(ValueError):
        RolloutConfig(mode="tree")
    with pytest.raises(ValueError):
        rollout_decision(ATTACKER, None, np.array([1.0, 0.0]), None, None, None, None, RolloutConfig())
