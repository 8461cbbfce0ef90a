import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stopgame.game import (
    Action,
    GameModel,
    ObservationModel,
    ZeroLikelihood,
    belief_key,
    belief_update,
    cost,
    is_tp2,
    make_belief,
    observation_likelihood,
    point_belief,
    sample_step,
    transition_dist,
    transition_matrix,
)

from .conftest import random_belief, random_model
from .oracles import brute_force_posterior


def test_cost_table_values():
    m = GameModel(2, 0.5, 0.9, ObservationModel(np.full((3, 2), 0.5)))
    assert cost(m, 0, Action.CONTINUE) == 0.0
    assert cost(m, 2, Action.CONTINUE) == pytest.approx(2**1.25)
    assert cost(m, 0, Action.STOP) == 1.0
    assert cost(m, 1, Action.STOP) == -1.0
    assert cost(m, 2, Action.STOP) == -1.0


def test_transitions():
    m = GameModel(2, 0.3, 0.9, ObservationModel(np.full((3, 2), 0.5)))
    np.testing.assert_allclose(transition_dist(m, 1, Action.STOP, Action.STOP), [1, 0, 0])
    np.testing.assert_allclose(transition_dist(m, 1, Action.CONTINUE, Action.CONTINUE), [0, 1, 0])
    np.testing.assert_allclose(transition_dist(m, 1, Action.CONTINUE, Action.STOP), [0, 0.7, 0.3])
    np.testing.assert_allclose(transition_dist(m, 2, Action.CONTINUE, Action.STOP), [0, 0, 1])
    for a_d in Action:
        for a_a in Action:
            np.testing.assert_allclose(transition_matrix(m, a_d, a_a).sum(axis=1), 1.0)
    with pytest.raises(ValueError):
        transition_dist(m, 3, Action.CONTINUE, Action.CONTINUE)


def test_model_validation():
    z = ObservationModel(np.full((2, 2), 0.5))
    with pytest.raises(ValueError):
        GameModel(1, 1.5, 0.9, z)
    with pytest.raises(ValueError):
        GameModel(1, 0.5, 1.0, z)
    with pytest.raises(ValueError):
        GameModel(2, 0.5, 0.9, z)
    with pytest.raises(ValueError):
        ObservationModel(np.array([[0.5, 0.6], [0.5, 0.5]]))
    with pytest.raises(ValueError):
        make_belief([0.5, 0.6])


def test_observation_model_file_roundtrip(tmp_path):
    z = ObservationModel(np.array([[0.7, 0.2, 0.1], [0.1, 0.3, 0.6]]))
    path = tmp_path / "z.txt"
    z.save(path)
    np.testing.assert_array_equal(ObservationModel.load(path).matrix, z.matrix)
    path.write_text("# comment\n0.5 0.5\n\n0.25 0.75\n")
    np.testing.assert_allclose(ObservationModel.load(path).matrix, [[0.5, 0.5], [0.25, 0.75]])


def test_from_counts():
    z = ObservationModel.from_counts([[3, 1], [0, 2]])
    np.testing.assert_allclose(z.matrix, [[0.75, 0.25], [0.0, 1.0]])


def test_beta_binomial_mean_increases_with_clients():
    z = ObservationModel.beta_binomial(10, [1.0, 3.0], [3.0, 1.0], slope=0.1)
    support = np.arange(11)
    m0 = z.matrix @ support
    m1 = z.with_theta(20.0).matrix @ support
    assert np.all(m1 > m0)
    unchanged = ObservationModel.beta_binomial(10, [1.0, 3.0], [3.0, 1.0], slope=0.0)
    np.testing.assert_allclose(unchanged.with_theta(50.0).matrix, unchanged.matrix)


def test_with_theta_rejects_unknown_key(small_model):
    assert small_model.with_theta({"p_attack": 0.2}).p_attack == 0.2
    with pytest.raises(KeyError):
        small_model.with_theta({"bogus": 1})


def test_tp2():
    assert is_tp2(np.array([[0.7, 0.2, 0.1], [0.1, 0.2, 0.7]]))
    assert not is_tp2(np.array([[0.1, 0.2, 0.7], [0.7, 0.2, 0.1]]))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 3), n_obs=st.integers(1, 4))
def test_belief_update_matches_enumeration(seed, n, n_obs):
    rng = np.random.default_rng(seed)
    m = random_model(rng, n, n_obs)
    b = random_belief(rng, m.n_states)
    vec = rng.uniform(size=m.n_states)
    a_d = Action(int(rng.integers(2)))
    lik = observation_likelihood(m, b, a_d, vec)
    assert lik.sum() == pytest.approx(1.0, abs=1e-12)
    for o in range(m.n_obs):
        ref = brute_force_posterior(m.z, m.p_attack, n, b, a_d, vec, o)
        if ref is None:
            continue
        np.testing.assert_allclose(belief_update(m, b, a_d, o, vec), ref, atol=1e-12)


def test_stop_resets_belief(small_model):
    b = np.array([0.2, 0.8])
    for o in range(3):
        np.testing.assert_allclose(belief_update(small_model, b, Action.STOP, o, np.ones(2)), [1.0, 0.0])


def test_zero_likelihood_policies():
    z = ObservationModel(np.array([[1.0, 0.0], [0.0, 1.0]]))
    strict = GameModel(1, 0.5, 0.9, z)
    with pytest.raises(ZeroLikelihood):
        belief_update(strict, point_belief(0, 1), Action.CONTINUE, 1, np.zeros(2))
    lenient = strict.replace(zero_likelihood="reset-to-prior")
    np.testing.assert_allclose(belief_update(lenient, point_belief(0, 1), Action.CONTINUE, 1, np.zeros(2)), [1, 0])


def test_sample_step_frequencies(small_model):
    rng = np.random.default_rng(0)
    draws = np.array([sample_step(small_model, 0, Action.CONTINUE, Action.STOP, rng) for _ in range(20000)])
    assert draws[:, 0].mean() == pytest.approx(small_model.p_attack, abs=0.015)
    o_given_1 = np.bincount(draws[draws[:, 0] == 1, 1], minlength=3) / (draws[:, 0] == 1).sum()
    np.testing.assert_allclose(o_given_1, small_model.z[1], atol=0.02)


def test_belief_key_tolerance():
    b = np.array([0.3, 0.7])
    assert belief_key(b) == belief_key(b + np.array([1e-12, -1e-12]))
    assert belief_key(b) != belief_key(np.array([0.31, 0.69]))
