import csv

import numpy as np
import pytest

from stopgame.equilibrium import grid_value_iteration
from stopgame.game import GameModel, ObservationModel
from stopgame.optimizer import (
    CemConfig,
    best_response_dynamics,
    cem_best_response,
    truncated_normal,
    write_dynamics_csv,
)
from stopgame.strategy import ConstantAttacker, StrategyProfile, ThresholdAttacker, ThresholdDefender

CFG = CemConfig(population=30, iterations=8, eval_samples=300, eval_horizon=60, seed=1)


def model():
    z = ObservationModel(np.array([[0.7, 0.2, 0.1], [0.1, 0.2, 0.7]]))
    return GameModel(1, 0.3, 0.9, z)


def test_truncated_normal_bounds():
    rng = np.random.default_rng(0)
    x = truncated_normal(rng, 0.9, 0.5, 2000)
    assert x.min() >= 0.0 and x.max() <= 1.0
    np.testing.assert_array_equal(truncated_normal(rng, 1.4, 0.0, 3), 1.0)


def test_cem_config_validation():
    with pytest.raises(ValueError):
        CemConfig(elite_frac=1.0)
    with pytest.raises(ValueError):
        CemConfig(population=0)
    assert CemConfig(population=100, elite_frac=0.15).n_elite == 15


def test_cem_reaches_value_iteration_optimum():
    m = model()
    opp = ConstantAttacker(0.5)
    res = cem_best_response(m, opp, "D", CFG)
    optimum = grid_value_iteration(m, opp)(0.0)
    assert len(res.curve) == CFG.iterations
    assert all(p.ci_low <= p.mean <= p.ci_high for p in res.curve)
    # best cost is an in-sample minimum; allow for MC noise and grid interpolation
    assert res.best_cost == pytest.approx(optimum, abs=0.15)
    again = cem_best_response(m, opp, "D", CFG)
    assert again.best_param == res.best_param and again.best_cost == res.best_cost


def test_attacker_best_response_and_dynamics(tmp_path):
    m = model()
    res = cem_best_response(m, ThresholdDefender(0.7), "A", CFG)
    assert 0.0 <= res.best_param <= 1.0
    hist = best_response_dynamics(m, StrategyProfile(ThresholdDefender(0.5), ThresholdAttacker(0.5)), 2,
                                  CemConfig(population=10, iterations=3, eval_samples=50, eval_horizon=30))
    assert [h.player for h in hist] == ["D", "A", "D", "A"]
    path = tmp_path / "dyn.csv"
    write_dynamics_csv(hist, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["round", "player", "alpha", "beta", "cost"] and len(rows) == 5
    res.write_csv(tmp_path / "curve.csv")
    assert (tmp_path / "curve.csv").read_text().startswith("iteration,mean")
    with pytest.raises(ValueError):
        cem_best_response(m, ThresholdDefender(0.7), "X", CFG)
