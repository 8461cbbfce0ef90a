"""Cross-entropy search over threshold strategies and best-response dynamics built on it."""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .game import GameModel
from .rollout import ATTACKER, DEFENDER
from .strategy import StrategyProfile, ThresholdAttacker, ThresholdDefender, evaluate_cost


@dataclass(frozen=True)
class CemConfig:
    population: int = 100
    elite_frac: float = 0.15
    eval_samples: int = 50
    eval_horizon: int = 50
    iterations: int = 20
    init_mean: float = 0.5
    init_std: float = 0.3
    min_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.elite_frac < 1.0:
            raise ValueError("elite_frac must lie in (0, 1)")
        if min(self.population, self.eval_samples, self.eval_horizon, self.iterations) < 1:
            raise ValueError("population, eval_samples, eval_horizon and iterations must be >= 1")
        if self.init_std < 0 or not 0.0 <= self.init_mean <= 1.0:
            raise ValueError("initial mean must lie in [0, 1] and std be non-negative")

    @property
    def n_elite(self) -> int:
        return max(1, math.ceil(self.elite_frac * self.population))


@dataclass
class CurvePoint:
    iteration: int
    mean: float
    ci_low: float
    ci_high: float
    best: float


@dataclass
class CemResult:
    best_param: float
    best_cost: float
    curve: list[CurvePoint] = field(default_factory=list)
    plateau: bool = False  # best-ever cost did not improve during the last half of the run

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "mean", "ci_low", "ci_high", "best"])
            for p in self.curve:
                w.writerow([p.iteration, repr(p.mean), repr(p.ci_low), repr(p.ci_high), repr(p.best)])


def truncated_normal(rng: np.random.Generator, mean: float, std: float, size: int) -> np.ndarray:
    """Gaussian samples truncated to [0, 1]; a zero std returns the mean."""
    if std <= 0.0:
        return np.full(size, float(np.clip(mean, 0.0, 1.0)))
    a, b = (0.0 - mean) / std, (1.0 - mean) / std
    return stats.truncnorm.rvs(a, b, loc=mean, scale=std, size=size, random_state=rng)


def _profile(player: str, param: float, opponent) -> StrategyProfile:
    if player == DEFENDER:
        return StrategyProfile(ThresholdDefender(float(param)), opponent)
    return StrategyProfile(opponent, ThresholdAttacker(float(param)))


def evaluate_threshold(model: GameModel, opponent, player: str, param: float, cfg: CemConfig, seed) -> float:
    """Cost of a threshold for ``player`` (negated defender cost for the attacker)."""
    rng = np.random.default_rng(seed)
    est = evaluate_cost(model, _profile(player, param, opponent), model.initial_belief, cfg.eval_horizon,
                        cfg.eval_samples, rng)
    return est.mean if player == DEFENDER else -est.mean


def cem_best_response(model: GameModel, opponent, player: str, cfg: CemConfig = CemConfig()) -> CemResult:
    """Approximate best response of ``player`` within threshold strategies against a fixed opponent.

    Every candidate of one iteration is evaluated on the same random numbers,
    so the elite ranking compares thresholds rather than noise.
    """
    if player not in (DEFENDER, ATTACKER):
        raise ValueError(f"player must be 'D' or 'A', got {player!r}")
    rng = np.random.default_rng([cfg.seed, 0])
    mean, std = cfg.init_mean, cfg.init_std
    best_param, best_cost = mean, math.inf
    result = CemResult(mean, math.inf)
    for it in range(cfg.iterations):
        params = truncated_normal(rng, mean, std, cfg.population)
        costs = np.array([evaluate_threshold(model, opponent, player, x, cfg, [cfg.seed, 1, it]) for x in params])
        order = np.lexsort((params, costs))
        elite = params[order[: cfg.n_elite]]
        if costs[order[0]] < best_cost:
            best_param, best_cost = float(params[order[0]]), float(costs[order[0]])
        mean = float(elite.mean())
        std = max(float(elite.std()), cfg.min_std) if std > 0 else 0.0
        half = 1.96 * costs.std(ddof=1) / math.sqrt(costs.size) if costs.size > 1 else 0.0
        result.curve.append(CurvePoint(it, float(costs.mean()), float(costs.mean() - half),
                                       float(costs.mean() + half), best_cost))
    result.best_param, result.best_cost = best_param, best_cost
    half = len(result.curve) // 2
    result.plateau = half > 0 and result.curve[-1].best >= result.curve[half - 1].best
    return result


@dataclass
class BestResponseRound:
    round: int
    player: str
    profile: StrategyProfile
    param: float
    cost: float  # defender cost of the profile after this half-round


def best_response_dynamics(model: GameModel, init_profile: StrategyProfile, rounds: int,
                           cfg: CemConfig = CemConfig()) -> list[BestResponseRound]:
    """Alternate defender and attacker threshold best responses for ``rounds`` rounds."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    profile = init_profile
    history = []
    for r in range(rounds):
        for player in (DEFENDER, ATTACKER):
            sub = dataclasses.replace(cfg, seed=cfg.seed + 1000 * r + (0 if player == DEFENDER else 500))
            if player == DEFENDER:
                res = cem_best_response(model, profile.attacker, DEFENDER, sub)
                profile = StrategyProfile(ThresholdDefender(res.best_param), profile.attacker)
            else:
                res = cem_best_response(model, profile.defender, ATTACKER, sub)
                profile = StrategyProfile(profile.defender, ThresholdAttacker(res.best_param))
            cost = evaluate_threshold(model, profile.attacker, DEFENDER, profile.defender.alpha, cfg, [cfg.seed, 2, r])
            history.append(BestResponseRound(r, player, profile, res.best_param, cost))
    return history


def write_dynamics_csv(history: list[BestResponseRound], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "player", "alpha", "beta", "cost"])
        for h in history:
            alpha = getattr(h.profile.defender, "alpha", math.nan)
            beta = getattr(h.profile.attacker, "beta", math.nan)
            w.writerow([h.round, h.player, repr(float(alpha)), repr(float(beta)), repr(h.cost)])
