"""Online play with adaptive conjectures: Bayesian learning interleaved with rollout.

Per step the defender updates its posteriors over models and over the
attacker's lookahead, samples a conjecture, updates its belief under it,
predicts the attacker's rollout strategy and best-responds with its own
rollout. The attacker, who sees the state, updates its model posterior and
plays rollout against the defender's current strategy.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .conjecture import (
    ConjectureSpace,
    DiscrepancyTracker,
    EpisodeTrace,
    OccupancyMeasure,
    TraceRow,
    attacker_feedback_likelihood,
    defender_feedback_likelihood,
)
from .game import Action, GameModel, belief_update, observation_likelihood, sample_step
from .rollout import ATTACKER, DEFENDER, CostToGo, RolloutConfig, rollout_decision
from .strategy import (
    AttackerDecisions,
    AttackerStrategy,
    DefenderDecisions,
    DefenderStrategy,
    StrategyProfile,
    sample_states,
)


@dataclass
class OnlineSetup:
    true_model: GameModel
    defender_models: ConjectureSpace  # model-parameter overrides applied to ``defender_template``
    lookaheads: ConjectureSpace  # conjectured attacker lookaheads
    base_defender: DefenderStrategy
    base_attacker: AttackerStrategy
    attacker_lookahead: int = 1
    defender_lookahead: int = 1
    attacker_models: ConjectureSpace = field(default_factory=lambda: ConjectureSpace(({},)))
    defender_template: GameModel | None = None
    attacker_template: GameModel | None = None
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    steps: int = 50
    sampling: str = "sample"  # or "map": use the posterior mode instead of a draw
    fallback: str = "error"
    true_theta: Callable[[int], Mapping] | None = None  # time-varying overrides of the true model
    forgetting_factor: float = 1.0  # extension: posteriors are tempered as p**f before each update; 1 = plain Bayes

    def __post_init__(self):
        if self.sampling not in ("sample", "map"):
            raise ValueError(f"unknown sampling mode {self.sampling!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 < self.forgetting_factor <= 1.0:
            raise ValueError("forgetting_factor must lie in (0, 1]")
        if self.rollout.mode != "exact":
            raise ValueError("online play uses the exact rollout so conjectures are reproducible")


@dataclass
class OnlineResult:
    trace: EpisodeTrace
    rho_d: np.ndarray  # (T, |Theta_D|)
    mu: np.ndarray  # (T, |L|)
    k_rho_d: np.ndarray  # (T, |Theta_D|) running discrepancy per model conjecture
    k_mu: np.ndarray  # (T, |L|)
    occupancy: OccupancyMeasure
    defender_strategy: DefenderDecisions
    defender_models: list[GameModel]
    kl_rho_d: np.ndarray  # (T - 1, |Theta_D|) per-step divergences behind ``k_rho_d``
    kl_mu: np.ndarray  # (T - 1, |L|)
    conjectured_attacker: list[np.ndarray]  # per step, the defender's predicted attack vector at b_t
    attacker_vectors: list[np.ndarray]  # per step, the attacker's decision at b_t for every state
    true_beliefs: np.ndarray  # (T, N + 1) Bayes-correct belief of an observer who knows the true model and attacker


class _Models:
    """Caches conjectured models so identical conjectures share one object (and hence cost-to-go caches)."""

    def __init__(self):
        self._cache: dict[tuple, GameModel] = {}

    def get(self, template: GameModel, theta: Mapping) -> GameModel:
        key = (id(template), tuple(sorted(theta.items())))
        if key not in self._cache:
            self._cache[key] = template.with_theta(theta)
        return self._cache[key]


class _Step:
    """Cost-to-go estimators for one step, shared between roles for common random numbers."""

    def __init__(self, cfg: RolloutConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self._ctg: dict[tuple, CostToGo] = {}

    def cost_to_go(self, model: GameModel, player: str, profile: StrategyProfile) -> CostToGo:
        key = (id(model), player, id(profile.defender), id(profile.attacker))
        if key not in self._ctg:
            self._ctg[key] = CostToGo.from_config(model, profile, player, self.cfg, self.seed)
        return self._ctg[key]

    def attacker_vector(self, model, b, lookahead, defender: DefenderStrategy, base: AttackerStrategy) -> np.ndarray:
        cfg = dataclasses.replace(self.cfg, lookahead=lookahead)
        j_bar = self.cost_to_go(model, ATTACKER, StrategyProfile(defender, base))
        return np.array([
            float(rollout_decision(ATTACKER, model, b, s, defender, base, j_bar, cfg).action == Action.STOP)
            for s in range(model.n_states)
        ])

    def defender_action(self, model, b, lookahead, opponent: AttackerStrategy, base: DefenderStrategy) -> Action:
        cfg = dataclasses.replace(self.cfg, lookahead=lookahead)
        j_bar = self.cost_to_go(model, DEFENDER, StrategyProfile(base, opponent))
        return rollout_decision(DEFENDER, model, b, None, opponent, base, j_bar, cfg).action


class StepError(RuntimeError):
    """A failure inside the online loop, tagged with the step it occurred at."""

    def __init__(self, t: int, cause: Exception):
        super().__init__(f"step {t}: {type(cause).__name__}: {cause}")
        self.t = t
        self.cause = cause


def _temper(posterior, f: float) -> None:
    if f < 1.0:
        p = posterior.probs ** f
        posterior.probs = p / p.sum()


def _choose(posterior, rng, sampling) -> int:
    return posterior.sample(rng) if sampling == "sample" else posterior.mode()


def run_online(setup: OnlineSetup, seed: int) -> OnlineResult:
    """Play one episode of ``setup.steps`` steps and record the learning trace."""
    ss = np.random.SeedSequence(seed)
    env_ss, conj_ss, ctg_ss = ss.spawn(3)
    rng_env = np.random.default_rng(env_ss)
    rng_conj = np.random.default_rng(conj_ss)
    ctg_seeds = ctg_ss.generate_state(setup.steps + 1, dtype=np.uint32)

    models = _Models()
    d_template = setup.defender_template or setup.true_model
    a_template = setup.attacker_template or setup.true_model
    d_models = [models.get(d_template, th) for th in setup.defender_models.values]
    a_models = [models.get(a_template, th) for th in setup.attacker_models.values]

    def true_model_at(t: int) -> GameModel:
        return setup.true_model if setup.true_theta is None else setup.true_model.with_theta(setup.true_theta(t))

    rho_d = setup.defender_models.posterior()
    rho_a = setup.attacker_models.posterior()
    mu = setup.lookaheads.posterior()
    lookaheads = setup.lookaheads.values
    base_d, base_a = setup.base_defender, setup.base_attacker

    trace = EpisodeTrace(setup.true_model.n_states, len(lookaheads), len(d_models), len(a_models))
    occupancy = OccupancyMeasure()
    k_d = DiscrepancyTracker(len(d_models))
    k_mu = DiscrepancyTracker(len(lookaheads))
    hist_rho, hist_mu, hist_kd, hist_kmu = [], [], [], []
    conj_hist, attack_hist = [], []

    # t = 1: base strategies, no observation yet
    model_t = true_model_at(1)
    b = d_template.initial_belief.copy()
    s = int(sample_states(model_t.initial_belief[None, :], rng_env.random(1))[0])
    theta_d = _choose(rho_d, rng_conj, setup.sampling)
    a_d = Action(int(rng_env.random() < base_d.stop_prob(b)))
    true_vec = base_a.stop_probs(b[None, :])[0]
    a_a = Action(int(rng_env.random() < true_vec[s]))
    conj_vec = true_vec
    mu_vecs = [conj_vec] * len(lookaheads)
    pi_d = DefenderDecisions(base_d)

    def record(t, o, cost):
        conj_hist.append(conj_vec.copy())
        attack_hist.append(true_vec.copy())
        hist_rho.append(rho_d.probs.copy())
        hist_mu.append(mu.probs.copy())
        hist_kd.append(k_d.values.copy())
        hist_kmu.append(k_mu.values.copy())
        k_mu_exp = float(mu.probs @ k_mu.values) if k_mu.steps else float("nan")
        k_d_exp = float(rho_d.probs @ k_d.values) if k_d.steps else float("nan")
        trace.append(TraceRow(t, s, int(a_d), int(a_a), o, b.copy(), mu.probs.copy(), rho_d.probs.copy(),
                              rho_a.probs.copy(), cost, k_mu_exp, k_d_exp))

    b_true = setup.true_model.initial_belief.copy()
    true_beliefs = [b_true]
    occupancy.add(s, b, a_d, a_a)
    record(1, -1, float(model_t.cost_table[s, a_d]))

    for t in range(2, setup.steps + 1):
        try:
            prev_model = model_t
            s_prev, b_prev, a_d_prev, a_a_prev = s, b, a_d, a_a
            s, o = sample_step(prev_model, s_prev, a_d_prev, a_a_prev, rng_env)
            model_t = true_model_at(t)

            # discrepancy of every conjecture at the belief just left, against the true model and attacker
            true_pred = observation_likelihood(prev_model, b_prev, a_d_prev, true_vec)
            k_d.add(true_pred, [observation_likelihood(m, b_prev, a_d_prev, conj_vec) for m in d_models])
            k_mu.add(true_pred, [observation_likelihood(d_models[theta_d], b_prev, a_d_prev, v) for v in mu_vecs])

            # defender learning
            _temper(rho_d, setup.forgetting_factor)
            _temper(mu, setup.forgetting_factor)
            rho_d.update(defender_feedback_likelihood(d_models, b_prev, a_d_prev, conj_vec, o), setup.fallback)
            mu.update([observation_likelihood(d_models[theta_d], b_prev, a_d_prev, v)[o] for v in mu_vecs],
                      setup.fallback)
            theta_d = _choose(rho_d, rng_conj, setup.sampling)
            ell = lookaheads[_choose(mu, rng_conj, setup.sampling)]
            m_d = d_models[theta_d]
            b = belief_update(m_d, b_prev, a_d_prev, o, conj_vec)
            b_true = belief_update(prev_model, b_true, a_d_prev, o, true_vec)
            true_beliefs.append(b_true)

            step = _Step(setup.rollout, int(ctg_seeds[t]))
            conj_vec = step.attacker_vector(m_d, b, ell, pi_d, base_a)
            conjectured = AttackerDecisions(base_a).with_decision(b, conj_vec)
            a_d = step.defender_action(m_d, b, setup.defender_lookahead, conjectured, base_d)
            pi_d = pi_d.with_decision(b, float(a_d))

            # attacker learning and play
            _temper(rho_a, setup.forgetting_factor)
            rho_a.update(attacker_feedback_likelihood(a_models, s_prev, a_d_prev, a_a_prev, s, o), setup.fallback)
            m_a = a_models[_choose(rho_a, rng_conj, setup.sampling)]
            # the attacker decides for every state so the diagnostics can use its full strategy at b
            true_vec = step.attacker_vector(m_a, b, setup.attacker_lookahead, pi_d, base_a)
            a_a = Action(int(true_vec[s]))

            # conjectures for each lookahead against the defender's updated strategy, scored at t + 1
            if t < setup.steps:
                mu_vecs = [step.attacker_vector(m_d, b, lk, pi_d, base_a) for lk in lookaheads]

            occupancy.add(s, b, a_d, a_a)
            record(t, o, float(model_t.cost_table[s, a_d]))
        except Exception as exc:
            raise StepError(t, exc) from exc

    n_d, n_l = len(d_models), len(lookaheads)
    return OnlineResult(
        trace, np.array(hist_rho), np.array(hist_mu), np.array(hist_kd), np.array(hist_kmu), occupancy, pi_d,
        d_models, np.array(k_d.per_step).reshape(-1, n_d), np.array(k_mu.per_step).reshape(-1, n_l),
        conj_hist, attack_hist, np.array(true_beliefs),
    )
