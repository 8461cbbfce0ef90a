"""Rollout: ell-step lookahead over open-loop action sequences with a Monte-Carlo terminal cost-to-go.

The defender marginalizes the hidden state over its belief; the attacker knows
the state and branches on it. Inside the lookahead the defender's belief is
updated with the attacker strategy of the evaluated profile (the conjectured
attacker for a defender rollout, the attacker's own base strategy for an
attacker rollout), matching what the terminal cost-to-go simulations assume.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .game import Action, GameModel, ZeroLikelihood, belief_key, next_states, predict_batch, update_batch
from .strategy import (
    UNIFORMS_PER_STEP,
    AttackerStrategy,
    DefenderStrategy,
    StrategyProfile,
    sample_states,
    simulate,
)

DEFENDER = "D"
ATTACKER = "A"


class BudgetExceeded(RuntimeError):
    """The exact lookahead tree would exceed the configured node limit."""


@dataclass(frozen=True)
class RolloutConfig:
    lookahead: int = 1
    mode: str = "exact"  # "exact" or "mc"
    n_traj: int = 1000
    cost_to_go_samples: int = 100
    cost_to_go_horizon: int = 50
    tie_break: str = "continue-first"
    tie_tol: float = 1e-9
    node_limit: int = 10**6

    def __post_init__(self):
        if self.lookahead < 1:
            raise ValueError("lookahead must be >= 1")
        if self.mode not in ("exact", "mc"):
            raise ValueError(f"unknown rollout mode {self.mode!r}")
        if min(self.n_traj, self.cost_to_go_samples, self.cost_to_go_horizon) < 1:
            raise ValueError("sample counts must be >= 1")
        if self.tie_break not in ("continue-first", "stop-first"):
            raise ValueError(f"unknown tie_break {self.tie_break!r}")


def _sign(player: str) -> float:
    if player not in (DEFENDER, ATTACKER):
        raise ValueError(f"player must be 'D' or 'A', got {player!r}")
    return 1.0 if player == DEFENDER else -1.0


class CostToGo:
    """Monte-Carlo cost-to-go of a fixed profile, as seen by ``player``.

    Each query ``(b, s)`` is simulated with its own generator seeded from
    ``(seed, b, s)``, so values are a deterministic function of the query and
    two estimators built from the same seed share common random numbers.
    ``s=None`` samples the start state from ``b``.
    """

    def __init__(self, model: GameModel, profile: StrategyProfile, player: str, n_samples: int = 100,
                 horizon: int = 50, seed: int = 0):
        self.model = model
        self.profile = profile
        self.player = player
        self.sign = _sign(player)
        self.n_samples = int(n_samples)
        self.horizon = int(horizon)
        self.seed = int(seed)
        self._cache: dict[tuple[bytes, int], float] = {}
        self.n_evaluations = 0

    @classmethod
    def from_config(cls, model, profile, player, cfg: RolloutConfig, seed: int) -> "CostToGo":
        return cls(model, profile, player, cfg.cost_to_go_samples, cfg.cost_to_go_horizon, seed)

    def _uniforms(self, key: bytes, s: int) -> np.ndarray:
        words = np.frombuffer(key, dtype=np.uint32).tolist()
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, s + 1, *words]))
        return rng.random((self.n_samples, self.horizon * UNIFORMS_PER_STEP + 1))

    def prefetch(self, beliefs, states=None) -> None:
        beliefs = np.atleast_2d(np.asarray(beliefs, dtype=float))
        if states is None:
            states = [None] * len(beliefs)
        todo: dict[tuple[bytes, int], tuple[np.ndarray, int]] = {}
        for b, s in zip(beliefs, states):
            k = (belief_key(b), -1 if s is None else int(s))
            if k not in self._cache and k not in todo:
                todo[k] = (b, k[1])
        if not todo:
            return
        keys = list(todo)
        m, n = self.n_samples, len(keys)
        start_b = np.empty((n * m, self.model.n_states))
        start_s = np.empty(n * m, dtype=np.int64)
        unif = np.empty((n * m, self.horizon, UNIFORMS_PER_STEP))
        for i, k in enumerate(keys):
            b, s = todo[k]
            u = self._uniforms(k[0], s)
            sl = slice(i * m, (i + 1) * m)
            start_b[sl] = b
            start_s[sl] = sample_states(np.broadcast_to(b, (m, b.size)), u[:, 0]) if s < 0 else s
            unif[sl] = u[:, 1:].reshape(m, self.horizon, UNIFORMS_PER_STEP)
        costs = simulate(self.model, self.profile, start_s, start_b, unif).costs.reshape(n, m).mean(axis=1)
        self.n_evaluations += n
        for k, c in zip(keys, costs):
            self._cache[k] = self.sign * float(c)

    def __call__(self, b, s: int | None = None) -> float:
        k = (belief_key(b), -1 if s is None else int(s))
        if k not in self._cache:
            self.prefetch(np.asarray(b)[None, :], [s])
        return self._cache[k]


def estimate_cost_to_go(model: GameModel, profile: StrategyProfile, b, cfg: RolloutConfig,
                        rng: np.random.Generator, player: str = DEFENDER, state: int | None = None) -> float:
    """Plain Monte-Carlo estimate of the discounted cost from ``b`` (negated for the attacker)."""
    b = np.asarray(b, dtype=float)
    m = cfg.cost_to_go_samples
    u0 = rng.random(m)
    unif = rng.random((m, cfg.cost_to_go_horizon, UNIFORMS_PER_STEP))
    beliefs = np.broadcast_to(b, (m, b.size))
    states = sample_states(beliefs, u0) if state is None else np.full(m, state)
    return _sign(player) * float(simulate(model, profile, states, beliefs, unif).costs.mean())


@dataclass
class RolloutDecision:
    action: Action
    sequence_values: np.ndarray  # one per open-loop sequence, first action most significant
    sequence_stderr: np.ndarray | None
    nodes: int
    leaves: int

    @property
    def action_values(self) -> np.ndarray:
        """Best lookahead value for each first action (index = Action)."""
        half = self.sequence_values.size // 2
        return np.array([self.sequence_values[:half].min(), self.sequence_values[half:].min()])


def _pick(values: np.ndarray, cfg: RolloutConfig) -> Action:
    ok = np.flatnonzero(values <= values.min() + cfg.tie_tol)
    idx = ok[0] if cfg.tie_break == "continue-first" else ok[-1]
    first = idx >> (int(np.log2(values.size)) - 1)
    return Action(int(first))


class _Tree:
    def __init__(self, model: GameModel, cfg: RolloutConfig):
        self.model = model
        self.cfg = cfg
        self.nodes = 0
        self.leaves: list[tuple[np.ndarray, int | None]] = []

    def count(self, k: int = 1):
        self.nodes += k
        if self.nodes > self.cfg.node_limit:
            raise BudgetExceeded(f"lookahead tree exceeds {self.cfg.node_limit} nodes")

    def posterior(self, pred: np.ndarray, o: int) -> np.ndarray | None:
        numer = pred * self.model.z[:, o]
        norm = numer.sum()
        if norm <= 0.0:
            if self.model.zero_likelihood == "error":
                raise ZeroLikelihood("observation has zero probability inside the lookahead")
            return self.model.initial_belief.copy()
        return numer / norm


def _defender_values(tree: _Tree, b, depth, opponent: AttackerStrategy, leaf: Callable) -> np.ndarray:
    model, L = tree.model, tree.cfg.lookahead
    if depth == L:
        return np.array([leaf(b, None)])
    attack = opponent.stop_probs(b[None, :])
    out = []
    for a in (Action.CONTINUE, Action.STOP):
        immediate = float(b @ model.cost_table[:, a])
        pred = predict_batch(model, b[None, :], np.array([a == Action.STOP]), attack)[0]
        p_obs = pred @ model.z
        cont = 0.0
        for o in np.flatnonzero(p_obs > 0):
            tree.count()
            cont = cont + p_obs[o] * _defender_values(tree, pred * model.z[:, o] / p_obs[o], depth + 1, opponent, leaf)
        out.append(immediate + model.discount * cont)
    return np.concatenate(out)


def _attacker_values(tree: _Tree, s, b, depth, opponent: DefenderStrategy, base_self: AttackerStrategy,
                     leaf: Callable) -> np.ndarray:
    model, L = tree.model, tree.cfg.lookahead
    if depth == L:
        return np.array([leaf(b, s)])
    p_stop = opponent.stop_prob(b)
    belief_attack = base_self.stop_probs(b[None, :])
    out = []
    for a_a in (Action.CONTINUE, Action.STOP):
        total = 0.0
        for a_d, w in ((Action.CONTINUE, 1.0 - p_stop), (Action.STOP, p_stop)):
            if w <= 0.0:
                continue
            immediate = -model.cost_table[s, a_d]
            pred = predict_batch(model, b[None, :], np.array([a_d == Action.STOP]), belief_attack)[0]
            if a_d == Action.STOP:
                nxt = {0: 1.0}
            elif a_a == Action.STOP:
                nxt = {}
                for s2, p in ((s, 1.0 - model.p_attack), (min(s + 1, model.n_servers), model.p_attack)):
                    if p > 0:
                        nxt[s2] = nxt.get(s2, 0.0) + p
            else:
                nxt = {s: 1.0}
            cont = 0.0
            posts = {}
            for s2, p in nxt.items():
                for o in np.flatnonzero(model.z[s2] > 0):
                    if o not in posts:
                        posts[o] = tree.posterior(pred, o)
                    tree.count()
                    sub = _attacker_values(tree, s2, posts[o], depth + 1, opponent, base_self, leaf)
                    cont = cont + p * model.z[s2, o] * sub
            total = total + w * (immediate + model.discount * cont)
        out.append(total)
    return np.concatenate(out)


def _exact(player, model, b, s, opponent, base_self, j_bar: CostToGo, cfg) -> RolloutDecision:
    tree = _Tree(model, cfg)

    def collect(bb, ss):
        tree.leaves.append((bb, ss))
        return 0.0

    if player == DEFENDER:
        _defender_values(tree, b, 0, opponent, collect)
    else:
        _attacker_values(tree, s, b, 0, opponent, base_self, collect)
    nodes, leaves = tree.nodes, len(tree.leaves)
    if hasattr(j_bar, "prefetch") and tree.leaves:
        states = None if player == DEFENDER else [ss for _, ss in tree.leaves]
        j_bar.prefetch(np.array([bb for bb, _ in tree.leaves]), states)
    tree = _Tree(model, cfg)
    if player == DEFENDER:
        values = _defender_values(tree, b, 0, opponent, lambda bb, ss: j_bar(bb))
    else:
        values = _attacker_values(tree, s, b, 0, opponent, base_self, lambda bb, ss: j_bar(bb, ss))
    return RolloutDecision(_pick(values, cfg), values, None, nodes, leaves)


def _monte_carlo(player, model, b, s, opponent, base_self, j_bar: CostToGo, cfg, rng) -> RolloutDecision:
    L, m = cfg.lookahead, cfg.n_traj
    n_seq = 2**L
    seqs = (np.arange(n_seq)[:, None] >> np.arange(L - 1, -1, -1)[None, :]) & 1
    own = np.repeat(seqs, m, axis=0)
    batch = n_seq * m
    beliefs = np.broadcast_to(b, (batch, b.size)).copy()
    u = rng.random((batch, L, UNIFORMS_PER_STEP))
    if player == DEFENDER:
        states = sample_states(beliefs, rng.random(batch))
    else:
        states = np.full(batch, int(s))
    total = np.zeros(batch)
    disc = 1.0
    sign = _sign(player)
    for t in range(L):
        if player == DEFENDER:
            stop_d = own[:, t].astype(bool)
            attack_probs = opponent.stop_probs(beliefs)
            attack = u[:, t, 1] < attack_probs[np.arange(batch), states]
        else:
            stop_d = u[:, t, 0] < opponent.stop_probs(beliefs)
            attack_probs = base_self.stop_probs(beliefs)
            attack = own[:, t].astype(bool)
        total += disc * sign * model.cost_table[states, stop_d.astype(np.int64)]
        disc *= model.discount
        states = next_states(model, states, stop_d, attack, u[:, t, 2])
        obs = model.obs_model.sample(states, u[:, t, 3])
        beliefs = update_batch(model, beliefs, stop_d, obs, attack_probs)
    keys = np.round(beliefs / 1e-9).astype(np.int64)
    if player == ATTACKER:
        keys = np.column_stack([keys, states])
    uniq, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    leaf_states = None if player == DEFENDER else states[first].tolist()
    if hasattr(j_bar, "prefetch"):
        j_bar.prefetch(beliefs[first], leaf_states)
    if player == DEFENDER:
        leaf_vals = np.array([j_bar(beliefs[i]) for i in first])
    else:
        leaf_vals = np.array([j_bar(beliefs[i], int(states[i])) for i in first])
    total += disc * leaf_vals[inverse]
    per_seq = total.reshape(n_seq, m)
    values = per_seq.mean(axis=1)
    stderr = per_seq.std(axis=1, ddof=1) / np.sqrt(m) if m > 1 else np.zeros(n_seq)
    return RolloutDecision(_pick(values, cfg), values, stderr, batch * L, len(first))


def rollout_decision(player: str, model: GameModel, b, s: int | None, opponent, base_self, j_bar,
                     cfg: RolloutConfig, rng: np.random.Generator | None = None) -> RolloutDecision:
    """Evaluate every open-loop own-action sequence of length ``cfg.lookahead`` and pick a minimizer.

    ``j_bar`` is the terminal cost-to-go (a :class:`CostToGo` or any callable
    ``(b, s) -> float`` already signed for ``player``).
    """
    _sign(player)
    b = np.asarray(b, dtype=float)
    if player == ATTACKER and s is None:
        raise ValueError("attacker rollout needs the current state")
    if cfg.mode == "exact":
        return _exact(player, model, b, s, opponent, base_self, j_bar, cfg)
    if rng is None:
        raise ValueError("Monte-Carlo rollout needs an rng")
    return _monte_carlo(player, model, b, s, opponent, base_self, j_bar, cfg, rng)


def rollout_action(player, model, b, s, opponent, base_self, j_bar, cfg, rng=None) -> Action:
    return rollout_decision(player, model, b, s, opponent, base_self, j_bar, cfg, rng).action


class RolloutDefender(DefenderStrategy):
    """Defender that runs rollout at every belief it is queried on (memoized per belief)."""

    def __init__(self, model: GameModel, opponent: AttackerStrategy, base: DefenderStrategy,
                 j_bar: CostToGo, cfg: RolloutConfig):
        if cfg.mode != "exact":
            raise ValueError("policy-level rollout requires the deterministic exact mode")
        self.model, self.opponent, self.base, self.j_bar, self.cfg = model, opponent, base, j_bar, cfg
        self._memo: dict[bytes, float] = {}

    def stop_probs(self, beliefs):
        beliefs = np.atleast_2d(beliefs)
        out = np.empty(beliefs.shape[0])
        for i, b in enumerate(beliefs):
            k = belief_key(b)
            if k not in self._memo:
                d = rollout_decision(DEFENDER, self.model, b, None, self.opponent, self.base, self.j_bar, self.cfg)
                self._memo[k] = float(d.action == Action.STOP)
            out[i] = self._memo[k]
        return out


class RolloutAttacker(AttackerStrategy):
    """Attacker counterpart of :class:`RolloutDefender`; decides for every state at a queried belief."""

    def __init__(self, model: GameModel, opponent: DefenderStrategy, base: AttackerStrategy,
                 j_bar: CostToGo, cfg: RolloutConfig):
        if cfg.mode != "exact":
            raise ValueError("policy-level rollout requires the deterministic exact mode")
        self.model, self.opponent, self.base, self.j_bar, self.cfg = model, opponent, base, j_bar, cfg
        self._memo: dict[bytes, np.ndarray] = {}

    def decide(self, b) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        k = belief_key(b)
        if k not in self._memo:
            self._memo[k] = np.array([
                float(rollout_decision(ATTACKER, self.model, b, s, self.opponent, self.base, self.j_bar,
                                       self.cfg).action == Action.STOP)
                for s in range(self.model.n_states)
            ])
        return self._memo[k]

    def stop_probs(self, beliefs):
        return np.stack([self.decide(b) for b in np.atleast_2d(beliefs)])
