"""Equilibrium diagnostics.

Contains a closed-form two-belief example used as an analytic oracle, a
grid value-iteration solver for the single-server game, and a checker that
scores an online trace against the three Berk-Nash conditions (bounded
rationality, consistency, stationarity).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .conjecture import consistent_set, total_variation
from .game import Action, GameModel, ObservationModel, belief_key, predict_batch
from .rollout import ATTACKER, DEFENDER, CostToGo, rollout_decision
from .strategy import AttackerDecisions, AttackerStrategy, DefenderStrategy, StrategyProfile, ThresholdAttacker


class NonConvergence(RuntimeError):
    pass


class InsufficientData(ValueError):
    pass


# ---------------------------------------------------------------------------
# two-belief example

def chain_value(transition_matrix, cost_vector, gamma: float) -> np.ndarray:
    """Discounted value of a Markov chain with per-state cost: solves ``(I - gamma P) J = c``."""
    P = np.asarray(transition_matrix, dtype=float)
    c = np.asarray(cost_vector, dtype=float)
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    if P.shape != (c.size, c.size) or np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-12):
        raise ValueError("transition matrix must be row-stochastic and match the cost vector")
    return np.linalg.solve(np.eye(c.size) - gamma * P, c)


def example_chain(x: float) -> np.ndarray:
    """Belief chain of the two-belief example when the conjecture reads an alert with probability ``x``.

    Belief 0 moves to belief 1 with probability ``x``; belief 1 always resets to 0.
    """
    return np.array([[1.0 - x, x], [1.0, 0.0]])


EXAMPLE_COSTS = np.array([0.0, -1.0])  # continue at belief 0, stop at belief 1


def example_value(gamma: float, x: float) -> np.ndarray:
    """Closed-form value of :func:`example_chain` with costs ``(0, -1)``."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    denom = (gamma - 1.0) * (1.0 + gamma * x)
    assert denom != 0.0
    return np.array([gamma * x, 1.0 + gamma * (x - 1.0)]) / denom


@dataclass(frozen=True)
class ExampleVerdict:
    jbar_a: np.ndarray
    jbar_b: np.ndarray
    theta_star: frozenset
    nu0: float | None
    policy: tuple[Action, Action]  # rollout decision at beliefs 0 and 1 under conjecture a
    consistent: bool  # is rho in the simplex over theta_star
    exists: bool
    reason: str


def example1_oracle(gamma: float, p: float, q: float, rho_a: float) -> ExampleVerdict:
    """Analytic oracle for the two-belief, two-conjecture example.

    True alert laws are ``Ber(p)`` in the healthy state and ``Ber(q)`` in the
    compromised one; conjecture ``a`` reads observations literally and ``b``
    reads them inverted. ``rho_a`` is the posterior weight on ``a``.
    """
    for name, v in (("p", p), ("q", q), ("rho_a", rho_a)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1]")
    jbar_a = example_value(gamma, q)
    jbar_b = example_value(gamma, p)

    if p == 0.0 and q == 1.0:
        theta_star = frozenset({"a"})
    elif p == 1.0 and q == 0.0:
        theta_star = frozenset({"b"})
    else:
        theta_star = frozenset({"a", "b"})

    denom = -1.0 - p + rho_a * p - rho_a * q
    nu0 = -1.0 / denom
    if not 0.0 <= nu0 <= 1.0:
        nu0 = None

    # one-step lookahead at the two beliefs with conjecture a's values
    j0, j1 = jbar_a
    q_cont0 = 0.0 + gamma * ((1.0 - q) * j0 + q * j1)
    q_stop0 = 1.0 + gamma * j0
    q_cont1 = 1.0 + gamma * j1
    q_stop1 = -1.0 + gamma * j0
    policy = (
        Action.CONTINUE if q_cont0 <= q_stop0 else Action.STOP,
        Action.CONTINUE if q_cont1 <= q_stop1 else Action.STOP,
    )

    weights = {"a": rho_a, "b": 1.0 - rho_a}
    consistent = all(w == 0.0 for k, w in weights.items() if k not in theta_star)
    if p == 1.0 and q == 0.0:
        exists, reason = False, "stationarity requires rho_a = 1, which puts mass outside the consistent set"
    elif not consistent:
        exists, reason = False, "posterior puts mass outside the consistent set"
    elif nu0 is None:
        exists, reason = False, "no stationary occupancy"
    else:
        exists, reason = True, "all conditions hold"
    return ExampleVerdict(jbar_a, jbar_b, theta_star, nu0, policy, consistent, exists, reason)


def example1_game(p: float, q: float, gamma: float = 0.9) -> tuple[GameModel, dict[str, GameModel]]:
    """Simulation counterpart of the example: true model and the two conjectured models."""
    true_z = ObservationModel(np.array([[1.0 - p, p], [1.0 - q, q]]))
    true = GameModel(1, 1.0, gamma, true_z, zero_likelihood="reset-to-prior")
    conj = {
        "a": true.replace(obs_model=ObservationModel(np.eye(2))),
        "b": true.replace(obs_model=ObservationModel(np.eye(2)[::-1].copy())),
    }
    return true, conj


EXAMPLE_ATTACKER = ThresholdAttacker(0.5)


# ---------------------------------------------------------------------------
# grid value iteration (single server)

@dataclass
class ValueFunction:
    grid: np.ndarray  # values of b(1)
    values: np.ndarray  # (G,) for the defender, (2, G) for the attacker (one row per state)
    q_values: np.ndarray  # (..., G, 2)
    player: str
    iterations: int
    residual: float
    contraction: float  # largest observed ratio of successive sup-norm changes

    @property
    def policy(self) -> np.ndarray:
        """Greedy action per grid point, Continue on ties."""
        return (self.q_values[..., 1] < self.q_values[..., 0] - 1e-12).astype(int)

    @property
    def interpolation_error(self) -> float:
        """Rough bound on the interpolation error: the largest jump between grid neighbours."""
        return float(np.abs(np.diff(self.values, axis=-1)).max())

    def switches(self, state: int | None = None) -> int:
        pol = self.policy if state is None else self.policy[state]
        return int(np.count_nonzero(np.diff(pol)))

    def __call__(self, x: float, state: int | None = None) -> float:
        vals = self.values if state is None else self.values[state]
        return float(np.interp(x, self.grid, vals))


def _grid_kernel(model: GameModel, grid: np.ndarray, belief_attacker: AttackerStrategy):
    """Per grid point and defender action: observation probabilities and posterior b(1), plus the
    predicted state distribution (used by the attacker's problem)."""
    beliefs = np.column_stack([1.0 - grid, grid])
    attack = belief_attacker.stop_probs(beliefs)
    probs, posts = [], []
    for a in (Action.CONTINUE, Action.STOP):
        pred = predict_batch(model, beliefs, np.full(grid.size, a == Action.STOP), attack)
        joint = pred[:, :, None] * model.z[None, :, :]  # (G, s', o)
        p_o = joint.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            x_next = np.where(p_o > 0, joint[:, 1, :] / p_o, model.initial_belief[1])
        probs.append(p_o)
        posts.append(x_next)
    return beliefs, np.stack(probs), np.stack(posts)  # (2, G, O)


def grid_value_iteration(
    model: GameModel,
    opponent,
    player: str = DEFENDER,
    grid_size: int = 201,
    tol: float = 1e-9,
    max_iter: int = 100_000,
    fixed_policy: DefenderStrategy | None = None,
    belief_attacker: AttackerStrategy | None = None,
) -> ValueFunction:
    """Value iteration on a uniform ``b(1)`` grid for one player against a fixed opponent.

    Posterior beliefs are linearly interpolated onto the grid. For the defender
    ``opponent`` is an attacker strategy (also used for its belief update) and
    ``fixed_policy`` evaluates a given defender instead of optimizing. For the
    attacker ``opponent`` is the defender strategy and ``belief_attacker`` the
    attack model the defender uses when updating its belief.
    """
    if model.n_servers != 1:
        raise ValueError("grid value iteration supports a single server")
    if grid_size < 11 or tol <= 0:
        raise ValueError("grid_size must be >= 11 and tol > 0")
    grid = np.linspace(0.0, 1.0, grid_size)
    gamma = model.discount
    if player == DEFENDER:
        beliefs, p_o, x_next = _grid_kernel(model, grid, opponent)
        immediate = beliefs @ model.cost_table  # (G, 2)
        forced = None if fixed_policy is None else fixed_policy.stop_probs(beliefs)

        def sweep(v):
            cont = np.stack([(p_o[a] * np.interp(x_next[a], grid, v)).sum(axis=1) for a in range(2)], axis=1)
            q = immediate + gamma * cont
            if forced is None:
                return q.min(axis=1), q
            return (1.0 - forced) * q[:, 0] + forced * q[:, 1], q

        v = np.zeros(grid_size)
    elif player == ATTACKER:
        if belief_attacker is None:
            raise ValueError("attacker value iteration needs the defender's belief-update attack model")
        beliefs, p_o, x_next = _grid_kernel(model, grid, belief_attacker)
        stop_d = opponent.stop_probs(beliefs)  # (G,)
        z = model.z
        # the belief update depends on (a_D, o) only, the observation law on the next state

        def sweep(v):
            # v has shape (2, G): attacker value per true state
            q = np.empty((2, grid_size, 2))
            v_next = np.stack([[np.interp(x_next[a], grid, v[s2]) for s2 in range(2)] for a in range(2)])  # (a_D, s', G, O)
            for s in range(2):
                for a_a in range(2):
                    total = np.zeros(grid_size)
                    for a_d in range(2):
                        w = stop_d if a_d else 1.0 - stop_d
                        if a_d:
                            nxt = {0: 1.0}
                        elif a_a and s == 0:
                            nxt = {0: 1.0 - model.p_attack, 1: model.p_attack}
                        else:
                            nxt = {s: 1.0}
                        cont = sum(p * (v_next[a_d, s2] * z[s2][None, :]).sum(axis=1) for s2, p in nxt.items() if p > 0)
                        total += w * (-model.cost_table[s, a_d] + gamma * cont)
                    q[s, :, a_a] = total
            return q.min(axis=2), q

        v = np.zeros((2, grid_size))
    else:
        raise ValueError(f"player must be 'D' or 'A', got {player!r}")

    prev_delta = None
    ratio = 0.0
    for it in range(1, max_iter + 1):
        v_new, q = sweep(v)
        delta = float(np.abs(v_new - v).max())
        if prev_delta is not None and prev_delta > 1e-12:
            ratio = max(ratio, delta / prev_delta)
        v, prev_delta = v_new, delta
        if delta < tol:
            return ValueFunction(grid, v, q, player, it, delta, ratio)
    raise NonConvergence(f"value iteration did not reach tol={tol} in {max_iter} sweeps (last change {delta:.3g})")


def is_concave(values: np.ndarray, tol: float = 1e-3) -> bool:
    """Second differences on a uniform grid are all <= ``tol``."""
    values = np.asarray(values, dtype=float)
    return bool(np.all(values[:-2] - 2.0 * values[1:-1] + values[2:] <= tol))


# ---------------------------------------------------------------------------
# Berk-Nash check on an online trace

@dataclass
class BerkNashReport:
    bounded_rationality_gap: float
    consistency_gap: float
    stationarity_residual: float
    tolerance: float
    window: int
    beliefs_checked: int

    @property
    def verdict(self) -> bool:
        return max(self.bounded_rationality_gap, self.consistency_gap, self.stationarity_residual) <= self.tolerance

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["verdict"] = self.verdict
        return d

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.as_dict().items())

    @staticmethod
    def csv_header() -> str:
        return ",".join(BerkNashReport.__dataclass_fields__) + ",verdict"

    def csv_row(self) -> str:
        return ",".join(str(v) for v in self.as_dict().values())


def consistency_gap(probs, k_values) -> float:
    """Posterior mass outside the consistent set of the given discrepancies."""
    probs = np.asarray(probs, dtype=float)
    return float(max(0.0, 1.0 - probs[consistent_set(k_values)].sum()))


def _mean_model(setup, probs) -> GameModel:
    template = setup.defender_template or setup.true_model
    values = setup.defender_models.values
    keys = sorted({k for v in values for k in v})
    theta = {k: float(sum(p * v.get(k, getattr(template, k, 0.0)) for p, v in zip(probs, values))) for k in keys}
    return template.with_theta(theta)


def stationarity_residual(model: GameModel, beliefs, defender_actions, attack_vectors) -> float:
    """TV distance between the empirical belief occupancy and its one-step pushforward under ``model``."""
    nu: dict[bytes, float] = {}
    push: dict[bytes, float] = {}
    n = len(beliefs)
    for b, a, vec in zip(beliefs, defender_actions, attack_vectors):
        k = belief_key(b)
        nu[k] = nu.get(k, 0.0) + 1.0 / n
        pred = predict_batch(model, b[None, :], np.array([a == Action.STOP]), np.asarray(vec)[None, :])[0]
        p_o = pred @ model.z
        for o in np.flatnonzero(p_o > 0):
            post = pred * model.z[:, o] / p_o[o]
            kk = belief_key(post)
            push[kk] = push.get(kk, 0.0) + p_o[o] / n
    keys = sorted(set(nu) | set(push))
    return total_variation([nu.get(k, 0.0) for k in keys], [push.get(k, 0.0) for k in keys])


def berk_nash_check(result, setup, window: int = 50, n_beliefs: int = 10, tolerance: float = 0.05,
                    seed: int = 0) -> BerkNashReport:
    """Score the tail of an online episode against the three equilibrium conditions.

    ``result`` and ``setup`` are the output and input of the online loop.
    (i) re-runs the defender's rollout at up to ``n_beliefs`` distinct tail
    beliefs under the posterior-mode model and the recorded attack predictions and reports the largest
    improvement of the best action over the one played; (ii) is the posterior
    mass outside the consistent sets of the tail discrepancies (worst of the
    model and lookahead posteriors); (iii) is the TV distance between the tail
    occupancy and its pushforward under the posterior-mean model.
    """
    T = len(result.trace)
    if T < 2 or window < 1 or T - 1 < window:
        raise InsufficientData(f"need at least {window + 1} steps, got {T}")
    occ = result.occupancy.window(window)
    beliefs = occ.beliefs
    actions = occ.defender_actions
    conj = result.conjectured_attacker[-window:]

    # (i) bounded rationality
    theta_idx = int(np.argmax(result.rho_d[-1]))
    model = result.defender_models[theta_idx]
    cfg = dataclasses.replace(setup.rollout, lookahead=setup.defender_lookahead)
    seen: dict[bytes, tuple[np.ndarray, int, np.ndarray]] = {}
    for b, a, vec in zip(beliefs, actions, conj):
        seen.setdefault(belief_key(b), (b, a, vec))
    gap = 0.0
    for b, a, vec in list(seen.values())[-n_beliefs:]:
        opponent = AttackerDecisions(setup.base_attacker).with_decision(b, vec)
        j_bar = CostToGo.from_config(model, StrategyProfile(setup.base_defender, opponent), DEFENDER, cfg, seed)
        d = rollout_decision(DEFENDER, model, b, None, opponent, setup.base_defender, j_bar, cfg)
        vals = d.action_values
        gap = max(gap, float(vals[a] - vals.min()))

    # (ii) consistency
    k_d = np.mean(result.kl_rho_d[-window:], axis=0)
    k_mu = np.mean(result.kl_mu[-window:], axis=0)
    cons = max(consistency_gap(result.rho_d[-1], k_d), consistency_gap(result.mu[-1], k_mu))

    # (iii) stationarity
    mean_model = _mean_model(setup, result.rho_d[-1])
    resid = stationarity_residual(mean_model, beliefs, actions, conj)
    return BerkNashReport(gap, cons, resid, tolerance, window, len(seen) if len(seen) < n_beliefs else n_beliefs)
