"""Game model: states, actions, transitions, observations, cost and the belief operator.

States are integers ``0..N`` (number of compromised servers). Beliefs are plain
numpy vectors of length ``N + 1``; the batched helpers in this module operate on
``(batch, N + 1)`` arrays so the Monte-Carlo code in the rest of the package
can stay vectorized.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from scipy import stats

BELIEF_TOL = 1e-9
ROW_SUM_TOL = 1e-12


class Action(enum.IntEnum):
    CONTINUE = 0
    STOP = 1


class ZeroLikelihood(ArithmeticError):
    """The observation has probability zero under the model used for the update."""


@dataclass(frozen=True)
class BetaBinomialFamily:
    """Per-state BetaBinomial observation law ``z(.|s) = BetaBin(n, alpha_s + slope * theta, beta_s)``.

    ``theta`` is the client-load parameter of the non-stationary scenarios; with
    ``slope == 0`` it has no effect.
    """

    n: int
    alphas: tuple[float, ...]
    betas: tuple[float, ...]
    slope: float = 0.0

    def matrix(self, theta: float = 0.0) -> np.ndarray:
        support = np.arange(self.n + 1)
        rows = []
        for a, b in zip(self.alphas, self.betas):
            rows.append(stats.betabinom.pmf(support, self.n, a + self.slope * theta, b))
        z = np.asarray(rows, dtype=float)
        return z / z.sum(axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class ObservationModel:
    """Row-stochastic matrix ``z[s, o] = P[o | s]``."""

    matrix: np.ndarray
    family: BetaBinomialFamily | None = None
    theta: float = 0.0

    def __post_init__(self):
        z = np.array(self.matrix, dtype=float)
        if z.ndim != 2 or z.shape[1] < 1:
            raise ValueError(f"observation matrix must be 2-D, got shape {z.shape}")
        if np.any(z < 0):
            raise ValueError("observation matrix has negative entries")
        if np.any(np.abs(z.sum(axis=1) - 1.0) > ROW_SUM_TOL):
            raise ValueError("observation matrix rows must sum to 1")
        z.setflags(write=False)
        object.__setattr__(self, "matrix", z)
        cum = np.cumsum(z, axis=1)
        cum[:, -1] = 1.0
        cum.setflags(write=False)
        object.__setattr__(self, "_cum", cum)

    @classmethod
    def from_counts(cls, counts) -> "ObservationModel":
        c = np.asarray(counts, dtype=float)
        if np.any(c.sum(axis=1) <= 0):
            raise ValueError("every state needs at least one observation count")
        return cls(c / c.sum(axis=1, keepdims=True))

    @classmethod
    def beta_binomial(cls, n: int, alphas, betas, slope: float = 0.0, theta: float = 0.0) -> "ObservationModel":
        fam = BetaBinomialFamily(int(n), tuple(map(float, alphas)), tuple(map(float, betas)), float(slope))
        return cls(fam.matrix(theta), family=fam, theta=float(theta))

    @classmethod
    def load(cls, path: str | Path) -> "ObservationModel":
        """Read a whitespace-separated matrix file, one row per state."""
        rows = []
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                rows.append([float(x) for x in line.split()])
        return cls(np.asarray(rows))

    def save(self, path: str | Path) -> None:
        lines = [" ".join(repr(float(x)) for x in row) for row in self.matrix]
        Path(path).write_text("\n".join(lines) + "\n")

    def with_theta(self, theta: float) -> "ObservationModel":
        if self.family is None:
            raise ValueError("observation model has no parametric family; cannot set theta")
        return ObservationModel(self.family.matrix(theta), family=self.family, theta=float(theta))

    @property
    def n_obs(self) -> int:
        return self.matrix.shape[1]

    @property
    def n_states(self) -> int:
        return self.matrix.shape[0]

    def sample(self, states: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Inverse-CDF sampling of one observation per entry of ``states`` from uniforms ``u``."""
        cum = self._cum[states]
        o = (cum < np.asarray(u)[..., None]).sum(axis=-1)
        return np.minimum(o, self.n_obs - 1)


@dataclass(frozen=True, eq=False)
class GameModel:
    """The parameterized stopping game.

    ``cost_exponent``, ``cost_stop_base`` and ``cost_stop_bonus`` are the
    constants ``p``, ``q`` and ``r`` of the response cost
    ``s**p * [a != S] + [a == S] * (q - r * sgn(s))``.
    """

    n_servers: int
    p_attack: float
    discount: float
    obs_model: ObservationModel
    cost_exponent: float = 1.25
    cost_stop_base: float = 1.0
    cost_stop_bonus: float = 2.0
    zero_likelihood: str = "error"
    initial_belief: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.n_servers < 1:
            raise ValueError("n_servers must be >= 1")
        if not 0.0 <= self.p_attack <= 1.0:
            raise ValueError(f"p_attack must lie in [0, 1], got {self.p_attack}")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")
        if self.cost_exponent <= 0:
            raise ValueError("cost_exponent must be positive")
        if self.obs_model.n_states != self.n_servers + 1:
            raise ValueError(
                f"observation model has {self.obs_model.n_states} rows, expected {self.n_servers + 1}"
            )
        if self.zero_likelihood not in ("error", "reset-to-prior"):
            raise ValueError(f"unknown zero-likelihood policy {self.zero_likelihood!r}")
        if self.initial_belief is None:
            b1 = point_belief(0, self.n_servers)
        else:
            b1 = make_belief(self.initial_belief)
            if b1.shape[0] != self.n_states:
                raise ValueError("initial belief has wrong length")
        b1.setflags(write=False)
        object.__setattr__(self, "initial_belief", b1)
        s = np.arange(self.n_states, dtype=float)
        costs = np.empty((self.n_states, 2))
        costs[:, Action.CONTINUE] = s**self.cost_exponent
        costs[:, Action.STOP] = self.cost_stop_base - self.cost_stop_bonus * np.sign(s)
        costs.setflags(write=False)
        object.__setattr__(self, "cost_table", costs)

    @property
    def n_states(self) -> int:
        return self.n_servers + 1

    @property
    def n_obs(self) -> int:
        return self.obs_model.n_obs

    @property
    def z(self) -> np.ndarray:
        return self.obs_model.matrix

    def replace(self, **changes) -> "GameModel":
        return dataclasses.replace(self, **changes)

    def with_theta(self, theta: Mapping[str, Any] | None) -> "GameModel":
        """Apply a parameter override such as ``{"p_attack": 0.3}`` or ``{"clients": 12}``."""
        if not theta:
            return self
        changes: dict[str, Any] = {}
        for key, value in theta.items():
            if key == "clients":
                changes["obs_model"] = self.obs_model.with_theta(float(value))
            elif key in ("p_attack", "discount", "cost_exponent", "cost_stop_base", "cost_stop_bonus"):
                changes[key] = float(value)
            else:
                raise KeyError(f"unknown model parameter {key!r}")
        return self.replace(**changes)

    def max_abs_cost(self) -> float:
        return float(np.abs(self.cost_table).max())


def make_belief(probs) -> np.ndarray:
    b = np.array(probs, dtype=float)
    if b.ndim != 1 or b.size < 2:
        raise ValueError("belief must be a 1-D vector over at least two states")
    if np.any(b < 0) or abs(b.sum() - 1.0) > ROW_SUM_TOL:
        raise ValueError(f"not a probability vector: {b}")
    return b


def point_belief(s: int, n_servers: int) -> np.ndarray:
    b = np.zeros(n_servers + 1)
    b[s] = 1.0
    return b


def belief_key(b: np.ndarray) -> bytes:
    """Hashable key identifying beliefs equal up to ``BELIEF_TOL`` (grid-rounded)."""
    return np.round(np.asarray(b, dtype=float) / BELIEF_TOL).astype(np.int64).tobytes()


def prob_compromised(beliefs: np.ndarray) -> np.ndarray:
    """``P[S >= 1 | b]`` for one belief or a batch."""
    beliefs = np.asarray(beliefs)
    return 1.0 - beliefs[..., 0]


def transition_dist(model: GameModel, s: int, a_d: Action, a_a: Action) -> np.ndarray:
    if not 0 <= s <= model.n_servers:
        raise ValueError(f"state {s} out of range")
    out = np.zeros(model.n_states)
    if a_d == Action.STOP:
        out[0] = 1.0
    elif a_a == Action.CONTINUE:
        out[s] = 1.0
    else:
        out[s] += 1.0 - model.p_attack
        out[min(s + 1, model.n_servers)] += model.p_attack
    return out


def transition_matrix(model: GameModel, a_d: Action, a_a: Action) -> np.ndarray:
    return np.stack([transition_dist(model, s, a_d, a_a) for s in range(model.n_states)])


def cost(model: GameModel, s: int, a_d: Action) -> float:
    if not 0 <= s <= model.n_servers:
        raise ValueError(f"state {s} out of range")
    return float(model.cost_table[s, int(a_d)])


def predict_batch(model: GameModel, beliefs: np.ndarray, stop_d: np.ndarray, attack_probs: np.ndarray) -> np.ndarray:
    """Predicted next-state distributions before conditioning on the observation.

    ``stop_d`` is a boolean (or 0/1) vector of defender actions, ``attack_probs``
    holds ``pi_A(S | b, s)`` per state, shape ``(batch, N + 1)``.
    """
    beliefs = np.asarray(beliefs, dtype=float)
    moved = beliefs * attack_probs * model.p_attack
    pred = beliefs - moved
    pred[:, 1:] += moved[:, :-1]
    pred[:, -1] += moved[:, -1]
    stop = np.asarray(stop_d, dtype=bool)
    if stop.any():
        pred[stop] = 0.0
        pred[stop, 0] = 1.0
    return pred


def update_batch(
    model: GameModel,
    beliefs: np.ndarray,
    stop_d: np.ndarray,
    obs: np.ndarray,
    attack_probs: np.ndarray,
    prior: np.ndarray | None = None,
) -> np.ndarray:
    """Batched belief operator; returns posteriors of shape ``(batch, N + 1)``."""
    pred = predict_batch(model, beliefs, stop_d, attack_probs)
    numer = pred * model.z[:, obs].T
    norm = numer.sum(axis=1)
    bad = norm <= 0.0
    if bad.any():
        if model.zero_likelihood == "error":
            raise ZeroLikelihood("observation has zero probability under the conjectured model")
        numer[bad] = model.initial_belief if prior is None else prior
        norm[bad] = 1.0
    return numer / norm[:, None]


def _attack_vector(model: GameModel, b: np.ndarray, pi_a) -> np.ndarray:
    if hasattr(pi_a, "stop_probs"):
        return np.asarray(pi_a.stop_probs(b[None, :]), dtype=float)
    vec = np.broadcast_to(np.asarray(pi_a, dtype=float), (model.n_states,))
    return vec[None, :]


def observation_likelihood(model: GameModel, b: np.ndarray, a_d: Action, pi_a) -> np.ndarray:
    """``P[o | b, a_d]`` for every observation, i.e. the normalizers of the belief operator."""
    b = np.asarray(b, dtype=float)
    pred = predict_batch(model, b[None, :], np.array([a_d == Action.STOP]), _attack_vector(model, b, pi_a))[0]
    return pred @ model.z


def belief_update(model: GameModel, b: np.ndarray, a_d: Action, o: int, pi_a) -> np.ndarray:
    """Bayes posterior over the next state given the previous belief, defender action and observation.

    ``pi_a`` is an attacker strategy (anything with ``stop_probs``) or a per-state
    vector of attack probabilities evaluated at ``b``.
    """
    b = np.asarray(b, dtype=float)
    if not 0 <= o < model.n_obs:
        raise ValueError(f"observation {o} out of range")
    return update_batch(
        model, b[None, :], np.array([a_d == Action.STOP]), np.array([o]), _attack_vector(model, b, pi_a)
    )[0]


def next_states(model: GameModel, states: np.ndarray, stop_d: np.ndarray, attack: np.ndarray, u: np.ndarray) -> np.ndarray:
    up = np.asarray(attack, dtype=bool) & (np.asarray(u) < model.p_attack)
    nxt = np.where(up, np.minimum(states + 1, model.n_servers), states)
    return np.where(np.asarray(stop_d, dtype=bool), 0, nxt)


def sample_step(model: GameModel, s: int, a_d: Action, a_a: Action, rng: np.random.Generator) -> tuple[int, int]:
    """Draw ``(s_next, o)`` with the observation emitted by the next state."""
    u = rng.random(2)
    s_next = int(
        next_states(model, np.array([s]), np.array([a_d == Action.STOP]), np.array([a_a == Action.STOP]), u[:1])[0]
    )
    o = int(model.obs_model.sample(np.array([s_next]), u[1:])[0])
    return s_next, o


def is_tp2(obs: ObservationModel | np.ndarray, tol: float = 1e-12) -> bool:
    z = obs.matrix if isinstance(obs, ObservationModel) else np.asarray(obs, dtype=float)
    n_s, n_o = z.shape
    for s in range(n_s - 1):
        for s2 in range(s + 1, n_s):
            # minors for all column pairs o < o2
            m = np.outer(z[s], z[s2]) - np.outer(z[s2], z[s])
            if np.any(np.triu(m, k=1) < -tol):
                return False
    return True
