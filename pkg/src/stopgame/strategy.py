"""Belief-based behavioral strategies and Monte-Carlo evaluation of the discounted cost.

Every strategy exposes a batched ``stop_probs``: defenders map ``(batch, N+1)``
beliefs to ``(batch,)`` stop probabilities, attackers map them to
``(batch, N+1)`` per-state stop probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .game import BELIEF_TOL, GameModel, belief_key, next_states, update_batch


class OutOfRange(ValueError):
    pass


def _check_unit(name: str, value: float) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise OutOfRange(f"{name} must lie in [0, 1], got {value}")
    return value


def _as_batch(beliefs) -> np.ndarray:
    b = np.asarray(beliefs, dtype=float)
    return b[None, :] if b.ndim == 1 else b


def _compromised(beliefs: np.ndarray) -> np.ndarray:
    return beliefs[:, 1:].sum(axis=1)


class DefenderStrategy:
    def stop_probs(self, beliefs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def stop_prob(self, b) -> float:
        return float(self.stop_probs(_as_batch(b))[0])


class AttackerStrategy:
    def stop_probs(self, beliefs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def stop_prob(self, b, s: int) -> float:
        return float(self.stop_probs(_as_batch(b))[0, s])


@dataclass(frozen=True)
class ThresholdDefender(DefenderStrategy):
    """Stop iff ``P[S >= 1 | b] >= alpha`` (for N = 1 this is ``b(1) >= alpha``)."""

    alpha: float

    def __post_init__(self):
        _check_unit("alpha", self.alpha)

    def stop_probs(self, beliefs):
        return (_compromised(_as_batch(beliefs)) >= self.alpha).astype(float)


@dataclass(frozen=True)
class ConstantDefender(DefenderStrategy):
    prob: float

    def __post_init__(self):
        _check_unit("prob", self.prob)

    def stop_probs(self, beliefs):
        return np.full(_as_batch(beliefs).shape[0], self.prob)


@dataclass(frozen=True)
class LookupDefender(DefenderStrategy):
    """Stop probabilities on a grid of ``P[S >= 1 | b]`` values, nearest grid point wins."""

    grid: tuple[float, ...]
    probs: tuple[float, ...]

    def stop_probs(self, beliefs):
        grid = np.asarray(self.grid)
        x = _compromised(_as_batch(beliefs))
        idx = np.abs(x[:, None] - grid[None, :]).argmin(axis=1)
        return np.asarray(self.probs)[idx]


@dataclass(frozen=True)
class ThresholdAttacker(AttackerStrategy):
    """Attack iff ``s == 0`` and ``P[S >= 1 | b] < beta``."""

    beta: float

    def __post_init__(self):
        _check_unit("beta", self.beta)

    def stop_probs(self, beliefs):
        b = _as_batch(beliefs)
        out = np.zeros_like(b)
        out[:, 0] = (_compromised(b) < self.beta).astype(float)
        return out


@dataclass(frozen=True)
class ConstantAttacker(AttackerStrategy):
    prob: float

    def __post_init__(self):
        _check_unit("prob", self.prob)

    def stop_probs(self, beliefs):
        return np.full(_as_batch(beliefs).shape, self.prob)


_HASH_MULT = np.random.default_rng(20240601).integers(1, 2**61, size=64, dtype=np.int64)


def _row_hash(keys: np.ndarray) -> np.ndarray:
    return (keys * _HASH_MULT[: keys.shape[-1]]).sum(axis=-1)


class _Overrides:
    """Decisions fixed at a handful of beliefs; everything else falls through to ``base``.

    Beliefs are matched after rounding to the ``BELIEF_TOL`` grid. Lookups are
    vectorized through a row hash so large simulation batches stay cheap.
    """

    def __init__(self, base, table: dict[bytes, tuple[np.ndarray, object]] | None = None):
        self.base = base
        self._table = dict(table or {})
        self._hashes = {
            int(_row_hash(np.frombuffer(k, dtype=np.int64))): k for k in self._table
        }
        self._hash_array = np.fromiter(self._hashes, dtype=np.int64, count=len(self._hashes))

    def _with(self, b, value):
        b = np.asarray(b, dtype=float)
        table = dict(self._table)
        table[belief_key(b)] = (b.copy(), value)
        return type(self)(self.base, table)

    def _apply(self, beliefs: np.ndarray, out: np.ndarray) -> np.ndarray:
        if not self._table:
            return out
        keys = np.round(beliefs / BELIEF_TOL).astype(np.int64)
        h = _row_hash(keys)
        for i in np.flatnonzero(np.isin(h, self._hash_array)):
            hit = self._table.get(keys[i].tobytes())
            if hit is not None:
                out[i] = hit[1]
        return out

    def __len__(self):
        return len(self._table)

    def decisions(self) -> list[tuple[np.ndarray, object]]:
        return list(self._table.values())


class DefenderDecisions(_Overrides, DefenderStrategy):
    """A rollout-improved defender known at the beliefs where decisions were computed."""

    def with_decision(self, b, stop_prob: float) -> "DefenderDecisions":
        return self._with(b, float(stop_prob))

    def stop_probs(self, beliefs):
        b = _as_batch(beliefs)
        return self._apply(b, np.array(self.base.stop_probs(b), dtype=float))


class AttackerDecisions(_Overrides, AttackerStrategy):
    """Attacker counterpart of :class:`DefenderDecisions`; stores a per-state vector."""

    def with_decision(self, b, stop_probs) -> "AttackerDecisions":
        return self._with(b, np.array(stop_probs, dtype=float))

    def stop_probs(self, beliefs):
        b = _as_batch(beliefs)
        return self._apply(b, np.array(self.base.stop_probs(b), dtype=float))


@dataclass(frozen=True)
class StrategyProfile:
    defender: DefenderStrategy
    attacker: AttackerStrategy


@dataclass
class CostEstimate:
    mean: float
    stderr: float
    tail_bound: float
    samples: np.ndarray = field(repr=False)

    @property
    def attacker_mean(self) -> float:
        return -self.mean


class Trajectories(NamedTuple):
    costs: np.ndarray  # discounted defender cost per trajectory
    states: np.ndarray
    beliefs: np.ndarray


UNIFORMS_PER_STEP = 4


def simulate(
    model: GameModel,
    profile: StrategyProfile,
    states: np.ndarray,
    beliefs: np.ndarray,
    uniforms: np.ndarray,
    fixed_defender: np.ndarray | None = None,
    fixed_attacker: np.ndarray | None = None,
) -> Trajectories:
    """Roll a batch of trajectories forward and accumulate discounted defender cost.

    ``uniforms`` has shape ``(batch, horizon, 4)`` (defender action, attacker
    action, transition, observation). ``fixed_defender`` / ``fixed_attacker``
    (shape ``(batch, k)``, 0/1) override the first ``k`` actions of that player,
    which is how open-loop lookahead sequences are evaluated.
    """
    states = np.asarray(states, dtype=np.int64).copy()
    beliefs = np.array(beliefs, dtype=float)
    batch, horizon, _ = uniforms.shape
    total = np.zeros(batch)
    disc = 1.0
    for t in range(horizon):
        u = uniforms[:, t, :]
        attack_probs = profile.attacker.stop_probs(beliefs)
        if fixed_defender is not None and t < fixed_defender.shape[1]:
            stop_d = fixed_defender[:, t].astype(bool)
        else:
            stop_d = u[:, 0] < profile.defender.stop_probs(beliefs)
        if fixed_attacker is not None and t < fixed_attacker.shape[1]:
            attack = fixed_attacker[:, t].astype(bool)
        else:
            attack = u[:, 1] < attack_probs[np.arange(batch), states]
        total += disc * model.cost_table[states, stop_d.astype(np.int64)]
        disc *= model.discount
        if t == horizon - 1:
            break
        states = next_states(model, states, stop_d, attack, u[:, 2])
        obs = model.obs_model.sample(states, u[:, 3])
        beliefs = update_batch(model, beliefs, stop_d, obs, attack_probs)
    return Trajectories(total, states, beliefs)


def sample_states(beliefs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cum = np.cumsum(beliefs, axis=-1)
    s = (cum < u[..., None]).sum(axis=-1)
    return np.minimum(s, beliefs.shape[-1] - 1)


def truncation_bound(model: GameModel, horizon: int) -> float:
    """Upper bound on the discounted cost ignored by truncating at ``horizon``."""
    return model.discount**horizon * model.max_abs_cost() / (1.0 - model.discount)


def evaluate_cost(
    model: GameModel,
    profile: StrategyProfile,
    b1,
    horizon: int,
    n_samples: int,
    rng: np.random.Generator,
) -> CostEstimate:
    """Monte-Carlo estimate of the defender's discounted cost from ``b1`` (attacker's is the negation)."""
    if horizon < 1 or n_samples < 1:
        raise ValueError("horizon and n_samples must be >= 1")
    b1 = np.asarray(b1, dtype=float)
    u0 = rng.random(n_samples)
    uniforms = rng.random((n_samples, horizon, UNIFORMS_PER_STEP))
    beliefs = np.broadcast_to(b1, (n_samples, b1.size))
    states = sample_states(beliefs, u0)
    costs = simulate(model, profile, states, beliefs, uniforms).costs
    stderr = float(costs.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0
    return CostEstimate(float(costs.mean()), stderr, truncation_bound(model, horizon), costs)
