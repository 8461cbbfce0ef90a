"""Posteriors over conjectures, feedback likelihoods, discrepancy and the per-step trace."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .game import Action, GameModel, observation_likelihood, transition_dist


class AllZeroLikelihood(ArithmeticError):
    """Every conjecture in the support assigns zero probability to the feedback."""


FALLBACKS = ("keep-prior", "error")


@dataclass(frozen=True)
class ConjectureSpace:
    """A finite set of conjectures with labels and a prior.

    ``values`` are opaque to this module: model-parameter dicts for the
    defender's and attacker's model conjectures, integer lookaheads for the
    conjecture about the attacker's lookahead.
    """

    values: tuple[Any, ...]
    prior: np.ndarray = None

    def __post_init__(self):
        if not self.values:
            raise ValueError("conjecture space must be non-empty")
        prior = np.full(len(self.values), 1.0 / len(self.values)) if self.prior is None else np.array(self.prior, float)
        if prior.shape != (len(self.values),) or np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-9:
            raise ValueError("prior must be a probability vector over the conjectures")
        prior.setflags(write=False)
        object.__setattr__(self, "values", tuple(self.values))
        object.__setattr__(self, "prior", prior)

    def __len__(self):
        return len(self.values)

    def index(self, value) -> int:
        return self.values.index(value)

    def posterior(self) -> "ConjecturePosterior":
        return ConjecturePosterior(self, self.prior.copy())


@dataclass
class ConjecturePosterior:
    space: ConjectureSpace
    probs: np.ndarray

    def update(self, likelihoods, fallback: str = "error") -> "ConjecturePosterior":
        self.probs = bayes_update(self.probs, likelihoods, fallback)
        return self

    def sample(self, rng: np.random.Generator) -> int:
        """Index of a conjecture drawn from the posterior (one uniform consumed)."""
        cum = np.cumsum(self.probs)
        return int(min(np.searchsorted(cum, rng.random() * cum[-1], side="right"), len(cum) - 1))

    def mode(self) -> int:
        return int(np.argmax(self.probs))

    def mass(self, indices) -> float:
        return float(self.probs[list(indices)].sum())

    def mean(self, key: str | None = None) -> float:
        """Posterior mean of a numeric conjecture (or of one field of dict conjectures)."""
        vals = np.array([v if key is None else v[key] for v in self.space.values], dtype=float)
        return float(self.probs @ vals)


def bayes_update(prior, likelihoods, fallback: str = "error") -> np.ndarray:
    """Posterior proportional to ``prior * likelihoods``.

    If the normalizer vanishes the prior is returned (``keep-prior``) or
    :class:`AllZeroLikelihood` is raised (``error``).
    """
    if fallback not in FALLBACKS:
        raise ValueError(f"unknown fallback {fallback!r}")
    prior = np.asarray(prior, dtype=float)
    lik = np.asarray(likelihoods, dtype=float)
    if lik.shape != prior.shape or np.any(lik < 0):
        raise ValueError("likelihoods must be non-negative and match the prior")
    peak = lik.max()
    if peak > 0.0:
        lik = lik / peak  # scale-free; avoids underflow of tiny likelihoods
    post = prior * lik
    total = post.sum()
    if total <= 0.0 or not np.isfinite(total):
        if fallback == "error":
            raise AllZeroLikelihood("all conjectures assign zero likelihood to the feedback")
        return prior.copy()
    return post / total


def defender_feedback_likelihood(models: Sequence[GameModel], b_prev, a_d_prev: Action, attack_probs, o: int) -> np.ndarray:
    """``P_theta[o | b_prev, a_d_prev, pi_A]`` for every conjectured model ``theta``.

    ``attack_probs`` is the conjectured per-state attack vector at ``b_prev``,
    held fixed across candidates.
    """
    return np.array([observation_likelihood(m, b_prev, a_d_prev, attack_probs)[o] for m in models])


def attacker_feedback_likelihood(models: Sequence[GameModel], s_prev: int, a_d_prev: Action, a_a_prev: Action,
                                 s: int, o: int) -> np.ndarray:
    """``f_theta(s | s_prev, a_prev) * z_theta(o | s)`` for every conjectured model."""
    return np.array([transition_dist(m, s_prev, a_d_prev, a_a_prev)[s] * m.z[s, o] for m in models])


def kl_divergence(p, q) -> float:
    """``KL(p || q)`` with ``0 ln 0 = 0`` and ``+inf`` when ``q`` misses mass of ``p``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    mask = p > 0
    if np.any(q[mask] <= 0):
        return math.inf
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


class DiscrepancyTracker:
    """Running average of ``KL(true predictive || candidate predictive)`` over visited steps."""

    def __init__(self, n_candidates: int):
        self.total = np.zeros(n_candidates)
        self.per_step: list[np.ndarray] = []

    @property
    def steps(self) -> int:
        return len(self.per_step)

    def add(self, true_pred, candidate_preds) -> None:
        kl = np.array([kl_divergence(true_pred, q) for q in candidate_preds])
        self.total += kl
        self.per_step.append(kl)

    def window(self, w: int) -> np.ndarray:
        """Discrepancy over the last ``w`` recorded steps."""
        if not self.per_step:
            raise ValueError("no steps recorded")
        return np.mean(self.per_step[-w:], axis=0)

    @property
    def values(self) -> np.ndarray:
        if self.steps == 0:
            return np.zeros_like(self.total)
        return self.total / self.steps


def discrepancy(true_preds, candidate_preds) -> np.ndarray:
    """Discrepancy of each candidate under the empirical occupancy of the rows.

    ``true_preds`` has shape ``(T, O)``, ``candidate_preds`` ``(K, T, O)``; the
    result is the average over rows of the KL divergence, shape ``(K,)``.
    """
    true_preds = np.asarray(true_preds, dtype=float)
    candidate_preds = np.asarray(candidate_preds, dtype=float)
    if true_preds.shape[0] == 0:
        raise ValueError("empty occupancy")
    return np.array([np.mean([kl_divergence(p, q) for p, q in zip(true_preds, cand)]) for cand in candidate_preds])


def expected_discrepancy(true_model: GameModel, true_attacker, candidates, beliefs, defender_actions) -> np.ndarray:
    """Discrepancy of each ``(model, attacker)`` candidate over visited ``(belief, defender action)`` pairs.

    Attackers may be strategies or per-state attack vectors, as accepted by
    :func:`observation_likelihood`.
    """
    pairs = list(zip(beliefs, defender_actions))
    truth = [observation_likelihood(true_model, b, a, true_attacker) for b, a in pairs]
    cand = [[observation_likelihood(m, b, a, pi) for b, a in pairs] for m, pi in candidates]
    return discrepancy(truth, cand)


def consistent_set(k_values, tol: float = 1e-9) -> np.ndarray:
    """Indices minimizing the discrepancy; every candidate ties when all are infinite."""
    k = np.asarray(k_values, dtype=float)
    best = k.min()
    if math.isinf(best):
        return np.flatnonzero(np.isinf(k))
    return np.flatnonzero(k <= best + tol)


@dataclass
class OccupancyMeasure:
    """Empirical record of visited ``(s, b, a_D, a_A)`` tuples."""

    states: list[int] = field(default_factory=list)
    beliefs: list[np.ndarray] = field(default_factory=list)
    defender_actions: list[int] = field(default_factory=list)
    attacker_actions: list[int] = field(default_factory=list)

    def add(self, s: int, b, a_d: int, a_a: int) -> None:
        self.states.append(int(s))
        self.beliefs.append(np.asarray(b, dtype=float).copy())
        self.defender_actions.append(int(a_d))
        self.attacker_actions.append(int(a_a))

    def __len__(self):
        return len(self.states)

    def window(self, w: int) -> "OccupancyMeasure":
        return OccupancyMeasure(self.states[-w:], self.beliefs[-w:], self.defender_actions[-w:],
                                self.attacker_actions[-w:])

    def histogram(self, bins: int = 20) -> np.ndarray:
        """Joint frequencies of (s, binned P[S >= 1 | b], a_D), flattened."""
        if not self.states:
            raise ValueError("empty occupancy")
        n_states = self.beliefs[0].size
        x = np.array([1.0 - b[0] for b in self.beliefs])
        bin_idx = np.minimum((x * bins).astype(int), bins - 1)
        hist = np.zeros((n_states, bins, 2))
        np.add.at(hist, (np.array(self.states), bin_idx, np.array(self.defender_actions)), 1.0)
        return hist.ravel() / len(self.states)


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


@dataclass
class TraceRow:
    t: int
    s: int
    a_d: int
    a_a: int
    o: int
    belief: np.ndarray
    mu: np.ndarray
    rho_d: np.ndarray
    rho_a: np.ndarray
    cost: float
    k_mu: float
    k_rho_d: float


class EpisodeTrace:
    """Per-step record of one episode; written as CSV with a fixed column order."""

    def __init__(self, n_states: int, n_lookaheads: int, n_rho_d: int, n_rho_a: int):
        self.sizes = (n_states, n_lookaheads, n_rho_d, n_rho_a)
        self.rows: list[TraceRow] = []

    def append(self, row: TraceRow) -> None:
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def header(self) -> list[str]:
        n_b, n_mu, n_d, n_a = self.sizes
        return (
            ["t", "s", "a_D", "a_A", "o"]
            + [f"b[{i}]" for i in range(n_b)]
            + [f"mu[{i}]" for i in range(n_mu)]
            + [f"rho_D[{i}]" for i in range(n_d)]
            + [f"rho_A[{i}]" for i in range(n_a)]
            + ["cost", "K_expected_mu", "K_expected_rhoD"]
        )

    def column(self, name: str) -> np.ndarray:
        idx = self.header().index(name)
        return np.array([self._values(r)[idx] for r in self.rows], dtype=float)

    @staticmethod
    def _values(r: TraceRow) -> list:
        return [r.t, r.s, r.a_d, r.a_a, r.o, *r.belief, *r.mu, *r.rho_d, *r.rho_a, r.cost, r.k_mu, r.k_rho_d]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.header())
            for r in self.rows:
                writer.writerow([_fmt(v) for v in self._values(r)])


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))
