"""Scenario configuration, the client-arrival rate, and multi-seed experiment orchestration.

A scenario is described by a nested YAML mapping. Missing keys fall back to
the built-in defaults of the scenario id, so a config file only has to state
what differs. See the README for the full grammar.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import platform
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import scipy
import yaml
from scipy import stats

from .conjecture import ConjectureSpace, EpisodeTrace
from .game import GameModel, ObservationModel
from .online import OnlineSetup, run_online
from .rollout import RolloutConfig
from .strategy import ConstantAttacker, ConstantDefender, ThresholdAttacker, ThresholdDefender

EXP_CLAMP = 50.0


class ConfigError(ValueError):
    """The scenario configuration is malformed or inconsistent."""


class InvalidMapping(ConfigError):
    pass


# ---------------------------------------------------------------------------
# client-arrival rate

@dataclass(frozen=True)
class RateFunction:
    """``lambda(t) = exp(sum_i psi_i t^i + sum_k chi_k sin(omega_k t + phi_k))`` with ``i`` starting at 1."""

    psi: tuple[float, ...] = ()
    chi: tuple[float, ...] = ()
    omega: tuple[float, ...] = ()
    phi: tuple[float, ...] = ()

    def __post_init__(self):
        if not len(self.chi) == len(self.omega) == len(self.phi):
            raise ConfigError("chi, omega and phi must have equal length")


# A cubic trend coefficient of -1e5 would make the rate vanish after the first
# step; -1e-5 keeps the term small. All coefficients are configurable.
DEFAULT_RATE = RateFunction(psi=(0.5, 1e-2, -1e-5), chi=(1.0593,), omega=(0.054 * math.pi,), phi=(-0.5193,))


def lambda_rate(rf: RateFunction, t: float) -> float:
    if t < 0:
        raise ValueError("t must be non-negative")
    trend = sum(c * t ** (i + 1) for i, c in enumerate(rf.psi))
    periodic = sum(c * math.sin(w * t + p) for c, w, p in zip(rf.chi, rf.omega, rf.phi))
    exponent = trend + periodic
    if exponent > EXP_CLAMP:
        warnings.warn(f"rate exponent {exponent:.3g} clamped at {EXP_CLAMP}", RuntimeWarning, stacklevel=2)
        exponent = EXP_CLAMP
    return math.exp(exponent)


def theta_from_rate(lambda_value: float, mapping: Mapping[str, Any]) -> dict[str, float]:
    """Model override for a step with arrival rate ``lambda_value``.

    The default link is the expected number of clients present,
    ``lambda * service_time``, fed to the observation family as ``clients``.
    """
    kind = mapping.get("link", "clients")
    if kind != "clients":
        raise InvalidMapping(f"unknown rate link {kind!r}")
    service = float(mapping.get("service_time", 4.0))
    if service <= 0:
        raise InvalidMapping("service_time must be positive")
    return {"clients": lambda_value * service}


# ---------------------------------------------------------------------------
# configuration

_BASE: dict[str, Any] = {
    "scenario": 1,
    "steps": 50,
    "seed": 0,
    "seeds": 20,
    "threads": 1,
    "model": {
        "n_servers": 1,
        "p_attack": 0.8,
        "discount": 0.99,
        "cost_exponent": 1.25,
        "cost_stop_base": 1.0,
        "cost_stop_bonus": 2.0,
        "zero_likelihood": "error",
        "observation": {"matrix": [[0.85, 0.1, 0.05], [0.05, 0.1, 0.85]]},
    },
    "conjectures": {
        "defender_models": [{}],
        "defender_prior": None,
        "attacker_models": [{}],
        "attacker_prior": None,
        "lookaheads": [1],
        "lookahead_prior": None,
    },
    "strategies": {
        "defender": {"type": "threshold", "alpha": 0.75},
        "attacker": {"type": "constant", "prob": 0.0},
    },
    "lookahead": {"defender": 1, "attacker": 1},
    "rollout": {"mode": "exact", "cost_to_go_samples": 100, "cost_to_go_horizon": 50, "node_limit": 1_000_000},
    "sampling": "sample",
    "fallback": "error",
    "forgetting_factor": 1.0,
    "schedule": {"type": "constant"},
}

_P_ATTACK_GRID = [round(0.05 * i, 2) for i in range(17)]  # 0.0, 0.05, ..., 0.8

_SCENARIOS: dict[int, dict[str, Any]] = {
    1: {"conjectures": {"lookaheads": [1, 2]}},
    2: {
        "steps": 100,
        "model": {
            "observation": {
                "beta_binomial": {"n": 2, "alphas": [1.0, 3.0], "betas": [3.0, 1.0], "slope": 0.05},
                "clients": 5.0,
            }
        },
        "conjectures": {
            "defender_models": [{"clients": c} for c in (2.0, 5.0, 10.0, 20.0)],
            "attacker_models": [{"clients": c} for c in (2.0, 5.0, 10.0, 20.0)],
        },
        "schedule": {"type": "rate", "time_scale": 1.0 / 120.0, "service_time": 4.0},
    },
    3: {
        "steps": 200,
        "model": {"p_attack": 1.0},
        "conjectures": {
            "defender_models": [{"p_attack": p} for p in _P_ATTACK_GRID],
            "attacker_models": [{"p_attack": p} for p in _P_ATTACK_GRID],
        },
    },
    4: {
        "steps": 200,
        "model": {"p_attack": 1.0},
        "conjectures": {
            "defender_models": [{"p_attack": p} for p in _P_ATTACK_GRID],
            "attacker_models": [{"p_attack": p} for p in _P_ATTACK_GRID],
            "lookaheads": [1, 2],
        },
    },
}


def _merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict) and k != "observation":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def default_config(scenario: int) -> dict:
    if scenario not in _SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}; expected one of {sorted(_SCENARIOS)}")
    base = _BASE
    if scenario == 2:
        # observation family replaces the matrix wholesale
        base = _merge(_BASE, {"model": {"observation": {}}})
    return _merge(_merge(base, _SCENARIOS[scenario]), {"scenario": scenario})


def _strategy(spec: Mapping, player: str):
    try:
        kind = spec["type"]
        if player == "D":
            if kind == "threshold":
                return ThresholdDefender(float(spec["alpha"]))
            if kind == "constant":
                return ConstantDefender(float(spec["prob"]))
        else:
            if kind == "threshold":
                return ThresholdAttacker(float(spec["beta"]))
            if kind == "constant":
                return ConstantAttacker(float(spec["prob"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad {player} strategy {dict(spec)!r}: {exc}") from exc
    raise ConfigError(f"unknown strategy type {kind!r}")


def _observation(spec: Mapping, base_dir: Path | None) -> ObservationModel:
    if "matrix" in spec:
        return ObservationModel(np.asarray(spec["matrix"], dtype=float))
    if "file" in spec:
        path = Path(spec["file"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return ObservationModel.load(path)
    if "beta_binomial" in spec:
        bb = spec["beta_binomial"]
        return ObservationModel.beta_binomial(bb["n"], bb["alphas"], bb["betas"], bb.get("slope", 0.0),
                                              spec.get("clients", 0.0))
    raise ConfigError("observation needs one of: matrix, file, beta_binomial")


def _space(values, prior) -> ConjectureSpace:
    if not isinstance(values, list) or not values:
        raise ConfigError("conjecture lists must be non-empty")
    if prior is not None and any(p <= 0 for p in prior):
        raise ConfigError("priors must have full support")
    return ConjectureSpace(tuple(values), None if prior is None else np.asarray(prior, dtype=float))


@dataclass
class ScenarioConfig:
    """Parsed scenario configuration; ``raw`` is the fully merged mapping the hash is computed from."""

    raw: dict
    setup: OnlineSetup
    seeds: list[int]
    threads: int = 1
    base_dir: Path | None = field(default=None, repr=False)

    @property
    def scenario(self) -> int:
        return int(self.raw["scenario"])

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def default(cls, scenario: int) -> "ScenarioConfig":
        return cls.from_dict({"scenario": scenario})

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioConfig":
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        return cls.from_dict(data, base_dir=path.parent)

    @classmethod
    def from_dict(cls, data: Mapping, base_dir: Path | None = None) -> "ScenarioConfig":
        raw = _merge(default_config(int(data.get("scenario", 1))), data)
        try:
            return cls._build(raw, base_dir)
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    @classmethod
    def _build(cls, raw: dict, base_dir: Path | None) -> "ScenarioConfig":
        m = raw["model"]
        model = GameModel(
            n_servers=int(m["n_servers"]),
            p_attack=float(m["p_attack"]),
            discount=float(m["discount"]),
            obs_model=_observation(m["observation"], base_dir),
            cost_exponent=float(m["cost_exponent"]),
            cost_stop_base=float(m["cost_stop_base"]),
            cost_stop_bonus=float(m["cost_stop_bonus"]),
            zero_likelihood=m["zero_likelihood"],
        )
        c = raw["conjectures"]
        lookaheads = c["lookaheads"]
        if any(not isinstance(x, int) or x < 1 for x in lookaheads):
            raise ConfigError("lookaheads must be positive integers")
        r = raw["rollout"]
        rollout = RolloutConfig(
            mode=r["mode"],
            cost_to_go_samples=int(r["cost_to_go_samples"]),
            cost_to_go_horizon=int(r["cost_to_go_horizon"]),
            node_limit=int(r["node_limit"]),
        )
        setup = OnlineSetup(
            true_model=model,
            defender_models=_space(c["defender_models"], c["defender_prior"]),
            lookaheads=_space(lookaheads, c["lookahead_prior"]),
            base_defender=_strategy(raw["strategies"]["defender"], "D"),
            base_attacker=_strategy(raw["strategies"]["attacker"], "A"),
            attacker_lookahead=int(raw["lookahead"]["attacker"]),
            defender_lookahead=int(raw["lookahead"]["defender"]),
            attacker_models=_space(c["attacker_models"], c["attacker_prior"]),
            rollout=rollout,
            steps=int(raw["steps"]),
            sampling=raw["sampling"],
            fallback=raw["fallback"],
            forgetting_factor=float(raw["forgetting_factor"]),
            true_theta=make_schedule(raw["schedule"]),
        )
        for th in list(setup.defender_models.values) + list(setup.attacker_models.values):
            model.with_theta(th)  # surfaces unknown keys and invalid values now
        seeds = raw["seeds"]
        seeds = list(range(int(raw["seed"]), int(raw["seed"]) + int(seeds))) if isinstance(seeds, int) else list(seeds)
        if not seeds:
            raise ConfigError("at least one seed is required")
        return cls(raw, setup, [int(s) for s in seeds], int(raw.get("threads", 1)), base_dir)

    def with_overrides(self, **changes) -> "ScenarioConfig":
        return ScenarioConfig.from_dict(_merge(self.raw, changes), self.base_dir)


class Schedule:
    """Time-varying override of the true model, picklable for worker processes."""

    def __init__(self, spec: Mapping):
        self.spec = dict(spec)
        kind = self.spec.get("type", "constant")
        if kind not in ("constant", "piecewise", "rate"):
            raise ConfigError(f"unknown schedule type {kind!r}")
        self.kind = kind
        if kind == "piecewise":
            pieces = sorted((int(t), dict(th)) for t, th in self.spec["pieces"])
            if not pieces or pieces[0][0] > 1:
                raise ConfigError("piecewise schedule must start at t <= 1")
            self.pieces = pieces
        if kind == "rate":
            self.rate = RateFunction(
                tuple(self.spec.get("psi", DEFAULT_RATE.psi)),
                tuple(self.spec.get("chi", DEFAULT_RATE.chi)),
                tuple(self.spec.get("omega", DEFAULT_RATE.omega)),
                tuple(self.spec.get("phi", DEFAULT_RATE.phi)),
            )
            self.time_scale = float(self.spec.get("time_scale", 1.0))
            self.mapping = {k: self.spec[k] for k in ("link", "service_time") if k in self.spec}
            theta_from_rate(1.0, self.mapping)

    def __call__(self, t: int) -> dict:
        if self.kind == "constant":
            return {}
        if self.kind == "piecewise":
            current = {}
            for start, theta in self.pieces:
                if start <= t:
                    current = theta
            return current
        return theta_from_rate(lambda_rate(self.rate, (t - 1) * self.time_scale), self.mapping)


def make_schedule(spec: Mapping) -> Schedule | None:
    sched = Schedule(spec)
    return None if sched.kind == "constant" else sched


# ---------------------------------------------------------------------------
# experiments

@dataclass
class ExperimentResult:
    out_dir: Path
    traces: dict[int, Path]
    summary: Path
    manifest: Path
    failed: dict[int, str]


def _run_seed(args) -> tuple[int, EpisodeTrace | None, str]:
    setup, seed = args
    try:
        return seed, run_online(setup, seed).trace, ""
    except Exception as exc:  # reported per seed
        return seed, None, f"{type(exc).__name__}: {exc}"


def summarize(traces: list[EpisodeTrace]) -> tuple[list[str], list[list[float]]]:
    """Per-step mean and Student-t 95% interval across episodes for every numeric trace column."""
    header = traces[0].header()
    columns = [h for h in header if h not in ("t", "o")]
    T = min(len(tr) for tr in traces)
    data = {c: np.array([tr.column(c)[:T] for tr in traces]) for c in columns}
    out_header = ["t"] + [f"{c}_{s}" for c in columns for s in ("mean", "ci_low", "ci_high")]
    rows = []
    for i in range(T):
        row = [float(i + 1)]
        for c in columns:
            x = data[c][:, i]
            x = x[np.isfinite(x)]
            if x.size == 0:
                row += [math.nan] * 3
                continue
            mean = float(x.mean())
            if x.size > 1:
                half = float(stats.t.ppf(0.975, x.size - 1) * x.std(ddof=1) / math.sqrt(x.size))
            else:
                half = 0.0
            row += [mean, mean - half, mean + half]
        rows.append(row)
    return out_header, rows


def _version() -> str:
    from . import __version__

    return __version__


def run_experiment(cfg: ScenarioConfig, out_dir: str | Path, threads: int | None = None) -> ExperimentResult:
    """Run every seed, write one trace CSV per seed, a summary CSV and a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    threads = cfg.threads if threads is None else threads
    jobs = [(cfg.setup, s) for s in cfg.seeds]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_seed, jobs))
    else:
        results = [_run_seed(j) for j in jobs]

    traces, paths, failed = [], {}, {}
    for seed, trace, err in results:
        if trace is None:
            failed[seed] = err
            continue
        path = out / f"trace_seed{seed}.csv"
        trace.write_csv(path)
        traces.append(trace)
        paths[seed] = path

    summary = out / "summary.csv"
    if traces:
        header, rows = summarize(traces)
        with open(summary, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([str(int(row[0]))] + [repr(v) for v in row[1:]])

    manifest = out / "manifest.txt"
    entries = {
        "scenario": cfg.scenario,
        "config_hash": cfg.config_hash,
        "seeds": " ".join(map(str, cfg.seeds)),
        "steps": cfg.setup.steps,
        "failed_seeds": " ".join(map(str, sorted(failed))),
        "package_version": _version(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pyyaml": yaml.__version__,
    }
    manifest.write_text("".join(f"{k}={v}\n" for k, v in entries.items()))
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.raw, sort_keys=True))
    return ExperimentResult(out, paths, summary, manifest, failed)
