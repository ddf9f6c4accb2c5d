"""Core value types, run configuration, RNG stream derivation, and the
line-oriented trajectory record format shared by every other module.

All types here are immutable values: safe to share across worker threads
and to use as dict keys where hashable.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

SCHEMA_VERSION = 1

ENERGY_MODES = ("joint_prob", "inv_perplexity", "objective_j", "external_orm")


class ConfigError(ValueError):
    """A RunConfig (or experiment config) bound was violated."""


class DecodeError(ValueError):
    """A serialized record could not be parsed."""


@dataclass(frozen=True)
class Action:
    """One committed or proposed step, with its generation cost in tokens."""

    text: str
    token_count: int = 1

    def __post_init__(self):
        if not self.text:
            raise ValueError("Action.text must be nonempty")
        if self.token_count < 1:
            raise ValueError("Action.token_count must be >= 1")


@dataclass(frozen=True)
class StateObs:
    """Observation of environment state.

    ``predicates`` is present iff the producing environment is symbolic
    (e.g. blocks world); positional/text-only environments leave it None.
    """

    text: str
    predicates: Optional[frozenset[str]] = None
    terminal: bool = False


@dataclass(frozen=True)
class Step:
    action: Action
    obs: StateObs
    reward: float


@dataclass(frozen=True)
class Trajectory:
    """Committed history of steps toward a goal; the unit of evaluation."""

    goal: str
    steps: tuple[Step, ...] = ()
    done: bool = False
    final_answer: Optional[str] = None

    @property
    def actions(self) -> tuple[Action, ...]:
        return tuple(s.action for s in self.steps)

    @property
    def rewards(self) -> tuple[float, ...]:
        return tuple(s.reward for s in self.steps)

    def total_reward(self) -> float:
        return float(sum(s.reward for s in self.steps))


def validate_trajectory(t: Trajectory, max_steps: Optional[int] = None) -> Trajectory:
    for i, s in enumerate(t.steps):
        if not math.isfinite(s.reward):
            raise ValueError(f"step {i}: reward must be finite")
        if s.obs.terminal and i != len(t.steps) - 1:
            raise ValueError(f"step {i}: terminal step must be last")
    if max_steps is not None and len(t.steps) > max_steps:
        raise ValueError(f"trajectory has {len(t.steps)} steps, max_steps={max_steps}")
    return t


@dataclass(frozen=True)
class EnergyScore:
    """Scalar score of a rollout under a declared energy mode."""

    value: float
    mode: str
    basis_len: int

    def __post_init__(self):
        if self.mode not in ENERGY_MODES:
            raise ValueError(f"unknown energy mode {self.mode!r}")
        if not math.isfinite(self.value):
            raise ValueError("EnergyScore.value must be finite")
        if self.mode == "joint_prob" and not (0.0 <= self.value <= 1.0):
            raise ValueError("joint_prob score must lie in [0, 1]")
        if self.mode == "inv_perplexity" and not (0.0 < self.value <= 1.0):
            raise ValueError("inv_perplexity score must lie in (0, 1]")


@dataclass(frozen=True)
class Rollout:
    """A foresight continuation of the committed prefix.

    ``actions[i]`` was sampled with (tempered, natural-log) probability
    ``action_logprobs[i]``; ``predicted_obs[i]`` is the observation after
    taking it, produced either by the true environment or by a world model.
    """

    prefix_len: int
    actions: tuple[Action, ...]
    action_logprobs: tuple[float, ...]
    predicted_obs: tuple[StateObs, ...]
    score: Optional[EnergyScore] = None
    created_step: int = 0

    def __post_init__(self):
        if not (len(self.actions) == len(self.action_logprobs) == len(self.predicted_obs)):
            raise ValueError("rollout actions/logprobs/predicted_obs lengths differ")

    def __len__(self) -> int:
        return len(self.actions)

    def with_score(self, score: EnergyScore) -> "Rollout":
        return Rollout(
            prefix_len=self.prefix_len,
            actions=self.actions,
            action_logprobs=self.action_logprobs,
            predicted_obs=self.predicted_obs,
            score=score,
            created_step=self.created_step,
        )

    def fresh_tokens(self) -> int:
        return sum(a.token_count for a in self.actions)


@dataclass(frozen=True)
class RunConfig:
    """All decoder tunables.

    Defaults follow the hyperparameters that worked across the original
    experiments (K=8, six steps of foresight, tau=0.01, alpha=1.0).
    """

    k_samples: int = 8
    foresight_len: int = 6
    resample_temp: float = 0.01
    policy_temp: float = 1.0
    max_steps: int = 20
    seed: int = 0
    recycle: bool = False
    energy_mode: str = "inv_perplexity"
    pool_cap: int = 4096
    # Optional engine behaviors; see engine module.
    aggregate_first_action: bool = False
    recycle_budget_mode: bool = False


def validate_config(cfg: RunConfig) -> RunConfig:
    """Return cfg unchanged if every bound holds; raise ConfigError naming
    the first violated field otherwise."""
    if cfg.k_samples < 1:
        raise ConfigError("k_samples must be >= 1")
    if cfg.foresight_len < 0:
        raise ConfigError("foresight_len must be >= 0")
    if not (cfg.resample_temp > 0):
        raise ConfigError("resample_temp must be > 0")
    if not (cfg.policy_temp >= 0):
        raise ConfigError("policy_temp must be >= 0")
    if cfg.max_steps < 1:
        raise ConfigError("max_steps must be >= 1")
    if not (0 <= cfg.seed < 2 ** 64):
        raise ConfigError("seed must be a 64-bit unsigned integer")
    if cfg.energy_mode not in ENERGY_MODES:
        raise ConfigError(f"energy_mode must be one of {ENERGY_MODES}")
    if cfg.pool_cap < 0:
        raise ConfigError("pool_cap must be >= 0")
    return cfg


def rng_stream(seed: int, episode: int, step: int, purpose: str) -> np.random.Generator:
    """Derive an independent RNG stream from a root seed.

    Streams are keyed by (episode, step, purpose) so that toggling features
    that consume extra randomness (e.g. recycling) cannot shift the streams
    used elsewhere. Identical keys always yield identical streams. Uses the
    counter partition of Philox: distinct keys select disjoint blocks.
    """
    purpose_key = _PURPOSE_KEYS.get(purpose)
    if purpose_key is None:
        purpose_key = _PURPOSE_KEYS[purpose] = zlib.crc32(purpose.encode("utf8"))
    bg = np.random.Philox(
        key=seed & 0xFFFFFFFFFFFFFFFF,
        counter=[0, episode & MASK64, step & MASK64, purpose_key],
    )
    return np.random.Generator(bg)


MASK64 = 0xFFFFFFFFFFFFFFFF
_PURPOSE_KEYS: dict[str, int] = {}


# ---------------------------------------------------------------------------
# Line-oriented trajectory records.
#
# One JSON object per line, schema fields exactly:
#   version, goal, steps[{action, tokens, obs, reward}], done, final_answer
# Encoding is canonical (sorted predicates, no whitespace) so equal values
# encode to identical bytes.
# ---------------------------------------------------------------------------


def _obs_to_json(obs: StateObs) -> dict:
    return {
        "text": obs.text,
        "predicates": sorted(obs.predicates) if obs.predicates is not None else None,
        "terminal": obs.terminal,
    }


def _obs_from_json(d: object, where: str) -> StateObs:
    if not isinstance(d, dict):
        raise DecodeError(f"{where}: obs must be an object")
    for key in ("text", "predicates", "terminal"):
        if key not in d:
            raise DecodeError(f"{where}: missing field '{key}'")
    preds = d["predicates"]
    return StateObs(
        text=d["text"],
        predicates=frozenset(preds) if preds is not None else None,
        terminal=bool(d["terminal"]),
    )


def encode_trajectory(t: Trajectory) -> str:
    """Render a trajectory as one self-describing record line."""
    rec = {
        "version": SCHEMA_VERSION,
        "goal": t.goal,
        "steps": [
            {
                "action": s.action.text,
                "tokens": s.action.token_count,
                "obs": _obs_to_json(s.obs),
                "reward": s.reward,
            }
            for s in t.steps
        ],
        "done": t.done,
        "final_answer": t.final_answer,
    }
    return json.dumps(rec, separators=(",", ":"), sort_keys=True)


def decode_trajectory(line: str) -> Trajectory:
    """Parse a record line back into a Trajectory.

    Malformed lines raise DecodeError with the offending field or character
    position.
    """
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as e:
        raise DecodeError(f"invalid record at char {e.pos}: {e.msg}") from e
    if not isinstance(rec, dict):
        raise DecodeError("record must be a JSON object")
    for key in ("version", "goal", "steps", "done", "final_answer"):
        if key not in rec:
            raise DecodeError(f"missing field '{key}'")
    if rec["version"] != SCHEMA_VERSION:
        raise DecodeError(f"unsupported schema version {rec['version']!r}")
    steps = []
    for i, s in enumerate(rec["steps"]):
        where = f"steps[{i}]"
        if not isinstance(s, dict):
            raise DecodeError(f"{where}: step must be an object")
        for key in ("action", "tokens", "obs", "reward"):
            if key not in s:
                raise DecodeError(f"{where}: missing field '{key}'")
        steps.append(
            Step(
                action=Action(text=s["action"], token_count=s["tokens"]),
                obs=_obs_from_json(s["obs"], where),
                reward=float(s["reward"]),
            )
        )
    return Trajectory(
        goal=rec["goal"],
        steps=tuple(steps),
        done=bool(rec["done"]),
        final_answer=rec["final_answer"],
    )


def write_trajectories(path, trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w") as f:
        for t in trajectories:
            f.write(encode_trajectory(t) + "\n")


def read_trajectories(path) -> list[Trajectory]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(decode_trajectory(line))
    return out
