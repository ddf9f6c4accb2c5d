"""The receding-horizon decoding loop: sample K foresight rollouts, resample
one through the exponentiated-score categorical, commit its first action,
repeat. Includes the foresight pool that recycles previously sampled
rollouts whose prefix matches the committed history, and the per-action
enumerative variant used in sample-efficiency studies.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .core import (
    Action,
    EnergyScore,
    Rollout,
    RunConfig,
    StateObs,
    Step,
    Trajectory,
    rng_stream,
    validate_config,
)
from .energy import EnergySpec, exact_tail_table, score_rollout
from .envs import Environment
from .policy import Policy, PolicyContext, env_world


class EngineError(RuntimeError):
    pass


@dataclass
class EpisodeAccounting:
    """Per-episode cost and bookkeeping record."""

    steps: int = 0
    fresh_tokens: int = 0
    recycled_hits: int = 0
    candidates_per_step: list[int] = field(default_factory=list)
    prefix_checks: int = 0
    prefix_failures: int = 0
    wall_ms: float = 0.0


@dataclass(frozen=True)
class CandidateSet:
    rollouts: tuple[Rollout, ...]
    weights: tuple[float, ...]
    source: tuple[str, ...]  # "fresh" | "recycled" per rollout

    def __post_init__(self):
        if not (len(self.rollouts) == len(self.weights) == len(self.source)):
            raise EngineError("candidate set field lengths differ")
        if any(w < 0 for w in self.weights):
            raise EngineError("candidate weights must be nonnegative")
        if self.weights and not any(w > 0 for w in self.weights):
            raise EngineError("at least one candidate weight must be positive")


def probs_from_logweights(logw: np.ndarray) -> np.ndarray:
    logw = np.asarray(logw, dtype=float)
    if logw.size == 0:
        raise EngineError("no candidates to resample")
    if not np.any(np.isfinite(logw)):
        raise EngineError("all candidate scores are non-finite")
    logw = logw - np.where(np.isfinite(logw), logw, -np.inf).max(axis=-1, keepdims=True)
    w = np.exp(logw)
    return w / w.sum(axis=-1, keepdims=True)


def categorical_weights(scores: np.ndarray, tau: float) -> np.ndarray:
    """softmax(scores / tau), formed in the log domain with max subtraction."""
    scores = np.asarray(scores, dtype=float)
    with np.errstate(invalid="ignore"):
        logw = np.where(np.isfinite(scores), scores / tau, -np.inf)
    return probs_from_logweights(logw)


def categorical_draw(probs: np.ndarray, rng: np.random.Generator) -> int:
    cum = np.cumsum(probs)
    i = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    return min(i, len(probs) - 1)


def categorical_draw_batch(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Row-wise categorical draws for an (episodes, K) probability matrix."""
    cum = np.cumsum(probs, axis=1)
    u = rng.random((probs.shape[0], 1)) * cum[:, -1:]
    return np.minimum((u > cum).sum(axis=1), probs.shape[1] - 1)


def resample(candidates: CandidateSet, tau: float, rng: np.random.Generator) -> int:
    """Draw an index with probability exp(s_j/tau) / sum_k exp(s_k/tau)."""
    scores = np.array([r.score.value for r in candidates.rollouts])
    return categorical_draw(categorical_weights(scores, tau), rng)


# ---------------------------------------------------------------------------
# Foresight pool.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PoolEntry:
    start_step: int
    prefix_texts: tuple[str, ...]  # committed actions when the rollout was drawn
    actions: tuple[Action, ...]
    action_logprobs: tuple[float, ...]
    predicted_obs: tuple[StateObs, ...]


class TrajectoryPool:
    """Bounded FIFO of sampled foresights, cleared at episode end."""

    def __init__(self, cap: int):
        self.cap = cap
        self.entries: list[PoolEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def insert(self, rollout: Rollout, step: int, prefix_texts: tuple[str, ...]) -> None:
        if self.cap == 0 or len(rollout) == 0:
            return
        self.entries.append(
            PoolEntry(
                start_step=step,
                prefix_texts=prefix_texts,
                actions=rollout.actions,
                action_logprobs=rollout.action_logprobs,
                predicted_obs=rollout.predicted_obs,
            )
        )
        if len(self.entries) > self.cap:
            del self.entries[: len(self.entries) - self.cap]

    def retrieve(
        self, committed_texts: tuple[str, ...], step: int,
        accounting: Optional[EpisodeAccounting] = None,
    ) -> list[Rollout]:
        """Residual suffixes of entries that agree with the committed actions
        from their start step through step - 1 and still have unused actions.

        Every hit is verified against the full committed prefix; a mismatch
        is a soundness bug, not a recoverable condition.
        """
        out = []
        for e in self.entries:
            if e.start_step > step:
                continue
            used = step - e.start_step
            if used >= len(e.actions):
                continue  # fully consumed
            if tuple(a.text for a in e.actions[:used]) != committed_texts[e.start_step:step]:
                continue
            if accounting is not None:
                accounting.prefix_checks += 1
            reconstructed = e.prefix_texts + tuple(a.text for a in e.actions[:used])
            if reconstructed != committed_texts[:step]:
                if accounting is not None:
                    accounting.prefix_failures += 1
                raise EngineError(
                    f"recycled prefix mismatch at step {step}: {reconstructed!r} != {committed_texts[:step]!r}"
                )
            out.append(
                Rollout(
                    prefix_len=step,
                    actions=e.actions[used:],
                    action_logprobs=e.action_logprobs[used:],
                    predicted_obs=e.predicted_obs[used:],
                    created_step=e.start_step,
                )
            )
        return out

    def clear(self) -> None:
        self.entries.clear()


# ---------------------------------------------------------------------------
# Main decoding loop.
# ---------------------------------------------------------------------------


def _exact_scores(policy, env, ctx, depth, alpha, cache) -> dict[str, float]:
    key = ctx.committed_texts
    if key not in cache:
        cache[key] = exact_tail_table(policy, env, ctx, depth, alpha)
    return cache[key]


def _score_candidates(
    rollouts: Sequence[Rollout],
    ctx: PolicyContext,
    env,
    spec: EnergySpec,
    policy: Policy,
    remaining: int,
    alpha: float,
    exact_cache: dict,
) -> list[Rollout]:
    scored = []
    for r in rollouts:
        if spec.exact_futures:
            table = _exact_scores(policy, env, ctx, max(1, remaining), alpha, exact_cache)
            s = EnergyScore(
                value=table[r.actions[0].text], mode="joint_prob", basis_len=remaining
            )
        else:
            s = score_rollout(r, ctx, env, spec)
        scored.append(r.with_score(s))
    return scored


def _group_first_actions(rollouts: Sequence[Rollout]) -> list[list[int]]:
    order: dict[str, list[int]] = {}
    for i, r in enumerate(rollouts):
        order.setdefault(r.actions[0].text, []).append(i)
    return list(order.values())


def predictive_decode(
    policy: Policy,
    env: Environment,
    spec: EnergySpec,
    cfg: RunConfig,
    episode_id: int = 0,
    initial_obs: Optional[StateObs] = None,
) -> tuple[Trajectory, EpisodeAccounting]:
    """Run one episode of foresight-resample-commit decoding.

    Per step: draw K fresh rollouts of up to foresight_len + 1 actions (plus
    any recycled pool hits), score them, resample one via the categorical
    over exp(score/tau), and commit only its first action. The pool is
    per-episode; recycled candidates never add fresh tokens.
    """
    validate_config(cfg)
    t0 = time.perf_counter()
    acct = EpisodeAccounting()
    seed = cfg.seed
    obs0 = initial_obs if initial_obs is not None else env.reset(
        rng_stream(seed, episode_id, 0, "reset")
    )
    world = env_world(env)
    pool = TrajectoryPool(cfg.pool_cap) if cfg.recycle else None
    exact_cache: dict = {}
    committed: list[tuple[Action, StateObs]] = []
    rewards: list[float] = []
    obs = obs0
    done = False

    for t in range(cfg.max_steps):
        if obs.terminal:
            break
        ctx = PolicyContext(goal=env.instance.goal, committed=tuple(committed), initial_obs=obs0)
        committed_texts = ctx.committed_texts

        recycled = pool.retrieve(committed_texts, t, acct) if pool is not None else []
        n_fresh = cfg.k_samples
        if cfg.recycle_budget_mode:
            n_fresh = max(0, cfg.k_samples - len(recycled))
        roll_rng = rng_stream(seed, episode_id, t, "foresight")
        fresh = [
            policy.rollout(ctx, cfg.foresight_len + 1, cfg.policy_temp, world, roll_rng, created_step=t)
            for _ in range(n_fresh)
        ]
        candidates = fresh + recycled
        if not candidates:
            raise EngineError(f"no candidates at step {t} (K={cfg.k_samples}, recycled=0)")
        sources = ("fresh",) * len(fresh) + ("recycled",) * len(recycled)

        remaining = env.instance.horizon - t
        candidates = _score_candidates(
            candidates, ctx, env, spec, policy, remaining, cfg.policy_temp, exact_cache
        )
        scores = np.array([r.score.value for r in candidates])

        if cfg.aggregate_first_action:
            # Group candidates by first action and weight each group by its
            # mass times exp(mean group score / tau): the expectation reading.
            # Mass is spread uniformly within a group, so drawing a member
            # commits the same action distribution as drawing the group.
            groups = _group_first_actions(candidates)
            logw = np.array([
                math.log(len(g)) + scores[g].mean() / cfg.resample_temp for g in groups
            ])
            group_probs = probs_from_logweights(logw)
            weights = np.zeros(len(candidates))
            for g, p in zip(groups, group_probs):
                weights[g] = p / len(g)
        else:
            weights = categorical_weights(scores, cfg.resample_temp)
        cset = CandidateSet(tuple(candidates), tuple(weights), sources)
        res_rng = rng_stream(seed, episode_id, t, "resample")
        chosen = cset.rollouts[categorical_draw(weights, res_rng)]

        action = chosen.actions[0]
        obs, reward, done = env.step(obs, action)
        committed.append((action, obs))
        rewards.append(reward)

        acct.steps += 1
        acct.fresh_tokens += sum(r.fresh_tokens() for r in fresh)
        acct.recycled_hits += len(recycled)
        acct.candidates_per_step.append(len(candidates))
        if pool is not None:
            for r in fresh:
                pool.insert(r, t, committed_texts)
        if done:
            break

    if pool is not None:
        pool.clear()
    traj = Trajectory(
        goal=env.instance.goal,
        steps=tuple(Step(a, o, r) for (a, o), r in zip(committed, rewards)),
        done=done,
    )
    traj = replace(traj, final_answer=env.final_answer(traj))
    acct.wall_ms = (time.perf_counter() - t0) * 1e3
    return traj, acct


# ---------------------------------------------------------------------------
# Per-action enumerative variant: for every support action, sample k
# continuations and keep the action whose best continuation scores highest.
# ---------------------------------------------------------------------------


def enumerative_mpc_step(
    ctx: PolicyContext,
    policy: Policy,
    env: Environment,
    spec: EnergySpec,
    k_per_action: int,
    cont_len: int,
    rng: np.random.Generator,
    alpha: float = 1.0,
) -> tuple[Action, int]:
    """Returns (chosen action, actions sampled). Ties break to the lowest
    support index."""
    if k_per_action < 1:
        raise EngineError("k_per_action must be >= 1")
    support = policy.support(ctx)
    obs = ctx.current_obs()
    world = env_world(env)
    best_action = None
    best_value = -math.inf
    sampled = 0
    for a in support:
        lp = policy.score_sequence(ctx, [a], alpha)
        nxt, _, _ = env.step(obs, a)
        ctx1 = ctx.extend(a, nxt)
        value = -math.inf
        for _ in range(k_per_action):
            if cont_len > 0 and not nxt.terminal:
                cont = policy.rollout(ctx1, cont_len, alpha, world, rng)
                sampled += len(cont)
            else:
                cont = None
            combined = Rollout(
                prefix_len=len(ctx.committed),
                actions=(a,) + (cont.actions if cont else ()),
                action_logprobs=(lp,) + (cont.action_logprobs if cont else ()),
                predicted_obs=(nxt,) + (cont.predicted_obs if cont else ()),
            )
            value = max(value, score_rollout(combined, ctx, env, spec).value)
            if cont is None:
                break  # no continuation variance to sample over
        if value > best_value:
            best_value = value
            best_action = a
    return best_action, sampled


def enumerative_mpc_decode(
    policy: Policy,
    env: Environment,
    spec: EnergySpec,
    k_per_action: int,
    seed: int,
    episode_id: int = 0,
    max_steps: Optional[int] = None,
    alpha: float = 1.0,
) -> tuple[Trajectory, int]:
    """Full-episode loop around enumerative_mpc_step; continuations always
    extend to the environment horizon. Returns (trajectory, actions sampled)."""
    horizon = env.instance.horizon
    steps = max_steps if max_steps is not None else horizon
    obs0 = env.reset(rng_stream(seed, episode_id, 0, "reset"))
    obs = obs0
    committed: list[tuple[Action, StateObs]] = []
    rewards: list[float] = []
    sampled = 0
    done = False
    for t in range(steps):
        if obs.terminal:
            break
        ctx = PolicyContext(goal=env.instance.goal, committed=tuple(committed), initial_obs=obs0)
        rng = rng_stream(seed, episode_id, t, "enum-mpc")
        action, n = enumerative_mpc_step(
            ctx, policy, env, spec, k_per_action, max(0, horizon - t - 1), rng, alpha
        )
        sampled += n
        obs, reward, done = env.step(obs, action)
        committed.append((action, obs))
        rewards.append(reward)
        if done:
            break
    traj = Trajectory(
        goal=env.instance.goal,
        steps=tuple(Step(a, o, r) for (a, o), r in zip(committed, rewards)),
        done=done,
    )
    return replace(traj, final_answer=env.final_answer(traj)), sampled


# ---------------------------------------------------------------------------
# Vectorized measurement of the committed-first-action law. Only valid with
# exact-futures scoring, where a candidate's weight depends on its first
# action alone; shares the categorical kernels with the sequential loop.
# ---------------------------------------------------------------------------


def first_action_distribution(
    policy: Policy,
    env: Environment,
    cfg: RunConfig,
    episodes: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Empirical distribution (over support order) of the first committed
    action across many episodes, under exact-futures joint_prob scoring."""
    obs0 = env.reset(rng_stream(cfg.seed, 0, 0, "reset"))
    ctx = PolicyContext(goal=env.instance.goal, committed=(), initial_obs=obs0)
    table = exact_tail_table(policy, env, ctx, env.instance.horizon, cfg.policy_temp)
    support = policy.support(ctx)
    w = np.array([table[a.text] for a in support])

    K = cfg.k_samples
    idx, _ = policy.sample_step_batch(ctx, cfg.policy_temp, episodes * K, rng)
    idx = idx.reshape(episodes, K)
    probs = categorical_weights(w[idx], cfg.resample_temp)
    picked = idx[np.arange(episodes), categorical_draw_batch(probs, rng)]
    return np.bincount(picked, minlength=len(support)) / episodes
