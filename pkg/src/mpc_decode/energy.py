"""Rollout scoring: the quantities that drive resampling.

Modes:
  joint_prob      exp(sum of action log-probabilities); exact but shrinks
                  with rollout length, so reserve it for short horizons and
                  enumerable oracles.
  inv_perplexity  exp(mean log-probability); length-normalized default for
                  text policies.
  objective_j     cumulative environment reward of committed + foresight,
                  optionally plus the goal-match fraction of the final
                  foresight state (bridges sparse rewards).
  external_orm    scalar from an external outcome scorer, clamped to [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import numpy as np

from .core import Action, EnergyScore, Rollout, StateObs, Trajectory
from .policy import Policy, PolicyContext, env_world


class EnergyError(RuntimeError):
    pass


class ExternalScorer(Protocol):
    def score(self, text: str) -> float: ...


@dataclass(frozen=True)
class EnergySpec:
    mode: str = "inv_perplexity"
    # objective_j extras
    goal_match_bonus: bool = True
    # score candidates by the exact expected full-horizon joint probability
    # of their first action (enumeration path; finite-support policies only)
    exact_futures: bool = False
    external: Optional[ExternalScorer] = None

    def __post_init__(self):
        if self.mode == "external_orm" and self.external is None:
            raise EnergyError("external_orm mode needs an external scorer")


def _replay_value(rollout: Rollout, ctx: PolicyContext, env, spec: EnergySpec) -> float:
    """J of committed + rollout, recomputed with true environment rewards."""
    obs = ctx.initial_obs
    if obs is None:
        raise EnergyError("objective_j scoring needs ctx.initial_obs")
    total = 0.0
    for a, _ in ctx.committed:
        obs, r, _ = env.step(obs, a)
        total += r
    for a in rollout.actions:
        if obs.terminal:
            break
        obs, r, _ = env.step(obs, a)
        total += r
    if spec.goal_match_bonus and env.symbolic:
        total += env.goal_match(obs)
    return total


def render_candidate(ctx: PolicyContext, rollout: Rollout) -> str:
    lines = [f"Goal: {ctx.goal}"]
    lines += [a.text for a, _ in ctx.committed]
    lines += [a.text for a in rollout.actions]
    return "\n".join(lines)


def score_rollout(rollout: Rollout, ctx: PolicyContext, env, spec: EnergySpec) -> EnergyScore:
    if spec.mode == "joint_prob":
        if len(rollout) == 0:
            raise EnergyError("cannot score an empty rollout")
        value = math.exp(min(0.0, sum(rollout.action_logprobs)))
        return EnergyScore(value=value, mode="joint_prob", basis_len=len(rollout))
    if spec.mode == "inv_perplexity":
        if len(rollout) == 0:
            raise EnergyError("cannot score an empty rollout")
        value = math.exp(min(0.0, sum(rollout.action_logprobs) / len(rollout)))
        return EnergyScore(value=value, mode="inv_perplexity", basis_len=len(rollout))
    if spec.mode == "objective_j":
        if env is None:
            raise EnergyError("objective_j scoring needs an environment")
        value = _replay_value(rollout, ctx, env, spec)
        if not math.isfinite(value):
            raise EnergyError("non-finite objective value")
        return EnergyScore(
            value=value, mode="objective_j",
            basis_len=len(ctx.committed) + len(rollout),
        )
    if spec.mode == "external_orm":
        raw = spec.external.score(render_candidate(ctx, rollout))
        if not math.isfinite(raw):
            raise EnergyError("external scorer returned a non-finite value")
        value = min(1.0, max(0.0, raw))
        if value != raw:
            clamped = getattr(spec.external, "clamped_count", None)
            if clamped is not None:
                spec.external.clamped_count = clamped + 1
        return EnergyScore(value=value, mode="external_orm", basis_len=len(rollout))
    raise EnergyError(f"unknown energy mode {spec.mode!r}")


def score_trajectory(traj: Trajectory, logprobs: Sequence[float], env, spec: EnergySpec) -> float:
    """Score a complete trajectory under the same conventions as rollouts.

    Used by rank-and-select baselines so their selection criterion matches
    the decoder's energy.
    """
    if spec.mode == "joint_prob":
        return math.exp(min(0.0, sum(logprobs))) if logprobs else 1.0
    if spec.mode == "inv_perplexity":
        return math.exp(min(0.0, sum(logprobs) / len(logprobs))) if logprobs else 1.0
    if spec.mode == "objective_j":
        value = env.objective_j(traj)
        if spec.goal_match_bonus and env.symbolic and traj.steps:
            value += env.goal_match(traj.steps[-1].obs)
        return value
    if spec.mode == "external_orm":
        text = "\n".join([f"Goal: {traj.goal}"] + [s.action.text for s in traj.steps])
        raw = spec.external.score(text)
        return min(1.0, max(0.0, raw))
    raise EnergyError(f"unknown energy mode {spec.mode!r}")


def expected_future_return(
    ctx: PolicyContext,
    action: Action,
    k: int,
    foresight_len: int,
    policy: Policy,
    env,
    spec: EnergySpec,
    rng: np.random.Generator,
    alpha: float = 1.0,
) -> float:
    """Monte Carlo estimate of the mean rollout score over continuations of
    ``action``. foresight_len = 0 scores the action alone."""
    if k < 1:
        raise EnergyError("k must be >= 1")
    obs = ctx.current_obs()
    if obs is None or obs.terminal:
        raise EnergyError("cannot expand from a missing or terminal state")
    lp = policy.score_sequence(ctx, [action], alpha)
    nxt, _, _ = env.step(obs, action)
    ctx1 = ctx.extend(action, nxt)
    world = env_world(env)
    total = 0.0
    for _ in range(k):
        if foresight_len > 0 and not nxt.terminal:
            cont = policy.rollout(ctx1, foresight_len, alpha, world, rng)
        else:
            cont = None
        combined = Rollout(
            prefix_len=len(ctx.committed),
            actions=(action,) + (cont.actions if cont else ()),
            action_logprobs=(lp,) + (cont.action_logprobs if cont else ()),
            predicted_obs=(nxt,) + (cont.predicted_obs if cont else ()),
        )
        total += score_rollout(combined, ctx, env, spec).value
    return total / k


def exact_tail_table(
    policy: Policy,
    env,
    ctx: PolicyContext,
    depth: int,
    alpha: float = 1.0,
) -> dict[str, float]:
    """Exact E over continuations of the joint (tempered) probability of
    (action, tail...) spanning ``depth`` actions, per support action.

    E[P | a] = p(a | ctx) * M(ctx + a, depth - 1) where
    M(h, d) = sum_a p(a | h)^2 * M(h + a, d - 1), M(., 0) = 1.
    Enumeration cost is |support|^depth; callers guard the depth.
    """
    if depth < 1:
        raise EnergyError("depth must be >= 1")

    def dist(cur: PolicyContext):
        from .policy import temper_logprobs

        actions, logp = policy.distribution(cur)
        logp = np.asarray(logp, dtype=float)
        if alpha == 0.0:
            out = np.full(len(logp), -np.inf)
            out[int(np.argmax(logp))] = 0.0
            return actions, out
        if alpha != 1.0:
            logp = temper_logprobs(logp, alpha)
        return actions, logp

    def m(cur: PolicyContext, remaining: int) -> float:
        obs = cur.current_obs()
        if remaining == 0 or (obs is not None and obs.terminal):
            return 1.0
        actions, logp = dist(cur)
        total = 0.0
        for i, a in enumerate(actions):
            p = math.exp(logp[i])
            if p == 0.0:
                continue
            nxt, _, _ = env.step(obs, a)
            total += p * p * m(cur.extend(a, nxt), remaining - 1)
        return total

    obs = ctx.current_obs()
    if obs is None:
        raise EnergyError("context carries no observation")
    actions, logp = dist(ctx)
    table = {}
    for i, a in enumerate(actions):
        p = math.exp(logp[i])
        nxt, _, _ = env.step(obs, a)
        table[a.text] = p * m(ctx.extend(a, nxt), depth - 1)
    return table


def exact_expected_future_return(
    ctx: PolicyContext,
    action: Action,
    policy: Policy,
    env,
    depth: int,
    alpha: float = 1.0,
) -> float:
    """Enumeration counterpart of expected_future_return for joint_prob
    scoring on finite-support policies."""
    return exact_tail_table(policy, env, ctx, depth, alpha)[action.text]
