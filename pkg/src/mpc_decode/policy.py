"""Stochastic sequential policies: the base distribution actions are sampled
from, with tabular, softmax-over-values, and environment-uniform
implementations. The remote HTTP policy lives in ``remote``.

Temperature convention (``alpha``): for alpha > 0 the sampling distribution
is p_i^(1/alpha) renormalized; alpha = 0 is greedy argmax with lowest-index
tie-break, and the reported log-probability is that of the selected action
under the untempered distribution (so greedy rollouts score consistently).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .core import Action, Rollout, StateObs

# World oracle: maps (current observation, action) to the next observation.
World = Callable[[StateObs, Action], StateObs]


class PolicyError(RuntimeError):
    pass


class ScoringUnavailable(PolicyError):
    """The policy cannot assign probabilities to arbitrary given sequences."""


class SupportUnavailable(PolicyError):
    """The policy cannot enumerate its action support."""


@dataclass(frozen=True)
class PolicyContext:
    """Immutable conditioning context: goal, committed steps, observations."""

    goal: str
    committed: tuple[tuple[Action, StateObs], ...] = ()
    initial_obs: Optional[StateObs] = None
    system_preamble: Optional[str] = None

    @property
    def committed_texts(self) -> tuple[str, ...]:
        return tuple(a.text for a, _ in self.committed)

    def current_obs(self) -> Optional[StateObs]:
        if self.committed:
            return self.committed[-1][1]
        return self.initial_obs

    def extend(self, action: Action, obs: StateObs) -> "PolicyContext":
        return PolicyContext(
            goal=self.goal,
            committed=self.committed + ((action, obs),),
            initial_obs=self.initial_obs,
            system_preamble=self.system_preamble,
        )


def render_prompt(ctx: PolicyContext) -> str:
    """Minimal goal+history rendering used by remote policies."""
    parts = []
    if ctx.system_preamble:
        parts.append(ctx.system_preamble)
    parts.append(f"Goal: {ctx.goal}")
    if ctx.initial_obs is not None:
        parts.append(f"Observation: {ctx.initial_obs.text}")
    for action, obs in ctx.committed:
        parts.append(f"Action: {action.text}")
        parts.append(f"Observation: {obs.text}")
    parts.append("Action:")
    return "\n".join(parts)


def temper_logprobs(logp: np.ndarray, alpha: float) -> np.ndarray:
    """Log-probabilities of p^(1/alpha) renormalized; requires alpha > 0."""
    if alpha == 1.0:
        return logp
    with np.errstate(divide="ignore", invalid="ignore"):
        lt = logp / alpha
    m = lt.max()
    if m == -np.inf:
        raise PolicyError("all probabilities are zero")
    return lt - (m + math.log(np.exp(lt - m).sum()))


class Policy:
    """Base policy; subclasses implement distribution(ctx)."""

    def distribution(self, ctx: PolicyContext) -> tuple[tuple[Action, ...], np.ndarray]:
        """Return (actions, log-probabilities) of the base distribution."""
        raise NotImplementedError

    # -- sampling ----------------------------------------------------------

    def _sampling_tables(self, ctx: PolicyContext, alpha: float):
        """(actions, tempered logprobs, cumulative probs); subclasses with
        stable conditionals cache this per (history, alpha)."""
        actions, logp = self.distribution(ctx)
        lt = temper_logprobs(logp, alpha)
        return actions, lt, np.cumsum(np.exp(lt))

    def sample_step(self, ctx: PolicyContext, alpha: float, rng: np.random.Generator) -> tuple[Action, float]:
        if alpha == 0.0:
            actions, logp = self.distribution(ctx)
            i = int(np.argmax(logp))  # argmax takes the lowest index on ties
            return actions[i], float(logp[i])
        actions, lt, cum = self._sampling_tables(ctx, alpha)
        i = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
        i = min(i, len(actions) - 1)
        return actions[i], float(lt[i])

    def sample_step_batch(self, ctx: PolicyContext, alpha: float, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized draw of n i.i.d. steps; returns (indices, logprobs)."""
        if alpha == 0.0:
            actions, logp = self.distribution(ctx)
            i = int(np.argmax(logp))
            return np.full(n, i), np.full(n, float(logp[i]))
        actions, lt, cum = self._sampling_tables(ctx, alpha)
        idx = np.searchsorted(cum, rng.random(n) * cum[-1], side="right")
        idx = np.minimum(idx, len(actions) - 1)
        return idx, lt[idx]

    def rollout(
        self,
        ctx: PolicyContext,
        length: int,
        alpha: float,
        world: Optional[World],
        rng: np.random.Generator,
        created_step: int = 0,
    ) -> Rollout:
        """Sample up to ``length`` future actions, stopping at terminal states.

        ``world`` produces the observation after each action (true environment
        transitions in simulation); policies that can imagine observations
        override predict_obs and are used when world is None.
        """
        if length < 1:
            raise ValueError("rollout length must be >= 1")
        actions: list[Action] = []
        logps: list[float] = []
        obss: list[StateObs] = []
        cur = ctx
        for _ in range(length):
            obs = cur.current_obs()
            if obs is not None and obs.terminal:
                break
            a, lp = self.sample_step(cur, alpha, rng)
            nxt = world(obs, a) if world is not None else self.predict_obs(cur, a, rng)
            actions.append(a)
            logps.append(lp)
            obss.append(nxt)
            cur = cur.extend(a, nxt)
        return Rollout(
            prefix_len=len(ctx.committed),
            actions=tuple(actions),
            action_logprobs=tuple(logps),
            predicted_obs=tuple(obss),
            created_step=created_step,
        )

    def predict_obs(self, ctx: PolicyContext, action: Action, rng: np.random.Generator) -> StateObs:
        raise PolicyError("this policy cannot predict observations; supply a world oracle")

    # -- scoring and support ----------------------------------------------

    def score_sequence(self, ctx: PolicyContext, actions: Sequence[Action], alpha: float = 1.0) -> float:
        """Sum of tempered log-probabilities of the given action sequence."""
        total = 0.0
        cur = ctx
        for a in actions:
            acts, logp = self.distribution(cur)
            texts = [x.text for x in acts]
            try:
                i = texts.index(a.text)
            except ValueError:
                raise PolicyError(f"action {a.text!r} not in policy support") from None
            if alpha == 0.0:
                total += float(logp[i]) if i == int(np.argmax(logp)) else -math.inf
            else:
                total += float(temper_logprobs(logp, alpha)[i])
            cur = cur.extend(a, _PLACEHOLDER_OBS)
        return total

    def support(self, ctx: PolicyContext) -> tuple[Action, ...]:
        return self.distribution(ctx)[0]


# Observation filler for policies whose conditioning ignores observations.
_PLACEHOLDER_OBS = StateObs(text="")


@dataclass(frozen=True)
class TabularPolicySpec:
    """Explicit conditional tables keyed by the committed action texts."""

    action_set: tuple[Action, ...]
    cond_probs: Mapping[tuple[str, ...], tuple[float, ...]]

    def validate(self) -> "TabularPolicySpec":
        n = len(self.action_set)
        for key, vec in self.cond_probs.items():
            if len(vec) != n:
                raise ValueError(f"probability vector for {key!r} has length {len(vec)}, expected {n}")
            if any(p < 0 for p in vec):
                raise ValueError(f"negative probability under {key!r}")
            if abs(sum(vec) - 1.0) > 1e-9:
                raise ValueError(f"probabilities under {key!r} sum to {sum(vec)!r}, not 1")
        return self


class TabularPolicy(Policy):
    def __init__(self, spec: TabularPolicySpec):
        self.spec = spec.validate()
        with np.errstate(divide="ignore"):
            self._logp = {
                key: np.log(np.asarray(vec, dtype=float))
                for key, vec in spec.cond_probs.items()
            }
        self._tables: dict = {}

    def distribution(self, ctx: PolicyContext) -> tuple[tuple[Action, ...], np.ndarray]:
        key = ctx.committed_texts
        if key not in self._logp:
            raise PolicyError(f"tabular policy has no entry for history {key!r}")
        return self.spec.action_set, self._logp[key]

    def _sampling_tables(self, ctx: PolicyContext, alpha: float):
        key = (ctx.committed_texts, alpha)
        hit = self._tables.get(key)
        if hit is None:
            hit = self._tables[key] = super()._sampling_tables(ctx, alpha)
        return hit


@dataclass(frozen=True)
class SoftmaxValueSpec:
    """Stationary prior p(a) proportional to exp(value / prior_temp)."""

    values: tuple[float, ...]
    prior_temp: float
    actions: Optional[tuple[Action, ...]] = None

    def resolved_actions(self) -> tuple[Action, ...]:
        if self.actions is not None:
            return self.actions
        return tuple(Action(text=_value_text(v)) for v in self.values)


def _value_text(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else str(v)


class SoftmaxValuePolicy(Policy):
    def __init__(self, spec: SoftmaxValueSpec):
        if not spec.prior_temp > 0:
            raise ValueError("prior_temp must be > 0")
        if spec.actions is not None and len(spec.actions) != len(spec.values):
            raise ValueError("actions and values lengths differ")
        self.spec = spec
        self._actions = spec.resolved_actions()
        if math.isinf(spec.prior_temp):
            logits = np.zeros(len(spec.values))
        else:
            logits = np.asarray(spec.values, dtype=float) / spec.prior_temp
        self._logp = logits - (logits.max() + math.log(np.exp(logits - logits.max()).sum()))
        self._tables: dict = {}

    def distribution(self, ctx: PolicyContext) -> tuple[tuple[Action, ...], np.ndarray]:
        return self._actions, self._logp

    def _sampling_tables(self, ctx: PolicyContext, alpha: float):
        hit = self._tables.get(alpha)
        if hit is None:
            hit = self._tables[alpha] = super()._sampling_tables(ctx, alpha)
        return hit


class UniformValidPolicy(Policy):
    """Uniform over the environment's currently valid actions.

    Stands in for an instruction-following generator in symbolic domains:
    proposals are always well-formed, but candidate ranking carries no goal
    knowledge, so all goal-seeking must come from the decoding strategy.
    """

    def __init__(self, env):
        self.env = env
        self._by_state: dict = {}
        self._uniform: dict = {}

    def distribution(self, ctx: PolicyContext) -> tuple[tuple[Action, ...], np.ndarray]:
        obs = ctx.current_obs()
        if obs is None:
            raise PolicyError("context has no observation to enumerate valid actions from")
        key = obs.predicates if obs.predicates is not None else obs.text
        acts = self._by_state.get(key)
        if acts is None:
            acts = self._by_state[key] = self.env.valid_actions(obs)
        if not acts:
            raise PolicyError("no valid actions in current state")
        n = len(acts)
        logp = self._uniform.get(n)
        if logp is None:
            logp = self._uniform[n] = np.full(n, -math.log(n))
        return acts, logp

    def score_sequence(self, ctx: PolicyContext, actions: Sequence[Action], alpha: float = 1.0) -> float:
        # The conditional support depends on the true state, so replay the
        # sequence through the environment rather than a placeholder context.
        total = 0.0
        cur = ctx
        for a in actions:
            acts, logp = self.distribution(cur)
            texts = [x.text for x in acts]
            try:
                i = texts.index(a.text)
            except ValueError:
                raise PolicyError(f"action {a.text!r} not in policy support") from None
            if alpha == 0.0:
                total += float(logp[i]) if i == int(np.argmax(logp)) else -math.inf
            else:
                total += float(temper_logprobs(logp, alpha)[i])
            nxt, _, _ = self.env.step(cur.current_obs(), a)
            cur = cur.extend(a, nxt)
        return total


def env_world(env) -> World:
    """Adapt an environment's transition into a rollout world oracle."""

    def world(obs: StateObs, action: Action) -> StateObs:
        nxt, _, _ = env.step(obs, action)
        return nxt

    return world
