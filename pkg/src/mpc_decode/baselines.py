"""Reference decoding strategies: autoregressive sampling, best-of-n
rank-and-select, self-consistency voting, action-level beam search, and a
simplified UCT search.

Beam search here operates on whole actions with stochastic expansion (the
token-level variant needs generator internals this library does not own)
and results are labeled accordingly. UCT defaults (ucb_c=1.0, expand=4) are
this library's choices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .core import Action, StateObs, Step, Trajectory
from .energy import EnergySpec, score_rollout, score_trajectory
from .envs import Environment
from .policy import Policy, PolicyContext, env_world
from .core import Rollout


class BaselineError(RuntimeError):
    pass


@dataclass(frozen=True)
class BaselineConfig:
    method: str = "autoregressive"
    n: int = 1
    beam_width: int = 4
    expand: int = 4
    ucb_c: float = 1.0
    iterations: int = 100
    rollout_len: int = 6
    alpha: float = 1.0
    seed: int = 0

    def validate(self) -> "BaselineConfig":
        if self.n < 1:
            raise BaselineError("n must be >= 1")
        if self.beam_width < 1:
            raise BaselineError("beam_width must be >= 1")
        if self.expand < 1:
            raise BaselineError("expand must be >= 1")
        if self.ucb_c < 0:
            raise BaselineError("ucb_c must be >= 0")
        if self.iterations < 1:
            raise BaselineError("iterations must be >= 1")
        return self


def autoregressive_decode(
    policy: Policy,
    env: Environment,
    alpha: float,
    max_steps: int,
    rng: np.random.Generator,
    initial_obs: Optional[StateObs] = None,
) -> tuple[Trajectory, list[float], int]:
    """Sample each step from the policy given history only.

    Returns (trajectory, per-step logprobs, generated tokens).
    """
    obs0 = initial_obs if initial_obs is not None else env.reset(rng)
    obs = obs0
    committed: list[tuple[Action, StateObs]] = []
    rewards: list[float] = []
    logps: list[float] = []
    tokens = 0
    done = False
    for _ in range(max_steps):
        if obs.terminal:
            break
        ctx = PolicyContext(goal=env.instance.goal, committed=tuple(committed), initial_obs=obs0)
        a, lp = policy.sample_step(ctx, alpha, rng)
        tokens += a.token_count
        obs, r, done = env.step(obs, a)
        committed.append((a, obs))
        rewards.append(r)
        logps.append(lp)
        if done:
            break
    traj = Trajectory(
        goal=env.instance.goal,
        steps=tuple(Step(a, o, r) for (a, o), r in zip(committed, rewards)),
        done=done,
    )
    return replace(traj, final_answer=env.final_answer(traj)), logps, tokens


def best_of_n(
    policy: Policy,
    env: Environment,
    spec: EnergySpec,
    n: int,
    alpha: float,
    max_steps: int,
    rng: np.random.Generator,
) -> tuple[Trajectory, dict]:
    """n independent full decodes; keep the argmax by trajectory score
    (lowest index on exact ties). Token accounting covers all n."""
    if n < 1:
        raise BaselineError("n must be >= 1")
    best = None
    best_score = -math.inf
    best_idx = -1
    tokens = 0
    scores = []
    for i in range(n):
        traj, logps, tk = autoregressive_decode(policy, env, alpha, max_steps, rng)
        tokens += tk
        s = score_trajectory(traj, logps, env, spec)
        scores.append(s)
        if s > best_score:
            best, best_score, best_idx = traj, s, i
    return best, {"tokens": tokens, "scores": scores, "chosen": best_idx}


def self_consistency(
    policy: Policy,
    env: Environment,
    n: int,
    alpha: float,
    max_steps: int,
    rng: np.random.Generator,
    weighted: bool = False,
    spec: Optional[EnergySpec] = None,
) -> tuple[str, dict]:
    """Majority (or score-weighted) vote over final answers of n decodes.
    Trajectories with no extractable answer are excluded from the vote."""
    votes: dict[str, float] = {}
    tokens = 0
    for _ in range(n):
        traj, logps, tk = autoregressive_decode(policy, env, alpha, max_steps, rng)
        tokens += tk
        answer = traj.final_answer
        if answer is None:
            continue
        w = score_trajectory(traj, logps, env, spec) if weighted and spec else 1.0
        votes[answer] = votes.get(answer, 0.0) + w
    if not votes:
        raise BaselineError("no trajectory produced an extractable answer")
    top = max(votes.values())
    winner = min(a for a, w in votes.items() if w == top)  # lexicographic ties
    return winner, {"tokens": tokens, "votes": votes}


@dataclass
class _Beam:
    committed: tuple[tuple[Action, StateObs], ...]
    rewards: tuple[float, ...]
    obs: StateObs
    logp: float
    done: bool


def prune_beams(children: list, width: int) -> list:
    """Keep the ``width`` highest-scoring children, stably: nothing dropped
    scores strictly above anything kept."""
    return sorted(children, key=lambda b: -b.logp)[:width]


def beam_search(
    policy: Policy,
    env: Environment,
    beam_width: int,
    expand: int,
    max_steps: int,
    rng: np.random.Generator,
    alpha: float = 1.0,
) -> tuple[Trajectory, int]:
    """Action-level beam search with stochastic expansion, ranked by
    cumulative log-probability. Returns the best complete trajectory, or the
    best partial one if nothing completes within max_steps."""
    if beam_width < 1 or expand < 1:
        raise BaselineError("beam_width and expand must be >= 1")
    obs0 = env.reset(rng)
    beams = [_Beam(committed=(), rewards=(), obs=obs0, logp=0.0, done=False)]
    finished: list[_Beam] = []
    tokens = 0
    for _ in range(max_steps):
        live = [b for b in beams if not b.done]
        if not live:
            break
        children: list[_Beam] = []
        for b in live:
            ctx = PolicyContext(goal=env.instance.goal, committed=b.committed, initial_obs=obs0)
            seen: set[str] = set()
            for _ in range(expand):
                a, lp = policy.sample_step(ctx, alpha, rng)
                tokens += a.token_count
                if a.text in seen:
                    continue
                seen.add(a.text)
                nxt, r, done = env.step(b.obs, a)
                children.append(
                    _Beam(
                        committed=b.committed + ((a, nxt),),
                        rewards=b.rewards + (r,),
                        obs=nxt,
                        logp=b.logp + lp,
                        done=done,
                    )
                )
        beams = prune_beams(children, beam_width)
        finished.extend(b for b in beams if b.done)
    pool = finished if finished else beams
    if not pool:
        raise BaselineError("beam search produced no candidates")
    best = max(pool, key=lambda b: b.logp)
    traj = Trajectory(
        goal=env.instance.goal,
        steps=tuple(Step(a, o, r) for (a, o), r in zip(best.committed, best.rewards)),
        done=best.done,
    )
    return replace(traj, final_answer=env.final_answer(traj)), tokens


class _Node:
    __slots__ = ("action", "logp", "obs", "children", "visits", "value_sum")

    def __init__(self, action: Optional[Action], logp: float, obs: StateObs):
        self.action = action
        self.logp = logp
        self.obs = obs
        self.children: list[_Node] = []
        self.visits = 0
        self.value_sum = 0.0

    def mean(self) -> float:
        return self.value_sum / self.visits if self.visits else 0.0


def mcts_decode(
    policy: Policy,
    env: Environment,
    spec: EnergySpec,
    iterations: int,
    ucb_c: float,
    expand: int,
    rollout_len: int,
    max_steps: int,
    rng: np.random.Generator,
    alpha: float = 1.0,
) -> tuple[Trajectory, int]:
    """Simplified UCT: select by mean + ucb_c * sqrt(ln N_parent / N_child),
    expand by sampling up to ``expand`` distinct actions, evaluate leaves
    with a rollout scored by ``spec``, back up means. Commits the most
    visited root child each round, then re-roots."""
    if iterations < 1:
        raise BaselineError("iterations must be >= 1")
    obs0 = env.reset(rng)
    world = env_world(env)
    tokens = 0
    committed: list[tuple[Action, StateObs]] = []
    rewards: list[float] = []
    done = False
    root = _Node(None, 0.0, obs0)

    def ctx_for(prefix: list[tuple[Action, StateObs]]) -> PolicyContext:
        return PolicyContext(goal=env.instance.goal, committed=tuple(prefix), initial_obs=obs0)

    def select(node: _Node) -> _Node:
        best, best_score = None, -math.inf
        for ch in node.children:
            if ch.visits == 0:
                score = math.inf if ucb_c > 0 else 0.0
            else:
                score = ch.mean() + ucb_c * math.sqrt(math.log(max(node.visits, 1)) / ch.visits)
            if score > best_score:
                best, best_score = ch, score
        return best

    def expand_node(node: _Node, prefix: list[tuple[Action, StateObs]]) -> None:
        nonlocal tokens
        ctx = ctx_for(prefix)
        seen: set[str] = set()
        for _ in range(expand):
            a, lp = policy.sample_step(ctx, alpha, rng)
            tokens += a.token_count
            if a.text in seen:
                continue
            seen.add(a.text)
            nxt, _, _ = env.step(node.obs, a)
            node.children.append(_Node(a, lp, nxt))

    def evaluate(path: list[_Node], prefix: list[tuple[Action, StateObs]]) -> float:
        # Value of the full candidate (tree path below the commit root plus
        # a sampled continuation), scored from the committed context so that
        # values are comparable across tree depths.
        nonlocal tokens
        node = path[-1]
        cont_actions: tuple[Action, ...] = ()
        cont_lps: tuple[float, ...] = ()
        cont_obs: tuple[StateObs, ...] = ()
        if rollout_len > 0 and not node.obs.terminal:
            cont = policy.rollout(ctx_for(prefix), rollout_len, alpha, world, rng)
            tokens += cont.fresh_tokens()
            cont_actions, cont_lps, cont_obs = cont.actions, cont.action_logprobs, cont.predicted_obs
        below = path[1:]  # exclude the commit root
        combined = Rollout(
            prefix_len=len(committed),
            actions=tuple(n.action for n in below) + cont_actions,
            action_logprobs=tuple(n.logp for n in below) + cont_lps,
            predicted_obs=tuple(n.obs for n in below) + cont_obs,
        )
        return score_rollout(combined, ctx_for(committed), env, spec).value

    for _ in range(max_steps):
        if root.obs.terminal or done:
            break
        for _ in range(iterations):
            node = root
            path = [root]
            prefix = list(committed)
            while node.children:
                node = select(node)
                path.append(node)
                prefix.append((node.action, node.obs))
            if not node.obs.terminal and not node.children:
                expand_node(node, prefix)
                if node.children:
                    node = select(node)
                    path.append(node)
                    prefix.append((node.action, node.obs))
            value = evaluate(path, prefix) if len(path) > 1 else 0.0
            for n in path:
                n.visits += 1
                n.value_sum += value
        if not root.children:
            break
        best = max(root.children, key=lambda ch: ch.visits)  # max keeps lowest index on ties
        nxt_obs, r, done = env.step(root.obs, best.action)
        committed.append((best.action, nxt_obs))
        rewards.append(r)
        root = best
        root.obs = nxt_obs
        root.action = None  # the committed prefix now owns this action
        root.logp = 0.0
        # value scales are relative to the commit root, so carried-over
        # statistics are stale after committing; keep structure, reset stats
        stack = [root]
        while stack:
            n = stack.pop()
            n.visits = 0
            n.value_sum = 0.0
            stack.extend(n.children)
    traj = Trajectory(
        goal=env.instance.goal,
        steps=tuple(Step(a, o, r) for (a, o), r in zip(committed, rewards)),
        done=done,
    )
    return replace(traj, final_answer=env.final_answer(traj)), tokens
