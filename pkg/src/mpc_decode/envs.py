"""Deterministic POMDP environments: the list-sum combinatorial task, a
blocks-world planning domain with goal predicates, and a bare positional
sequence environment for policies that carry their own dynamics.

Environments are value-semantic: ``step`` maps an observation to the next
observation without interior mutation, so instances are safe to share.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional

import numpy as np

from .core import Action, StateObs, Trajectory, rng_stream

INVALID_NOTICE = "The action is not valid and therefore takes no effect."


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvInstance:
    id: str
    env_type: str
    goal: str
    horizon: int
    goal_predicates: frozenset[str] = frozenset()
    optimum: Optional[float] = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


class Environment:
    """Shared surface over the concrete environments below."""

    instance: EnvInstance
    symbolic: bool = False
    record: dict  # construction record; suites round-trip through these

    def reset(self, rng: Optional[np.random.Generator] = None) -> StateObs:
        raise NotImplementedError

    def step(self, state: StateObs, action: Action) -> tuple[StateObs, float, bool]:
        raise NotImplementedError

    def valid_actions(self, state: StateObs) -> tuple[Action, ...]:
        raise NotImplementedError

    def objective_j(self, traj: Trajectory) -> float:
        return float(sum(s.reward for s in traj.steps))

    def goal_match(self, state: StateObs) -> float:
        raise EnvError("heuristic unavailable")

    def final_answer(self, traj: Trajectory) -> Optional[str]:
        raise NotImplementedError

    def succeeded(self, traj: Trajectory) -> bool:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# List-sum: choose one integer per slot, maximize the total.
# ---------------------------------------------------------------------------

_SLOT_RE = re.compile(r"slot (\d+) of (\d+)")


@dataclass(frozen=True)
class ListSumSpec:
    slots: int
    alphabet: tuple[int, ...]

    def optimum(self) -> float:
        return float(self.slots * max(self.alphabet))


class ListSumEnv(Environment):
    symbolic = False

    def __init__(self, spec: ListSumSpec, id: str = "list_sum"):
        if spec.slots < 1 or not spec.alphabet:
            raise EnvError("list-sum needs >= 1 slot and a nonempty alphabet")
        self.spec = spec
        self.actions = tuple(Action(text=str(v)) for v in spec.alphabet)
        self._values = {str(v): float(v) for v in spec.alphabet}
        self.instance = EnvInstance(
            id=id,
            env_type="list_sum",
            goal=f"pick {spec.slots} numbers with maximum sum",
            horizon=spec.slots,
            optimum=spec.optimum(),
        )
        self.record = {
            "id": id,
            "type": "list_sum",
            "params": {"slots": spec.slots, "alphabet": list(spec.alphabet)},
        }

    def _render(self, i: int) -> StateObs:
        return StateObs(text=f"slot {i} of {self.spec.slots}", terminal=i >= self.spec.slots)

    def _slot(self, state: StateObs) -> int:
        m = _SLOT_RE.search(state.text)
        if not m:
            raise EnvError(f"unrecognized list-sum state {state.text!r}")
        return int(m.group(1))

    def reset(self, rng=None) -> StateObs:
        return self._render(0)

    def step(self, state: StateObs, action: Action) -> tuple[StateObs, float, bool]:
        if state.terminal:
            raise EnvError("cannot step a terminal state")
        i = self._slot(state)
        value = self._values.get(action.text)
        if value is None:
            same = self._render(i)
            return StateObs(text=f"{INVALID_NOTICE} {same.text}"), 0.0, False
        nxt = self._render(i + 1)
        return nxt, value, nxt.terminal

    def valid_actions(self, state: StateObs) -> tuple[Action, ...]:
        return self.actions

    def final_answer(self, traj: Trajectory) -> Optional[str]:
        if not traj.steps:
            return None
        return ",".join(s.action.text for s in traj.steps)

    def succeeded(self, traj: Trajectory) -> bool:
        return traj.done and self.objective_j(traj) == self.instance.optimum


# ---------------------------------------------------------------------------
# Blocks world: pickup / putdown / stack / unstack over predicate state.
# ---------------------------------------------------------------------------

_PICK_RE = re.compile(r"^(pickup|putdown) (\S+)$")
_STACK_RE = re.compile(r"^(stack|unstack) (\S+) (\S+)$")


@dataclass(frozen=True)
class BlocksState:
    """on maps each block to the block under it or 'table'; holding is the
    single block in the arm, if any. ``clear`` is derived."""

    on: Mapping[str, str]
    holding: Optional[str] = None

    @property
    def blocks(self) -> tuple[str, ...]:
        names = set(self.on) | ({self.holding} if self.holding else set())
        return tuple(sorted(names, key=_block_key))

    def clear(self) -> frozenset[str]:
        under = set(self.on.values())
        return frozenset(
            b for b in self.on if b not in under and b != self.holding
        )

    def to_predicates(self) -> frozenset[str]:
        preds = {f"on({b},{base})" for b, base in self.on.items()}
        preds |= {f"clear({b})" for b in self.clear()}
        if self.holding:
            preds.add(f"holding({self.holding})")
        else:
            preds.add("handempty")
        return frozenset(preds)

    @staticmethod
    def from_predicates(preds: frozenset[str]) -> "BlocksState":
        on = {}
        holding = None
        for p in preds:
            m = re.match(r"^on\((\S+?),(\S+?)\)$", p)
            if m:
                on[m.group(1)] = m.group(2)
                continue
            m = re.match(r"^holding\((\S+?)\)$", p)
            if m:
                holding = m.group(1)
        return BlocksState(on=on, holding=holding)

    def check(self) -> "BlocksState":
        seen = set(self.on) | ({self.holding} if self.holding else set())
        if self.holding is not None and self.holding in self.on:
            raise EnvError(f"held block {self.holding} also has a position")
        for b, base in self.on.items():
            if base != "table" and base not in seen:
                raise EnvError(f"{b} rests on unknown block {base}")
        # no cycles: walking down from any block must reach the table
        for b in self.on:
            slow = b
            hops = 0
            while slow != "table":
                slow = self.on[slow]
                hops += 1
                if hops > len(self.on) + 1:
                    raise EnvError(f"cycle in on-relation at {b}")
        return self


def _block_key(name: str):
    m = re.match(r"^([a-zA-Z]+)(\d+)$", name)
    return (m.group(1), int(m.group(2))) if m else (name, 0)


def _render_blocks(state: BlocksState, goal_done: bool = False) -> str:
    parts = []
    for b in state.blocks:
        if b == state.holding:
            continue
        base = state.on[b]
        parts.append(f"{b} is on the table." if base == "table" else f"{b} is on {base}.")
    if state.holding:
        parts.append(f"You are holding {state.holding}.")
    else:
        parts.append("Robot arm is empty.")
    for b in sorted(state.clear(), key=_block_key):
        parts.append(f"The {b} is clear.")
    if goal_done:
        parts.append("The goal is satisfied.")
    return " ".join(parts)


class BlocksWorldEnv(Environment):
    symbolic = True

    def __init__(self, initial: BlocksState, goal_predicates: frozenset[str],
                 id: str = "blocks", horizon: int = 20, record: Optional[dict] = None):
        if not goal_predicates:
            raise EnvError("degenerate goal")
        self.initial = initial.check()
        self.goal_predicates = frozenset(goal_predicates)
        goal_text = "The goal is to satisfy the following conditions: " + " ".join(
            f"{m.group(1)} is on {m.group(2)}." for m in
            (re.match(r"^on\((\S+?),(\S+?)\)$", p) for p in sorted(goal_predicates, key=_pred_key))
            if m
        )
        self.instance = EnvInstance(
            id=id,
            env_type="blocks",
            goal=goal_text,
            horizon=horizon,
            goal_predicates=self.goal_predicates,
            optimum=1.0,
        )
        self.record = record or {
            "id": id,
            "type": "blocks",
            "params": {
                "on": dict(sorted(initial.on.items())),
                "holding": initial.holding,
                "goal": sorted(goal_predicates),
                "horizon": horizon,
            },
        }

    def _obs(self, state: BlocksState, prefix: str = "") -> StateObs:
        done = self.goal_predicates <= state.to_predicates()
        text = _render_blocks(state, goal_done=done)
        if prefix:
            text = f"{prefix} {text}"
        return StateObs(text=text, predicates=state.to_predicates(), terminal=done)

    def reset(self, rng=None) -> StateObs:
        return self._obs(self.initial)

    def step(self, state: StateObs, action: Action) -> tuple[StateObs, float, bool]:
        if state.terminal:
            raise EnvError("cannot step a terminal state")
        if state.predicates is None:
            raise EnvError("blocks world requires predicate observations")
        st = BlocksState.from_predicates(state.predicates)
        nxt = self._apply(st, action.text)
        if nxt is None:
            # invalid: identical predicates, observation text says so
            return self._obs(st, prefix=INVALID_NOTICE), 0.0, False
        obs = self._obs(nxt)
        return obs, (1.0 if obs.terminal else 0.0), obs.terminal

    def _apply(self, st: BlocksState, text: str) -> Optional[BlocksState]:
        m = _PICK_RE.match(text)
        if m:
            verb, b = m.groups()
            if verb == "pickup":
                if st.holding is None and b in st.clear() and st.on.get(b) == "table":
                    on = {k: v for k, v in st.on.items() if k != b}
                    return BlocksState(on=on, holding=b)
                return None
            if st.holding == b:
                return BlocksState(on={**st.on, b: "table"}, holding=None)
            return None
        m = _STACK_RE.match(text)
        if m:
            verb, x, y = m.groups()
            if x == y:
                return None
            if verb == "stack":
                if st.holding == x and y in st.clear():
                    return BlocksState(on={**st.on, x: y}, holding=None)
                return None
            if st.holding is None and x in st.clear() and st.on.get(x) == y and y != "table":
                on = {k: v for k, v in st.on.items() if k != x}
                return BlocksState(on=on, holding=x)
            return None
        return None

    def valid_actions(self, state: StateObs) -> tuple[Action, ...]:
        if state.predicates is None:
            raise EnvError("blocks world requires predicate observations")
        st = BlocksState.from_predicates(state.predicates)
        out = []
        if st.holding is not None:
            out.append(f"putdown {st.holding}")
            out.extend(f"stack {st.holding} {y}" for y in sorted(st.clear(), key=_block_key))
        else:
            for b in sorted(st.clear(), key=_block_key):
                if st.on.get(b) == "table":
                    out.append(f"pickup {b}")
                else:
                    out.append(f"unstack {b} {st.on[b]}")
        return tuple(Action(text=t, token_count=len(t.split())) for t in out)

    def goal_match(self, state: StateObs) -> float:
        if not self.goal_predicates:
            raise EnvError("degenerate goal")
        if state.predicates is None:
            raise EnvError("heuristic unavailable")
        hit = len(self.goal_predicates & state.predicates)
        return hit / len(self.goal_predicates)

    def final_answer(self, traj: Trajectory) -> Optional[str]:
        if not traj.steps:
            return None
        return "success" if traj.steps[-1].obs.terminal else "fail"

    def succeeded(self, traj: Trajectory) -> bool:
        return bool(traj.steps) and traj.steps[-1].obs.terminal


def _pred_key(p: str):
    m = re.match(r"^on\((\S+?),(\S+?)\)$", p)
    return (_block_key(m.group(1)), m.group(2)) if m else ((p, 0), "")


def make_blocks_env(n_blocks: int, seed: int, id: Optional[str] = None,
                    horizon: int = 20) -> BlocksWorldEnv:
    """Random solvable instance: uniform stacking start, random-tower goal."""
    if n_blocks < 2:
        raise EnvError("need at least two blocks")
    blocks = [f"b{i + 1}" for i in range(n_blocks)]
    for attempt in range(16):
        rng = rng_stream(seed, attempt, 0, "blocks-instance")
        order = list(rng.permutation(n_blocks))
        state = BlocksState(on={}, holding=None)
        on: dict[str, str] = {}
        tops: list[str] = []
        for i in order:
            b = blocks[i]
            # place on table or on a random current top
            if not tops or rng.random() < 0.5:
                on[b] = "table"
            else:
                base = tops.pop(int(rng.integers(len(tops))))
                on[b] = base
            tops.append(b)
        state = BlocksState(on=on, holding=None)
        tower = [blocks[i] for i in rng.permutation(n_blocks)]
        goal = frozenset(f"on({tower[i]},{tower[i + 1]})" for i in range(n_blocks - 1))
        if goal <= state.to_predicates():
            continue  # trivially satisfied; draw a fresh layout
        rec = {
            "id": id or f"blocks-{n_blocks}-{seed}",
            "type": "blocks",
            "params": {"n_blocks": n_blocks, "horizon": horizon},
            "seed": seed,
        }
        return BlocksWorldEnv(state, goal, id=rec["id"], horizon=horizon, record=rec)
    raise EnvError("could not draw a nontrivial instance")


# ---------------------------------------------------------------------------
# Sequence environment: positional observations, no rewards; dynamics live
# entirely in the policy. Used to exercise decoders on tabular policies.
# ---------------------------------------------------------------------------


_STEP_RE = re.compile(r"step (\d+) of (\d+)")


class SequenceEnv(Environment):
    symbolic = False

    def __init__(self, horizon: int, id: str = "sequence"):
        self.instance = EnvInstance(
            id=id, env_type="sequence", goal="emit a sequence", horizon=horizon
        )
        self.record = {"id": id, "type": "sequence", "params": {"horizon": horizon}}
        # observations are purely positional, so precompute the chain
        self._obs = [
            StateObs(text=f"step {i} of {horizon}", terminal=i >= horizon)
            for i in range(horizon + 1)
        ]

    def reset(self, rng=None) -> StateObs:
        return self._obs[0]

    def step(self, state: StateObs, action: Action) -> tuple[StateObs, float, bool]:
        if state.terminal:
            raise EnvError("cannot step a terminal state")
        m = _STEP_RE.search(state.text)
        if not m:
            raise EnvError(f"unrecognized sequence state {state.text!r}")
        i = int(m.group(1)) + 1
        return self._obs[i], 0.0, self._obs[i].terminal

    def valid_actions(self, state: StateObs) -> tuple[Action, ...]:
        raise EnvError("sequence environment has no intrinsic action set")

    def final_answer(self, traj: Trajectory) -> Optional[str]:
        if not traj.steps:
            return None
        return ",".join(s.action.text for s in traj.steps)

    def succeeded(self, traj: Trajectory) -> bool:
        return traj.done


# ---------------------------------------------------------------------------
# Instance suites.
# ---------------------------------------------------------------------------


def make_env(record: dict) -> Environment:
    kind = record.get("type")
    params = record.get("params", {})
    if kind == "list_sum":
        spec = ListSumSpec(slots=params["slots"], alphabet=tuple(params["alphabet"]))
        return ListSumEnv(spec, id=record.get("id", "list_sum"))
    if kind == "blocks":
        if "n_blocks" in params:
            return make_blocks_env(
                params["n_blocks"], record["seed"],
                id=record.get("id"), horizon=params.get("horizon", 20),
            )
        state = BlocksState(on=dict(params["on"]), holding=params.get("holding"))
        return BlocksWorldEnv(
            state, frozenset(params["goal"]),
            id=record.get("id", "blocks"), horizon=params.get("horizon", 20),
            record=record,
        )
    if kind == "sequence":
        return SequenceEnv(horizon=params["horizon"], id=record.get("id", "sequence"))
    raise EnvError(f"unknown instance type {kind!r}")


def save_suite(path, envs: Iterable[Environment]) -> None:
    with open(path, "w") as f:
        for env in envs:
            f.write(json.dumps(env.record, sort_keys=True) + "\n")


def load_suite(path) -> list[Environment]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(make_env(json.loads(line)))
    return out
