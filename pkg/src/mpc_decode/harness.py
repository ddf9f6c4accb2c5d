"""Experiment runner: configured single runs, parameter sweeps, the list-sum
sample-efficiency simulation, Pareto frontier extraction, and CSV emission.

Results are one CSV row per (instance, repeat, sweep point), deterministic
given the root seed except for wall-time columns. A sidecar JSON records the
spec hash, seed, and code version.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .baselines import (
    BaselineConfig,
    autoregressive_decode,
    beam_search,
    best_of_n,
    mcts_decode,
    self_consistency,
)
from .core import ConfigError, RunConfig, rng_stream, validate_config
from .diagnostics import flops
from .energy import EnergySpec
from .engine import enumerative_mpc_decode, predictive_decode
from .envs import Environment, ListSumEnv, ListSumSpec, load_suite
from .policy import (
    Policy,
    SoftmaxValuePolicy,
    SoftmaxValueSpec,
    TabularPolicy,
    TabularPolicySpec,
    UniformValidPolicy,
)
from .core import Action

METHODS = (
    "predictive",
    "autoregressive",
    "best_of_n",
    "self_consistency",
    "beam",
    "mcts",
    "enumerative_mpc",
)

RESULT_COLUMNS_TAIL = (
    "success",
    "objective_j",
    "answer",
    "tokens",
    "flops",
    "recycled_hits",
    "wall_ms",
    "error",
)


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    method: str
    env_suite: str
    policy: object  # path or inline policy record
    run: RunConfig = RunConfig()
    baseline: BaselineConfig = BaselineConfig()
    sweep: dict = field(default_factory=dict)
    repeats: int = 1
    budget_axis: str = "flops"
    model_params: float = 8e9
    workers: int = 1
    goal_match_bonus: bool = True

    def validate(self) -> "ExperimentSpec":
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.budget_axis not in ("tokens", "flops"):
            raise ConfigError("budget_axis must be 'tokens' or 'flops'")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        run_fields = {f.name for f in dataclasses.fields(RunConfig)}
        base_fields = {f.name for f in dataclasses.fields(BaselineConfig)}
        for key in self.sweep:
            if key not in run_fields | base_fields:
                raise ConfigError(f"sweep parameter {key!r} names no tunable field")
        validate_config(self.run)
        self.baseline.validate()
        return self


# ---------------------------------------------------------------------------
# Policy references.
# ---------------------------------------------------------------------------


def load_policy(ref, env: Optional[Environment] = None) -> Policy:
    """Build a policy from an inline record or a JSON file path."""
    if isinstance(ref, (str, os.PathLike)):
        with open(ref) as f:
            ref = json.load(f)
    if not isinstance(ref, dict) or "type" not in ref:
        raise ConfigError("policy reference must be a record with a 'type'")
    kind = ref["type"]
    if kind == "tabular":
        actions = tuple(
            Action(text=t, token_count=c)
            for t, c in zip(ref["actions"], ref.get("token_counts") or [1] * len(ref["actions"]))
        )
        cond = {
            tuple(entry["prefix"]): tuple(entry["probs"]) for entry in ref["cond_probs"]
        }
        return TabularPolicy(TabularPolicySpec(action_set=actions, cond_probs=cond))
    if kind == "softmax_value":
        actions = None
        if "actions" in ref:
            actions = tuple(Action(text=t) for t in ref["actions"])
        temp = ref["prior_temp"]
        temp = math.inf if temp in ("inf", None) else float(temp)
        return SoftmaxValuePolicy(
            SoftmaxValueSpec(values=tuple(ref["values"]), prior_temp=temp, actions=actions)
        )
    if kind == "uniform_valid":
        if env is None:
            raise ConfigError("uniform_valid policy needs an environment")
        return UniformValidPolicy(env)
    if kind == "remote":
        from .remote import RemoteConfig, RemotePolicy

        cfg_fields = {f.name for f in dataclasses.fields(RemoteConfig)}
        kwargs = {k: v for k, v in ref.items() if k in cfg_fields}
        unknown = set(ref) - cfg_fields - {"type"}
        if unknown:
            raise ConfigError(f"unknown remote policy fields {sorted(unknown)}")
        return RemotePolicy(RemoteConfig(**kwargs))
    raise ConfigError(f"unknown policy type {kind!r}")


# ---------------------------------------------------------------------------
# Single-run dispatch.
# ---------------------------------------------------------------------------


def _row_seed(root_seed: int, instance_idx: int, repeat: int, sweep_idx: int) -> int:
    g = rng_stream(root_seed, instance_idx, repeat, f"row-{sweep_idx}")
    return int(g.integers(0, 2 ** 63 - 1))


def _energy_spec(cfg: RunConfig, goal_match_bonus: bool) -> EnergySpec:
    return EnergySpec(mode=cfg.energy_mode, goal_match_bonus=goal_match_bonus)


def run_single(
    method: str,
    policy: Policy,
    env: Environment,
    run_cfg: RunConfig,
    baseline_cfg: BaselineConfig,
    goal_match_bonus: bool = True,
) -> dict:
    """Execute one episode-level run; returns success/J/answer/cost fields."""
    seed = run_cfg.seed
    t0 = time.perf_counter()
    recycled = 0
    if method == "predictive":
        spec = _energy_spec(run_cfg, goal_match_bonus)
        traj, acct = predictive_decode(policy, env, spec, run_cfg)
        tokens = acct.fresh_tokens
        recycled = acct.recycled_hits
    elif method == "autoregressive":
        rng = rng_stream(seed, 0, 0, "baseline")
        traj, _, tokens = autoregressive_decode(
            policy, env, baseline_cfg.alpha, run_cfg.max_steps, rng
        )
    elif method == "best_of_n":
        rng = rng_stream(seed, 0, 0, "baseline")
        spec = _energy_spec(run_cfg, goal_match_bonus)
        traj, aux = best_of_n(
            policy, env, spec, baseline_cfg.n, baseline_cfg.alpha, run_cfg.max_steps, rng
        )
        tokens = aux["tokens"]
    elif method == "self_consistency":
        rng = rng_stream(seed, 0, 0, "baseline")
        spec = _energy_spec(run_cfg, goal_match_bonus)
        answer, aux = self_consistency(
            policy, env, baseline_cfg.n, baseline_cfg.alpha, run_cfg.max_steps, rng,
            weighted=True, spec=spec,
        )
        return {
            "success": "",
            "objective_j": "",
            "answer": answer,
            "tokens": aux["tokens"],
            "recycled_hits": 0,
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        }
    elif method == "beam":
        rng = rng_stream(seed, 0, 0, "baseline")
        traj, tokens = beam_search(
            policy, env, baseline_cfg.beam_width, baseline_cfg.expand,
            run_cfg.max_steps, rng, baseline_cfg.alpha,
        )
    elif method == "mcts":
        rng = rng_stream(seed, 0, 0, "baseline")
        spec = _energy_spec(run_cfg, goal_match_bonus)
        traj, tokens = mcts_decode(
            policy, env, spec, baseline_cfg.iterations, baseline_cfg.ucb_c,
            baseline_cfg.expand, baseline_cfg.rollout_len, run_cfg.max_steps, rng,
            baseline_cfg.alpha,
        )
    elif method == "enumerative_mpc":
        spec = _energy_spec(run_cfg, goal_match_bonus)
        traj, sampled = enumerative_mpc_decode(
            policy, env, spec, baseline_cfg.n, seed, max_steps=run_cfg.max_steps,
            alpha=baseline_cfg.alpha,
        )
        tokens = sampled
    else:
        raise ConfigError(f"unknown method {method!r}")
    return {
        "success": int(env.succeeded(traj)),
        "objective_j": env.objective_j(traj),
        "answer": traj.final_answer or "",
        "tokens": tokens,
        "recycled_hits": recycled,
        "wall_ms": (time.perf_counter() - t0) * 1e3,
    }


# ---------------------------------------------------------------------------
# Experiment loop.
# ---------------------------------------------------------------------------


def _sweep_points(sweep: dict) -> list[dict]:
    if not sweep:
        return [{}]
    keys = sorted(sweep)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(sweep[k] for k in keys))]


def _apply_point(run_cfg: RunConfig, baseline_cfg: BaselineConfig, point: dict):
    run_fields = {f.name for f in dataclasses.fields(RunConfig)}
    run_over = {k: v for k, v in point.items() if k in run_fields}
    base_over = {k: v for k, v in point.items() if k not in run_fields}
    return replace(run_cfg, **run_over), replace(baseline_cfg, **base_over)


def run_experiment(
    spec: ExperimentSpec,
    out_dir: Optional[str] = None,
    root_seed: Optional[int] = None,
) -> list[dict]:
    spec.validate()
    seed = root_seed if root_seed is not None else spec.run.seed
    envs = load_suite(spec.env_suite)
    if not envs:
        raise ConfigError(f"suite {spec.env_suite!r} is empty")
    points = _sweep_points(spec.sweep)
    sweep_keys = sorted(spec.sweep)

    tasks = []
    for instance_idx, env in enumerate(envs):
        for repeat in range(spec.repeats):
            for sweep_idx, point in enumerate(points):
                tasks.append((instance_idx, env, repeat, sweep_idx, point))

    def one(task):
        instance_idx, env, repeat, sweep_idx, point = task
        run_cfg, baseline_cfg = _apply_point(spec.run, spec.baseline, point)
        run_cfg = replace(
            run_cfg,
            seed=_row_seed(seed, instance_idx, repeat, sweep_idx),
            max_steps=min(run_cfg.max_steps, env.instance.horizon),
        )
        policy = load_policy(spec.policy, env)
        row = {
            "experiment": spec.name,
            "instance_id": env.instance.id,
            "repeat": repeat,
            "method": spec.method,
            **{k: point[k] for k in sweep_keys},
            "success": "",
            "objective_j": "",
            "answer": "",
            "tokens": 0,
            "flops": 0.0,
            "recycled_hits": 0,
            "wall_ms": 0.0,
            "error": "",
        }
        try:
            result = run_single(
                spec.method, policy, env, run_cfg, baseline_cfg, spec.goal_match_bonus
            )
            row.update(result)
            row["flops"] = flops(int(row["tokens"]), int(spec.model_params))
        except Exception as e:  # per-instance failures become rows
            row["error"] = f"{type(e).__name__}: {e}"
        return (instance_idx, repeat, sweep_idx), row

    if spec.workers > 1:
        with ThreadPoolExecutor(max_workers=spec.workers) as pool:
            keyed = list(pool.map(one, tasks))
    else:
        keyed = [one(t) for t in tasks]
    keyed.sort(key=lambda kr: kr[0])
    rows = [r for _, r in keyed]

    if out_dir is not None:
        columns = ["experiment", "instance_id", "repeat", "method", *sweep_keys, *RESULT_COLUMNS_TAIL]
        write_results(rows, columns, out_dir, name="results", meta=_spec_meta(spec, seed))
    return rows


def _spec_meta(spec: ExperimentSpec, seed: int) -> dict:
    blob = json.dumps(_spec_record(spec), sort_keys=True).encode("utf8")
    return {
        "spec_hash": hashlib.sha256(blob).hexdigest(),
        "seed": seed,
        "version": __version__,
    }


def _spec_record(spec: ExperimentSpec) -> dict:
    rec = dataclasses.asdict(spec)
    rec["policy"] = spec.policy if isinstance(spec.policy, (str, dict)) else str(spec.policy)
    return rec


def write_results(rows: Sequence[dict], columns: Sequence[str], out_dir, name="results", meta=None) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{name}.csv")
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow(r)
    if meta is not None:
        with open(os.path.join(out_dir, f"{name}_meta.json"), "w") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
            f.write("\n")
    return path


def read_results(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------------------
# Sample-efficiency simulation on the list-sum task.
#
# Budget pairing: a budget B buys the rank-and-select baseline B = k|A|
# complete trajectories, and buys each decoding variant the matched per-step
# allowance of the same k: k continuations per action per step for the
# enumerative variant, k|A| rollouts per step for the resampling variant.
# The samples_used column reports what each method actually consumed in
# full-horizon trajectory equivalents (partial rollouts pro-rated by
# length), which makes the decoders' larger per-problem totals visible.
# ---------------------------------------------------------------------------

SIM_COLUMNS = (
    "scale", "prior_temp", "budget", "repeat", "method",
    "success", "samples_used", "actions_sampled",
)


def _sim_policy(alphabet: tuple[int, ...], prior_temp: float, env: ListSumEnv) -> SoftmaxValuePolicy:
    return SoftmaxValuePolicy(
        SoftmaxValueSpec(
            values=tuple(float(v) for v in alphabet),
            prior_temp=prior_temp,
            actions=env.actions,
        )
    )


def enum_mpc_budget_k(budget: int, n_actions: int) -> int:
    """Continuations per action per step bought by ``budget``."""
    return max(1, budget // n_actions)


def sir_budget_k(budget: int) -> int:
    """Rollouts per step bought by ``budget``."""
    return max(1, budget)


def simulate_sample_efficiency(
    scales: Sequence[int],
    alphabet_size: int,
    prior_temps: Sequence[float],
    budgets: Sequence[int],
    repeats: int,
    seed: int = 0,
    sir_tau: float = 1.0,
    out_dir: Optional[str] = None,
) -> list[dict]:
    """Exact-mode pass@budget comparison of rank-and-select sampling against
    both decoding variants, at matched trajectory budgets."""
    if not scales or not prior_temps or not budgets:
        raise ConfigError("scales, prior_temps, and budgets must be nonempty")
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    alphabet = tuple(range(alphabet_size))
    rows = []
    spec_j = EnergySpec(mode="objective_j", goal_match_bonus=False)
    for scale_idx, T in enumerate(scales):
        env = ListSumEnv(ListSumSpec(slots=T, alphabet=alphabet), id=f"list_sum_T{T}")
        optimum = env.instance.optimum
        for pt_idx, pt in enumerate(prior_temps):
            policy = _sim_policy(alphabet, pt, env)
            for b_idx, B in enumerate(budgets):
                for rep in range(repeats):
                    tag = scale_idx * 10007 + pt_idx * 101 + b_idx
                    base = {
                        "scale": T,
                        "prior_temp": pt,
                        "budget": B,
                        "repeat": rep,
                    }
                    # rank-and-select over B complete decodes
                    rng = rng_stream(seed, tag, rep, "sim-bon")
                    traj, aux = best_of_n(policy, env, spec_j, B, 1.0, T, rng)
                    rows.append({
                        **base, "method": "best_of_n",
                        "success": int(env.objective_j(traj) == optimum),
                        "samples_used": float(B),
                        "actions_sampled": aux["tokens"],
                    })
                    # per-action enumerative decoding
                    k = enum_mpc_budget_k(B, alphabet_size)
                    row_seed = _row_seed(seed, tag, rep, 1)
                    traj, sampled = enumerative_mpc_decode(policy, env, spec_j, k, row_seed)
                    rows.append({
                        **base, "method": "mpc_enumerative",
                        "success": int(env.objective_j(traj) == optimum),
                        "samples_used": sampled / T,
                        "actions_sampled": sampled,
                    })
                    # foresight-resampling decoding
                    K = sir_budget_k(B)
                    cfg = RunConfig(
                        k_samples=K, foresight_len=T, resample_temp=sir_tau,
                        policy_temp=1.0, max_steps=T, energy_mode="objective_j",
                        seed=_row_seed(seed, tag, rep, 2),
                    )
                    traj, acct = predictive_decode(policy, env, spec_j, cfg)
                    rows.append({
                        **base, "method": "mpc_resample",
                        "success": int(env.objective_j(traj) == optimum),
                        "samples_used": acct.fresh_tokens / T,
                        "actions_sampled": acct.fresh_tokens,
                    })
    if out_dir is not None:
        write_results(rows, SIM_COLUMNS, out_dir, name="simulation",
                      meta={"seed": seed, "version": __version__})
    return rows


def summarize_pass_rates(rows: Sequence[dict]) -> dict[tuple, float]:
    """Mean success per (scale, prior_temp, budget, method)."""
    sums: dict[tuple, list[float]] = {}
    for r in rows:
        key = (float(r["scale"]), float(r["prior_temp"]), float(r["budget"]), r["method"])
        sums.setdefault(key, []).append(float(r["success"]))
    return {k: sum(v) / len(v) for k, v in sums.items()}


# ---------------------------------------------------------------------------
# Pareto frontier.
# ---------------------------------------------------------------------------


def pareto_frontier(rows: Sequence[dict], x_key: str = "flops", y_key: str = "success") -> list[dict]:
    """Rows not dominated by any other row (lower-or-equal x, higher-or-equal
    y, strict somewhere). Duplicate points keep the earliest row. Sorted by x."""
    if not rows:
        raise ConfigError("no rows")
    pts = []
    for i, r in enumerate(rows):
        x, y = float(r[x_key]), float(r[y_key])
        if not (math.isfinite(x) and math.isfinite(y)):
            raise ConfigError(f"row {i} has non-finite ({x_key}, {y_key})")
        pts.append((x, y, i))
    keep = []
    for x, y, i in pts:
        dominated = False
        for x2, y2, j in pts:
            if i == j:
                continue
            if x2 <= x and y2 >= y and (x2 < x or y2 > y):
                dominated = True
                break
            if x2 == x and y2 == y and j < i:
                dominated = True  # duplicate; earlier row represents it
                break
        if not dominated:
            keep.append((x, i))
    keep.sort()
    return [rows[i] for _, i in keep]
