"""Shared fixtures and independent enumeration oracles.

The oracles here work directly on raw probability tensors (never through
the library's policy/energy code paths) so that distributional tests check
the implementation against independently derived ground truth.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from mpc_decode import Action, TabularPolicy, TabularPolicySpec

ACTION_TEXTS = ("a", "b", "c", "d", "e", "f", "g", "h")


def random_tabular_tables(n_actions: int, horizon: int, seed: int, conc: float = 2.0):
    """Dirichlet conditional tables for every prefix, as raw tuples."""
    rng = np.random.default_rng(seed)
    texts = ACTION_TEXTS[:n_actions]
    tables: dict[tuple[str, ...], tuple[float, ...]] = {}

    def fill(prefix):
        if len(prefix) == horizon:
            return
        tables[prefix] = tuple(rng.dirichlet(conc * np.ones(n_actions)))
        for t in texts:
            fill(prefix + (t,))

    fill(())
    return texts, tables


def tabular_policy_from_tables(texts, tables) -> TabularPolicy:
    return TabularPolicy(
        TabularPolicySpec(
            action_set=tuple(Action(t) for t in texts),
            cond_probs=tables,
        )
    )


def random_tabular_policy(n_actions: int, horizon: int, seed: int, conc: float = 2.0):
    texts, tables = random_tabular_tables(n_actions, horizon, seed, conc)
    return tabular_policy_from_tables(texts, tables), (texts, tables)


# ---------------------------------------------------------------------------
# Enumeration oracles over raw tables.
# ---------------------------------------------------------------------------


def enumerate_sequences(texts, tables, horizon: int):
    """All (sequence, joint probability) pairs, computed from raw tables."""
    out = []

    def walk(prefix, prob):
        if len(prefix) == horizon:
            out.append((prefix, prob))
            return
        probs = tables[prefix]
        for t, p in zip(texts, probs):
            walk(prefix + (t,), prob * p)

    walk((), 1.0)
    return out


def oracle_expected_tail(texts, tables, horizon: int) -> dict[str, float]:
    """E over continuations of the joint sequence probability, per first
    action: E[P | a] = sum_tail pi(tail | a) * P(a, tail)."""
    seqs = enumerate_sequences(texts, tables, horizon)
    first_p = dict(zip(texts, tables[()]))
    acc = {t: 0.0 for t in texts}
    for seq, prob in seqs:
        a = seq[0]
        # pi(seq without weighting) = prob; pi(tail | a) = prob / pi(a)
        acc[a] += (prob / first_p[a]) * prob
    return acc


def oracle_eq6_first_action(texts, tables, horizon: int, tau: float) -> np.ndarray:
    """Target reweighted distribution: pi(a) * exp(E[P | a] / tau)."""
    tail = oracle_expected_tail(texts, tables, horizon)
    p0 = np.array(tables[()])
    w = p0 * np.exp(np.array([tail[t] for t in texts]) / tau)
    return w / w.sum()


def oracle_finite_k_law(p0: np.ndarray, weights: np.ndarray, k: int) -> np.ndarray:
    """Exact committed-first-action law of K-candidate importance resampling
    when each candidate's weight depends only on its first action:

      P(commit a) = E_{n ~ Multinomial(k, p0)} [ n_a w_a / sum_b n_b w_b ]

    enumerated over all count vectors.
    """
    n_actions = len(p0)
    out = np.zeros(n_actions)
    logp0 = np.log(np.maximum(p0, 1e-300))
    logfact_k = math.lgamma(k + 1)
    for head in itertools.product(range(k + 1), repeat=n_actions - 1):
        rest = k - sum(head)
        if rest < 0:
            continue
        counts = np.array([*head, rest], dtype=float)
        log_prob = (
            logfact_k
            - sum(math.lgamma(c + 1) for c in counts)
            + float((counts * logp0).sum())
        )
        denom = float((counts * weights).sum())
        if denom <= 0:
            continue
        out += math.exp(log_prob) * counts * weights / denom
    return out


def oracle_rollout_ebm_first_action(texts, tables, horizon: int, tau: float) -> np.ndarray:
    """First-action marginal of the rollout-level reweighted distribution
    sum_r pi(r) exp(P(r)/tau): the many-candidate limit when every sampled
    rollout is its own candidate."""
    seqs = enumerate_sequences(texts, tables, horizon)
    acc = {t: 0.0 for t in texts}
    for seq, prob in seqs:
        acc[seq[0]] += prob * math.exp(prob / tau)
    v = np.array([acc[t] for t in texts])
    return v / v.sum()


def tv_distance(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


# ---------------------------------------------------------------------------
# Hand-built trap fixtures.
# ---------------------------------------------------------------------------


def trap_tables():
    """Two actions, two steps. Greedy prefers 'a' (0.6) whose best tail
    reaches joint 0.3; 'b' leads to the global best sequence (0.4) and the
    larger expected tail (0.328 vs 0.30)."""
    texts = ("a", "b")
    tables = {
        (): (0.6, 0.4),
        ("a",): (0.5, 0.5),
        ("b",): (0.9, 0.1),
    }
    return texts, tables


def myopic_trap_tables():
    """Gap fixture: greedy path tops out at 0.3 while the support holds a
    0.4 sequence, so the gap is exactly 0.1."""
    texts = ("a", "b")
    tables = {
        (): (0.6, 0.4),
        ("a",): (0.5, 0.5),
        ("b",): (1.0, 0.0),
    }
    return texts, tables
