"""Measurement tools: the myopia gap between greedy decoding and the best
sequence in support, calibration metrics, generation diversity, inference
FLOPS, and pass@k."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import Action
from .policy import _PLACEHOLDER_OBS as _FILLER
from .policy import Policy, PolicyContext

MYOPIC_THRESHOLD = 0.01  # gaps above this classify a decode as myopic

ENUMERATION_GUARD = 10 ** 6


class DiagnosticsError(RuntimeError):
    pass


@dataclass(frozen=True)
class CalibrationRecord:
    trajectory_id: str
    step: int
    score: float
    label: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError("score must lie in [0, 1]")
        if not (0.0 <= self.label <= 1.0):
            raise ValueError("label must lie in [0, 1]")


# ---------------------------------------------------------------------------
# Myopia gap: max sequence probability minus the greedy sequence's.
# ---------------------------------------------------------------------------


def greedy_sequence(policy: Policy, horizon: int, ctx: Optional[PolicyContext] = None) -> list[Action]:
    cur = ctx if ctx is not None else PolicyContext(goal="")
    out = []
    for _ in range(horizon):
        actions, logp = policy.distribution(cur)
        a = actions[int(np.argmax(logp))]
        out.append(a)
        cur = cur.extend(a, _FILLER)
    return out


def myopic_gap_exact(policy: Policy, horizon: int) -> float:
    """p* = max over all sequences of the joint probability, minus the
    greedy sequence's joint probability. Exact, by full enumeration."""
    base = PolicyContext(goal="")
    n = len(policy.support(base))
    if n ** horizon > ENUMERATION_GUARD:
        raise DiagnosticsError(
            f"enumeration of {n}^{horizon} sequences exceeds guard {ENUMERATION_GUARD}"
        )

    best = -math.inf

    def walk(cur: PolicyContext, depth: int, logp: float):
        nonlocal best
        if depth == horizon:
            best = max(best, logp)
            return
        actions, lps = policy.distribution(cur)
        for a, lp in zip(actions, lps):
            if lp == -math.inf:
                continue
            walk(cur.extend(a, _FILLER), depth + 1, logp + float(lp))

    walk(base, 0, 0.0)
    greedy = greedy_sequence(policy, horizon)
    greedy_logp = policy.score_sequence(base, greedy, alpha=1.0)
    return math.exp(best) - math.exp(greedy_logp)


def myopic_gap_approx(
    policy: Policy,
    candidates: Sequence[Sequence[Action]],
    horizon: Optional[int] = None,
    threshold: float = MYOPIC_THRESHOLD,
) -> tuple[float, bool]:
    """Gap estimated against a candidate set of non-myopic decodes.

    Returns (p_hat, myopic) where myopic means p_hat > threshold. The
    comparison happens at the probability level.
    """
    if not candidates:
        raise DiagnosticsError("need at least one candidate sequence")
    base = PolicyContext(goal="")
    h = horizon if horizon is not None else max(len(c) for c in candidates)
    greedy = greedy_sequence(policy, h)
    greedy_p = math.exp(policy.score_sequence(base, greedy, alpha=1.0))
    best_p = max(math.exp(policy.score_sequence(base, list(c), alpha=1.0)) for c in candidates)
    gap = best_p - greedy_p
    return gap, gap > threshold


# ---------------------------------------------------------------------------
# Calibration.
# ---------------------------------------------------------------------------


def ece(records: Sequence[CalibrationRecord], bins: int = 10) -> float:
    """Expected calibration error over equal-width score bins: the
    count-weighted mean of |mean score - mean label| per bin."""
    if not records:
        raise DiagnosticsError("no calibration records")
    if bins < 1:
        raise DiagnosticsError("bins must be >= 1")
    scores = np.array([r.score for r in records])
    labels = np.array([r.label for r in records])
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.digitize(scores, edges[1:-1], right=False), 0, bins - 1)
    total = 0.0
    for b in range(bins):
        mask = idx == b
        k = int(mask.sum())
        if k == 0:
            continue
        total += k * abs(scores[mask].mean() - labels[mask].mean())
    return total / len(records)


def ece_binary(records: Sequence[CalibrationRecord], threshold: float = 0.5) -> float:
    """Binary-classification variant: scores are thresholded to {0, 1}
    first, then calibration error is computed over the two groups."""
    if not records:
        raise DiagnosticsError("no calibration records")
    binarized = [
        CalibrationRecord(r.trajectory_id, r.step, 1.0 if r.score >= threshold else 0.0, r.label)
        for r in records
    ]
    return ece(binarized, bins=2)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=float)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # 1-based average rank
        i = j + 1
    return ranks


def spearman_rho(scores: Sequence[float], labels: Sequence[float]) -> float:
    """Spearman rank correlation with average-rank tie handling."""
    if len(scores) != len(labels):
        raise DiagnosticsError("scores and labels lengths differ")
    if len(scores) < 2:
        raise DiagnosticsError("need at least two records")
    xs = np.asarray(scores, dtype=float)
    ys = np.asarray(labels, dtype=float)
    if np.all(xs == xs[0]) or np.all(ys == ys[0]):
        raise DiagnosticsError("correlation undefined for constant input")
    rx = _average_ranks(xs)
    ry = _average_ranks(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    return float((rx * ry).sum() / math.sqrt((rx ** 2).sum() * (ry ** 2).sum()))


# ---------------------------------------------------------------------------
# Diversity (1 - mean pairwise ROUGE-L F1 on whitespace tokens).
# ---------------------------------------------------------------------------


def _lcs_len(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l_f1(a: str, b: str) -> float:
    ta, tb = a.split(), b.split()
    if not ta and not tb:
        return 1.0
    if not ta or not tb:
        return 0.0
    lcs = _lcs_len(ta, tb)
    return 2.0 * lcs / (len(ta) + len(tb))


def diversity(outputs: Sequence[str]) -> float:
    if len(outputs) < 2:
        raise DiagnosticsError("diversity needs at least two outputs")
    total = 0.0
    pairs = 0
    for i in range(len(outputs)):
        for j in range(i + 1, len(outputs)):
            total += rouge_l_f1(outputs[i], outputs[j])
            pairs += 1
    return 1.0 - total / pairs


# ---------------------------------------------------------------------------
# Compute accounting and pass@k.
# ---------------------------------------------------------------------------


def flops(tokens: int, params: int) -> float:
    """Approximate inference cost of generating ``tokens`` on a ``params``
    parameter model: 6 * n * P."""
    if tokens < 0 or params < 0:
        raise DiagnosticsError("tokens and params must be nonnegative")
    return 6.0 * tokens * params


def pass_at_k(per_problem: Sequence[tuple[int, int]], k: int) -> float:
    """Unbiased estimator, averaged over problems: 1 - C(n-c, k) / C(n, k).

    With n == k this reduces to the exact success indicator (c >= 1).
    """
    if not per_problem:
        raise DiagnosticsError("no problems")
    total = 0.0
    for n, c in per_problem:
        if k > n:
            raise DiagnosticsError(f"k={k} exceeds n={n}")
        if c < 0 or c > n:
            raise DiagnosticsError(f"invalid success count c={c} of n={n}")
        if n - c < k:
            total += 1.0
        else:
            total += 1.0 - math.comb(n - c, k) / math.comb(n, k)
    return total / len(per_problem)
