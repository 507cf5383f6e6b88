"""Independent reference implementations used as test oracles.

These deliberately avoid the package's code paths: high-precision
softmax and largest-remainder via mpmath, population variance via
mpmath, and a slow pure-loop attention evaluator. They stay independent
of the implementations they check.
"""

from __future__ import annotations

import math

import mpmath as mp
import numpy as np

mp.mp.dps = 50


def softmax_shares(sigmas, tau) -> list[float]:
    """High-precision softmax of sigmas / tau."""
    exps = [mp.e ** (mp.mpf(s) / mp.mpf(tau)) for s in sigmas]
    total = mp.fsum(exps)
    return [float(e / total) for e in exps]


def largest_remainder(weights, total: int) -> list[int]:
    """Floor allocation completed by largest fractional remainder.

    Ties go to the lower index. ``weights`` are exact mpmath shares.
    """
    raw = [mp.mpf(w) * total for w in weights]
    base = [int(mp.floor(r)) for r in raw]
    residue = total - sum(base)
    remainders = [(-(r - b), i) for i, (r, b) in enumerate(zip(raw, base))]
    for _, i in sorted(remainders)[:residue]:
        base[i] += 1
    return base


def allocate_reference(sigmas, tau, total: int) -> list[int]:
    exps = [mp.e ** (mp.mpf(s) / mp.mpf(tau)) for s in sigmas]
    denom = mp.fsum(exps)
    return largest_remainder([e / denom for e in exps], total)


def population_variance(values) -> float:
    xs = [mp.mpf(v) for v in values]
    mean = mp.fsum(xs) / len(xs)
    return float(mp.fsum((x - mean) ** 2 for x in xs) / len(xs))


def slow_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int, scale_mult: float):
    """Triple-loop scaled-dot attention; returns (context, maps).

    Everything is evaluated element by element in float64, independent
    of any vectorized kernel.
    """
    m, d = q.shape
    n = k.shape[0]
    head_dim = d // heads
    maps = np.zeros((heads, m, n))
    ctx = np.zeros((m, d))
    for h in range(heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        for i in range(m):
            logits = []
            for j in range(n):
                acc = 0.0
                for c in range(lo, hi):
                    acc += float(q[i, c]) * float(k[j, c])
                logits.append(acc * scale_mult / math.sqrt(head_dim))
            peak = max(logits)
            weights = [math.exp(x - peak) for x in logits]
            norm = sum(weights)
            for j in range(n):
                maps[h, i, j] = weights[j] / norm
            for c in range(lo, hi):
                acc = 0.0
                for j in range(n):
                    acc += maps[h, i, j] * float(v[j, c])
                ctx[i, c] = acc
    return ctx, maps


def cumulative_scores(step_logs) -> dict[int, tuple[float, int]]:
    """Recompute (cum_score, exposure) from (key_ids, maps) step logs.

    ``step_logs`` is an iterable of (key_ids, maps) in step order; maps
    are (H, M, N) arrays. Plain Python accumulation, no numpy reductions
    shared with the implementation under test.
    """
    scores: dict[int, float] = {}
    exposure: dict[int, int] = {}
    for key_ids, maps in step_logs:
        n = len(key_ids)
        for col, tid in enumerate(key_ids):
            acc = 0.0
            for h in range(maps.shape[0]):
                for row in range(maps.shape[1]):
                    acc += float(maps[h, row, col])
            scores[tid] = scores.get(tid, 0.0) + acc / n
            exposure[tid] = exposure.get(tid, 0) + 1
    return {tid: (scores[tid], exposure[tid]) for tid in scores}
