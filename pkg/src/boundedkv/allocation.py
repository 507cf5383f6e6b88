"""Per-layer budget allocation from attention sparsity.

Sparsity values feed a temperature softmax to produce layer shares,
which are converted to integer budgets by floor plus largest-remainder
completion, so the shares sum to the total exactly instead of the
lossy bare floor.

An optional per-layer cap (the stream-horizon capacity) redistributes
share that a layer could never use; without it a full-size budget
(beta = 1) would starve whichever layers the softmax disfavors and
spurious evictions would break baseline equivalence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cache import CacheSession
from .errors import BadTemperature


@dataclass
class AllocationResult:
    """Layer shares and integer budgets for one allocation."""

    shares: list[float]
    budgets: list[int]
    tau: float
    total: int


def _softmax(sigmas: np.ndarray, tau: float) -> np.ndarray:
    z = sigmas / tau
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _floor_largest_remainder(weights: np.ndarray, total: int) -> list[int]:
    raw = weights * total
    base = np.floor(raw).astype(int)
    residue = total - int(base.sum())
    # Ties on the fractional remainder go to the lower layer index.
    order = sorted(range(len(weights)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:residue]:
        base[i] += 1
    return [int(b) for b in base]


def allocate(sigmas, tau: float, total: int, cap: int | None = None) -> AllocationResult:
    """Split ``total`` tokens across layers by softmax(sigmas / tau).

    ``cap`` bounds each layer's budget; capped-off share is redistributed
    over the remaining layers, preserving the exact total whenever
    ``total <= layers * cap``.
    """
    if tau <= 0.0 or not math.isfinite(tau):
        raise BadTemperature(f"temperature must be > 0, got {tau}")
    sig = np.asarray(sigmas, dtype=np.float64)
    if sig.ndim != 1 or sig.size == 0:
        raise ValueError("sigmas must be a non-empty 1-d sequence")
    if not np.all(np.isfinite(sig)):
        raise ValueError("sigmas must be finite")
    if total < 0:
        raise ValueError("total budget must be >= 0")

    shares = _softmax(sig, tau)

    if cap is None:
        budgets = _floor_largest_remainder(shares, total)
        return AllocationResult(shares=[float(p) for p in shares], budgets=budgets, tau=tau, total=total)

    budgets = [0] * sig.size
    active = list(range(sig.size))
    remaining = total
    while active:
        sub = shares[active]
        trial = _floor_largest_remainder(sub / sub.sum(), remaining)
        overflow = [i for i, b in zip(active, trial) if b > cap]
        if not overflow:
            for i, b in zip(active, trial):
                budgets[i] = b
            break
        for i in overflow:
            budgets[i] = cap
            remaining -= cap
        active = [i for i in active if i not in set(overflow)]
    return AllocationResult(shares=[float(p) for p in shares], budgets=budgets, tau=tau, total=total)


def reallocate_step(session: CacheSession, sigmas) -> AllocationResult | None:
    """Refresh the session's per-layer budgets from this step's sparsity.

    The new budgets take effect at the next step's maintenance phase:
    layers whose occupancy now exceeds the new budget evict down before
    admitting the next frame. No-op in unbounded mode.
    """
    if session.unbounded:
        return None
    cfg = session.config
    result = allocate(
        sigmas,
        cfg.effective_tau,
        session.budgets_total,
        cap=cfg.frames * cfg.tokens_per_frame,
    )
    for layer, budget in zip(session.layers, result.budgets):
        layer.budget = budget
    session.last_sigmas = [float(s) for s in sigmas]
    return result


def bootstrap_budgets(session: CacheSession) -> AllocationResult | None:
    """Uniform allocation used before any attention statistics exist."""
    return reallocate_step(session, [0.0] * session.config.layers)
