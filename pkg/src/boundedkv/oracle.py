"""Ground-truth references: baseline runner, brute-force score
recomputation from logged attention maps, and divergence metrics
between bounded and unbounded runs.

The brute-force path recomputes each token's cumulative score directly
from the full per-head maps (summing over heads and queries itself), so
it is independent of the incremental accumulation it checks, including
that path's column-sum computation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import KIND_PATCH, StreamConfig
from .errors import ConfigMismatch, IncompleteLog
from .simulate import RunSummary, run_stream

# Config fields allowed to differ between compared runs.
_NONSTRUCTURAL = {"beta", "budget_tokens", "budget_mode", "ref_frames", "policy", "keep_maps"}


@dataclass
class TokenScores:
    cum_score: float
    exposure: int
    importance: float


@dataclass
class DivergenceReport:
    """Per-frame output differences plus per-layer retained attention mass.

    Retained mass is measured against the baseline's attention
    distribution (open loop): the share of baseline mass that lands on
    keys still resident in the bounded run at the same step.
    """

    max_abs: list[float]
    rms: list[float]
    cosine: list[float]
    retained_mass: list[float]

    @property
    def overall_max_abs(self) -> float:
        return max(self.max_abs, default=0.0)

    @property
    def mean_rms(self) -> float:
        return float(np.mean(self.rms)) if self.rms else 0.0


def baseline_run(config: StreamConfig) -> RunSummary:
    """Unbounded no-eviction run sharing the exact compute kernels."""
    return run_stream(replace(config, policy="none", beta=None, budget_tokens=None))


@dataclass
class MapLogEntry:
    """One step of a layer's full attention-map log."""

    step: int
    key_ids: list[int]
    maps: np.ndarray


def map_log_from_run(run: RunSummary, layer: int) -> list[MapLogEntry]:
    if run.maps is None:
        raise IncompleteLog("run was executed without keep_maps")
    entries = []
    for t, (step_stats, step_maps) in enumerate(zip(run.stats, run.maps)):
        entries.append(MapLogEntry(step=t, key_ids=list(step_stats[layer].key_ids), maps=step_maps[layer]))
    return entries


def map_log_from_records(records, layer: int) -> list[MapLogEntry]:
    entries = []
    for rec in records:
        if rec.layer != layer:
            continue
        if rec.maps is None:
            raise IncompleteLog(f"record (step {rec.step}, layer {layer}) has no map payload")
        entries.append(MapLogEntry(step=rec.step, key_ids=list(rec.key_ids), maps=np.asarray(rec.maps)))
    return entries


def brute_force_scores(map_log: list[MapLogEntry]) -> dict[int, TokenScores]:
    """Recompute cumulative score, exposure, and importance from maps.

    For each token: the score is the sum over its residency steps of the
    per-step column sum (over heads and queries) divided by that step's
    key count; exposure counts the residency steps; importance is their
    ratio. Tokens evicted at step k accrue nothing from later steps by
    construction (they no longer appear as columns).
    """
    entries = sorted(map_log, key=lambda e: e.step)
    if not entries:
        raise IncompleteLog("empty map log")
    expected = list(range(entries[0].step, entries[0].step + len(entries)))
    if [e.step for e in entries] != expected or entries[0].step != 0:
        raise IncompleteLog(f"log steps {[e.step for e in entries]} are not 0..{len(entries) - 1}")

    scores: dict[int, float] = {}
    exposures: dict[int, int] = {}
    for entry in entries:
        maps = np.asarray(entry.maps, dtype=np.float64)
        if maps.ndim != 3 or maps.shape[2] != len(entry.key_ids):
            raise IncompleteLog(
                f"step {entry.step}: map shape {maps.shape} does not cover {len(entry.key_ids)} keys"
            )
        col_sums = maps.sum(axis=(0, 1))
        inv_n = 1.0 / len(entry.key_ids)
        for tid, c in zip(entry.key_ids, col_sums):
            scores[tid] = scores.get(tid, 0.0) + float(c) * inv_n
            exposures[tid] = exposures.get(tid, 0) + 1
    return {
        tid: TokenScores(cum_score=scores[tid], exposure=exposures[tid], importance=scores[tid] / exposures[tid])
        for tid in scores
    }


def compare_runs(bounded: RunSummary, baseline: RunSummary) -> DivergenceReport:
    """Per-frame output divergence and per-layer retained attention mass."""
    cfg_a = {k: v for k, v in bounded.config.to_dict().items() if k not in _NONSTRUCTURAL}
    cfg_b = {k: v for k, v in baseline.config.to_dict().items() if k not in _NONSTRUCTURAL}
    if cfg_a != cfg_b:
        diff = [k for k in cfg_a if cfg_a[k] != cfg_b[k]]
        raise ConfigMismatch(f"runs differ structurally in {diff}")
    if len(bounded.outputs) != len(baseline.outputs):
        raise ConfigMismatch("runs cover different frame counts")

    max_abs, rms, cosine = [], [], []
    for a, b in zip(bounded.outputs, baseline.outputs):
        delta = a.astype(np.float64) - b.astype(np.float64)
        max_abs.append(float(np.max(np.abs(delta))) if delta.size else 0.0)
        rms.append(float(np.sqrt(np.mean(delta * delta))) if delta.size else 0.0)
        fa, fb = a.ravel().astype(np.float64), b.ravel().astype(np.float64)
        denom = np.linalg.norm(fa) * np.linalg.norm(fb)
        cosine.append(float(fa @ fb / denom) if denom > 0 else 1.0)

    retained = []
    for layer in range(baseline.config.layers):
        kept = 0.0
        total = 0.0
        for step_stats_b, step_stats_a in zip(baseline.stats, bounded.stats):
            base = step_stats_b[layer]
            resident = set(step_stats_a[layer].key_ids)
            mass = np.asarray(base.col_sums_headmean, dtype=np.float64)
            total += float(mass.sum())
            keep_mask = np.fromiter((tid in resident for tid in base.key_ids), dtype=bool, count=len(base.key_ids))
            kept += float(mass[keep_mask].sum())
        retained.append(kept / total if total > 0 else 1.0)

    return DivergenceReport(max_abs=max_abs, rms=rms, cosine=cosine, retained_mass=retained)


def landmark_token_ids(run: RunSummary, layer: int) -> set[int]:
    """Ids of unprotected landmark tokens admitted to a layer.

    Frame-0 landmarks are excluded: protection retains them under every
    policy, which would flatten retention comparisons.
    """
    cfg = run.config
    ids: set[int] = set()
    for t, step_stats in enumerate(run.stats):
        if t == 0:
            continue
        admitted = step_stats[layer].key_ids[-cfg.tokens_per_frame:]
        mask = run.landmark_masks[t]
        kinds = run.frame_kinds[t]
        for slot, tid in enumerate(admitted):
            if mask[slot] and kinds[slot] == KIND_PATCH:
                ids.add(tid)
    return ids


def landmark_retention(run: RunSummary) -> list[float]:
    """Per-layer fraction of planted (unprotected) landmarks still resident."""
    if not run.stats:
        return [float("nan")] * run.config.layers
    out = []
    for layer in range(run.config.layers):
        planted = landmark_token_ids(run, layer)
        if not planted:
            out.append(float("nan"))
            continue
        final_ids = set(run.stats[-1][layer].key_ids)
        out.append(len(planted & final_ids) / len(planted))
    return out
