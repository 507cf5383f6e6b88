"""Bounded per-layer KV store with token metadata.

Every other module mutates this substrate: admission appends a frame's
keys/values, eviction removes ids chosen by a policy, and the scoring
module updates the per-token accumulators in place.

Protected tokens (first frame, camera, register) are never removable.
When a layer's budget falls below ``protected_count + M`` the effective
budget is clamped to that floor and the step report carries a warning
flag; correctness wins over strict budgets at pathological settings.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import KIND_CAMERA, KIND_REGISTER, StreamConfig
from .errors import AdmissionOverflow, ProtectedEviction, UnknownToken

TOKEN_KINDS = ("patch", "camera", "register")


def is_protected(frame_index: int, token_kind: str) -> bool:
    """First-frame tokens plus camera/register tokens of every frame."""
    return frame_index == 0 or token_kind in (KIND_CAMERA, KIND_REGISTER)


@dataclass
class TokenRecord:
    """One cached key/value pair with provenance and importance state.

    ``exposure`` counts steps resided in cache, including the birth step;
    it is 1 immediately after admission. ``cum_score`` is the running
    row-length-normalized cumulative attention, non-decreasing over the
    token's lifetime and frozen at eviction.
    """

    token_id: int
    key: np.ndarray
    value: np.ndarray
    frame_index: int
    token_kind: str
    birth_step: int
    exposure: int = 1
    cum_score: float = 0.0
    protected: bool = False
    eviction_step: int | None = None

    def __post_init__(self):
        self.protected = is_protected(self.frame_index, self.token_kind)


@dataclass
class LayerCache:
    """Insertion-ordered bounded store of TokenRecords for one layer."""

    layer_index: int
    budget: int | None = None
    records: list[TokenRecord] = field(default_factory=list)
    protected_count: int = 0
    evicted: list[TokenRecord] = field(default_factory=list)

    def occupancy(self) -> int:
        return len(self.records)

    def unprotected(self) -> list[TokenRecord]:
        return [r for r in self.records if not r.protected]

    def token_ids(self) -> list[int]:
        return [r.token_id for r in self.records]

    def effective_budget(self, new_tokens: int) -> int | None:
        """Budget clamped to the protected floor (None when unbounded).

        A layer must always be able to hold its protected residents plus
        one incoming frame of ``new_tokens`` tokens.
        """
        if self.budget is None:
            return None
        return max(self.budget, self.protected_count + new_tokens)

    def keys_matrix(self, dtype) -> np.ndarray:
        return np.stack([r.key for r in self.records]).astype(dtype, copy=False)

    def values_matrix(self, dtype) -> np.ndarray:
        return np.stack([r.value for r in self.records]).astype(dtype, copy=False)


@dataclass
class CacheSession:
    """All layer caches plus allocation state for one stream.

    Single-writer: no concurrent mutation. ``budgets_total`` is the total
    token budget (None in unbounded baseline mode); per-layer budgets are
    refreshed each step by the allocator and sum to the total exactly
    whenever the total is attainable within the stream horizon.
    """

    config: StreamConfig
    layers: list[LayerCache] = field(default_factory=list)
    step_counter: int = 0
    budgets_total: int | None = None
    last_sigmas: list[float] | None = None
    _next_token_id: int = 0

    def __post_init__(self):
        if not self.layers:
            self.layers = [LayerCache(layer_index=i) for i in range(self.config.layers)]
        if self.budgets_total is None:
            self.budgets_total = self.config.total_budget_tokens()

    @property
    def unbounded(self) -> bool:
        return self.budgets_total is None

    def layer(self, layer_index: int) -> LayerCache:
        if not 0 <= layer_index < len(self.layers):
            raise UnknownToken(f"layer {layer_index} out of range")
        return self.layers[layer_index]

    def issue_token_ids(self, count: int) -> range:
        ids = range(self._next_token_id, self._next_token_id + count)
        self._next_token_id += count
        return ids


def admit(session: CacheSession, layer_index: int, new_records: list[TokenRecord]) -> None:
    """Append one frame's records to a layer.

    Raises AdmissionOverflow when a bounded layer lacks room, which means
    the eviction pass did not run (or did not free enough slots) first.
    """
    layer = session.layer(layer_index)
    if not session.unbounded:
        effective = layer.effective_budget(len(new_records))
        if layer.occupancy() + len(new_records) > effective:
            raise AdmissionOverflow(
                f"layer {layer_index}: occupancy {layer.occupancy()} + "
                f"{len(new_records)} new tokens exceeds effective budget {effective}"
            )
    seen = set(layer.token_ids())
    for rec in new_records:
        if rec.token_id in seen:
            raise ValueError(f"duplicate token_id {rec.token_id} in layer {layer_index}")
        seen.add(rec.token_id)
        rec.birth_step = session.step_counter
        rec.exposure = 1
        layer.records.append(rec)
        if rec.protected:
            layer.protected_count += 1


def remove(session: CacheSession, layer_index: int, token_ids) -> int:
    """Remove the given ids from a layer, preserving survivor order.

    Returns the number removed. Refuses protected ids and ids that are
    not resident; validation happens before any mutation.
    """
    layer = session.layer(layer_index)
    wanted = list(token_ids)
    by_id = {r.token_id: r for r in layer.records}
    missing = [t for t in wanted if t not in by_id]
    if missing:
        raise UnknownToken(f"layer {layer_index}: unknown token ids {missing}")
    shielded = [t for t in wanted if by_id[t].protected]
    if shielded:
        raise ProtectedEviction(f"layer {layer_index}: protected token ids {shielded}")
    doomed = set(wanted)
    survivors = []
    for rec in layer.records:
        if rec.token_id in doomed:
            rec.eviction_step = session.step_counter
            layer.evicted.append(rec)
        else:
            survivors.append(rec)
    layer.records = survivors
    return len(wanted)


def occupancy(session: CacheSession, layer_index: int) -> int:
    return session.layer(layer_index).occupancy()


def footprint_bytes(session: CacheSession, scalar_bytes: int) -> int:
    """Bytes held by cached keys and values only (no metadata).

    Each resident token stores a key and a value of ``dim`` scalars.
    """
    width = 2 * session.config.dim * scalar_bytes
    return sum(layer.occupancy() * width for layer in session.layers)
