"""Trace recording/replay and metric export.

Traces are line-delimited JSON: a version-tagged header object on line
1, then one self-describing record per (step, layer). Default traces
carry the per-key column sums (which fully determine scoring); full
per-head attention maps are an opt-in payload (``keep_maps``) because
they grow as M x N per layer per step.

Footprints are derived from token counts, not process memory, so every
number in a trace is platform-independent and byte-reproducible.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import MalformedTrace, UnknownLayer
from .simulate import RunSummary

TRACE_FORMAT = "boundedkv-trace"
TRACE_VERSION = 1


@dataclass
class TraceRecord:
    """One (step, layer) telemetry record.

    ``occupancy_pre`` is taken before eviction, ``occupancy_post`` after
    eviction and admission, so ``post = pre - evicted + tokens_per_frame``.
    ``budget_pre`` is the budget in force during the step and
    ``budget_post`` the value after this step's reallocation.
    """

    step: int
    layer: int
    n_keys: int
    budget_pre: int | None
    budget_post: int | None
    occupancy_pre: int
    occupancy_post: int
    protected_count: int
    clamped: bool
    reason: str | None
    evicted: list[dict] = field(default_factory=list)
    sigma: float = 0.0
    pi: float | None = None
    multiplies: int = 0
    footprint_bytes: int = 0
    key_ids: list[int] = field(default_factory=list)
    col_sums_raw: list[float] = field(default_factory=list)
    col_sums_headmean: list[float] = field(default_factory=list)
    maps: list | None = None


@dataclass
class Trace:
    version: int
    config: dict
    budget: dict
    records: list[TraceRecord]


def records_from_run(run: RunSummary) -> list[TraceRecord]:
    records = []
    for report, step_stats in zip(run.reports, run.stats):
        for lr, stats in zip(report.layers, step_stats):
            maps = None
            if run.maps is not None:
                maps = run.maps[report.step][lr.layer].tolist()
            records.append(
                TraceRecord(
                    step=report.step,
                    layer=lr.layer,
                    n_keys=lr.n_keys,
                    budget_pre=lr.budget_pre,
                    budget_post=lr.budget_post,
                    occupancy_pre=lr.occupancy_pre,
                    occupancy_post=lr.occupancy_post,
                    protected_count=lr.protected_count,
                    clamped=lr.clamped,
                    reason=lr.reason,
                    evicted=[
                        {"token_id": tid, "importance": imp}
                        for tid, imp in zip(lr.evicted_ids, lr.evicted_importances)
                    ],
                    sigma=lr.sigma,
                    pi=lr.pi,
                    multiplies=lr.multiplies,
                    footprint_bytes=lr.footprint_bytes,
                    key_ids=list(stats.key_ids),
                    col_sums_raw=[float(x) for x in stats.col_sums_raw],
                    col_sums_headmean=[float(x) for x in stats.col_sums_headmean],
                    maps=maps,
                )
            )
    return records


def _record_to_json(rec: TraceRecord) -> str:
    payload = {f.name: getattr(rec, f.name) for f in fields(TraceRecord)}
    return json.dumps(payload, separators=(",", ":"))


def write_trace(run_or_records, path, config: dict | None = None, budget: dict | None = None) -> Path:
    """Write a trace file; accepts a RunSummary or a TraceRecord list."""
    if isinstance(run_or_records, RunSummary):
        records = records_from_run(run_or_records)
        config = run_or_records.config.to_dict()
        budget = run_or_records.budget
    else:
        records = list(run_or_records)
        config = config or {}
        budget = budget or {}
    header = {"format": TRACE_FORMAT, "version": TRACE_VERSION, "config": config, "budget": budget}
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for rec in records:
            fh.write(_record_to_json(rec) + "\n")
    return path


def read_trace(path) -> Trace:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise MalformedTrace("empty trace file", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise MalformedTrace(f"header is not valid JSON ({exc.msg})", line=1) from exc
    if not isinstance(header, dict) or header.get("format") != TRACE_FORMAT:
        raise MalformedTrace("missing trace format tag", line=1)
    if header.get("version") != TRACE_VERSION:
        raise MalformedTrace(f"unsupported trace version {header.get('version')!r}", line=1)

    field_names = {f.name for f in fields(TraceRecord)}
    records = []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            payload = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise MalformedTrace(f"record is not valid JSON ({exc.msg})", line=lineno) from exc
        if not isinstance(payload, dict):
            raise MalformedTrace("record is not an object", line=lineno)
        unknown = set(payload) - field_names
        if unknown:
            raise MalformedTrace(f"unknown fields {sorted(unknown)}", line=lineno)
        try:
            records.append(TraceRecord(**payload))
        except TypeError as exc:
            raise MalformedTrace(str(exc), line=lineno) from exc
    return Trace(version=header["version"], config=header.get("config", {}),
                 budget=header.get("budget", {}), records=records)


def heatmap_grid(records: list[TraceRecord], layer: int, reweight: bool = False):
    """Per-step head-mean column-sum matrix for one layer.

    Columns are token ids in admission order; absent (evicted or not yet
    admitted) cells are zero. ``reweight`` multiplies the row of 1-based
    frame number t by t, compensating for later frames spreading mass
    over more keys. Returns (grid, column_ids, frame_boundaries) where
    boundaries[f] is the first column index of frame f's tokens.
    """
    layer_recs = sorted((r for r in records if r.layer == layer), key=lambda r: r.step)
    if not layer_recs:
        raise UnknownLayer(f"no records for layer {layer}")
    first_seen: dict[int, int] = {}
    for rec in layer_recs:
        for tid in rec.key_ids:
            first_seen.setdefault(tid, rec.step)
    col_ids = sorted(first_seen)
    col_index = {tid: i for i, tid in enumerate(col_ids)}
    grid = np.zeros((len(layer_recs), len(col_ids)), dtype=np.float64)
    for row, rec in enumerate(layer_recs):
        for tid, val in zip(rec.key_ids, rec.col_sums_headmean):
            grid[row, col_index[tid]] = val
        if reweight:
            grid[row] *= rec.step + 1
    boundaries = []
    for f in range(len(layer_recs)):
        starts = [col_index[tid] for tid, s in first_seen.items() if s == f]
        boundaries.append(min(starts) if starts else len(col_ids))
    return grid, col_ids, boundaries


def export_heatmap(records: list[TraceRecord], layer: int, path, reweight: bool = False) -> np.ndarray:
    """Write the layer's column-sum grid as text, graymap, and boundary sidecar.

    ``path`` names the plain-text grid; the portable graymap and the
    frame-boundary index list are written next to it with ``.pgm`` and
    ``.frames.json`` suffixes.
    """
    grid, col_ids, boundaries = heatmap_grid(records, layer, reweight=reweight)
    path = Path(path)
    np.savetxt(path, grid, fmt="%.17g")

    peak = float(grid.max()) if grid.size else 0.0
    levels = np.zeros_like(grid, dtype=np.int64) if peak <= 0 else np.rint(grid / peak * 255).astype(np.int64)
    pgm_lines = [f"P2\n{grid.shape[1]} {grid.shape[0]}\n255\n"]
    for row in levels:
        pgm_lines.append(" ".join(str(v) for v in row) + "\n")
    path.with_suffix(".pgm").write_text("".join(pgm_lines), encoding="utf-8")

    sidecar = {"layer": layer, "column_ids": col_ids, "frame_boundaries": boundaries}
    path.with_suffix(".frames.json").write_text(json.dumps(sidecar, separators=(",", ":")) + "\n", encoding="utf-8")
    return grid


_SUMMARY_COLUMNS = [
    "label", "policy", "budget_mode", "beta", "budget_tokens", "tau", "seed",
    "frames", "layers", "heads", "dim", "tokens_per_frame",
    "peak_footprint_bytes", "mean_step_multiplies", "total_evictions",
    "mean_divergence", "landmark_retention",
]


@dataclass
class SummaryRow:
    label: str
    policy: str
    budget_mode: str | None
    beta: float | None
    budget_tokens: int | None
    tau: float
    seed: int
    frames: int
    layers: int
    heads: int
    dim: int
    tokens_per_frame: int
    peak_footprint_bytes: int
    mean_step_multiplies: float
    total_evictions: int
    mean_divergence: float | None = None
    landmark_retention: float | None = None


def summary_row(run: RunSummary, label: str, divergence=None, retention=None) -> SummaryRow:
    cfg = run.config
    meta = run.budget
    footprints = [rep.footprint_total for rep in run.reports]
    multiplies = [rep.multiplies_total for rep in run.reports]
    evictions = sum(len(lr.evicted_ids) for rep in run.reports for lr in rep.layers)
    mean_div = None
    if divergence is not None:
        mean_div = float(np.mean(divergence.rms)) if divergence.rms else 0.0
    mean_ret = None
    if retention is not None:
        finite = [r for r in retention if not math.isnan(r)]
        mean_ret = float(np.mean(finite)) if finite else None
    return SummaryRow(
        label=label,
        policy=cfg.policy,
        budget_mode=meta.get("budget_mode"),
        beta=cfg.beta,
        budget_tokens=meta.get("budget_tokens"),
        tau=cfg.tau,
        seed=cfg.seed,
        frames=cfg.frames,
        layers=cfg.layers,
        heads=cfg.heads,
        dim=cfg.dim,
        tokens_per_frame=cfg.tokens_per_frame,
        peak_footprint_bytes=max(footprints, default=0),
        mean_step_multiplies=float(np.mean(multiplies)) if multiplies else 0.0,
        total_evictions=evictions,
        mean_divergence=mean_div,
        landmark_retention=mean_ret,
    )


def summarize(rows: list[SummaryRow]) -> str:
    """Comma-delimited table, one row per run; header-only when empty."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_SUMMARY_COLUMNS)
    for row in rows:
        writer.writerow([
            row.label, row.policy,
            row.budget_mode if row.budget_mode is not None else "",
            _fmt(row.beta), _fmt(row.budget_tokens), _fmt(row.tau), row.seed,
            row.frames, row.layers, row.heads, row.dim, row.tokens_per_frame,
            row.peak_footprint_bytes, _fmt(row.mean_step_multiplies),
            row.total_evictions, _fmt(row.mean_divergence), _fmt(row.landmark_retention),
        ])
    return buf.getvalue()


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)
