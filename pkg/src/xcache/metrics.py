"""Fidelity, skip-rate and speedup analytics plus their file exports."""

from __future__ import annotations

import csv
import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from xcache.cache_engine import EngineConfig, TraceRecord
from xcache.fingerprint import plan_layout
from xcache.gate import Step0Mode
from xcache.latent_model import ChunkLatent, ModelConfig

TRACE_FIELDS = ("chunk", "step", "block", "decision", "reason", "s_cos", "d_max", "tau", "staleness")
SUMMARY_FIELDS = (
    "scenario",
    "psnr_db",
    "max_rel_err",
    "skip_pct",
    "dit_s",
    "speedup_analytic",
    "speedup_wall",
)
ABLATION_FIELDS = ("configuration",) + SUMMARY_FIELDS[1:]
CHUNK_FIELDS = ("chunk", "psnr_db", "max_rel_err", "computed_blocks", "kv_pass_blocks", "kv_update")


class TraceError(ValueError):
    """A decision trace that does not match the configuration it claims."""


# -- fidelity -------------------------------------------------------------------


def psnr_from_mse(mse: float, peak: float) -> float:
    if mse == 0.0:
        return math.inf
    if peak <= 0.0:
        raise ValueError("PSNR peak must be positive when MSE > 0")
    return float(10.0 * np.log10(peak * peak / mse))


def psnr_latent(a: ChunkLatent, b: ChunkLatent, peak: Optional[float] = None) -> float:
    """10 log10(peak^2 / MSE); ``peak`` defaults to max - min of ``a``."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"PSNR needs equal shapes, got {a.data.shape} and {b.data.shape}")
    if peak is None:
        peak = float(a.data.max() - a.data.min())
    mse = float(np.mean((a.data - b.data) ** 2))
    return psnr_from_mse(mse, peak)


@dataclass
class FidelityReport:
    per_chunk_psnr: list[float]
    per_chunk_max_rel_err: list[float]
    mean_psnr: float  # from the MSE pooled over every chunk
    max_rel_err: float
    per_group_psnr: dict[str, float]
    peak: float


def fidelity(baseline: Sequence[ChunkLatent], cached: Sequence[ChunkLatent]) -> FidelityReport:
    """Compare a cached rollout against its baseline.

    The PSNR peak is max - min of the baseline over the whole rollout; the
    relative error of a chunk is max|diff| / max|baseline|.
    """
    if len(baseline) != len(cached):
        raise ValueError(f"rollouts differ in length: {len(baseline)} vs {len(cached)}")
    if not baseline:
        raise ValueError("empty rollout")
    base = np.concatenate([x.data for x in baseline])
    peak = float(base.max() - base.min())
    per_psnr, per_rel, sq = [], [], []
    for x, y in zip(baseline, cached):
        if x.data.shape != y.data.shape:
            raise ValueError(f"chunk shapes differ: {x.data.shape} vs {y.data.shape}")
        diff = x.data - y.data
        sq.append(diff * diff)
        per_psnr.append(psnr_from_mse(float(np.mean(sq[-1])), peak))
        scale = float(np.max(np.abs(x.data)))
        err = float(np.max(np.abs(diff)))
        per_rel.append(0.0 if err == 0.0 else err / scale)
    groups = {}
    layout = baseline[0].layout
    for i, g in enumerate(layout):
        gb = np.concatenate([x.group(i).ravel() for x in baseline])
        gc = np.concatenate([y.group(i).ravel() for y in cached])
        groups[g.name] = psnr_from_mse(float(np.mean((gb - gc) ** 2)), float(gb.max() - gb.min()))
    mse = float(np.mean(np.concatenate([s.ravel() for s in sq])))
    return FidelityReport(
        per_psnr, per_rel, psnr_from_mse(mse, peak), max(per_rel), groups, peak
    )


# -- skip statistics ------------------------------------------------------------


@dataclass
class SkipReport:
    overall: float
    per_position: np.ndarray  # (S, B) skip rate
    per_block: np.ndarray  # (B,) averaged over steps
    mean_cos: np.ndarray  # (S, B), NaN where the gate never ran
    reason_counts: dict[str, int]
    skips: int
    computes: int
    non_warmup_chunks: int
    per_chunk_skips: dict[int, int] = field(default_factory=dict)

    @property
    def denominator(self) -> int:
        return self.per_position.size * self.non_warmup_chunks


def skip_report(
    trace: Iterable[TraceRecord], engine_config: EngineConfig, model_config: ModelConfig
) -> SkipReport:
    """Skip rate over S*B*(non-warmup chunks); the KV pass is not part of it."""
    S, B = model_config.num_steps, model_config.num_blocks
    skips = np.zeros((S, B), dtype=np.int64)
    cos_sum = np.zeros((S, B))
    cos_n = np.zeros((S, B), dtype=np.int64)
    seen: dict[int, set] = {}
    reasons: Counter = Counter()
    per_chunk: Counter = Counter()
    computes = 0
    for rec in trace:
        if not (0 <= rec.step < S and 0 <= rec.block < B):
            raise TraceError(f"trace position (t={rec.step}, b={rec.block}) outside S={S}, B={B}")
        cell = seen.setdefault(rec.chunk, set())
        if (rec.step, rec.block) in cell:
            raise TraceError(f"duplicate record for chunk {rec.chunk}, t={rec.step}, b={rec.block}")
        cell.add((rec.step, rec.block))
        if rec.decision == "skip":
            if rec.chunk < engine_config.warmup:
                raise TraceError(f"skip recorded in warmup chunk {rec.chunk}")
            skips[rec.step, rec.block] += 1
            per_chunk[rec.chunk] += 1
        elif rec.decision == "compute":
            computes += 1
            reasons[rec.reason] += 1
        else:
            raise TraceError(f"unknown decision {rec.decision!r}")
        if rec.s_cos is not None:
            cos_sum[rec.step, rec.block] += rec.s_cos
            cos_n[rec.step, rec.block] += 1
    for n, cell in seen.items():
        if len(cell) != S * B:
            raise TraceError(f"chunk {n} has {len(cell)} records, expected S*B = {S * B}")
    non_warmup = sum(1 for n in seen if n >= engine_config.warmup)
    if non_warmup == 0:
        warnings.warn("no non-warmup chunks in trace; skip rates reported as 0", RuntimeWarning)
        rates = np.zeros((S, B))
    else:
        rates = skips / non_warmup
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_cos = np.where(cos_n > 0, cos_sum / np.maximum(cos_n, 1), np.nan)
    total = int(skips.sum())
    return SkipReport(
        overall=0.0 if non_warmup == 0 else total / (S * B * non_warmup),
        per_position=rates,
        per_block=rates.mean(axis=0),
        mean_cos=mean_cos,
        reason_counts=dict(sorted(reasons.items())),
        skips=total,
        computes=computes,
        non_warmup_chunks=non_warmup,
        per_chunk_skips={n: per_chunk.get(n, 0) for n in sorted(seen)},
    )


def plateau_bound(model_config: ModelConfig, engine_config: EngineConfig) -> float:
    """Largest reachable skip rate in the long-horizon limit."""
    S, B, P = model_config.num_steps, model_config.num_blocks, model_config.kv_update_period
    eligible = (B - engine_config.front_anchors - engine_config.back_anchors) / B
    steps = (S - 1) / S if engine_config.gate.step0_mode is Step0Mode.FORCE else 1.0
    kv = (P - 1) / P if engine_config.kv_protect else 1.0
    return kv * eligible * steps


# -- speedup --------------------------------------------------------------------


def gate_overhead_blocks(model_config: ModelConfig, fingerprint_k: int) -> float:
    """Cost of one gate evaluation in units of one block forward, by FLOP count.

    A block costs about 4*rows*C*H (two matmuls); a fingerprint reads every
    row once for the token means and then touches each entry a few times for
    the cosine and deviation terms.
    """
    C, H = model_config.channels, model_config.block_cost_tokens
    rows = sum(g.cameras * g.grid.tokens for g in model_config.layout)
    spatial = sum(
        g.cameras * p.sampled * C for g, p in zip(model_config.layout, plan_layout(model_config.layout, fingerprint_k))
    )
    entries = spatial + model_config.num_cameras * C + model_config.action_dim
    gate_flops = rows * C + 8 * entries
    return gate_flops / (4.0 * rows * C * H)


@dataclass
class SpeedupReport:
    wall_clock: float
    analytic: float
    baseline_chunk_s: float
    cached_chunk_s: float


def speedup(
    baseline_seconds: Sequence[float],
    cached_seconds: Sequence[float],
    baseline_blocks: Sequence[int],
    cached_blocks: Sequence[int],
    gate_evaluations: int = 0,
    overhead_per_evaluation: float = 0.0,
) -> SpeedupReport:
    """Wall-clock and analytic speedup with chunk 0 excluded.

    ``*_blocks`` are per-chunk block forwards (denoising plus KV pass);
    ``gate_evaluations`` counts fingerprints taken after chunk 0.
    """
    if len(baseline_seconds) != len(cached_seconds) or len(baseline_blocks) != len(cached_blocks):
        raise ValueError("both rollouts must cover the same chunks")
    if len(baseline_seconds) != len(baseline_blocks):
        raise ValueError("timings and block counts disagree in length")
    if overhead_per_evaluation < 0.0 or gate_evaluations < 0:
        raise ValueError("gate overhead must be non-negative")
    tb = list(baseline_seconds[1:])
    tc = list(cached_seconds[1:])
    mb = float(np.mean(tb)) if tb else 0.0
    mc = float(np.mean(tc)) if tc else 0.0
    wall = mb / mc if mc > 0.0 else (1.0 if mb == mc else math.inf)
    total = float(sum(baseline_blocks[1:]))
    spent = float(sum(cached_blocks[1:])) + overhead_per_evaluation * gate_evaluations
    analytic = total / spent if spent > 0.0 else 1.0
    return SpeedupReport(wall, analytic, mb, mc)


# -- export ---------------------------------------------------------------------


def format_number(v) -> str:
    """Shortest round-trip decimal; ``inf``/``nan`` spelled out, None empty."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def _write_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([format_number(v) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def write_summary_csv(path, rows: Iterable[dict], first_column: str = "scenario") -> Path:
    header = (first_column,) + SUMMARY_FIELDS[1:]
    return _write_rows(path, header, ([r.get(k) for k in header] for r in rows))


def trace_line(rec: TraceRecord) -> str:
    d = {k: getattr(rec, k) for k in TRACE_FIELDS}
    return json.dumps(d, separators=(",", ":"), allow_nan=True)


def write_trace(path, trace: Iterable[TraceRecord]) -> Path:
    path = Path(path)
    try:
        with path.open("w") as fh:
            for rec in trace:
                fh.write(trace_line(rec) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def read_trace(path) -> list[TraceRecord]:
    path = Path(path)
    out = []
    with path.open() as fh:
        for i, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                if tuple(d) != TRACE_FIELDS:
                    raise ValueError(f"fields {tuple(d)} != {TRACE_FIELDS}")
                out.append(TraceRecord(**d))
            except (ValueError, TypeError) as exc:
                raise TraceError(f"{path}:{i}: bad trace record: {exc}") from exc
    return out


@dataclass
class ChunkRow:
    chunk: int
    psnr_db: float
    max_rel_err: float
    computed_blocks: int
    kv_pass_blocks: int
    kv_update: bool


def chunk_rows(baseline, cached, report: FidelityReport) -> list[ChunkRow]:
    return [
        ChunkRow(n, report.per_chunk_psnr[n], report.per_chunk_max_rel_err[n],
                 cached.computed_blocks[n], cached.kv_pass_blocks[n], cached.kv_pass_blocks[n] > 0)
        for n in range(cached.n_chunks)
    ]


def write_chunks(path, rows: Sequence[ChunkRow]) -> Path:
    return _write_rows(
        path,
        CHUNK_FIELDS,
        ((r.chunk, r.psnr_db, r.max_rel_err, r.computed_blocks, r.kv_pass_blocks, r.kv_update) for r in rows),
    )


def read_chunks(path) -> list[ChunkRow]:
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CHUNK_FIELDS:
            raise TraceError(f"{path}: expected columns {CHUNK_FIELDS}, got {reader.fieldnames}")
        for i, r in enumerate(reader, 2):
            try:
                rows.append(ChunkRow(
                    int(r["chunk"]), float(r["psnr_db"]), float(r["max_rel_err"]),
                    int(r["computed_blocks"]), int(r["kv_pass_blocks"]), r["kv_update"] == "true",
                ))
            except (TypeError, ValueError) as exc:
                raise TraceError(f"{path}:{i}: bad row: {exc}") from exc
    return rows


def write_figure_data(
    out_dir, rows: Sequence[ChunkRow], report: SkipReport, engine_config: EngineConfig
) -> list[Path]:
    """Per-chunk PSNR series, cosine heatmap over gated blocks, per-block skip curve."""
    out_dir = Path(out_dir)
    S, B = report.per_position.shape
    lo, hi = engine_config.front_anchors, B - engine_config.back_anchors
    series = _write_rows(
        out_dir / "psnr_per_chunk.csv",
        ("chunk", "psnr_db", "max_rel_err", "skips", "kv_update"),
        ((r.chunk, r.psnr_db, r.max_rel_err, report.per_chunk_skips.get(r.chunk, 0), r.kv_update) for r in rows),
    )
    heat = _write_rows(
        out_dir / "heatmap_cos.csv",
        ("step",) + tuple(f"b{b}" for b in range(lo, hi)),
        ((t,) + tuple(report.mean_cos[t, lo:hi]) for t in range(S)),
    )
    curve = _write_rows(
        out_dir / "skip_per_block.csv",
        ("block", "skip_rate"),
        ((b, report.per_block[b]) for b in range(B)),
    )
    return [series, heat, curve]
