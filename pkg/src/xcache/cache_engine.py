"""Cross-chunk residual cache: per-(step, block) reuse with safety mechanisms."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from xcache.fingerprint import DEFAULT_BUDGET, Fingerprint, compute_fingerprint, plan_layout
from xcache.gate import (
    GateConfig,
    GateMetrics,
    Step0Mode,
    ThresholdState,
    adaptive_threshold,
    decide,
    gate_metrics,
    update_ema,
)
from xcache.latent_model import ChunkLatent, ViewGroupLayout

logger = logging.getLogger(__name__)


class ForceReason(str, Enum):
    WARMUP = "warmup"
    KV_UPDATE_CHUNK = "kv_update_chunk"
    FRONT_ANCHOR = "front_anchor"
    BACK_ANCHOR = "back_anchor"
    STEP0 = "step0"
    STALENESS = "staleness"
    GATE_FAILED = "gate_failed"
    NONE = "none"


@dataclass(frozen=True)
class EngineConfig:
    warmup: int = 1
    front_anchors: int = 1
    back_anchors: int = 0
    max_staleness: Optional[int] = None  # None = unlimited
    kv_protect: bool = True
    gate: GateConfig = field(default_factory=GateConfig)
    fingerprint_k: int = DEFAULT_BUDGET

    def __post_init__(self):
        if self.warmup < 1:
            raise ValueError("warmup must be >= 1")
        if self.front_anchors < 0 or self.back_anchors < 0:
            raise ValueError("anchor counts must be >= 0")
        if self.max_staleness is not None and self.max_staleness < 1:
            raise ValueError("max_staleness must be >= 1 when set")
        if self.fingerprint_k < 1:
            raise ValueError("fingerprint_k must be >= 1")


@dataclass
class CacheEntry:
    residual: ChunkLatent
    fingerprint: Fingerprint
    staleness: int = 0


@dataclass
class Decision:
    skip: bool
    reason: ForceReason
    residual: Optional[ChunkLatent] = None
    fingerprint: Optional[Fingerprint] = None
    metrics: Optional[GateMetrics] = None
    tau: Optional[float] = None


@dataclass
class TraceRecord:
    chunk: int
    step: int
    block: int
    decision: str
    reason: str
    s_cos: Optional[float] = None
    d_max: Optional[float] = None
    tau: Optional[float] = None
    staleness: int = 0
    per_entry_cos: tuple[float, ...] = ()
    per_group_dev: tuple[float, ...] = ()

    @property
    def skipped(self) -> bool:
        return self.decision == "skip"


@dataclass
class EngineStats:
    evaluations: int = 0
    skips: int = 0
    computes: int = 0
    compute_reasons: Counter = field(default_factory=Counter)
    position_skips: Counter = field(default_factory=Counter)
    chunk_skips: Counter = field(default_factory=Counter)


class CacheEngine:
    """One engine per rollout.

    Call ``begin_chunk`` before step 0 of every chunk, then for every block
    ``try_skip``; on a compute decision run the block and hand the residual to
    ``record_compute``.
    """

    def __init__(
        self,
        config: EngineConfig,
        num_blocks: int,
        num_steps: int,
        layout: ViewGroupLayout,
    ):
        if config.front_anchors + config.back_anchors > num_blocks:
            raise ValueError(
                f"F_n + B_n = {config.front_anchors + config.back_anchors} "
                f"exceeds num_blocks = {num_blocks}"
            )
        self.config = config
        self.num_blocks = num_blocks
        self.num_steps = num_steps
        self.layout = layout
        self.plans = plan_layout(layout, config.fingerprint_k)
        self.entries: dict[tuple[int, int], CacheEntry] = {}
        self.thresholds = ThresholdState()
        self.trace: list[TraceRecord] = []
        self._stats = EngineStats()
        self.chunk: Optional[int] = None
        self.warmup_mode = False
        self.kv_force_mode = False
        self.action: Optional[np.ndarray] = None

    # -- chunk lifecycle ------------------------------------------------------

    def begin_chunk(self, n: int, is_kv_update_chunk: bool, action: np.ndarray) -> None:
        expected = 0 if self.chunk is None else self.chunk + 1
        if n != expected:
            raise ValueError(f"chunk {n} started out of order; expected chunk {expected}")
        self.chunk = n
        self.warmup_mode = n < self.config.warmup
        self.kv_force_mode = self.config.kv_protect and is_kv_update_chunk
        self.action = np.asarray(action, dtype=np.float64).copy()

    def _require_chunk(self):
        if self.chunk is None:
            raise RuntimeError("begin_chunk must be called before gating")

    def should_force(self, t: int, b: int) -> ForceReason:
        self._require_chunk()
        cfg = self.config
        if self.warmup_mode:
            return ForceReason.WARMUP
        if self.kv_force_mode:
            return ForceReason.KV_UPDATE_CHUNK
        if b < cfg.front_anchors:
            return ForceReason.FRONT_ANCHOR
        if b >= self.num_blocks - cfg.back_anchors:
            return ForceReason.BACK_ANCHOR
        if t == 0 and cfg.gate.step0_mode is Step0Mode.FORCE:
            return ForceReason.STEP0
        entry = self.entries.get((t, b))
        if cfg.max_staleness is not None and entry is not None:
            if entry.staleness >= cfg.max_staleness:
                return ForceReason.STALENESS
        return ForceReason.NONE

    def fingerprint(self, x: ChunkLatent, action: Optional[np.ndarray] = None) -> Fingerprint:
        return compute_fingerprint(x, self.action if action is None else action, self.plans)

    # -- per-block decisions --------------------------------------------------

    def try_skip(self, t: int, b: int, x_in: ChunkLatent, action: np.ndarray) -> Decision:
        reason = self.should_force(t, b)
        if reason is not ForceReason.NONE:
            return self._compute(t, b, Decision(False, reason))

        fp = compute_fingerprint(x_in, action, self.plans)
        entry = self.entries.get((t, b))
        if entry is None:
            return self._compute(t, b, Decision(False, ForceReason.GATE_FAILED, fingerprint=fp))
        if not fp.same_structure(entry.fingerprint) or (
            entry.residual.data.shape != x_in.data.shape
        ):
            logger.warning(
                "cache entry at (t=%d, b=%d) has a different shape; recomputing", t, b
            )
            return self._compute(t, b, Decision(False, ForceReason.GATE_FAILED, fingerprint=fp))

        gcfg = self.config.gate
        metrics = gate_metrics(fp, entry.fingerprint, gcfg.epsilon)
        update_ema(self.thresholds, t, b, metrics.s_cos, gcfg.ema_alpha)
        tau = adaptive_threshold(self.thresholds, t, b, gcfg.tau_floor, gcfg.margin)
        if t == 0 and gcfg.step0_mode is Step0Mode.STRICT:
            tau = max(tau, gcfg.step0_strict_threshold)

        if decide(metrics, tau, gcfg.tau_dev):
            entry.staleness += 1
            self._log(t, b, "skip", ForceReason.NONE, metrics, tau, entry.staleness)
            self._stats.skips += 1
            self._stats.evaluations += 1
            self._stats.position_skips[(t, b)] += 1
            self._stats.chunk_skips[self.chunk] += 1
            return Decision(True, ForceReason.NONE, entry.residual, fp, metrics, tau)
        return self._compute(
            t, b, Decision(False, ForceReason.GATE_FAILED, fingerprint=fp, metrics=metrics, tau=tau)
        )

    def _compute(self, t: int, b: int, decision: Decision) -> Decision:
        self._log(t, b, "compute", decision.reason, decision.metrics, decision.tau, 0)
        self._stats.computes += 1
        self._stats.evaluations += 1
        self._stats.compute_reasons[decision.reason.value] += 1
        return decision

    def _log(self, t, b, decision, reason, metrics, tau, staleness):
        if metrics is None:
            rec = TraceRecord(self.chunk, t, b, decision, reason.value, staleness=staleness)
        else:
            rec = TraceRecord(
                self.chunk,
                t,
                b,
                decision,
                reason.value,
                metrics.s_cos,
                metrics.d_max,
                tau,
                staleness,
                tuple(metrics.per_entry_cos),
                tuple(metrics.per_group_dev),
            )
        self.trace.append(rec)

    def record_compute(
        self,
        t: int,
        b: int,
        x_in: ChunkLatent,
        r: ChunkLatent,
        action: np.ndarray,
        fingerprint: Optional[Fingerprint] = None,
    ) -> None:
        """Store a freshly computed residual and the fingerprint of its input."""
        fp = fingerprint if fingerprint is not None else compute_fingerprint(x_in, action, self.plans)
        self.entries[(t, b)] = CacheEntry(r, fp, 0)

    @staticmethod
    def apply_cached(x_in: ChunkLatent, residual: ChunkLatent) -> ChunkLatent:
        return x_in + residual

    def stats(self) -> EngineStats:
        s = self._stats
        return EngineStats(
            s.evaluations,
            s.skips,
            s.computes,
            Counter(s.compute_reasons),
            Counter(s.position_skips),
            Counter(s.chunk_skips),
        )
