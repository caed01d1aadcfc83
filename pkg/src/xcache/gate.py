"""Dual-metric similarity gate with per-(step, block) adaptive cosine thresholds."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from xcache.fingerprint import Fingerprint


class Step0Mode(str, Enum):
    OFF = "off"
    FORCE = "force"
    STRICT = "strict"


@dataclass(frozen=True)
class GateConfig:
    tau_floor: float = 0.97
    margin: float = 0.02
    ema_alpha: float = 0.3
    tau_dev: float = 2.0
    epsilon: float = 1e-6
    step0_mode: Step0Mode = Step0Mode.OFF
    step0_strict_threshold: float = 0.999

    def __post_init__(self):
        object.__setattr__(self, "step0_mode", Step0Mode(self.step0_mode))
        if not 0.0 < self.tau_floor <= 1.0:
            raise ValueError("tau_floor must lie in (0, 1]")
        if self.margin < 0.0:
            raise ValueError("margin must be >= 0")
        if not 0.0 < self.ema_alpha <= 1.0:
            raise ValueError("ema_alpha must lie in (0, 1]")
        if self.tau_dev <= 0.0 or self.epsilon <= 0.0:
            raise ValueError("tau_dev and epsilon must be > 0")
        if not 0.0 < self.step0_strict_threshold <= 1.0:
            raise ValueError("step0_strict_threshold must lie in (0, 1]")


@dataclass
class GateMetrics:
    s_cos: float
    per_entry_cos: list[float]
    d_max: float
    per_group_dev: list[float]


@dataclass
class ThresholdState:
    ema: dict[tuple[int, int], float] = field(default_factory=dict)

    def get(self, t: int, b: int) -> Optional[float]:
        return self.ema.get((t, b))


def _check_structure(current: Fingerprint, cached: Fingerprint):
    if not current.same_structure(cached):
        raise ValueError(
            "fingerprint structure mismatch: "
            f"{[e.shape for e in current.entries]} vs {[e.shape for e in cached.entries]}"
        )


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    aa = float(np.dot(a, a))
    bb = float(np.dot(b, b))
    if aa == 0.0 and bb == 0.0:
        return 1.0
    if aa == 0.0 or bb == 0.0:
        return 0.0
    # sqrt of the product keeps cos(a, a) exactly 1.0
    return float(np.clip(np.dot(a, b) / np.sqrt(aa * bb), -1.0, 1.0))


def cosine_similarity(current: Fingerprint, cached: Fingerprint) -> tuple[list[float], float]:
    """Per-entry cosine over all entries and their minimum."""
    _check_structure(current, cached)
    per_entry = [_cosine(a, b) for a, b in zip(current.entries, cached.entries)]
    return per_entry, min(per_entry)


def max_token_deviation(
    current: Fingerprint, cached: Fingerprint, epsilon: float = 1e-6
) -> tuple[list[float], float]:
    """max|cur - ref| / (mean|ref| + eps) per spatial group, and the max over groups."""
    _check_structure(current, cached)
    per_group = []
    for a, b in zip(current.spatial, cached.spatial):
        num = float(np.max(np.abs(a - b))) if a.size else 0.0
        den = float(np.mean(np.abs(b))) if b.size else 0.0
        per_group.append(num / (den + epsilon))
    return per_group, max(per_group)


def gate_metrics(current: Fingerprint, cached: Fingerprint, epsilon: float = 1e-6) -> GateMetrics:
    per_cos, s = cosine_similarity(current, cached)
    per_dev, d = max_token_deviation(current, cached, epsilon)
    return GateMetrics(s, per_cos, d, per_dev)


def update_ema(state: ThresholdState, t: int, b: int, s_cos: float, alpha: float) -> ThresholdState:
    prev = state.ema.get((t, b))
    if prev is None:
        state.ema[(t, b)] = s_cos
    else:
        state.ema[(t, b)] = alpha * s_cos + (1.0 - alpha) * prev
    return state


def adaptive_threshold(state: ThresholdState, t: int, b: int, tau_floor: float, margin: float) -> float:
    ema = state.ema.get((t, b))
    if ema is None:
        return tau_floor
    return max(tau_floor, ema - margin)


def decide(metrics: GateMetrics, tau_cos: float, tau_dev: float) -> bool:
    """True means skip: both the cosine and the deviation test pass."""
    return metrics.s_cos >= tau_cos and metrics.d_max < tau_dev
