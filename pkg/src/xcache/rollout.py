"""Paired closed-loop rollouts: full-compute baseline vs cached branch."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from xcache.cache_engine import CacheEngine, EngineConfig, EngineStats, TraceRecord
from xcache.latent_model import ChunkLatent, ChunkStream, ModelConfig, ToyDiT

# smooth walk: per-chunk action change as a fraction of the current norm
SMOOTH_STEP_FRACTION = 0.045
SMOOTH_LOWPASS = 0.7


class ScenarioKind(str, Enum):
    CONSTANT = "constant"
    SMOOTH = "smooth"
    STEP_CHANGE = "step_change"


@dataclass(frozen=True)
class Scenario:
    kind: ScenarioKind = ScenarioKind.SMOOTH
    n_chunks: int = 24
    action_seed: int = 0
    step_change_chunk: int = 9
    drift: Optional[float] = None  # overrides ModelConfig.scene_drift when set

    def __post_init__(self):
        object.__setattr__(self, "kind", ScenarioKind(self.kind))
        if self.n_chunks < 1:
            raise ValueError("n_chunks must be >= 1")
        if self.action_seed < 0:
            raise ValueError("action_seed must be non-negative")
        if self.kind is ScenarioKind.STEP_CHANGE and not 1 <= self.step_change_chunk < self.n_chunks:
            raise ValueError(
                f"step_change_chunk={self.step_change_chunk} outside [1, {self.n_chunks})"
            )
        if self.drift is not None and not 0.0 <= self.drift <= 1.0:
            raise ValueError("drift override must lie in [0, 1]")

    def model_config(self, base: ModelConfig) -> ModelConfig:
        if self.drift is None:
            return base
        return dataclasses.replace(base, scene_drift=self.drift)


def gen_actions(scenario: Scenario, action_dim: int = 8) -> list[np.ndarray]:
    """Per-chunk action vectors for a scenario.

    ``smooth`` is a low-pass filtered random walk whose per-chunk change stays
    below 5% of the current action norm; ``step_change`` holds the first action
    and then jumps by the action norm along an orthogonal direction.
    """
    rng = np.random.default_rng([scenario.action_seed, 7])
    a = rng.standard_normal(action_dim)
    out = [a.copy()]
    if scenario.kind is ScenarioKind.STEP_CHANGE:
        u = rng.standard_normal(action_dim)
        u -= (u @ a) / (a @ a) * a
        jump = np.linalg.norm(a) * u / np.linalg.norm(u)
    v = np.zeros(action_dim)
    for n in range(1, scenario.n_chunks):
        if scenario.kind is ScenarioKind.SMOOTH:
            v = SMOOTH_LOWPASS * v + (1.0 - SMOOTH_LOWPASS) * rng.standard_normal(action_dim)
            a = a + v / np.linalg.norm(v) * (SMOOTH_STEP_FRACTION * np.linalg.norm(a))
        elif scenario.kind is ScenarioKind.STEP_CHANGE and n == scenario.step_change_chunk:
            a = a + jump
        out.append(a.copy())
    return out


@dataclass
class RolloutResult:
    scenario: Scenario
    model_config: ModelConfig
    engine_config: Optional[EngineConfig]
    latents: list[ChunkLatent]
    chunk_seconds: list[float]
    computed_blocks: list[int]  # denoising blocks run per chunk (KV pass excluded)
    kv_pass_blocks: list[int]
    kv_digests: dict[int, str]  # chunk index -> digest after its KV update
    final_kv_digest: str
    trace: list[TraceRecord] = field(default_factory=list)
    stats: Optional[EngineStats] = None

    @property
    def n_chunks(self) -> int:
        return len(self.latents)

    @property
    def cached(self) -> bool:
        return self.engine_config is not None


def run_rollout(
    model_config: ModelConfig,
    engine_config: Optional[EngineConfig],
    scenario: Scenario,
    model: Optional[ToyDiT] = None,
) -> RolloutResult:
    """Feed the scenario's actions one chunk at a time and collect the outputs."""
    cfg = scenario.model_config(model_config)
    if model is None or model.config != cfg:
        model = ToyDiT(cfg)
    engine = None
    if engine_config is not None:
        if scenario.n_chunks < engine_config.warmup + 1:
            raise ValueError(
                f"n_chunks={scenario.n_chunks} must exceed warmup={engine_config.warmup}"
            )
        engine = CacheEngine(engine_config, cfg.num_blocks, cfg.num_steps, cfg.layout)
    stream = ChunkStream(model, engine)
    latents, seconds, computed, kv_blocks, digests = [], [], [], [], {}
    for n, action in enumerate(gen_actions(scenario, cfg.action_dim)):
        t0 = time.perf_counter()
        chunk = stream.step(action)
        seconds.append(time.perf_counter() - t0)
        latents.append(chunk.clean)
        computed.append(chunk.computed_blocks)
        kv_blocks.append(chunk.kv_pass_blocks)
        if chunk.kv_updated:
            digests[n] = stream.kv.digest()
    return RolloutResult(
        scenario=scenario,
        model_config=cfg,
        engine_config=engine_config,
        latents=latents,
        chunk_seconds=seconds,
        computed_blocks=computed,
        kv_pass_blocks=kv_blocks,
        kv_digests=digests,
        final_kv_digest=stream.kv.digest(),
        trace=list(engine.trace) if engine is not None else [],
        stats=engine.stats() if engine is not None else None,
    )


def run_paired(
    model_config: ModelConfig, engine_config: EngineConfig, scenario: Scenario
) -> tuple[RolloutResult, RolloutResult]:
    """Baseline and cached branch with identical seeds, noise and actions."""
    model = ToyDiT(scenario.model_config(model_config))
    baseline = run_rollout(model_config, None, scenario, model)
    cached = run_rollout(model_config, engine_config, scenario, model)
    return baseline, cached


def kv_divergence(baseline: RolloutResult, cached: RolloutResult) -> list[int]:
    """Chunks whose post-update KV digest differs between the branches."""
    return sorted(
        n for n, d in baseline.kv_digests.items() if cached.kv_digests.get(n) != d
    )
