"""Cross-chunk block-residual caching for few-step autoregressive DiTs, on a toy model."""

from xcache.cache_engine import CacheEngine, EngineConfig, ForceReason, TraceRecord
from xcache.fingerprint import Fingerprint, compute_fingerprint, plan_grid_sample
from xcache.gate import GateConfig, Step0Mode
from xcache.latent_model import ChunkLatent, KVCache, ModelConfig, ToyDiT
from xcache.metrics import fidelity, psnr_latent, skip_report, speedup
from xcache.rollout import Scenario, ScenarioKind, gen_actions, run_paired, run_rollout

__all__ = [
    "CacheEngine",
    "ChunkLatent",
    "EngineConfig",
    "Fingerprint",
    "ForceReason",
    "GateConfig",
    "KVCache",
    "ModelConfig",
    "Scenario",
    "ScenarioKind",
    "Step0Mode",
    "ToyDiT",
    "TraceRecord",
    "compute_fingerprint",
    "fidelity",
    "gen_actions",
    "plan_grid_sample",
    "psnr_latent",
    "run_paired",
    "run_rollout",
    "skip_report",
    "speedup",
]
