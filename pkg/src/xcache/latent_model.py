"""Deterministic toy few-step autoregressive block pipeline.

The model mimics the control flow of a causal multi-camera DiT: every chunk
starts from (drift-correlated) Gaussian noise, is refined by ``num_steps``
denoising steps that each run ``num_blocks`` residual blocks, and KV-update
chunks append one summary vector per block to a rolling FIFO KV cache.

Block residuals are built from two parts:

* a content term ``gain(a, t) * tanh(center(x) @ W1) @ W2 - pull * center(x)``
  that only sees the token-centred latent (the pull is off in the KV pass), and
* a conditioning term (action/timestep shift plus a read of the KV cache) that
  is constant along the token axis.

Because the conditioning term is token-constant it never feeds back into the
centred content, so the KV summaries (computed from centred block inputs and
stored in half precision) are reproducible in a static scene.  That is what
makes the zero-drift oracle exact.
"""

from __future__ import annotations

import functools
import hashlib
from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterator, Optional, Sequence

import numpy as np

if TYPE_CHECKING:
    from xcache.cache_engine import CacheEngine


class NonFiniteError(ValueError):
    """Raised when a block receives a latent with NaN/inf entries."""


@dataclass(frozen=True)
class GridShape:
    f: int
    h: int
    w: int

    def __post_init__(self):
        if min(self.f, self.h, self.w) < 1:
            raise ValueError(f"grid axes must be >= 1, got {self}")

    @property
    def tokens(self) -> int:
        return self.f * self.h * self.w

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.f, self.h, self.w)


@dataclass(frozen=True)
class ViewGroup:
    name: str
    cameras: int
    grid: GridShape

    def __post_init__(self):
        if self.cameras < 1:
            raise ValueError(f"view group {self.name!r} needs at least one camera")


ViewGroupLayout = tuple[ViewGroup, ...]

DEFAULT_LAYOUT: ViewGroupLayout = (
    ViewGroup("front", 2, GridShape(2, 6, 10)),
    ViewGroup("side", 4, GridShape(2, 5, 8)),
    ViewGroup("rear", 1, GridShape(2, 6, 10)),
)


def format_layout(layout: Sequence[ViewGroup]) -> str:
    """``front:2:2x6x10,side:4:2x5x8,...``"""
    return ",".join(
        f"{g.name}:{g.cameras}:{g.grid.f}x{g.grid.h}x{g.grid.w}" for g in layout
    )


def parse_layout(text: str) -> ViewGroupLayout:
    groups = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            name, cams, dims = part.split(":")
            f, h, w = (int(v) for v in dims.lower().split("x"))
            groups.append(ViewGroup(name.strip(), int(cams), GridShape(f, h, w)))
        except ValueError as exc:
            raise ValueError(
                f"bad view group {part!r}; expected name:cameras:FxHxW"
            ) from exc
    if not groups:
        raise ValueError("view layout is empty")
    if len({g.name for g in groups}) != len(groups):
        raise ValueError(f"duplicate view group names in {text!r}")
    return tuple(groups)


@dataclass(frozen=True)
class _Segments:
    """Row bookkeeping for a layout flattened to one (rows, C) array."""

    group_slices: tuple[slice, ...]
    cam_starts: np.ndarray
    cam_lengths: np.ndarray
    rows: int


@functools.lru_cache(maxsize=None)
def _segments(layout: ViewGroupLayout) -> _Segments:
    slices, starts, lengths = [], [], []
    row = 0
    for g in layout:
        span = g.cameras * g.grid.tokens
        slices.append(slice(row, row + span))
        for c in range(g.cameras):
            starts.append(row + c * g.grid.tokens)
            lengths.append(g.grid.tokens)
        row += span
    return _Segments(
        tuple(slices),
        np.asarray(starts, dtype=np.intp),
        np.asarray(lengths, dtype=np.intp),
        row,
    )


class ChunkLatent:
    """Latent of one chunk for every view group.

    Stored as a single ``(rows, C)`` float64 array; ``group(i)`` returns the
    ``(cameras, L, C)`` view of group ``i``.
    """

    __slots__ = ("data", "layout")

    def __init__(self, data: np.ndarray, layout: ViewGroupLayout):
        seg = _segments(layout)
        if data.ndim != 2 or data.shape[0] != seg.rows:
            raise ValueError(
                f"latent data of shape {data.shape} does not match layout "
                f"with {seg.rows} token rows"
            )
        self.data = data
        self.layout = layout

    @classmethod
    def from_groups(cls, layout: ViewGroupLayout, arrays: Sequence[np.ndarray]):
        if len(arrays) != len(layout):
            raise ValueError("one array per view group required")
        flat = []
        for g, a in zip(layout, arrays):
            a = np.asarray(a, dtype=np.float64)
            if a.ndim != 3 or a.shape[:2] != (g.cameras, g.grid.tokens):
                raise ValueError(
                    f"group {g.name!r} expects shape ({g.cameras}, {g.grid.tokens}, C),"
                    f" got {a.shape}"
                )
            flat.append(a.reshape(-1, a.shape[-1]))
        return cls(np.concatenate(flat, axis=0), layout)

    @classmethod
    def full(cls, layout: ViewGroupLayout, channels: int, value: float):
        return cls(np.full((_segments(layout).rows, channels), float(value)), layout)

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    def group(self, i: int) -> np.ndarray:
        g = self.layout[i]
        sl = _segments(self.layout).group_slices[i]
        return self.data[sl].reshape(g.cameras, g.grid.tokens, self.channels)

    def groups(self) -> Iterator[np.ndarray]:
        for i in range(len(self.layout)):
            yield self.group(i)

    def _check(self, other: "ChunkLatent"):
        if self.layout != other.layout or self.data.shape != other.data.shape:
            raise ValueError(
                f"latent shape mismatch: {self.data.shape} vs {other.data.shape}"
            )

    def __add__(self, other: "ChunkLatent") -> "ChunkLatent":
        self._check(other)
        return ChunkLatent(self.data + other.data, self.layout)

    def __sub__(self, other: "ChunkLatent") -> "ChunkLatent":
        self._check(other)
        return ChunkLatent(self.data - other.data, self.layout)

    def copy(self) -> "ChunkLatent":
        return ChunkLatent(self.data.copy(), self.layout)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))

    def identical(self, other: "ChunkLatent") -> bool:
        """Bit-level equality."""
        return (
            self.layout == other.layout
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    def __repr__(self):
        return f"ChunkLatent(rows={self.data.shape[0]}, channels={self.channels})"


def center_tokens(x: ChunkLatent) -> np.ndarray:
    """Subtract the per-(camera, channel) token mean."""
    seg = _segments(x.layout)
    sums = np.add.reduceat(x.data, seg.cam_starts, axis=0)
    means = sums / seg.cam_lengths[:, None]
    return x.data - np.repeat(means, seg.cam_lengths, axis=0)


class KVCache:
    """Rolling FIFO KV cache holding one ``(num_blocks, kv_dim)`` entry per update.

    Entries are stored in float16, like a half-precision production cache.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("kv capacity must be >= 1")
        self.capacity = capacity
        self._entries: deque[np.ndarray] = deque(maxlen=capacity)
        self._mean: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> tuple[np.ndarray, ...]:
        return tuple(self._entries)

    def append(self, entry: np.ndarray) -> None:
        # deque(maxlen) drops the oldest entry once full
        self._entries.append(np.asarray(entry, dtype=np.float16).copy())
        self._mean = None

    def mean(self) -> Optional[np.ndarray]:
        """Mean entry as float64, or None when empty.

        Computed as ``first + mean(e - first)`` so that a cache of identical
        entries returns that entry bit-exactly.
        """
        if not self._entries:
            return None
        if self._mean is None:
            stack = np.stack([e.astype(np.float64) for e in self._entries])
            ref = stack[0]
            self._mean = ref + (stack - ref).sum(axis=0) / len(stack)
        return self._mean

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(str(len(self._entries)).encode())
        for e in self._entries:
            h.update(e.tobytes())
        return h.hexdigest()

    def copy(self) -> "KVCache":
        out = KVCache(self.capacity)
        for e in self._entries:
            out._entries.append(e.copy())
        return out


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 27
    num_steps: int = 4
    layout: ViewGroupLayout = DEFAULT_LAYOUT
    channels: int = 16
    kv_capacity: int = 6
    kv_update_period: int = 4
    scene_drift: float = 0.05
    # hidden width of each block's token MLP; sets the per-block FLOPs
    block_cost_tokens: int = 64
    seed: int = 0
    action_dim: int = 8

    def __post_init__(self):
        if self.num_blocks < 2:
            raise ValueError("num_blocks must be >= 2")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.kv_update_period < 1:
            raise ValueError("kv_update_period must be >= 1")
        if not 0.0 <= self.scene_drift <= 1.0:
            raise ValueError("scene_drift must lie in [0, 1]")
        if self.channels < 1 or self.block_cost_tokens < 1 or self.action_dim < 1:
            raise ValueError("channels, block_cost_tokens and action_dim must be >= 1")
        if self.kv_capacity < 1:
            raise ValueError("kv_capacity must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if not self.layout:
            raise ValueError("layout needs at least one view group")

    @property
    def num_cameras(self) -> int:
        return sum(g.cameras for g in self.layout)


@dataclass
class GeneratedChunk:
    index: int
    clean: ChunkLatent
    init: ChunkLatent
    kv_updated: bool
    computed_blocks: int
    kv_pass_blocks: int


# Toy constants.  RESIDUAL_SCALE etc. are chosen so 108 block applications
# keep the latent O(1) and residuals stay sensitive to action and KV state.
RESIDUAL_SCALE = 0.08
GAIN_SCALE = 0.5
SHIFT_SCALE = 0.03
KV_READ_SCALE = 4.0
KV_DIM = 16
# per-block pull of the centred latent during denoising steps; shrinks the
# share of the init noise that survives into the clean latent
DENOISE_PULL = 0.02


class ToyDiT:
    """Seeded stand-in for a few-step causal DiT.

    ``block_forward`` returns the residual of block ``b``; the pipeline applies
    it as ``x <- x + r``.  Every residual satisfies ``||r|| <= kappa_b`` with
    ``kappa_b = residual_bound(b)``, hence ``||r|| <= kappa_b * (1 + ||x||)``.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        B, C, H, A = (
            config.num_blocks,
            config.channels,
            config.block_cost_tokens,
            config.action_dim,
        )
        S = config.num_steps
        w1, w2, wg, wa, temb, wk, wv = [], [], [], [], [], [], []
        for b in range(B):
            rng = np.random.default_rng([config.seed, 1, b])
            w1.append(rng.standard_normal((C, H)) / np.sqrt(C))
            w2.append(rng.standard_normal((H, C)) * (RESIDUAL_SCALE / np.sqrt(H)))
            wg.append(rng.standard_normal((A, C)) / np.sqrt(A))
            wa.append(rng.standard_normal((A, C)) / np.sqrt(A))
            # one extra timestep slot for the clean KV-update pass
            temb.append(rng.standard_normal((S + 1, 2, C)) * 0.5)
            wk.append(rng.standard_normal((C, KV_DIM)) * (1.5 / np.sqrt(C)))
            wv.append(rng.standard_normal((KV_DIM, C)) / np.sqrt(KV_DIM))
        self.w1 = np.stack(w1)
        self.w2 = np.stack(w2)
        self.w_gain = np.stack(wg)
        self.w_shift = np.stack(wa)
        self.t_embed = np.stack(temb)
        self.w_key = np.stack(wk)
        self.w_value = np.stack(wv)
        self._rows = _segments(config.layout).rows

    # -- chunk initialisation -------------------------------------------------

    def init_chunk_latent(
        self, n: int, prev_init: Optional[ChunkLatent] = None
    ) -> ChunkLatent:
        if n < 0:
            raise ValueError("chunk index must be >= 0")
        if (n == 0) != (prev_init is None):
            raise ValueError("prev_init is required exactly when n >= 1")
        rng = np.random.default_rng([self.config.seed, 0, n])
        noise = rng.standard_normal((self._rows, self.config.channels))
        if n == 0:
            return ChunkLatent(noise, self.config.layout)
        d = self.config.scene_drift
        if d == 0.0:
            return prev_init.copy()
        return ChunkLatent(
            np.sqrt(1.0 - d * d) * prev_init.data + d * noise, self.config.layout
        )

    # -- blocks ---------------------------------------------------------------

    def _check_action(self, action: np.ndarray) -> np.ndarray:
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (self.config.action_dim,):
            raise ValueError(
                f"action must have shape ({self.config.action_dim},), got {action.shape}"
            )
        return action

    def kv_read(self, b: int, kv: KVCache) -> np.ndarray:
        mean = kv.mean()
        if mean is None:
            return np.zeros(self.config.channels)
        return KV_READ_SCALE * (mean[b] @ self.w_value[b])

    def block_forward(
        self, b: int, x_in: ChunkLatent, action: np.ndarray, kv: KVCache, t: int
    ) -> ChunkLatent:
        if not 0 <= b < self.config.num_blocks:
            raise IndexError(f"block {b} out of range")
        if not x_in.is_finite():
            raise NonFiniteError(f"non-finite block input at step t={t}, block b={b}")
        action = self._check_action(action)
        xc = center_tokens(x_in)
        core = np.tanh(xc @ self.w1[b]) @ self.w2[b]
        emb = self.t_embed[b, t]
        gain = 1.0 + GAIN_SCALE * np.tanh(action @ self.w_gain[b] + emb[0])
        shift = SHIFT_SCALE * np.tanh(action @ self.w_shift[b] + emb[1])
        bias = shift + self.kv_read(b, kv)
        damp = DENOISE_PULL if t < self.config.num_steps else 0.0
        return ChunkLatent(core * gain - damp * xc + bias, x_in.layout)

    def residual_bound(self, b: int) -> float:
        """kappa_b with ||block_forward(b, x, ...)|| <= kappa_b * (1 + ||x||).

        The bounded terms (tanh content, shift, KV read of entries in [0, 1])
        give a constant; centring is a projection, so the pull adds at most
        ``DENOISE_PULL * ||x||``.
        """
        n = self._rows
        H, C = self.config.block_cost_tokens, self.config.channels
        content = (1.0 + GAIN_SCALE) * np.sqrt(n * H) * np.linalg.norm(self.w2[b], 2)
        shift = SHIFT_SCALE * np.sqrt(n * C)
        kv = KV_READ_SCALE * np.sqrt(n * KV_DIM) * np.linalg.norm(self.w_value[b], 2)
        return float(max(content + shift + kv, DENOISE_PULL))

    def kv_summary(self, b: int, x_in: ChunkLatent) -> np.ndarray:
        z = center_tokens(x_in) @ self.w_key[b]
        return np.mean(np.tanh(z) ** 2, axis=0)

    # -- pipeline -------------------------------------------------------------

    def denoise_step(
        self,
        t: int,
        x: ChunkLatent,
        action: np.ndarray,
        kv: KVCache,
        engine: Optional["CacheEngine"] = None,
    ) -> tuple[ChunkLatent, int]:
        """Run blocks 0..B-1 at denoising step ``t``.

        Returns the step output and the number of blocks actually computed.
        """
        if not 0 <= t < self.config.num_steps:
            raise IndexError(f"denoising step {t} out of range")
        computed = 0
        for b in range(self.config.num_blocks):
            if engine is None:
                x = x + self.block_forward(b, x, action, kv, t)
                computed += 1
                continue
            decision = engine.try_skip(t, b, x, action)
            if decision.skip:
                x = engine.apply_cached(x, decision.residual)
            else:
                r = self.block_forward(b, x, action, kv, t)
                engine.record_compute(t, b, x, r, action, decision.fingerprint)
                x = x + r
                computed += 1
        return x, computed

    def kv_update_pass(
        self, clean: ChunkLatent, action: np.ndarray, kv: KVCache
    ) -> KVCache:
        """Full (never gated) pass over the clean latent; appends one entry."""
        t_clean = self.config.num_steps
        x = clean
        entry = np.empty((self.config.num_blocks, KV_DIM))
        for b in range(self.config.num_blocks):
            entry[b] = self.kv_summary(b, x)
            x = x + self.block_forward(b, x, action, kv, t_clean)
        kv.append(entry)
        return kv

    def is_kv_update_chunk(self, n: int) -> bool:
        P = self.config.kv_update_period
        return n % P == P - 1

    def generate_chunk(
        self,
        n: int,
        action: np.ndarray,
        kv: KVCache,
        engine: Optional["CacheEngine"] = None,
        prev_init: Optional[ChunkLatent] = None,
    ) -> GeneratedChunk:
        kv_chunk = self.is_kv_update_chunk(n)
        if engine is not None:
            engine.begin_chunk(n, kv_chunk, action)
        init = self.init_chunk_latent(n, prev_init)
        x = init
        computed = 0
        for t in range(self.config.num_steps):
            x, c = self.denoise_step(t, x, action, kv, engine)
            computed += c
        if kv_chunk:
            self.kv_update_pass(x, action, kv)
        return GeneratedChunk(
            n, x, init, kv_chunk, computed, self.config.num_blocks if kv_chunk else 0
        )

    def prime_kv(self, init: ChunkLatent, action: np.ndarray, kv: KVCache) -> KVCache:
        """Write the initial history entry: full denoise of ``init`` then a KV pass.

        Stands in for the recorded history frame a rollout starts from.
        """
        x = init
        for t in range(self.config.num_steps):
            x, _ = self.denoise_step(t, x, action, kv)
        return self.kv_update_pass(x, action, kv)


@dataclass
class ChunkStream:
    """Stateful driver feeding actions one chunk at a time (no look-ahead)."""

    model: ToyDiT
    engine: Optional["CacheEngine"] = None
    kv: KVCache = field(init=False)
    prev_init: Optional[ChunkLatent] = field(default=None, init=False)
    next_index: int = field(default=0, init=False)

    def __post_init__(self):
        self.kv = KVCache(self.model.config.kv_capacity)

    def step(self, action: np.ndarray) -> GeneratedChunk:
        n = self.next_index
        if n == 0:
            self.model.prime_kv(self.model.init_chunk_latent(0), action, self.kv)
        out = self.model.generate_chunk(n, action, self.kv, self.engine, self.prev_init)
        self.prev_init = out.init
        self.next_index += 1
        return out
