"""Block-input fingerprints: 3D grid subsampling plus global and action channels."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from xcache.latent_model import ChunkLatent, GridShape, ViewGroupLayout

DEFAULT_BUDGET = 32


def _uniform_indices(length: int, count: int) -> np.ndarray:
    """``count`` indices spread over [0, length-1] with both endpoints.

    A single index takes the middle of the axis.
    """
    if count <= 1:
        return np.array([(length - 1) // 2], dtype=np.intp)
    pos = np.arange(count) * ((length - 1) / (count - 1))
    # round half up; spacing >= 1 keeps the result strictly increasing
    return np.floor(pos + 0.5).astype(np.intp)


def fallback_1d(length: int, budget: int) -> np.ndarray:
    """Uniform 1D linspace over the flattened token axis."""
    if not length > budget >= 2:
        raise ValueError(f"fallback_1d needs L > K >= 2, got L={length}, K={budget}")
    return _uniform_indices(length, budget)


@dataclass(frozen=True)
class SamplePlan:
    """Token selection for one view group.

    ``full`` keeps every token; otherwise ``axes`` holds (F, H, W) index lists or
    ``flat`` holds a 1D fallback list.
    """

    tokens: int
    full: bool = False
    axes: Optional[tuple[np.ndarray, np.ndarray, np.ndarray]] = None
    flat: Optional[np.ndarray] = None
    grid: Optional[GridShape] = None

    @property
    def counts(self) -> tuple[int, ...]:
        if self.axes is not None:
            return tuple(len(a) for a in self.axes)
        if self.flat is not None:
            return (len(self.flat),)
        return (self.tokens,)

    @property
    def sampled(self) -> int:
        return int(np.prod(self.counts))

    def token_indices(self) -> Optional[np.ndarray]:
        """Flattened token indices, or None for the full tensor."""
        if self.full:
            return None
        if self.flat is not None:
            return self.flat
        fi, hi, wi = self.axes
        g = self.grid
        return ((fi[:, None, None] * g.h + hi[None, :, None]) * g.w + wi[None, None, :]).ravel()


def allocate_axes(grid: GridShape, budget: int) -> tuple[int, int, int]:
    """Per-axis sample counts proportional to the grid with product <= budget."""
    dims = grid.as_tuple()
    ideal = [float(d) for d in dims]
    free = [0, 1, 2]
    # axes whose share falls outside [1, d] are pinned and the rest rescaled
    while free:
        pinned = math.prod(ideal[i] for i in range(3) if i not in free)
        scale = (budget / pinned / math.prod(dims[i] for i in free)) ** (1.0 / len(free))
        for i in free:
            ideal[i] = dims[i] * scale
        out = [i for i in free if not 1.0 <= ideal[i] <= dims[i]]
        if not out:
            break
        for i in out:
            ideal[i] = min(max(ideal[i], 1.0), float(dims[i]))
            free.remove(i)
    counts = [min(d, max(1, math.floor(v + 1e-9))) for d, v in zip(dims, ideal)]
    # largest fractional remainder first; ties go to the earlier axis
    order = sorted(range(3), key=lambda i: (-(ideal[i] - counts[i]), i))
    for i in order:
        if counts[i] >= dims[i]:
            continue
        trial = list(counts)
        trial[i] += 1
        if math.prod(trial) > budget:
            break
        counts = trial
    return tuple(counts)


def plan_grid_sample(grid: GridShape, budget: int = DEFAULT_BUDGET) -> SamplePlan:
    if budget < 1:
        raise ValueError("fingerprint budget K must be >= 1")
    if grid.tokens <= budget:
        return SamplePlan(tokens=grid.tokens, full=True, grid=grid)
    kf, kh, kw = allocate_axes(grid, budget)
    axes = (
        _uniform_indices(grid.f, kf),
        _uniform_indices(grid.h, kh),
        _uniform_indices(grid.w, kw),
    )
    return SamplePlan(tokens=grid.tokens, axes=axes, grid=grid)


def plan_flat_sample(length: int, budget: int = DEFAULT_BUDGET) -> SamplePlan:
    """Plan for a group whose grid shape is unknown."""
    if length <= budget:
        return SamplePlan(tokens=length, full=True)
    return SamplePlan(tokens=length, flat=fallback_1d(length, budget))


def plan_layout(layout: ViewGroupLayout, budget: int = DEFAULT_BUDGET) -> tuple[SamplePlan, ...]:
    return tuple(plan_grid_sample(g.grid, budget) for g in layout)


@dataclass(frozen=True)
class Fingerprint:
    """Named flat vectors: one spatial entry per group, then global, then condition."""

    names: tuple[str, ...]
    entries: tuple[np.ndarray, ...]
    n_spatial: int

    def __len__(self):
        return len(self.entries)

    @property
    def spatial(self) -> tuple[np.ndarray, ...]:
        return self.entries[: self.n_spatial]

    def entry(self, name: str) -> np.ndarray:
        return self.entries[self.names.index(name)]

    def same_structure(self, other: "Fingerprint") -> bool:
        return (
            self.names == other.names
            and self.n_spatial == other.n_spatial
            and all(a.shape == b.shape for a, b in zip(self.entries, other.entries))
        )


def compute_fingerprint(
    x: ChunkLatent, action: np.ndarray, plans: Sequence[SamplePlan]
) -> Fingerprint:
    if len(plans) != len(x.layout):
        raise ValueError(
            f"{len(plans)} sample plans for {len(x.layout)} view groups"
        )
    names, entries, means = [], [], []
    for g, plan, arr in zip(x.layout, plans, x.groups()):
        if plan.tokens != g.grid.tokens or (plan.grid is not None and plan.grid != g.grid):
            raise ValueError(
                f"sample plan for {plan.tokens} tokens does not match group "
                f"{g.name!r} with grid {g.grid.as_tuple()}"
            )
        idx = plan.token_indices()
        sampled = arr if idx is None else arr[:, idx, :]
        names.append(f"spatial:{g.name}")
        entries.append(sampled.ravel())
        means.append(arr.mean(axis=1).ravel())
    names += ["global", "condition"]
    entries.append(np.concatenate(means))
    entries.append(np.asarray(action, dtype=np.float64).ravel().copy())
    return Fingerprint(tuple(names), tuple(entries), len(x.layout))
