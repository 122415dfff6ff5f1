"""Mask generators and the two curriculum schedules.

Global views get self-adaptive masks ranked by the priority score
``(1 - alpha) * attention + alpha * reconstruction_loss``; local views get
random blockwise masks. Every generator masks exactly ``ceil(N * ratio)``
patches.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .encoder import minmax


@dataclass
class MaskPlan:
    grid: np.ndarray  # uint8 over stem-grid patches, 1 = masked
    alp_driven_idx: np.ndarray
    random_idx: np.ndarray

    @property
    def n_masked(self) -> int:
        return int(self.grid.sum())

    @property
    def masked_idx(self) -> np.ndarray:
        return np.flatnonzero(self.grid)

    @classmethod
    def from_indices(cls, n: int, alp_idx, rand_idx) -> "MaskPlan":
        alp_idx = np.asarray(alp_idx, dtype=np.int64)
        rand_idx = np.asarray(rand_idx, dtype=np.int64)
        grid = np.zeros(n, dtype=np.uint8)
        grid[alp_idx] = 1
        grid[rand_idx] = 1
        return cls(grid, np.sort(alp_idx), np.sort(rand_idx))

    @classmethod
    def empty(cls, n: int) -> "MaskPlan":
        e = np.zeros(0, dtype=np.int64)
        return cls(np.zeros(n, dtype=np.uint8), e, e)


def n_to_mask(n: int, ratio: float) -> int:
    # guard against 0.3 * 10 = 3.0000000000000004 style round-up
    return min(n, math.ceil(round(n * ratio, 9)))


# ---------------------------------------------------------------- schedules


@dataclass
class MaskScheduleState:
    t: float
    T: float
    r0: float = 0.1
    rT: float = 0.9
    alpha_min: float = 0.1
    alpha_max: float = 0.9

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("total epochs T must be positive")
        if not 0 <= self.r0 <= self.rT <= 1:
            raise ValueError("need 0 <= r0 <= rT <= 1")
        if not 0 <= self.alpha_min <= self.alpha_max <= 1:
            raise ValueError("need 0 <= alpha_min <= alpha_max <= 1")
        if not 0 <= self.t <= self.T:
            raise ValueError("need 0 <= t <= T")


def ratio_schedule(state: MaskScheduleState) -> float:
    """Fraction of the mask chosen by priority score: linear from r0 to rT."""
    if state.t == state.T:
        return state.rT
    return state.r0 + (state.t / state.T) * (state.rT - state.r0)


def alpha_schedule(state: MaskScheduleState) -> float:
    """Weight of the reconstruction-loss map: cosine ramp from alpha_min up to alpha_max."""
    if state.t == 0:
        return state.alpha_min
    if state.t == state.T:
        return state.alpha_max
    span = state.alpha_max - state.alpha_min
    return state.alpha_max - span * (1.0 + math.cos(math.pi * state.t / state.T)) / 2.0


# ---------------------------------------------------------------- priority score


@dataclass
class ALPMap:
    scores: np.ndarray
    alpha_used: float
    am_norm: np.ndarray
    rec_norm: np.ndarray
    flags: dict = field(default_factory=dict)


def compute_alp(am, rec, alpha: float) -> ALPMap:
    """Blend min-max normalised attention and reconstruction-loss maps.

    ``rec`` may be ``None`` (no loss history: attention only) or contain NaN
    at never-observed patches, which take the mean of the observed entries.
    """
    am = np.asarray(am, dtype=np.float64).reshape(-1)
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    am_norm, am_const = minmax(am)
    flags = {"am_constant": am_const}
    if rec is None or np.all(np.isnan(np.asarray(rec, dtype=np.float64))):
        rec_norm = np.full_like(am_norm, 0.5)
        alpha = 0.0
        flags["cold_start"] = True
    else:
        rec = np.asarray(rec, dtype=np.float64).reshape(-1)
        if rec.shape != am.shape:
            raise ValueError(f"length mismatch: attention {am.shape[0]} vs loss {rec.shape[0]}")
        seen = ~np.isnan(rec)
        if not seen.all():
            rec = np.where(seen, rec, rec[seen].mean())
        rec_norm, flags["rec_constant"] = minmax(rec)
    scores = (1.0 - alpha) * am_norm + alpha * rec_norm
    return ALPMap(scores, float(alpha), am_norm, rec_norm, flags)


def argsort_desc(v: np.ndarray) -> np.ndarray:
    """Descending order, ties broken by lower index."""
    return np.argsort(-np.asarray(v), kind="stable")


def self_adaptive_mask(alp, rat_m: float, thr_m: float, rng: np.random.Generator) -> MaskPlan:
    """Mask the top ``floor(N*thr_m)`` priority patches, fill up to ``ceil(N*rat_m)`` at random."""
    scores = alp.scores if isinstance(alp, ALPMap) else np.asarray(alp, dtype=np.float64)
    if not 0 < rat_m <= 1:
        raise ValueError(f"masking ratio must lie in (0, 1], got {rat_m}")
    if not 0 <= thr_m <= rat_m:
        raise ValueError(f"threshold must lie in [0, ratio], got {thr_m}")
    n = scores.shape[0]
    n_mask = n_to_mask(n, rat_m)
    top_k = math.floor(round(n * thr_m, 9))
    order = argsort_desc(scores)
    top = order[:top_k]
    rest = n_mask - top_k
    if rest > 0:
        pool = np.sort(order[top_k:])
        extra = rng.choice(pool, size=rest, replace=False)
        return MaskPlan.from_indices(n, top, extra)
    return MaskPlan.from_indices(n, top[:n_mask], [])


# ---------------------------------------------------------------- blockwise


def uniform_random_mask(n: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    idx = rng.choice(n, size=n_to_mask(n, ratio), replace=False)
    return MaskPlan.from_indices(n, [], idx)


def random_blockwise_mask(grid_h: int, grid_w: int, ratio: float, rng: np.random.Generator,
                          min_area: int = 4, max_area_frac: float = 0.4,
                          min_aspect: float = 0.3) -> MaskPlan:
    """Union of random rectangles, trimmed at random to exactly ``ceil(N*ratio)`` patches."""
    if not 0 < ratio <= 1:
        raise ValueError(f"masking ratio must lie in (0, 1], got {ratio}")
    n = grid_h * grid_w
    target = n_to_mask(n, ratio)
    if n < min_area:
        return uniform_random_mask(n, ratio, rng)
    if target == n:
        return MaskPlan.from_indices(n, [], np.arange(n))
    mask = np.zeros((grid_h, grid_w), dtype=bool)
    max_area = max(min_area, max_area_frac * n)
    log_aspect = (math.log(min_aspect), math.log(1.0 / min_aspect))
    attempts = 0
    while mask.sum() < target and attempts < 100 * n:
        attempts += 1
        area = rng.uniform(min_area, max_area)
        aspect = math.exp(rng.uniform(*log_aspect))
        h = int(round(math.sqrt(area * aspect)))
        w = int(round(math.sqrt(area / aspect)))
        if not (1 <= h <= grid_h and 1 <= w <= grid_w):
            continue
        # rectangles may hang over the border and are clipped, which keeps
        # per-patch coverage uniform instead of favouring the centre
        top = int(rng.integers(1 - h, grid_h))
        left = int(rng.integers(1 - w, grid_w))
        mask[max(top, 0) : top + h, max(left, 0) : left + w] = True
    flat = mask.reshape(-1)
    if flat.sum() < target:  # pathological geometry: top up uniformly
        free = np.flatnonzero(~flat)
        flat[rng.choice(free, size=target - flat.sum(), replace=False)] = True
    excess = int(flat.sum()) - target
    if excess > 0:
        drop = rng.choice(np.flatnonzero(flat), size=excess, replace=False)
        flat[drop] = False
    return MaskPlan.from_indices(n, [], np.flatnonzero(flat))


# ---------------------------------------------------------------- loss memory


@dataclass
class RecLossEMA:
    """Per-image EMA of per-patch reconstruction loss; NaN marks never-observed patches."""

    decay: float = 0.9
    store: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.decay < 1:
            raise ValueError("decay must lie in [0, 1)")

    def get(self, image_id: str) -> np.ndarray | None:
        v = self.store.get(image_id)
        return None if v is None else v.copy()

    def snapshot(self) -> "RecLossEMA":
        return RecLossEMA(self.decay, copy.deepcopy(self.store))


def update_rec_loss_ema(store: RecLossEMA, image_id: str, per_patch_loss) -> RecLossEMA:
    """EMA at observed (non-NaN) patches only; the first observation is adopted directly."""
    new = np.asarray(per_patch_loss, dtype=np.float64).reshape(-1)
    seen = ~np.isnan(new)
    if np.any(new[seen] < 0):
        raise ValueError("reconstruction loss must be non-negative")
    cur = store.store.get(image_id)
    if cur is None:
        cur = np.full(new.shape, np.nan)
    elif cur.shape != new.shape:
        raise ValueError(f"loss map length changed for {image_id}: {cur.shape} vs {new.shape}")
    else:
        cur = cur.copy()
    first = seen & np.isnan(cur)
    again = seen & ~np.isnan(cur)
    cur[first] = new[first]
    cur[again] = store.decay * cur[again] + (1.0 - store.decay) * new[again]
    store.store[image_id] = cur
    return store
