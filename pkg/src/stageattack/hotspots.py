"""Stage-wise region schedules over an attention map.

Stage ``n`` of ``N`` works on windows covering ``n/N`` of the patch grid,
so early stages concentrate the pixel budget where the extractor looks
and later stages widen toward the whole image. Within a stage, up to
``k`` windows are picked greedily by mean attention under a pairwise
overlap cap, and each schedule slot receives an equal share of the total
iteration budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .attention import AttentionMap
from .errors import (
    AreaTooSmall,
    BudgetTooSmall,
    DegenerateRegion,
    StageOutOfRange,
)


def _round_half_up(x: float) -> int:
    # round() would take ties to even; window sizing wants plain rounding
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class Region:
    """Axis-aligned rectangle in grid (or pixel) coordinates.

    ``top``/``left`` are 0-based offsets of the first covered cell;
    ``height``/``width`` count covered cells.
    """

    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        if self.top < 0 or self.left < 0:
            raise ValueError(f"region origin must be nonnegative, got {self}")
        if self.height < 1 or self.width < 1:
            raise DegenerateRegion(f"region must cover at least one cell, got {self}")

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def right(self) -> int:
        return self.left + self.width

    @property
    def area(self) -> int:
        return self.height * self.width

    def slices(self) -> tuple[slice, slice]:
        return slice(self.top, self.bottom), slice(self.left, self.right)

    def contains(self, other: "Region") -> bool:
        return (
            self.top <= other.top
            and self.left <= other.left
            and other.bottom <= self.bottom
            and other.right <= self.right
        )

    def to_pixels(self, image_h: int, image_w: int, grid_h: int, grid_w: int) -> "Region":
        """Map grid cells to the pixel rectangle they tile.

        Boundaries are placed proportionally, so grids that do not divide
        the image evenly still partition it without gaps or overlaps.
        """
        t = _round_half_up(self.top * image_h / grid_h)
        b = _round_half_up(self.bottom * image_h / grid_h)
        l = _round_half_up(self.left * image_w / grid_w)
        r = _round_half_up(self.right * image_w / grid_w)
        return Region(t, l, max(b - t, 1), max(r - l, 1))

    def to_record(self) -> dict:
        return {"top": self.top, "left": self.left, "height": self.height, "width": self.width}

    @classmethod
    def from_record(cls, rec: dict) -> "Region":
        return cls(rec["top"], rec["left"], rec["height"], rec["width"])


def iou(a: Region, b: Region) -> float:
    """Intersection over union by integer cell counting."""
    ih = min(a.bottom, b.bottom) - max(a.top, b.top)
    iw = min(a.right, b.right) - max(a.left, b.left)
    inter = max(ih, 0) * max(iw, 0)
    union = a.area + b.area - inter
    return inter / union


def region_mask(region: Region, grid_dims) -> np.ndarray:
    mask = np.zeros(grid_dims, dtype=bool)
    mask[region.slices()] = True
    return mask


def stage_area_ratio(stage: int, num_stages: int) -> float:
    """Fraction of the grid stage ``stage`` covers: stage / num_stages."""
    if num_stages < 1:
        raise StageOutOfRange(f"num_stages must be >= 1, got {num_stages}")
    if not 1 <= stage <= num_stages:
        raise StageOutOfRange(f"stage {stage} outside [1, {num_stages}]")
    return stage / num_stages


def window_dims(area_ratio: float, grid_h: int, grid_w: int) -> tuple[int, int]:
    """Near-square window covering ``area_ratio`` of the grid.

    Height is rounded from the square root of the target cell count scaled
    by the grid's aspect, width from the remaining cells; both clamp to the
    grid, and neither can round to zero.
    """
    if area_ratio <= 0:
        raise AreaTooSmall(f"area ratio must be positive, got {area_ratio}")
    if area_ratio > 1:
        raise ValueError(f"area ratio must be <= 1, got {area_ratio}")
    cells = area_ratio * grid_h * grid_w
    h = _round_half_up(math.sqrt(cells * grid_h / grid_w))
    h = min(max(h, 1), grid_h)
    w = min(max(_round_half_up(cells / h), 1), grid_w)
    if h * w < 1:
        raise AreaTooSmall(f"area ratio {area_ratio} rounds to an empty window")
    return h, w


def enumerate_candidates(amap: AttentionMap, area_ratio: float) -> list[tuple[Region, float]]:
    """All stride-1 window placements with their mean attention.

    Returned in row-major placement order. Scores are plain means of the
    map cells under the window, so they sit in [0, 1].
    """
    gh, gw = amap.grid_dims
    h, w = window_dims(area_ratio, gh, gw)
    grid = amap.grid
    n = h * w
    out = []
    for top in range(gh - h + 1):
        for left in range(gw - w + 1):
            score = float(grid[top : top + h, left : left + w].sum()) / n
            out.append((Region(top, left, h, w), score))
    return out


@dataclass(frozen=True)
class Hotspot:
    """One selected window: where, at which stage, how it ranked."""

    region: Region
    stage: int
    rank: int
    score: float
    area_ratio: float

    def to_record(self) -> dict:
        return {
            "region": self.region.to_record(),
            "stage": self.stage,
            "rank": self.rank,
            "score": self.score,
            "area_ratio": self.area_ratio,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Hotspot":
        return cls(
            Region.from_record(rec["region"]),
            rec["stage"],
            rec["rank"],
            rec["score"],
            rec["area_ratio"],
        )


def _admissible(overlap: float, tau: float) -> bool:
    # Disjoint windows always pass; otherwise the overlap must stay under
    # tau. The extra clause keeps tau = 0 meaning "disjoint only" rather
    # than "nothing at all".
    return overlap == 0.0 or overlap < tau


def _greedy_select(candidates, keys, k: int, tau: float, area_ratio: float, stage: int):
    order = sorted(range(len(candidates)), key=lambda i: keys[i])
    chosen: list[Hotspot] = []
    for i in order:
        if len(chosen) >= k:
            break
        region, score = candidates[i]
        if all(_admissible(iou(region, h.region), tau) for h in chosen):
            chosen.append(Hotspot(region, stage, len(chosen) + 1, score, area_ratio))
    return chosen


def select_hotspots(
    amap: AttentionMap, area_ratio: float, k: int, tau: float, stage: int = 1
) -> list[Hotspot]:
    """Up to ``k`` highest-attention windows with pairwise overlap under ``tau``.

    Greedy from the top: repeatedly take the best-scoring admissible
    candidate. Ties break row-major, topmost first then leftmost. Stops
    early when the candidate pool is exhausted.
    """
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    candidates = enumerate_candidates(amap, area_ratio)
    keys = [(-score, region.top, region.left) for region, score in candidates]
    return _greedy_select(candidates, keys, k, tau, area_ratio, stage)


def select_coldspots(
    amap: AttentionMap, area_ratio: float, k: int, tau: float, stage: int = 1
) -> list[Hotspot]:
    """Mirror of select_hotspots keyed on ascending attention.

    Same tie-break and overlap rule; used by the low-attention control
    arm of the attack.
    """
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    candidates = enumerate_candidates(amap, area_ratio)
    keys = [(score, region.top, region.left) for region, score in candidates]
    return _greedy_select(candidates, keys, k, tau, area_ratio, stage)


_SELECTORS = {"hotspot": select_hotspots, "coldspot": select_coldspots}


@dataclass(frozen=True)
class ScheduleEntry:
    """One slot of work: a region and the iterations assigned to it."""

    hotspot: Hotspot
    iteration_budget: int

    def to_record(self) -> dict:
        return {"hotspot": self.hotspot.to_record(), "iteration_budget": self.iteration_budget}

    @classmethod
    def from_record(cls, rec: dict) -> "ScheduleEntry":
        return cls(Hotspot.from_record(rec["hotspot"]), rec["iteration_budget"])


@dataclass(frozen=True)
class StageSchedule:
    """Ordered slots for a full attack run.

    Slots are ordered by (stage, rank). When the overlap cap leaves a
    stage with fewer than ``hotspots_per_stage`` distinct windows, the
    survivors cycle through the remaining slots so every stage keeps the
    same slot count and per-slot budget, and no iterations are dropped.
    """

    entries: tuple[ScheduleEntry, ...]
    num_stages: int
    hotspots_per_stage: int
    iou_threshold: float
    total_iterations: int
    grid_dims: tuple[int, int]

    def assigned_iterations(self) -> int:
        return sum(e.iteration_budget for e in self.entries)

    def stage_entries(self, stage: int) -> list[ScheduleEntry]:
        return [e for e in self.entries if e.hotspot.stage == stage]

    def to_record(self) -> dict:
        return {
            "entries": [e.to_record() for e in self.entries],
            "num_stages": self.num_stages,
            "hotspots_per_stage": self.hotspots_per_stage,
            "iou_threshold": self.iou_threshold,
            "total_iterations": self.total_iterations,
            "grid_dims": list(self.grid_dims),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "StageSchedule":
        return cls(
            tuple(ScheduleEntry.from_record(e) for e in rec["entries"]),
            rec["num_stages"],
            rec["hotspots_per_stage"],
            rec["iou_threshold"],
            rec["total_iterations"],
            tuple(rec["grid_dims"]),
        )


def _check_area(hotspot: Hotspot, grid_dims) -> None:
    gh, gw = grid_dims
    target = hotspot.area_ratio * gh * gw
    if abs(hotspot.region.area - target) > max(gh, gw):
        raise AreaTooSmall(
            f"stage {hotspot.stage} window area {hotspot.region.area} strays more than "
            f"one grid row from target {target:.1f}"
        )


def build_schedule(
    amap: AttentionMap,
    num_stages: int,
    hotspots_per_stage: int,
    tau: float,
    total_iterations: int,
    mode: str = "hotspot",
) -> StageSchedule:
    """Full schedule: ``num_stages`` stages at area ratios n/N, ``k`` slots each.

    Every slot receives ``floor(total / (N * k))`` iterations. Raises
    BudgetTooSmall when that floor is zero, rather than silently running
    nothing for some regions.
    """
    if num_stages < 1 or hotspots_per_stage < 1:
        raise ValueError("num_stages and hotspots_per_stage must be >= 1")
    if mode not in _SELECTORS:
        raise ValueError(f"mode must be one of {sorted(_SELECTORS)}, got {mode!r}")
    per_slot = total_iterations // (num_stages * hotspots_per_stage)
    if per_slot < 1:
        raise BudgetTooSmall(
            f"{total_iterations} iterations over {num_stages}x{hotspots_per_stage} slots "
            "leaves zero per slot"
        )
    select = _SELECTORS[mode]
    entries = []
    for n in range(1, num_stages + 1):
        a = stage_area_ratio(n, num_stages)
        survivors = select(amap, a, hotspots_per_stage, tau, stage=n)
        for h in survivors:
            _check_area(h, amap.grid_dims)
        for slot in range(hotspots_per_stage):
            spot = replace(survivors[slot % len(survivors)], rank=slot + 1)
            entries.append(ScheduleEntry(spot, per_slot))
    return StageSchedule(
        entries=tuple(entries),
        num_stages=num_stages,
        hotspots_per_stage=hotspots_per_stage,
        iou_threshold=tau,
        total_iterations=total_iterations,
        grid_dims=amap.grid_dims,
    )


def single_region_schedule(
    amap: AttentionMap, area_ratio: float, total_iterations: int, mode: str = "hotspot"
) -> StageSchedule:
    """One stage, one slot, all iterations on the best window at ``area_ratio``.

    Covers the degenerate baselines: ``area_ratio=1.0`` is a whole-image
    run, small ratios confine the budget to a single window.
    """
    if total_iterations < 1:
        raise BudgetTooSmall("a single-region schedule needs at least one iteration")
    if mode not in _SELECTORS:
        raise ValueError(f"mode must be one of {sorted(_SELECTORS)}, got {mode!r}")
    spot = _SELECTORS[mode](amap, area_ratio, 1, 1.0, stage=1)[0]
    entry = ScheduleEntry(spot, total_iterations)
    return StageSchedule(
        entries=(entry,),
        num_stages=1,
        hotspots_per_stage=1,
        iou_threshold=1.0,
        total_iterations=total_iterations,
        grid_dims=amap.grid_dims,
    )
