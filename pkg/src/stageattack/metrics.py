"""Scalar metrics over perturbations, maps, and paired samples.

Everything here is a pure function of arrays; the study drivers in
``studies`` and the evaluation harness call into these.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as _scipy_stats

from .attention import AttentionMap
from .errors import DegenerateVariance, GridMismatch
from .hotspots import Region, region_mask, select_hotspots

LN2 = float(np.log(2.0))


def budget_saturation(delta: np.ndarray, epsilon: float) -> float:
    """Mean of min(|d| / epsilon, 1) over every pixel-channel scalar.

    0 means untouched, 1 means the whole budget is spent everywhere. The
    clamp makes the metric insensitive to values that somehow exceed the
    budget; after projection it never binds.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    delta = np.asarray(delta, dtype=np.float64)
    if delta.size == 0:
        raise ValueError("empty perturbation")
    return float(np.mean(np.minimum(np.abs(delta) / epsilon, 1.0)))


def imperceptibility(delta: np.ndarray) -> tuple[float, float]:
    """Size-normalized norms: (mean absolute value, root mean square)."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.size == 0:
        raise ValueError("empty perturbation")
    l1 = float(np.mean(np.abs(delta)))
    l2 = float(np.sqrt(np.mean(np.square(delta))))
    return l1, l2


def _as_distribution(x) -> np.ndarray:
    grid = x.grid if isinstance(x, AttentionMap) else np.asarray(x, dtype=np.float64)
    if (grid < 0).any():
        raise ValueError("distributions must be nonnegative")
    if abs(float(grid.sum()) - 1.0) > 1e-6:
        raise ValueError(f"distribution must sum to 1, got {float(grid.sum())!r}")
    return grid


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    # 0 log 0 = 0; q is the mixture so it is positive wherever p is
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def js_divergence(p, q, units: str = "nats") -> float:
    """Jensen-Shannon divergence between two distributions.

    Symmetric, bounded by ln 2 (reached only on disjoint support).
    ``units="bits"`` rescales by 1/ln 2 for plotting parity; nats is
    canonical everywhere else.
    """
    if units not in ("nats", "bits"):
        raise ValueError(f"units must be 'nats' or 'bits', got {units!r}")
    p = _as_distribution(p)
    q = _as_distribution(q)
    if p.shape != q.shape:
        raise GridMismatch(f"distribution shapes differ: {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)
    js = 0.5 * _kl(p, m) + 0.5 * _kl(q, m)
    js = min(max(js, 0.0), LN2)  # clip float dust at the boundaries
    return js / LN2 if units == "bits" else js


def _corr_inputs(xs, ys) -> tuple[np.ndarray, np.ndarray]:
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError(f"paired 1-d samples required, got {xs.shape} and {ys.shape}")
    if xs.size < 3:
        raise ValueError(f"need at least 3 samples, got {xs.size}")
    return xs, ys


def _t_two_sided_p(r: float, n: int) -> float:
    if abs(r) >= 1.0:
        return 0.0
    t = abs(r) * np.sqrt((n - 2) / (1.0 - r * r))
    return float(2.0 * _scipy_stats.t.sf(t, df=n - 2))


def pearson(xs, ys) -> tuple[float, float]:
    """Pearson r with a two-sided t-approximate p-value (n - 2 dof)."""
    xs, ys = _corr_inputs(xs, ys)
    xc = xs - xs.mean()
    yc = ys - ys.mean()
    sx = float(np.sqrt(np.sum(xc * xc)))
    sy = float(np.sqrt(np.sum(yc * yc)))
    if sx == 0.0 or sy == 0.0:
        raise DegenerateVariance("a constant sample has no correlation")
    r = float(np.sum(xc * yc) / (sx * sy))
    r = min(max(r, -1.0), 1.0)
    return r, _t_two_sided_p(r, xs.size)


def spearman(xs, ys) -> tuple[float, float]:
    """Spearman rho: Pearson on average ranks, same p-value treatment."""
    xs, ys = _corr_inputs(xs, ys)
    rx = _scipy_stats.rankdata(xs)
    ry = _scipy_stats.rankdata(ys)
    if np.all(rx == rx[0]) or np.all(ry == ry[0]):
        raise DegenerateVariance("a fully tied sample has no rank correlation")
    return pearson(rx, ry)


@dataclass(frozen=True)
class RegionPartition:
    """Disjoint high / mid / low attention masks tiling the grid.

    ``high`` is the best window at one tenth of the grid area, ``mid`` the
    best window at two tenths minus the high cells, ``low`` everything
    else. The two rectangles are kept for reporting.
    """

    high: np.ndarray
    mid: np.ndarray
    low: np.ndarray
    high_rect: Region
    mid_rect: Region

    def __post_init__(self):
        total = self.high.astype(int) + self.mid.astype(int) + self.low.astype(int)
        if not np.all(total == 1):
            raise ValueError("partition masks must tile the grid exactly once")

    def masks(self):
        return (("high", self.high), ("mid", self.mid), ("low", self.low))


def partition_regions(amap: AttentionMap, high_ratio: float = 0.1, mid_ratio: float = 0.2) -> RegionPartition:
    """Three-way split of the grid by attention concentration."""
    high_rect = select_hotspots(amap, high_ratio, 1, 1.0)[0].region
    mid_rect = select_hotspots(amap, mid_ratio, 1, 1.0)[0].region
    high = region_mask(high_rect, amap.grid_dims)
    mid = region_mask(mid_rect, amap.grid_dims) & ~high
    low = ~(high | mid)
    return RegionPartition(high, mid, low, high_rect, mid_rect)


def mean_attention_shift(pre: AttentionMap, post: AttentionMap, mask: np.ndarray) -> float:
    """Change of mean attention inside ``mask`` from pre to post."""
    if pre.grid_dims != post.grid_dims:
        raise GridMismatch(f"map shapes differ: {pre.grid_dims} vs {post.grid_dims}")
    if mask.shape != pre.grid_dims:
        raise GridMismatch(f"mask shape {mask.shape} does not match maps {pre.grid_dims}")
    if not mask.any():
        raise ValueError("empty mask")
    return float(post.grid[mask].mean() - pre.grid[mask].mean())
