"""Analysis drivers: layer correlation and attention redistribution.

Both reuse the attack machinery at small scale. The correlation study
asks, per decoder layer, how well local attention mass predicts the local
loss response of the surrogate objective. The redistribution study asks
where attention mass moves when the budget is confined to the top
attention window versus spread over random placements.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attack import AttackConfig, ImagePair, run_attack
from .attention import AttentionExtractor, extract_attention_map, extract_layer_map
from .errors import EmptyTokenSet
from .hotspots import Region, single_region_schedule, window_dims
from .metrics import mean_attention_shift, partition_regions, pearson, spearman
from .seeding import rng_for
from .surrogates import SurrogateEnsemble, encode_text, loss_and_gradient, surrogate_loss

DEFAULT_ALPHA = 0.05


@dataclass(frozen=True)
class LayerCorrelation:
    """Attention-vs-loss agreement at one decoder layer."""

    layer: int
    pearson_r: float
    pearson_p: float
    spearman_rho: float
    spearman_p: float
    alpha: float = DEFAULT_ALPHA

    @property
    def pearson_significant(self) -> bool:
        return self.pearson_p < self.alpha

    @property
    def spearman_significant(self) -> bool:
        return self.spearman_p < self.alpha

    def to_record(self) -> dict:
        return {
            "layer": self.layer,
            "pearson_r": self.pearson_r,
            "pearson_p": self.pearson_p,
            "spearman_rho": self.spearman_rho,
            "spearman_p": self.spearman_p,
            "pearson_significant": self.pearson_significant,
            "spearman_significant": self.spearman_significant,
            "alpha": self.alpha,
        }


@dataclass(frozen=True)
class CorrelationStudyResult:
    layers: tuple[LayerCorrelation, ...]
    sample_count: int
    extractor_tag: str


def sample_study_region(grid_dims, area_range, rng) -> Region:
    """Random window: area ratio uniform in ``area_range``, placement uniform."""
    gh, gw = grid_dims
    ratio = float(rng.uniform(*area_range))
    h, w = window_dims(ratio, gh, gw)
    top = int(rng.integers(0, gh - h + 1))
    left = int(rng.integers(0, gw - w + 1))
    return Region(top, left, h, w)


def localized_step_loss_delta(image, pixel_region, ensemble, targets, config) -> float:
    """Loss change from one ascent step confined to ``pixel_region``.

    The whole image is the objective input before and after; only the
    region pixels move, by one configured update projected into the
    budget box.
    """
    before = surrogate_loss(ensemble, image, targets)
    sl = pixel_region.slices()
    grad = loss_and_gradient(ensemble, image[sl], targets).gradient
    stepped = image.copy()
    if config.update_rule == "sign":
        stepped[sl] = stepped[sl] + config.step_size * np.sign(grad)
    else:
        stepped[sl] = stepped[sl] + config.step_size * grad
    delta = np.clip(stepped - image, -config.epsilon, config.epsilon)
    stepped = np.clip(image + delta, 0.0, 1.0)
    after = surrogate_loss(ensemble, stepped, targets)
    return float(after - before)


def correlation_study(
    images,
    texts,
    ensemble: SurrogateEnsemble,
    extractor: AttentionExtractor,
    crops_per_pair: int = 20,
    seed: int = 0,
    area_range: tuple[float, float] = (0.1, 0.5),
    config: AttackConfig | None = None,
    loss_probe=None,
    alpha: float = DEFAULT_ALPHA,
) -> CorrelationStudyResult:
    """Per-layer correlation between local attention and local loss response.

    Every image is crossed with every text; each pair contributes
    ``crops_per_pair`` sampled regions, so the sample count is exactly
    ``len(images) * len(texts) * crops_per_pair``. For each sample the
    mean attention under the region is read off every layer's map, and the
    loss delta comes from one localized step (or an injected probe).
    """
    if not images or not texts:
        raise EmptyTokenSet("correlation study needs at least one image and one text")
    if crops_per_pair < 1:
        raise ValueError("crops_per_pair must be >= 1")
    config = config or AttackConfig()
    probe = loss_probe or localized_step_loss_delta

    layer_maps_per_image = []
    for image in images:
        trace = extractor.trace(image)
        layer_maps_per_image.append(
            [extract_layer_map(trace, layer) for layer in range(1, trace.num_layers + 1)]
        )
    num_layers = len(layer_maps_per_image[0])
    grid_dims = layer_maps_per_image[0][0].grid_dims

    attention_rows = []
    loss_deltas = []
    for i, image in enumerate(images):
        h, w = image.shape[:2]
        gh, gw = grid_dims
        for j, text in enumerate(texts):
            targets = encode_text(ensemble, text)
            rng = rng_for(seed, "correlation", i, j)
            for _ in range(crops_per_pair):
                region = sample_study_region(grid_dims, area_range, rng)
                attention_rows.append(
                    [float(m.grid[region.slices()].mean()) for m in layer_maps_per_image[i]]
                )
                pixel_region = region.to_pixels(h, w, gh, gw)
                loss_deltas.append(probe(image, pixel_region, ensemble, targets, config))

    attention = np.asarray(attention_rows)
    deltas = np.asarray(loss_deltas)
    layers = []
    for layer in range(1, num_layers + 1):
        col = attention[:, layer - 1]
        r, rp = pearson(col, deltas)
        rho, rhop = spearman(col, deltas)
        layers.append(LayerCorrelation(layer, r, rp, rho, rhop, alpha))
    return CorrelationStudyResult(tuple(layers), len(deltas), extractor.profile.tag)


@dataclass(frozen=True)
class RedistributionResult:
    """Mean attention shift per partition region under each placement arm."""

    deltas: dict
    pair_count: int
    epochs: int

    def rows(self):
        for setting in sorted(self.deltas):
            for region in ("high", "mid", "low"):
                yield {"setting": setting, "region": region, "delta": self.deltas[setting][region]}


REDISTRIBUTION_SETTINGS = ("random", "hotspot")


def redistribution_study(
    pairs,
    ensemble: SurrogateEnsemble,
    extractor: AttentionExtractor,
    epochs: int = 5,
    seed: int = 0,
    hotspot_area: float = 0.1,
    config: AttackConfig | None = None,
) -> RedistributionResult:
    """Where attention mass moves under confined versus free placement.

    Per pair: extract the map, split the grid into high / mid / low
    attention regions, then run two equally budgeted attacks, one free to
    crop anywhere (full-image window) and one confined to the top
    attention window. Re-extract from each result and average the change
    of mean attention per region over pairs. Zero epochs skips the attack
    and must report exact zeros, which doubles as a determinism check on
    the extractor.
    """
    if not pairs:
        raise EmptyTokenSet("redistribution study needs at least one pair")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    base = config or AttackConfig()
    profile = extractor.profile

    sums = {s: {"high": 0.0, "mid": 0.0, "low": 0.0} for s in REDISTRIBUTION_SETTINGS}
    for pair in pairs:
        pre = extract_attention_map(extractor.trace(pair.image), profile)
        partition = partition_regions(pre)
        for setting in REDISTRIBUTION_SETTINGS:
            if epochs == 0:
                adv = pair.image
            else:
                area = 1.0 if setting == "random" else hotspot_area
                schedule = single_region_schedule(pre, area, epochs)
                run_config = AttackConfig(
                    epsilon=base.epsilon,
                    step_size=base.step_size,
                    total_iterations=epochs,
                    num_stages=1,
                    hotspots_per_stage=1,
                    iou_threshold=base.iou_threshold,
                    crop_scale=base.crop_scale,
                    update_rule=base.update_rule,
                    seed=base.seed,
                    check_every_iteration=base.check_every_iteration,
                    record_saturation=False,
                )
                rng = rng_for(seed, "redistribution", setting, pair.pair_id)
                adv = run_attack(pair, schedule, ensemble, run_config, rng=rng).adversarial
            post = extract_attention_map(extractor.trace(adv), profile)
            for name, mask in partition.masks():
                sums[setting][name] += mean_attention_shift(pre, post, mask)

    n = len(pairs)
    deltas = {s: {k: v / n for k, v in regions.items()} for s, regions in sums.items()}
    return RedistributionResult(deltas, n, epochs)
