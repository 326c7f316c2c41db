"""L-infinity bounded ascent over a stage-wise region schedule.

Each scheduled slot gets its share of iterations. One iteration samples a
random sub-crop inside the slot's pixel rectangle, asks the surrogate
gateway for the objective gradient on that crop, takes a step (sign rule
by default), and projects back into the epsilon box intersected with
valid pixel range. Pixels no crop ever touched keep a perturbation of
exactly zero.

When the step and budget sit on the 1/255 lattice and the source image is
8-bit clean, the engine does its arithmetic in integer 255ths. The final
perturbation then lands exactly on the lattice and the adversarial image
survives an 8-bit save/load round trip bit for bit, not approximately.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import AttackAborted, BadPixelRange, DegenerateRegion, StageAttackError
from .hotspots import Region, StageSchedule
from .metrics import budget_saturation
from .seeding import rng_for
from .surrogates import SurrogateEnsemble, encode_text, loss_and_gradient

UPDATE_RULES = ("sign", "raw")


@dataclass(frozen=True)
class AttackConfig:
    """Knobs of one attack run; defaults are the standard operating point."""

    epsilon: float = 16 / 255
    step_size: float = 1 / 255
    total_iterations: int = 300
    num_stages: int = 10
    hotspots_per_stage: int = 3
    iou_threshold: float = 0.3
    crop_scale: tuple[float, float] = (0.5, 1.0)
    update_rule: str = "sign"
    seed: int = 0
    check_every_iteration: bool = True
    record_saturation: bool = True

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.step_size <= 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if self.total_iterations < 1:
            raise ValueError("total_iterations must be >= 1")
        if self.num_stages < 1 or self.hotspots_per_stage < 1:
            raise ValueError("num_stages and hotspots_per_stage must be >= 1")
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold must lie in [0, 1], got {self.iou_threshold}")
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if self.update_rule not in UPDATE_RULES:
            raise ValueError(f"update_rule must be one of {UPDATE_RULES}, got {self.update_rule!r}")


@dataclass(frozen=True)
class ImagePair:
    """Source image plus the description the attack steers toward."""

    pair_id: str
    image: np.ndarray
    target_text: str

    def __post_init__(self):
        image = np.array(self.image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise BadPixelRange(f"image must be H x W x 3, got shape {image.shape}")
        if float(image.min()) < 0.0 or float(image.max()) > 1.0:
            raise BadPixelRange(
                f"image values must lie in [0, 1], got [{image.min()}, {image.max()}]"
            )
        if not self.pair_id:
            raise ValueError("pair_id must be non-empty")
        if not self.target_text:
            raise ValueError("target_text must be non-empty")
        image.setflags(write=False)
        object.__setattr__(self, "image", image)


@dataclass(frozen=True)
class Perturbation:
    """Additive delta with its budget; validated against it."""

    delta: np.ndarray
    epsilon: float

    def __post_init__(self):
        delta = np.asarray(self.delta, dtype=np.float64)
        if float(np.abs(delta).max(initial=0.0)) > self.epsilon + 1e-12:
            raise ValueError("perturbation exceeds its budget")
        object.__setattr__(self, "delta", delta)

    def on_lattice(self, step: float = 1 / 255) -> bool:
        scaled = self.delta / step
        return bool(np.array_equal(scaled, np.rint(scaled)))


@dataclass(frozen=True)
class IterationRecord:
    """What one iteration did: where it cropped, what it saw."""

    iteration: int
    stage: int
    rank: int
    crop: Region
    loss: float
    saturation: float | None

    def to_record(self) -> dict:
        return {
            "iteration": self.iteration,
            "stage": self.stage,
            "rank": self.rank,
            "crop": self.crop.to_record(),
            "loss": self.loss,
            "saturation": self.saturation,
        }


@dataclass(frozen=True)
class AttackResult:
    adversarial: np.ndarray
    perturbation: Perturbation
    records: tuple[IterationRecord, ...]


def random_crop(region: Region, scale_range: tuple[float, float], rng: np.random.Generator) -> Region:
    """Random sub-rectangle of ``region``.

    One side scale is drawn uniformly from ``scale_range`` and applied to
    both dimensions (floored, clamped to at least one cell); the offset is
    uniform over placements that stay inside the region.
    """
    lo, hi = scale_range
    if not 0.0 < lo <= hi <= 1.0:
        raise ValueError(f"scale range must satisfy 0 < lo <= hi <= 1, got {scale_range}")
    if region.height < 1 or region.width < 1:
        raise DegenerateRegion(f"cannot crop inside {region}")
    s = float(rng.uniform(lo, hi))
    ch = max(1, int(s * region.height))
    cw = max(1, int(s * region.width))
    top = region.top + int(rng.integers(0, region.height - ch + 1))
    left = region.left + int(rng.integers(0, region.width - cw + 1))
    return Region(top, left, ch, cw)


def ascend_step(
    x_adv: np.ndarray, crop: Region, gradient: np.ndarray, step_size: float, rule: str = "sign"
) -> np.ndarray:
    """One ascent step on the crop pixels; the rest of the image is untouched.

    ``sign`` moves every crop scalar by +-step_size (zero gradient moves
    nothing, following sign(0) = 0); ``raw`` adds step_size * gradient.
    """
    if rule not in UPDATE_RULES:
        raise ValueError(f"rule must be one of {UPDATE_RULES}, got {rule!r}")
    sl = crop.slices()
    if gradient.shape != x_adv[sl].shape:
        raise ValueError(f"gradient shape {gradient.shape} does not match crop {x_adv[sl].shape}")
    out = x_adv.copy()
    if rule == "sign":
        out[sl] += step_size * np.sign(gradient)
    else:
        out[sl] += step_size * gradient
    return out


def project(x_adv: np.ndarray, x_orig: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamp the delta to [-epsilon, epsilon], then the image to [0, 1].

    Idempotent: projecting a projected image changes nothing.
    """
    delta = np.clip(x_adv - x_orig, -epsilon, epsilon)
    return np.clip(x_orig + delta, 0.0, 1.0)


def _is_8bit_clean(image: np.ndarray) -> bool:
    scaled = image * 255.0
    return bool(np.array_equal(image, np.rint(scaled) / 255.0))


def _int_units(value: float) -> int | None:
    units = value * 255.0
    rounded = int(np.rint(units))
    return rounded if abs(units - rounded) < 1e-9 and rounded >= 1 else None


def _pixel_rects(schedule: StageSchedule, image_shape) -> list[Region]:
    h, w = image_shape[:2]
    gh, gw = schedule.grid_dims
    return [e.hotspot.region.to_pixels(h, w, gh, gw) for e in schedule.entries]


def run_attack(
    pair: ImagePair,
    schedule: StageSchedule,
    ensemble: SurrogateEnsemble,
    config: AttackConfig,
    rng: np.random.Generator | None = None,
) -> AttackResult:
    """Drive the full schedule against one image.

    The random stream defaults to a split of the config seed by pair id,
    so results are bitwise reproducible per pair regardless of how many
    pairs run or in what order. Gateway failures abort the run with the
    partial trace attached.
    """
    if rng is None:
        rng = rng_for(config.seed, "attack", pair.pair_id)
    x_orig = pair.image
    targets = encode_text(ensemble, pair.target_text)
    rects = _pixel_rects(schedule, x_orig.shape)

    eps_units = _int_units(config.epsilon)
    step_units = _int_units(config.step_size)
    exact = (
        config.update_rule == "sign"
        and eps_units is not None
        and step_units is not None
        and _is_8bit_clean(x_orig)
    )
    if exact:
        return _run_exact(pair, schedule, ensemble, config, rng, targets, rects,
                          eps_units, step_units)
    return _run_float(pair, schedule, ensemble, config, rng, targets, rects)


def _iterate(schedule: StageSchedule, rects, config, rng):
    iteration = 0
    for entry, rect in zip(schedule.entries, rects):
        for _ in range(entry.iteration_budget):
            iteration += 1
            crop = random_crop(rect, config.crop_scale, rng)
            yield iteration, entry, crop


def _run_exact(pair, schedule, ensemble, config, rng, targets, rects, eps_units, step_units):
    # Integer 255ths: steps, budget clamp, and range clamp are all exact,
    # so the final delta sits on the step lattice by construction.
    base = np.rint(pair.image * 255.0).astype(np.int32)
    current = base.copy()
    n = base.size
    records = []
    for iteration, entry, crop in _iterate(schedule, rects, config, rng):
        sl = crop.slices()
        crop_pixels = current[sl] / 255.0
        try:
            result = loss_and_gradient(ensemble, crop_pixels, targets)
        except StageAttackError as exc:
            raise AttackAborted(
                f"{pair.pair_id}: gateway failed at iteration {iteration}: {exc}",
                records=records, image=current / 255.0,
            ) from exc
        stepped = current[sl] + step_units * np.sign(result.gradient).astype(np.int32)
        stepped = np.clip(stepped, base[sl] - eps_units, base[sl] + eps_units)
        current[sl] = np.clip(stepped, 0, 255)
        if config.check_every_iteration:
            assert int(np.abs(current - base).max()) <= eps_units
            assert current.min() >= 0 and current.max() <= 255
        saturation = None
        if config.record_saturation:
            saturation = float(np.abs(current - base).sum()) / (n * eps_units)
        records.append(IterationRecord(
            iteration, entry.hotspot.stage, entry.hotspot.rank, crop, result.loss, saturation
        ))
    delta = (current - base) / 255.0
    adversarial = current / 255.0
    return AttackResult(adversarial, Perturbation(delta, config.epsilon), tuple(records))


def _run_float(pair, schedule, ensemble, config, rng, targets, rects):
    x_orig = pair.image
    x_adv = x_orig.copy()
    records = []
    for iteration, entry, crop in _iterate(schedule, rects, config, rng):
        crop_pixels = x_adv[crop.slices()]
        try:
            result = loss_and_gradient(ensemble, crop_pixels, targets)
        except StageAttackError as exc:
            raise AttackAborted(
                f"{pair.pair_id}: gateway failed at iteration {iteration}: {exc}",
                records=records, image=x_adv,
            ) from exc
        x_adv = ascend_step(x_adv, crop, result.gradient, config.step_size, config.update_rule)
        x_adv = project(x_adv, x_orig, config.epsilon)
        if config.check_every_iteration:
            assert float(np.abs(x_adv - x_orig).max()) <= config.epsilon + 1e-12
            assert float(x_adv.min()) >= 0.0 and float(x_adv.max()) <= 1.0
        saturation = None
        if config.record_saturation:
            saturation = budget_saturation(x_adv - x_orig, config.epsilon)
        records.append(IterationRecord(
            iteration, entry.hotspot.stage, entry.hotspot.rank, crop, result.loss, saturation
        ))
    delta = x_adv - x_orig
    return AttackResult(x_adv, Perturbation(delta, config.epsilon), tuple(records))
