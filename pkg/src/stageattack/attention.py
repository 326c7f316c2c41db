"""Spatial attention maps from captioning-model decoder traces.

A captioning vision-language model attends from every generated token back
over the prompt, and the prompt contains one token per image patch. Slicing
a generated token's head-averaged attention row down to those patch
positions, reshaping row-major onto the patch grid, and normalizing to unit
mass gives a per-token spatial map; averaging the per-token maps over the
valid generated tokens gives the map that drives region scheduling.

Order matters: each token's map is normalized before averaging, never
after. Tokens with little total mass on the image would otherwise be
drowned out by tokens with a lot.

Maps are extracted once per source image and cached; nothing downstream
recomputes them mid-run.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .errors import (
    AllZeroGrid,
    EmptyTokenSet,
    GridMismatch,
    LayerOutOfRange,
    MalformedRecords,
    TokenNotValid,
)
from .seeding import content_digest

SUM_TOLERANCE = 1e-6
DEFAULT_CAPTION_PROMPT = "Describe this image."
DEFAULT_GRID = (24, 24)

MAP_SCHEMA = "attention-map/v1"


@dataclass(frozen=True)
class AttentionMap:
    """Nonnegative spatial grid summing to one.

    ``source_tag`` records which extractor and layer produced the map so
    cached files stay self-describing.
    """

    grid: np.ndarray
    source_tag: str = "unknown"

    def __post_init__(self):
        grid = np.array(self.grid, dtype=np.float64)
        if grid.ndim != 2 or grid.size == 0:
            raise GridMismatch(f"attention grid must be 2-d and non-empty, got shape {grid.shape}")
        if (grid < 0).any():
            raise ValueError("attention cells must be nonnegative")
        total = float(grid.sum())
        if abs(total - 1.0) > SUM_TOLERANCE:
            raise ValueError(f"attention mass must sum to 1 within {SUM_TOLERANCE}, got {total!r}")
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)

    @property
    def grid_dims(self) -> tuple[int, int]:
        return self.grid.shape


def normalize_spatial(raw, source_tag="unknown") -> AttentionMap:
    """Scale a nonnegative grid to unit mass.

    Raises AllZeroGrid when no cell is strictly positive: a map with no
    mass has no argmax and cannot seed region selection.
    """
    grid = np.asarray(raw, dtype=np.float64)
    if grid.ndim != 2 or grid.size == 0:
        raise GridMismatch(f"expected a 2-d grid, got shape {grid.shape}")
    if (grid < 0).any():
        raise ValueError("attention cells must be nonnegative")
    total = float(grid.sum())
    if total <= 0.0:
        raise AllZeroGrid("cannot normalize a grid with zero total mass")
    return AttentionMap(grid / total, source_tag)


@dataclass(frozen=True)
class TokenAttentionTrace:
    """Head-averaged decoder attention rows for one captioning pass.

    Layers and generation steps are 1-based. ``rows[(layer, t)]`` holds the
    attention of generated token ``t`` at ``layer`` over the
    ``prompt_length + t - 1`` tokens before it. ``vision_indices`` are the
    1-based prompt positions of the image patch tokens, contiguous and in
    row-major patch order. ``valid_tokens`` lists the generation steps that
    enter the averaged map; special and control tokens stay out.
    """

    num_layers: int
    prompt_length: int
    generated_length: int
    vision_indices: tuple[int, ...]
    grid_dims: tuple[int, int]
    valid_tokens: tuple[int, ...]
    rows: Mapping[tuple[int, int], np.ndarray]

    def __post_init__(self):
        object.__setattr__(self, "vision_indices", tuple(int(i) for i in self.vision_indices))
        object.__setattr__(self, "valid_tokens", tuple(int(t) for t in self.valid_tokens))
        gh, gw = self.grid_dims
        vis = self.vision_indices
        if len(vis) != gh * gw:
            raise GridMismatch(
                f"{len(vis)} vision tokens do not tile a {gh}x{gw} patch grid"
            )
        if vis[0] < 1 or vis[-1] > self.prompt_length:
            raise ValueError("vision token positions must lie inside the prompt")
        if any(b - a != 1 for a, b in zip(vis, vis[1:])):
            raise ValueError("vision token positions must be contiguous")
        if any(t < 1 or t > self.generated_length for t in self.valid_tokens):
            raise TokenNotValid("valid_tokens outside the generated range")

    def row(self, layer: int, t: int) -> np.ndarray:
        """Attention row of generated token ``t`` at ``layer``."""
        if not 1 <= layer <= self.num_layers:
            raise LayerOutOfRange(f"layer {layer} outside [1, {self.num_layers}]")
        if not 1 <= t <= self.generated_length:
            raise TokenNotValid(f"generation step {t} outside [1, {self.generated_length}]")
        row = np.asarray(self.rows[(layer, t)], dtype=np.float64)
        expected = self.prompt_length + t - 1
        if row.shape != (expected,):
            raise GridMismatch(
                f"row for (layer={layer}, t={t}) has length {row.shape}, expected {expected}"
            )
        if (row < 0).any():
            raise ValueError("attention weights must be nonnegative")
        return row


def project_token_attention(trace: TokenAttentionTrace, layer: int, t: int) -> AttentionMap:
    """One generated token's attention, restricted to the patch grid.

    Takes the token's row at ``layer``, keeps only the vision positions,
    reshapes row-major to the grid, and normalizes to unit mass.
    """
    if not 1 <= layer <= trace.num_layers:
        raise LayerOutOfRange(f"layer {layer} outside [1, {trace.num_layers}]")
    if t not in trace.valid_tokens:
        raise TokenNotValid(f"generation step {t} is not in the valid token set")
    row = trace.row(layer, t)
    idx = np.asarray(trace.vision_indices, dtype=np.intp) - 1
    restricted = row[idx].reshape(trace.grid_dims)
    return normalize_spatial(restricted, source_tag=f"layer{layer}/t{t}")


def aggregate_tokens(maps: Sequence[AttentionMap], source_tag=None) -> AttentionMap:
    """Elementwise mean of per-token maps; mass stays at one."""
    if not maps:
        raise EmptyTokenSet("no per-token maps to aggregate")
    dims = maps[0].grid_dims
    for m in maps[1:]:
        if m.grid_dims != dims:
            raise GridMismatch(f"cannot mix grids {dims} and {m.grid_dims}")
    mean = np.mean(np.stack([m.grid for m in maps]), axis=0)
    return AttentionMap(mean, source_tag or maps[0].source_tag)


def extract_layer_map(trace: TokenAttentionTrace, layer: int, source_tag=None) -> AttentionMap:
    """Averaged map at one layer over the trace's valid tokens.

    Per-token normalization happens before the average; the two orders
    differ whenever tokens put different total mass on the image.
    """
    if not trace.valid_tokens:
        raise EmptyTokenSet("trace has no valid generated tokens")
    per_token = [project_token_attention(trace, layer, t) for t in trace.valid_tokens]
    return aggregate_tokens(per_token, source_tag or f"layer{layer}")


@dataclass(frozen=True)
class ExtractorProfile:
    """Identity of an attention source: model, layer, caption prompt."""

    model_id: str
    best_layer: int
    prompt: str = DEFAULT_CAPTION_PROMPT

    def __post_init__(self):
        if self.best_layer < 1:
            raise LayerOutOfRange(f"best_layer must be >= 1, got {self.best_layer}")

    @property
    def tag(self) -> str:
        return f"{self.model_id}/L{self.best_layer}"


# Layer choices per extractor; chosen for maximal agreement between local
# attention mass and the local loss response of the surrogate objective.
DEFAULT_PROFILES = {
    "llava-7b": ExtractorProfile("llava-7b", best_layer=17),
    "llava-13b": ExtractorProfile("llava-13b", best_layer=6),
    "qwen3-vl-8b": ExtractorProfile("qwen3-vl-8b", best_layer=29),
}
DEFAULT_EXTRACTOR_ID = "qwen3-vl-8b"

_STUB_LAYER_COUNTS = {"llava-7b": 32, "llava-13b": 40, "qwen3-vl-8b": 36}


def extract_attention_map(trace: TokenAttentionTrace, profile: ExtractorProfile) -> AttentionMap:
    """Map at the profile's configured layer, tagged with its identity."""
    if profile.best_layer > trace.num_layers:
        raise LayerOutOfRange(
            f"profile layer {profile.best_layer} exceeds trace depth {trace.num_layers}"
        )
    return extract_layer_map(trace, profile.best_layer, source_tag=profile.tag)


def ensemble_attention(maps: Sequence[AttentionMap]) -> AttentionMap:
    """Mean map across extractors, for multi-extractor runs."""
    if not maps:
        raise EmptyTokenSet("no extractor maps to combine")
    tag = "ensemble(" + "+".join(m.source_tag for m in maps) + ")"
    return aggregate_tokens(maps, source_tag=tag)


class AttentionExtractor(Protocol):
    """Anything that can produce a trace for an image."""

    profile: ExtractorProfile

    def trace(self, image: np.ndarray) -> TokenAttentionTrace: ...


def _patch_means(image: np.ndarray, grid_dims) -> np.ndarray:
    """Mean grayscale intensity per patch cell, proportional partition."""
    gh, gw = grid_dims
    gray = image.mean(axis=2) if image.ndim == 3 else image
    h, w = gray.shape
    rows = [int(round(i * h / gh)) for i in range(gh + 1)]
    cols = [int(round(j * w / gw)) for j in range(gw + 1)]
    out = np.empty((gh, gw))
    for i in range(gh):
        r0, r1 = rows[i], max(rows[i + 1], rows[i] + 1)
        for j in range(gw):
            c0, c1 = cols[j], max(cols[j + 1], cols[j] + 1)
            out[i, j] = gray[r0:r1, c0:c1].mean()
    return out


@dataclass
class SyntheticExtractor:
    """Deterministic stand-in for a captioning model.

    Attention rows are built from per-patch image brightness plus seeded
    multiplicative noise, so maps respond to pixel changes (re-extraction
    after an attack shifts them) while staying bit-reproducible for a
    fixed seed. Noise grows with distance from the profile's layer, which
    makes that layer the cleanest signal, mirroring how a layer sweep
    would pick it.
    """

    profile: ExtractorProfile
    grid_dims: tuple[int, int] = DEFAULT_GRID
    num_layers: int | None = None
    generated_length: int = 12
    seed: int = 0
    noise_scale: float = 0.35

    def __post_init__(self):
        if self.num_layers is None:
            self.num_layers = _STUB_LAYER_COUNTS.get(self.profile.model_id, 12)
        if self.profile.best_layer > self.num_layers:
            raise LayerOutOfRange(
                f"profile layer {self.profile.best_layer} exceeds stub depth {self.num_layers}"
            )

    def trace(self, image: np.ndarray) -> TokenAttentionTrace:
        gh, gw = self.grid_dims
        n_vis = gh * gw
        prompt_length = n_vis + 12
        vision_start = 6  # a few system/instruction tokens precede the patches
        vision_indices = tuple(range(vision_start, vision_start + n_vis))
        brightness = _patch_means(np.asarray(image, dtype=np.float64), self.grid_dims)
        base = brightness.ravel() + 0.05  # strictly positive mass everywhere
        digest = content_digest(
            self.profile.model_id, self.profile.prompt, self.seed, np.asarray(image)
        )

        rows = {}
        for layer in range(1, self.num_layers + 1):
            sigma = self.noise_scale * (0.25 + abs(layer - self.profile.best_layer) / self.num_layers)
            for t in range(1, self.generated_length + 1):
                ss = np.random.SeedSequence(entropy=digest, spawn_key=(layer, t))
                rng = np.random.Generator(np.random.PCG64(ss))
                row = np.empty(prompt_length + t - 1)
                row[:] = rng.gamma(1.0, 0.01, size=row.shape)
                jitter = rng.gamma(1.0 / sigma**2, sigma**2, size=n_vis)
                row[vision_start - 1 : vision_start - 1 + n_vis] = base * jitter
                rows[(layer, t)] = row

        valid = tuple(t for t in range(2, self.generated_length))  # ends are specials
        return TokenAttentionTrace(
            num_layers=self.num_layers,
            prompt_length=prompt_length,
            generated_length=self.generated_length,
            vision_indices=vision_indices,
            grid_dims=self.grid_dims,
            valid_tokens=valid,
            rows=rows,
        )


def make_extractor(extractor_id: str, grid_dims=DEFAULT_GRID, seed=0) -> SyntheticExtractor:
    """Synthetic extractor for a known profile id."""
    if extractor_id not in DEFAULT_PROFILES:
        known = ", ".join(sorted(DEFAULT_PROFILES))
        raise KeyError(f"unknown extractor {extractor_id!r}; known: {known}")
    return SyntheticExtractor(DEFAULT_PROFILES[extractor_id], grid_dims=grid_dims, seed=seed)


# --- on-disk map format -------------------------------------------------

def save_attention_map(path, amap: AttentionMap, layer: int) -> None:
    """Write header (grid dims, source tag, layer) then row-major values."""
    path = Path(path)
    header = {
        "schema": MAP_SCHEMA,
        "grid": list(amap.grid_dims),
        "source_tag": amap.source_tag,
        "layer": int(layer),
    }
    lines = [json.dumps(header)]
    for row in amap.grid:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    path.write_text("\n".join(lines) + "\n")


def load_attention_map(path) -> AttentionMap:
    """Read a stored map; unit mass is re-checked on load."""
    path = Path(path)
    text = path.read_text().strip()
    if not text:
        raise MalformedRecords(f"{path} is empty")
    lines = text.split("\n")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise MalformedRecords(f"{path}: bad header: {exc}") from exc
    if header.get("schema") != MAP_SCHEMA:
        raise MalformedRecords(f"{path}: expected schema {MAP_SCHEMA}, got {header.get('schema')!r}")
    gh, gw = header["grid"]
    if len(lines) - 1 != gh:
        raise MalformedRecords(f"{path}: expected {gh} value rows, found {len(lines) - 1}")
    grid = np.array([[float(v) for v in line.split()] for line in lines[1:]])
    if grid.shape != (gh, gw):
        raise MalformedRecords(f"{path}: value block shape {grid.shape} does not match header")
    try:
        return AttentionMap(grid, source_tag=header.get("source_tag", "unknown"))
    except ValueError as exc:
        raise MalformedRecords(f"{path}: {exc}") from exc


def _safe_key(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "-", text)


class AttentionMapCache:
    """File-backed store keyed by (image id, extractor id, layer).

    The pipeline extracts each source image's map exactly once, before any
    attack iteration; later steps read it back from here.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, image_id: str, extractor_id: str, layer: int) -> Path:
        name = f"{_safe_key(image_id)}__{_safe_key(extractor_id)}__L{int(layer)}.attmap"
        return self.root / name

    def load(self, image_id, extractor_id, layer) -> AttentionMap | None:
        p = self.path(image_id, extractor_id, layer)
        return load_attention_map(p) if p.exists() else None

    def store(self, image_id, extractor_id, layer, amap: AttentionMap) -> Path:
        p = self.path(image_id, extractor_id, layer)
        save_attention_map(p, amap, layer)
        return p

    def get_or_extract(self, image, image_id, extractor: AttentionExtractor) -> AttentionMap:
        profile = extractor.profile
        cached = self.load(image_id, profile.model_id, profile.best_layer)
        if cached is not None:
            return cached
        amap = extract_attention_map(extractor.trace(image), profile)
        self.store(image_id, profile.model_id, profile.best_layer, amap)
        return amap
