import numpy as np
import pytest

from stageattack.attention import AttentionMap, TokenAttentionTrace


def make_trace(vision_weights, grid_dims, num_layers=2, generated_length=None,
               valid_tokens=None, padding=4, non_vision=0.0):
    """Trace whose vision weights are given per (layer, t).

    ``vision_weights`` maps (layer, t) to a flat row-major weight list for
    the patch grid; unmentioned (layer, t) combinations get uniform
    weights. Non-vision positions carry ``non_vision`` mass.
    """
    gh, gw = grid_dims
    n_vis = gh * gw
    prompt_length = n_vis + padding
    vision_start = padding // 2 + 1
    if generated_length is None:
        generated_length = max(t for _, t in vision_weights) if vision_weights else 2
    if valid_tokens is None:
        valid_tokens = tuple(range(1, generated_length + 1))
    rows = {}
    for layer in range(1, num_layers + 1):
        for t in range(1, generated_length + 1):
            row = np.full(prompt_length + t - 1, non_vision, dtype=np.float64)
            weights = vision_weights.get((layer, t))
            block = np.full(n_vis, 1.0) if weights is None else np.asarray(weights, float)
            row[vision_start - 1: vision_start - 1 + n_vis] = block
            rows[(layer, t)] = row
    return TokenAttentionTrace(
        num_layers=num_layers,
        prompt_length=prompt_length,
        generated_length=generated_length,
        vision_indices=tuple(range(vision_start, vision_start + n_vis)),
        grid_dims=grid_dims,
        valid_tokens=tuple(valid_tokens),
        rows=rows,
    )


def random_map(rng, gh, gw):
    raw = rng.uniform(0.05, 1.0, (gh, gw))
    return AttentionMap(raw / raw.sum())


def uniform_map(gh, gw):
    return AttentionMap(np.full((gh, gw), 1.0 / (gh * gw)))


def canonical_image(rng, h, w):
    """Random image whose values sit exactly on the 8-bit lattice."""
    return rng.integers(0, 256, size=(h, w, 3)).astype(np.float64) / 255.0


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
