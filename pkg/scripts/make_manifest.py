"""Generate a synthetic pair manifest for desk-scale runs.

Images are quantized to the 8-bit lattice before saving so the attack
takes its exact integer path and artifact trees stay bitwise stable.
"""

import json
from pathlib import Path

import click
import numpy as np
from PIL import Image

TARGET_POOL = (
    "a red fire truck parked on a street",
    "a sleeping cat on a windowsill",
    "a small boat on a calm lake",
    "a bowl of fresh fruit on a table",
)


def build_manifest(out_dir: Path, count: int, size: int, seed: int) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    for i in range(count):
        # smooth blobs plus noise, snapped to whole 255ths
        yy, xx = np.mgrid[0:size, 0:size] / size
        base = np.stack([
            0.3 + 0.4 * np.sin(2 * np.pi * (yy * rng.uniform(0.5, 2) + rng.uniform(0, 1))),
            0.3 + 0.4 * np.cos(2 * np.pi * (xx * rng.uniform(0.5, 2) + rng.uniform(0, 1))),
            np.full((size, size), rng.uniform(0.2, 0.8)),
        ], axis=-1)
        base = np.clip(base + rng.normal(0, 0.05, base.shape), 0.0, 1.0)
        raster = np.rint(base * 255.0).astype(np.uint8)
        name = f"img{i:03d}.png"
        Image.fromarray(raster).save(out_dir / name)
        lines.append(json.dumps({
            "id": f"p{i:03d}",
            "image_path": name,
            "target_text": TARGET_POOL[i % len(TARGET_POOL)],
        }))
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


@click.command()
@click.option("--out", "out_dir", type=click.Path(), default="data/synthetic")
@click.option("--count", type=int, default=8)
@click.option("--size", type=int, default=48)
@click.option("--seed", type=int, default=0)
def main(out_dir, count, size, seed):
    manifest = build_manifest(Path(out_dir), count, size, seed)
    click.echo(f"{count} images + manifest -> {manifest}")


if __name__ == "__main__":
    main()
