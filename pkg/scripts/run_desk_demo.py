"""End-to-end desk demo on stub encoders: attack, analyze, evaluate, plot.

Runs the confined-window schedule against the unconfined baseline on a
synthetic manifest, then produces every record and figure kind. Captions
are a recorded fixture (half on-target, half off), so the evaluation leg
exercises the real scoring path without any live endpoint.
"""

import json
import sys
from pathlib import Path

import click

sys.path.insert(0, str(Path(__file__).parent))
from make_manifest import build_manifest  # noqa: E402

from stageattack.cli import main as cli  # noqa: E402


def run(args):
    cli(args, standalone_mode=False)


@click.command()
@click.option("--workdir", type=click.Path(), default="desk_demo")
@click.option("--pairs", "count", type=int, default=4)
@click.option("--seed", type=int, default=0)
def main(workdir, count, seed):
    work = Path(workdir)
    manifest = build_manifest(work / "data", count, 48, seed)
    study_config = work / "study_config.json"
    study_config.write_text(json.dumps({
        "total_iterations": 60,
        "seed": seed,
        "study_images": 2,
        "study_texts": 2,
        "study_crops_per_pair": 10,
        "study_epochs": 1,
    }))

    figures = work / "figures"
    figures.mkdir(parents=True, exist_ok=True)
    records = work / "records"
    records.mkdir(exist_ok=True)

    for mode in ("saga", "random"):
        run(["attack", "--manifest", str(manifest), "--mode", mode,
             "--seed", str(seed), "--out", str(work / f"run_{mode}")])
        run(["analyze", "--kind", "saturation", "--run", str(work / f"run_{mode}"),
             "--out", str(records / f"saturation_{mode}.jsonl")])
    run(["plot", "--kind", "saturation",
         "--records", str(records / "saturation_saga.jsonl"),
         "--records", str(records / "saturation_random.jsonl"),
         "--out", str(figures / "saturation.png")])

    pair_ids = [json.loads(line)["id"] for line in manifest.read_text().splitlines()]
    targets = {json.loads(line)["id"]: json.loads(line)["target_text"]
               for line in manifest.read_text().splitlines()}
    captions = {"recorded": {
        pid: targets[pid] if i % 2 == 0 else "an empty gray scene"
        for i, pid in enumerate(pair_ids)
    }}
    captions_path = work / "captions.json"
    captions_path.write_text(json.dumps(captions, indent=2))
    run(["evaluate", "--manifest", str(manifest), "--run", str(work / "run_saga"),
         "--captions", str(captions_path)])

    run(["analyze", "--kind", "shift", "--run", str(work / "run_saga"),
         "--eval-report", str(work / "run_saga" / "eval_report.json"),
         "--out", str(records / "shift.jsonl")])
    run(["plot", "--kind", "shift", "--records", str(records / "shift.jsonl"),
         "--out", str(figures / "shift.png")])

    for kind in ("correlation", "redistribution"):
        run(["analyze", "--kind", kind, "--manifest", str(manifest),
             "--config", str(study_config), "--out", str(records / f"{kind}.jsonl")])
        run(["plot", "--kind", kind, "--records", str(records / f"{kind}.jsonl"),
             "--out", str(figures / f"{kind}.png")])

    click.echo(f"runs, records, and figures under {work}/")


if __name__ == "__main__":
    main()
