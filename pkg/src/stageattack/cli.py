"""Command-line pipeline: attack, analyze, evaluate, plot.

Artifacts from ``attack`` land in an output tree that later commands read:

    out/
      config.json            resolved run config (self-relative root)
      maps/                  cached attention maps, one file per (image, extractor, layer)
      pairs/<id>/adv.png     adversarial image, 8-bit
      pairs/<id>/delta.npy   perturbation as floats
      pairs/<id>/trace.jsonl per-iteration records
      pairs/<id>/schedule.json
      pairs/<id>/done.json   artifact checksums; presence marks the pair complete

Reruns skip pairs whose checksums still match, so interrupted runs resume
instead of redoing work. Credentials for live endpoints come from the
environment only; config files and flags never carry secrets.
"""

from __future__ import annotations

import importlib
import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np
from PIL import Image

from . import records as rec
from .attack import AttackConfig, ImagePair, run_attack
from .attention import (
    AttentionMapCache,
    DEFAULT_PROFILES,
    ensemble_attention,
    extract_attention_map,
    make_extractor,
)
from .config import MODES, RunConfig
from .errors import AttackAborted, MissingArtifacts, StageAttackError
from .evaluation import (
    DEFAULT_SUCCESS_THRESHOLD,
    FixtureTargetAdapter,
    HttpJudgeClient,
    JudgeCache,
    LexicalOverlapJudge,
    evaluate,
    ingest_manifest,
    load_adversarial_image,
)
from .hotspots import build_schedule
from .metrics import js_divergence
from .plots import PLOT_KINDS
from .studies import correlation_study, redistribution_study
from .surrogates import default_stub_ensemble


def _load_factory(spec: str):
    """Resolve a 'module:callable' hook for real encoder lineups."""
    module_name, _, attr = spec.partition(":")
    if not module_name or not attr:
        raise click.ClickException(f"expected module:callable, got {spec!r}")
    try:
        module = importlib.import_module(module_name)
        return getattr(module, attr)
    except (ImportError, AttributeError) as exc:
        raise click.ClickException(f"cannot load {spec!r}: {exc}") from exc


def _build_ensemble(encoders_spec, run_config):
    if encoders_spec:
        return _load_factory(encoders_spec)(run_config)
    return default_stub_ensemble(seed=run_config.seed)


def _build_extractors(run_config):
    try:
        return [
            make_extractor(eid, grid_dims=run_config.grid, seed=run_config.seed)
            for eid in run_config.extractors
        ]
    except KeyError as exc:
        raise click.ClickException(str(exc.args[0])) from exc


def _resolve_config(config_path, **overrides) -> RunConfig:
    try:
        if config_path:
            return RunConfig.from_file(config_path, **overrides)
        return RunConfig.from_mapping({}, **overrides)
    except (ValueError, json.JSONDecodeError) as exc:
        raise click.ClickException(f"bad config: {exc}") from exc


def _extractor_override(value):
    return tuple(part.strip() for part in value.split(",") if part.strip()) if value else None


def _combined_map(cache, image, image_id, extractors):
    maps = [cache.get_or_extract(image, image_id, ex) for ex in extractors]
    return maps[0] if len(maps) == 1 else ensemble_attention(maps)


def _schedule_for(amap, cfg: RunConfig):
    attack_cfg = cfg.to_attack_config()
    if cfg.mode == "random":
        return build_schedule(amap, 1, 1, cfg.iou_threshold, attack_cfg.total_iterations)
    selector = "coldspot" if cfg.mode == "coldspot" else "hotspot"
    return build_schedule(
        amap,
        attack_cfg.num_stages,
        attack_cfg.hotspots_per_stage,
        attack_cfg.iou_threshold,
        attack_cfg.total_iterations,
        mode=selector,
    )


def _save_pair_artifacts(out_dir: Path, pair, result, schedule, mode) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    raster = np.rint(result.adversarial * 255.0).astype(np.uint8)
    Image.fromarray(raster, "RGB").save(out_dir / rec.ADV_IMAGE)
    np.save(out_dir / rec.DELTA_FILE, result.perturbation.delta)
    rec.write_records(
        out_dir / rec.TRACE_FILE,
        "trace",
        {"pair_id": pair.pair_id, "mode": mode},
        (r.to_record() for r in result.records),
    )
    rec.write_json(out_dir / rec.SCHEDULE_FILE, "schedule", schedule.to_record())
    names = (rec.ADV_IMAGE, rec.DELTA_FILE, rec.TRACE_FILE, rec.SCHEDULE_FILE)
    digests = {name: rec.sha256_file(out_dir / name) for name in names}
    rec.write_json(out_dir / rec.DONE_FILE, "done", {"files": digests})


def _pair_complete(out_dir: Path) -> bool:
    done_path = out_dir / rec.DONE_FILE
    if not done_path.exists():
        return False
    try:
        done = rec.read_json(done_path, "done")
    except StageAttackError:
        return False
    for name, digest in done["files"].items():
        target = out_dir / name
        if not target.exists() or rec.sha256_file(target) != digest:
            return False
    return True


def _attack_one(pair, cfg, cache, extractors, ensemble, out_root: Path):
    out_dir = rec.pair_dir(out_root, pair.pair_id)
    if _pair_complete(out_dir):
        return {"pair": pair.pair_id, "status": "skipped"}
    try:
        amap = _combined_map(cache, pair.image, pair.pair_id, extractors)
        schedule = _schedule_for(amap, cfg)
        result = run_attack(pair, schedule, ensemble, cfg.to_attack_config())
    except AttackAborted as exc:
        out_dir.mkdir(parents=True, exist_ok=True)
        rec.write_records(
            out_dir / rec.TRACE_FILE,
            "trace",
            {"pair_id": pair.pair_id, "mode": cfg.mode, "aborted": str(exc)},
            (r.to_record() for r in exc.records),
        )
        return {"pair": pair.pair_id, "status": "aborted", "error": str(exc)}
    except StageAttackError as exc:
        return {"pair": pair.pair_id, "status": "aborted", "error": str(exc)}
    _save_pair_artifacts(out_dir, pair, result, schedule, cfg.mode)
    final_loss = result.records[-1].loss if result.records else None
    final_sat = result.records[-1].saturation if result.records else None
    return {
        "pair": pair.pair_id,
        "status": "completed",
        "final_loss": final_loss,
        "saturation": final_sat,
    }


@click.group()
def main():
    """Stage-wise attention-guided attacks and their analysis tooling."""


@main.command("attack")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="JSON run config; flags override fields.")
@click.option("--manifest", type=click.Path(exists=True), default=None)
@click.option("--mode", type=click.Choice(MODES), default=None)
@click.option("--extractor", default=None, help="Extractor id, or comma-joined ids to average.")
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--workers", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--iterations", type=int, default=None, help="Override total iteration budget.")
@click.option("--encoders", default=None, help="module:callable returning a surrogate ensemble.")
@click.pass_context
def cmd_attack(ctx, config_path, manifest, mode, extractor, out_dir, workers, seed,
               iterations, encoders):
    """Run the attack over every manifest pair and persist artifacts."""
    cfg = _resolve_config(
        config_path,
        manifest=str(Path(manifest).resolve()) if manifest else None,
        mode=mode,
        extractors=_extractor_override(extractor),
        output_root=out_dir,
        workers=workers,
        seed=seed,
        total_iterations=iterations,
    )
    if not cfg.manifest:
        raise click.ClickException("a manifest is required (--manifest or config)")
    try:
        pairs = ingest_manifest(cfg.manifest, resolution=cfg.resolution)
        extractors = _build_extractors(cfg)
        ensemble = _build_ensemble(encoders, cfg)
        out_root = Path(cfg.output_root)
        out_root.mkdir(parents=True, exist_ok=True)
        rec.write_json(out_root / rec.CONFIG_FILE, "config", cfg.echo())
        cache = AttentionMapCache(out_root / rec.MAPS_DIR)
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                rows = list(pool.map(
                    lambda p: _attack_one(p, cfg, cache, extractors, ensemble, out_root), pairs
                ))
        else:
            rows = [_attack_one(p, cfg, cache, extractors, ensemble, out_root) for p in pairs]
    except StageAttackError as exc:
        raise click.ClickException(str(exc)) from exc

    rows.sort(key=lambda r: r["pair"])
    aborted = 0
    for row in rows:
        if row["status"] == "completed":
            click.echo(f"{row['pair']}: completed  loss={row['final_loss']:.4f} "
                       f"saturation={row['saturation']:.3f}")
        elif row["status"] == "skipped":
            click.echo(f"{row['pair']}: skipped (artifacts already complete)")
        else:
            aborted += 1
            click.echo(f"{row['pair']}: ABORTED ({row['error']})")
    click.echo(f"{sum(r['status'] == 'completed' for r in rows)} completed, "
               f"{sum(r['status'] == 'skipped' for r in rows)} skipped, {aborted} aborted "
               f"-> {out_root}")
    if aborted:
        ctx.exit(1)


def _require_run(run_dir) -> tuple[Path, RunConfig]:
    root = Path(run_dir)
    config_path = root / rec.CONFIG_FILE
    if not config_path.exists():
        raise MissingArtifacts(
            f"{root} is not an attack output tree (missing {rec.CONFIG_FILE}); "
            "run the attack command first"
        )
    body = rec.read_json(config_path, "config")
    body.pop("schema", None)
    cfg = RunConfig.from_mapping(body, output_root=str(root))
    pairs_root = root / rec.PAIRS_DIR
    if not pairs_root.exists():
        raise MissingArtifacts(f"{root} holds no pair artifacts; run the attack command first")
    return root, cfg


def _analyze_saturation(run_dir, out_path):
    root, cfg = _require_run(run_dir)
    rows = []
    for trace_path in sorted((root / rec.PAIRS_DIR).glob(f"*/{rec.TRACE_FILE}")):
        _, trace_rows = rec.read_records(trace_path, "trace")
        pair_id = trace_path.parent.name
        for row in trace_rows:
            if row.get("saturation") is not None:
                rows.append({
                    "pair_id": pair_id,
                    "iteration": row["iteration"],
                    "saturation": row["saturation"],
                })
    if not rows:
        raise MissingArtifacts(f"{root} holds no iteration traces; run the attack command first")
    return rec.write_records(out_path, "saturation", {"label": cfg.mode}, rows)


def _analyze_shift(run_dir, out_path, eval_report):
    root, cfg = _require_run(run_dir)
    extractors = [make_extractor(e, grid_dims=cfg.grid, seed=cfg.seed) for e in cfg.extractors]
    cache = AttentionMapCache(root / rec.MAPS_DIR)

    sim_by_pair = {}
    if eval_report:
        report = rec.read_json(eval_report, "eval")
        by_pair = {}
        for score in report.get("scores", []):
            by_pair.setdefault(score["pair_id"], []).append(score["similarity"])
        sim_by_pair = {k: float(np.mean(v)) for k, v in by_pair.items()}

    rows = []
    for done_path in sorted((root / rec.PAIRS_DIR).glob(f"*/{rec.DONE_FILE}")):
        pair_id = done_path.parent.name
        pre_maps = [
            cache.load(pair_id, ex.profile.model_id, ex.profile.best_layer)
            for ex in extractors
        ]
        if any(m is None for m in pre_maps):
            raise MissingArtifacts(
                f"no cached attention map for pair {pair_id!r}; run the attack command first"
            )
        pre = pre_maps[0] if len(pre_maps) == 1 else ensemble_attention(pre_maps)
        adv = load_adversarial_image(root, pair_id)
        post_maps = [
            cache.get_or_extract(adv, f"{pair_id}__adv", ex) for ex in extractors
        ]
        post = post_maps[0] if len(post_maps) == 1 else ensemble_attention(post_maps)
        rows.append({
            "pair_id": pair_id,
            "js_nats": js_divergence(pre, post),
            "avg_sim": sim_by_pair.get(pair_id),
        })
    if not rows:
        raise MissingArtifacts(f"{root} holds no completed pairs; run the attack command first")
    return rec.write_records(out_path, "shift", {"label": cfg.mode}, rows)


def _analyze_correlation(cfg: RunConfig, manifest, out_path, encoders):
    if not manifest:
        raise click.ClickException("correlation analysis needs --manifest")
    pairs = ingest_manifest(manifest, resolution=cfg.resolution)
    images = [p.image for p in pairs[: cfg.study_images]]
    texts = []
    for p in pairs:
        if p.target_text not in texts:
            texts.append(p.target_text)
        if len(texts) >= cfg.study_texts:
            break
    ensemble = _build_ensemble(encoders, cfg)
    extractor = _build_extractors(cfg)[0]
    result = correlation_study(
        images,
        texts,
        ensemble,
        extractor,
        crops_per_pair=cfg.study_crops_per_pair,
        seed=cfg.seed,
        area_range=cfg.study_area_range,
        config=cfg.to_attack_config(),
    )
    header = {"extractor": result.extractor_tag, "n_samples": result.sample_count}
    return rec.write_records(out_path, "correlation", header,
                             (layer.to_record() for layer in result.layers))


def _analyze_redistribution(cfg: RunConfig, manifest, out_path, encoders):
    if not manifest:
        raise click.ClickException("redistribution analysis needs --manifest")
    pairs = ingest_manifest(manifest, resolution=cfg.resolution)[: cfg.study_images]
    ensemble = _build_ensemble(encoders, cfg)
    extractor = _build_extractors(cfg)[0]
    result = redistribution_study(
        pairs, ensemble, extractor,
        epochs=cfg.study_epochs, seed=cfg.seed, config=cfg.to_attack_config(),
    )
    header = {"pair_count": result.pair_count, "epochs": result.epochs}
    return rec.write_records(out_path, "redistribution", header, result.rows())


@main.command("analyze")
@click.option("--kind", type=click.Choice(["saturation", "shift", "correlation", "redistribution"]),
              required=True)
@click.option("--run", "run_dir", type=click.Path(), default=None,
              help="Attack output tree (saturation and shift).")
@click.option("--manifest", type=click.Path(exists=True), default=None,
              help="Pair manifest (correlation and redistribution).")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--extractor", default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--eval-report", type=click.Path(exists=True), default=None,
              help="Join judged similarities into shift records.")
@click.option("--encoders", default=None, help="module:callable returning a surrogate ensemble.")
def cmd_analyze(kind, run_dir, manifest, config_path, extractor, seed, out_path,
                eval_report, encoders):
    """Produce record files for one analysis kind."""
    try:
        if kind == "saturation":
            if not run_dir:
                raise click.ClickException("saturation analysis needs --run")
            path = _analyze_saturation(run_dir, out_path)
        elif kind == "shift":
            if not run_dir:
                raise click.ClickException("shift analysis needs --run")
            path = _analyze_shift(run_dir, out_path, eval_report)
        else:
            cfg = _resolve_config(
                config_path, seed=seed, extractors=_extractor_override(extractor)
            )
            if kind == "correlation":
                path = _analyze_correlation(cfg, manifest, out_path, encoders)
            else:
                path = _analyze_redistribution(cfg, manifest, out_path, encoders)
    except StageAttackError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(f"{kind} records -> {path}")


@main.command("evaluate")
@click.option("--manifest", type=click.Path(exists=True), required=True)
@click.option("--run", "run_dir", type=click.Path(exists=True), required=True)
@click.option("--captions", type=click.Path(exists=True), default=None,
              help="JSON {target_name: {pair_id: caption}} of recorded captions.")
@click.option("--targets", "targets_spec", default=None,
              help="module:callable returning target adapters {name: adapter}.")
@click.option("--judge", "judge_kind", type=click.Choice(["overlap", "http"]), default="overlap")
@click.option("--judge-model", default="gpt-4.1")
@click.option("--live", is_flag=True, help="Allow contacting live endpoints.")
@click.option("--threshold", type=float, default=DEFAULT_SUCCESS_THRESHOLD)
@click.option("--retries", type=int, default=2)
@click.option("--report", "report_path", type=click.Path(), default=None)
@click.option("--cache", "cache_path", type=click.Path(), default=None)
def cmd_evaluate(manifest, run_dir, captions, targets_spec, judge_kind, judge_model,
                 live, threshold, retries, report_path, cache_path):
    """Caption adversarial images, judge them, and aggregate ASR / similarity."""
    run_root = Path(run_dir)
    if judge_kind == "http" and not live:
        raise click.ClickException("the http judge contacts a live endpoint; pass --live to allow")
    judge = HttpJudgeClient(model=judge_model) if judge_kind == "http" else LexicalOverlapJudge()

    if targets_spec:
        targets = _load_factory(targets_spec)(run_root)
    elif captions:
        recorded = json.loads(Path(captions).read_text())
        targets = {
            name: FixtureTargetAdapter(name, mapping) for name, mapping in recorded.items()
        }
    else:
        raise click.ClickException("supply recorded captions (--captions) or --targets")

    try:
        pairs = ingest_manifest(manifest)
        cache = JudgeCache(cache_path or run_root / "judge_cache.json")
        report = evaluate(
            pairs, run_root, targets, judge,
            threshold=threshold, retries=retries, cache=cache,
        )
    except StageAttackError as exc:
        raise click.ClickException(str(exc)) from exc

    out = Path(report_path or run_root / "eval_report.json")
    rec.write_json(out, "eval", report.to_record())
    for name in sorted(report.per_target):
        stats = report.per_target[name]
        if stats["samples"]:
            click.echo(f"{name}: ASR={stats['asr']:.3f} AvgSim={stats['avg_sim']:.3f} "
                       f"({stats['samples']} samples)")
        else:
            click.echo(f"{name}: no successful samples")
    if report.exclusions:
        click.echo(f"{len(report.exclusions)} cells excluded; see report for reasons")
    click.echo(f"report -> {out}")


@main.command("plot")
@click.option("--kind", type=click.Choice(sorted(PLOT_KINDS)), required=True)
@click.option("--records", "record_paths", type=click.Path(exists=True), multiple=True,
              required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def cmd_plot(kind, record_paths, out_path):
    """Render a figure from record files of the matching kind."""
    try:
        path = PLOT_KINDS[kind](record_paths, out_path)
    except StageAttackError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(f"{kind} figure -> {path}")


if __name__ == "__main__":
    main()
