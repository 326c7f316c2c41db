"""Acceptance gate: one test per shipped guarantee.

Every test prints a single ``ACCEPTANCE NN PASS/FAIL <title>`` line; run

    pytest tests/test_acceptance.py -v -s

to see them inline. Timed criteria assert their own wall-clock ceiling,
so a pass also certifies the runtime.
"""

import functools
import io
import itertools
import json
import time

import numpy as np
from click.testing import CliRunner
from PIL import Image

from stageattack.attack import AttackConfig, ImagePair, run_attack
from stageattack.attention import AttentionMap, normalize_spatial
from stageattack.cli import main as cli_main
from stageattack.errors import EncoderUnavailable
from stageattack.evaluation import (
    FixtureTargetAdapter,
    HttpJudgeClient,
    JudgeCache,
    LexicalOverlapJudge,
    compute_asr,
    evaluate,
)
from stageattack.hotspots import (
    Region,
    build_schedule,
    iou,
    select_coldspots,
    select_hotspots,
    single_region_schedule,
)
from stageattack.metrics import budget_saturation, js_divergence, pearson, spearman
from stageattack.plots import PLOT_KINDS
from stageattack.records import read_json, tree_digest, write_json, write_records
from stageattack.seeding import rng_for
from stageattack.studies import LayerCorrelation, correlation_study, sample_study_region
from stageattack.surrogates import (
    MaskedMeanEncoder,
    SurrogateEnsemble,
    default_stub_ensemble,
    encode_text,
    loss_and_gradient,
    surrogate_loss,
)

from conftest import canonical_image
from oracles import oracle_permutation_p, oracle_select
from test_evaluation import write_run_tree

EPS = 16 / 255
ETA = 1 / 255

# Pinned tie-free samples for the p-value agreement check. The exact
# permutation oracle is O(n!), so agreement is certified on these pinned
# draws, not universally; see the decisions ledger for the caveat.
PERMUTATION_DATASETS = (
    ([-0.104, -0.619, 0.036, -0.076, 0.441],
     [-0.807, -0.249, -1.639, -1.087, -0.621]),
    ([0.028, 0.547, -0.736, -0.163, -0.482, 0.599],
     [0.053, 0.288, -1.21, -0.327, -0.428, 0.346]),
    ([1.294, 1.007, -2.711, -1.889, -0.175, -0.422, 0.214],
     [1.317, 2.389, -3.218, -1.964, 1.272, 0.073, 0.657]),
)


def criterion(number, title):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"\nACCEPTANCE {number:02d} FAIL {title}", flush=True)
                raise
            print(f"\nACCEPTANCE {number:02d} PASS {title}", flush=True)
        return wrapper
    return deco


def peaked_map(rng, gh, gw):
    grid = rng.uniform(0.05, 1.0, (gh, gw))
    grid[0 : gh // 3, 0 : gw // 3] += 4.0
    return normalize_spatial(grid)


def roundtrip_png(image):
    raster = np.rint(image * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(raster, "RGB").save(buf, format="PNG")
    buf.seek(0)
    with Image.open(buf) as back:
        return np.asarray(back, dtype=np.float64) / 255.0


@criterion(1, "stage schedule: 30 slots x 10 iterations, ramped areas, bounded overlap")
def test_criterion_01_schedule_arithmetic(rng):
    start = time.perf_counter()
    amap = peaked_map(rng, 24, 24)
    schedule = build_schedule(amap, 10, 3, 0.3, 300)

    assert len(schedule.entries) == 30
    assert all(e.iteration_budget == 10 for e in schedule.entries)
    for stage in range(1, 11):
        regions = [e.hotspot.region for e in schedule.entries
                   if e.hotspot.stage == stage]
        assert len(regions) == 3
        for region in regions:
            assert abs(region.area - stage / 10 * 576) <= 24  # one grid row
        # overlap bound applies to distinct windows; exhausted stages pad
        # by repeating survivors (see ledger), so duplicates are exempt
        for a, b in itertools.combinations(regions, 2):
            if a != b:
                assert iou(a, b) < 0.3
    assert time.perf_counter() - start < 1.0


@criterion(2, "window selection matches exhaustive search bit-exact (200 random maps)")
def test_criterion_02_selection_matches_oracle(rng):
    start = time.perf_counter()
    combos = list(itertools.product(
        [s / 10 for s in range(1, 11)], (1, 2, 3), (0.0, 0.3, 1.0)
    ))
    checked = 0
    for case in range(200):
        gh = int(rng.integers(3, 13))
        gw = int(rng.integers(3, 13))
        amap = AttentionMap(normalize_spatial(rng.uniform(0.01, 1.0, (gh, gw))).grid)
        area, k, tau = combos[case % len(combos)]
        for select, mode in ((select_hotspots, "hotspot"), (select_coldspots, "coldspot")):
            got = [(h.region.top, h.region.left, h.region.height, h.region.width)
                   for h in select(amap, area, k, tau)]
            want = oracle_select(amap.grid, area, k, tau, mode)
            assert got == want, (gh, gw, area, k, tau, mode)
        checked += 1
    assert checked == 200
    assert time.perf_counter() - start < 30.0


@criterion(3, "full run keeps the budget, the lattice, and the 8-bit round trip")
def test_criterion_03_budget_safety_full_run(rng):
    start = time.perf_counter()
    image = canonical_image(rng, 48, 48)
    pair = ImagePair("safety", image, "a stop sign")
    amap = peaked_map(rng, 24, 24)
    config = AttackConfig()  # per-iteration budget/range asserts are on by default
    schedule = build_schedule(amap, config.num_stages, config.hotspots_per_stage,
                              config.iou_threshold, config.total_iterations)
    out = run_attack(pair, schedule, default_stub_ensemble(), config)

    assert len(out.records) == 300
    delta = out.perturbation.delta
    assert float(np.abs(delta).max()) <= EPS + 1e-15
    assert float(out.adversarial.min()) >= 0.0
    assert float(out.adversarial.max()) <= 1.0
    assert out.perturbation.on_lattice(ETA)
    np.testing.assert_array_equal(roundtrip_png(out.adversarial), out.adversarial)
    assert time.perf_counter() - start < 10.0


@criterion(4, "sign ascent on the top window reaches +epsilon in exactly 16 steps")
def test_criterion_04_closed_form_hotspot(rng):
    amap = peaked_map(rng, 8, 8)
    # the first-stage slot is the rank-1 smallest-area window; pin that
    # against both the selector and the full default schedule
    hot = select_hotspots(amap, 0.1, 1, 0.3)[0]
    schedule = single_region_schedule(amap, 0.1, 16)
    assert schedule.entries[0].hotspot.region == hot.region
    full = build_schedule(amap, 10, 3, 0.3, 300)
    assert full.entries[0].hotspot.region == hot.region

    image = np.full((16, 16, 3), 128 / 255)
    rect = hot.region.to_pixels(16, 16, 8, 8)
    mask_full = np.zeros((16, 16, 3))
    mask_full[rect.slices()] = 1.0
    member = MaskedMeanEncoder(mask=mask_full[rect.slices()])
    config = AttackConfig(total_iterations=16, num_stages=1, hotspots_per_stage=1,
                          crop_scale=(1.0, 1.0))
    out = run_attack(ImagePair("closed", image, "t"), schedule,
                     SurrogateEnsemble((member,)), config)

    delta = out.perturbation.delta
    np.testing.assert_array_equal(delta[rect.slices()],
                                  np.full((rect.height, rect.width, 3), EPS))
    untouched = np.ones((16, 16), bool)
    untouched[rect.slices()[:2]] = False
    assert float(np.abs(delta[untouched]).max()) == 0.0


@criterion(5, "analytic gradients match finite differences within 1e-4 (100 crops)")
def test_criterion_05_gradient_agreement(rng):
    start = time.perf_counter()
    ensemble = default_stub_ensemble(seed=5)
    targets = encode_text(ensemble, "a small boat on a lake")
    fd_eps = 1e-6
    worst = 0.0
    for _ in range(100):
        crop = rng.uniform(0.05, 0.95, (8, 8, 3))
        grad = loss_and_gradient(ensemble, crop, targets).gradient
        fd = np.zeros_like(crop)
        it = np.nditer(crop, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            up = crop.copy()
            up[idx] += fd_eps
            down = crop.copy()
            down[idx] -= fd_eps
            fd[idx] = (surrogate_loss(ensemble, up, targets)
                       - surrogate_loss(ensemble, down, targets)) / (2 * fd_eps)
        rel = float(np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12))
        worst = max(worst, rel)
        assert rel <= 1e-4
    assert worst > 0.0  # the comparison actually exercised nonzero gradients
    assert time.perf_counter() - start < 30.0


@criterion(6, "metric anchor values (saturation, divergence, uniform cell)")
def test_criterion_06_metric_anchors(rng):
    assert budget_saturation(np.zeros((4, 4, 3)), EPS) == 0.0
    assert budget_saturation(np.full((4, 4, 3), -EPS), EPS) == 1.0
    half = np.zeros((2, 4, 3))
    half[0] = EPS
    assert budget_saturation(half, EPS) == 0.5
    overshoot = half.copy()
    overshoot[0] = 2 * EPS  # clamps to 1 per element, not 2
    assert budget_saturation(overshoot, EPS) == 0.5

    p = np.zeros((2, 2))
    p[0, 0] = 1.0
    q = np.zeros((2, 2))
    q[1, 1] = 1.0
    assert abs(js_divergence(p, q) - np.log(2)) <= 1e-9
    for _ in range(20):
        a = normalize_spatial(rng.uniform(0.01, 1.0, (5, 5))).grid
        b = normalize_spatial(rng.uniform(0.01, 1.0, (5, 5))).grid
        assert abs(js_divergence(a, b) - js_divergence(b, a)) <= 1e-12

    uniform = normalize_spatial(np.ones((24, 24)))
    assert f"{uniform.grid[0, 0]:.2g}" == "0.0017"


@criterion(7, "correlation pipeline: 1000 samples, planted worlds, p-value agreement")
def test_criterion_07_correlation_pipeline(rng):
    from test_studies import PlantedExtractor, planted_grid_8x8

    planted = PlantedExtractor(planted_grid_8x8(), num_layers=2)
    images = [canonical_image(rng, 8, 8) for _ in range(10)]
    texts = [f"text {j}" for j in range(5)]
    ensemble = default_stub_ensemble()

    # identity world: the probe IS the planted region mean, so every
    # layer must correlate perfectly; defaults give 10 * 5 * 20 samples
    def identity_probe(image, region, ensemble, targets, config):
        return float(planted.grid[region.slices()].mean())

    out = correlation_study(images, texts, ensemble, planted, seed=3,
                            loss_probe=identity_probe)
    assert out.sample_count == 1000
    for layer in out.layers:
        assert layer.pearson_r >= 1.0 - 1e-9
        assert layer.spearman_rho >= 1.0 - 1e-9

    # noise world: additive noise with sd equal to the signal sd gives a
    # population correlation of 1/sqrt(2); the sample estimate over the
    # same 1000 draws must land within 0.1 of it
    signals = []
    for i in range(10):
        for j in range(5):
            stream = rng_for(3, "correlation", i, j)
            for _ in range(20):
                region = sample_study_region((8, 8), (0.1, 0.5), stream)
                signals.append(float(planted.grid[region.slices()].mean()))
    noise = iter(np.random.default_rng(99).normal(0.0, np.std(signals), 1000))

    def noisy_probe(image, region, ensemble, targets, config):
        return float(planted.grid[region.slices()].mean()) + float(next(noise))

    noisy = correlation_study(images, texts, ensemble, planted, seed=3,
                              loss_probe=noisy_probe)
    for layer in noisy.layers:
        assert abs(layer.pearson_r - 1.0 / np.sqrt(2.0)) <= 0.1

    # approximate p-values track the exact permutation test on small n
    for xs, ys in PERMUTATION_DATASETS:
        _, p_t = pearson(xs, ys)
        assert abs(p_t - oracle_permutation_p(xs, ys, pearson)) <= 0.02
        _, p_s = spearman(xs, ys)
        assert abs(p_s - oracle_permutation_p(xs, ys, spearman)) <= 0.02


@criterion(8, "evaluation: strict success rule and idempotent cached scoring")
def test_criterion_08_evaluation_semantics(tmp_path, rng):
    assert compute_asr([0.5, 0.5]) == 0.0  # exactly-at-threshold is a miss
    assert compute_asr([0.5001, 0.5]) == 0.5

    class CountingJudge(LexicalOverlapJudge):
        calls = 0

        def reply(self, prompt, caption, target):
            CountingJudge.calls += 1
            return super().reply(prompt, caption, target)

    pairs = [ImagePair(f"p{i}", canonical_image(rng, 8, 8), "a red fire truck")
             for i in range(2)]
    write_run_tree(tmp_path, ["p0", "p1"], rng)
    targets = {"t": FixtureTargetAdapter(
        "t", {"p0": "a red fire truck", "p1": "a green field"})}
    judge = CountingJudge()

    cache = JudgeCache(tmp_path / "cache.json")
    first = evaluate(pairs, tmp_path, targets, judge, cache=cache)
    assert CountingJudge.calls == 2
    assert first.per_target["t"]["asr"] == 0.5

    cache2 = JudgeCache(tmp_path / "cache.json")
    second = evaluate(pairs, tmp_path, targets, judge, cache=cache2)
    assert CountingJudge.calls == 2  # fully served from cache
    assert second.to_record() == first.to_record()


@criterion(9, "report and figure formats from fixtures; live scoring stays gated")
def test_criterion_09_formats_and_gating(tmp_path, rng, monkeypatch):
    # Live success-rate and similarity magnitudes need real captioning
    # models and a real judge endpoint, so they are out of desk scope;
    # what ships is the exact report/record/figure pipeline, checked here
    # on fixtures, plus the gates in front of anything that goes live.
    pairs = [ImagePair(f"p{i}", canonical_image(rng, 8, 8), "a red fire truck")
             for i in range(2)]
    write_run_tree(tmp_path, ["p0", "p1"], rng)
    targets = {"t": FixtureTargetAdapter(
        "t", {"p0": "a red fire truck", "p1": "a green field"})}
    report = evaluate(pairs, tmp_path, targets, LexicalOverlapJudge())
    body = report.to_record()
    assert set(body) == {"per_target", "scores", "exclusions", "imperceptibility_l1",
                         "imperceptibility_l2", "sample_count", "threshold"}
    assert set(body["per_target"]["t"]) == {"asr", "avg_sim", "samples"}
    assert all(set(s) == {"pair_id", "target", "similarity", "raw_reply", "retry_count"}
               for s in body["scores"])
    report_path = write_json(tmp_path / "report.json", "eval", body)
    loaded = read_json(report_path, "eval")
    loaded.pop("schema")
    assert loaded == body

    fixtures = {
        "saturation": {"header": {"label": "demo"}, "rows": [
            {"pair_id": "p0", "iteration": i + 1, "saturation": i / 10}
            for i in range(10)
        ]},
        "shift": {"header": {"label": "demo"}, "rows": [
            {"pair_id": "p0", "js_nats": 0.04, "avg_sim": 0.61},
            {"pair_id": "p1", "js_nats": 0.09, "avg_sim": None},
        ]},
        "correlation": {"header": {"extractor": "demo/L1", "n_samples": 40}, "rows": [
            LayerCorrelation(n + 1, 0.5, 0.01, 0.45, 0.3, 0.05).to_record()
            for n in range(4)
        ]},
        "redistribution": {"header": {"pair_count": 2, "epochs": 1}, "rows": [
            {"setting": s, "region": r, "delta": d}
            for s, d in (("random", 0.01), ("hotspot", -0.05))
            for r in ("high", "mid", "low")
        ]},
    }
    for kind, fixture in fixtures.items():
        rec_path = write_records(tmp_path / f"{kind}.jsonl", kind,
                                 fixture["header"], fixture["rows"])
        fig_path = PLOT_KINDS[kind]([rec_path], tmp_path / f"{kind}.png")
        assert fig_path.read_bytes()[:4] == b"\x89PNG"

    monkeypatch.delenv("STAGEATTACK_JUDGE_ENDPOINT", raising=False)
    monkeypatch.delenv("STAGEATTACK_JUDGE_API_KEY", raising=False)
    try:
        HttpJudgeClient().reply("judge this", "caption", "target")
    except EncoderUnavailable as exc:
        assert "STAGEATTACK_JUDGE_ENDPOINT" in str(exc)
    else:
        raise AssertionError("live judge must refuse to run without credentials")

    result = CliRunner().invoke(cli_main, [
        "evaluate", "--manifest", str(tmp_path / "nope.jsonl"),
        "--run", str(tmp_path), "--judge", "http",
    ])
    assert result.exit_code != 0  # refused before touching the manifest


@criterion(10, "identical runs produce bitwise-identical artifact trees")
def test_criterion_10_bitwise_identical_runs(tmp_path, rng):
    start = time.perf_counter()
    data = tmp_path / "data"
    data.mkdir()
    lines = []
    for i in range(2):
        arr = np.rint(canonical_image(rng, 48, 48) * 255).astype(np.uint8)
        Image.fromarray(arr).save(data / f"img{i}.png")
        lines.append(json.dumps({"id": f"p{i}", "image_path": f"img{i}.png",
                                 "target_text": "a red fire truck"}))
    manifest = data / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")

    runner = CliRunner()
    for out_name in ("run_a", "run_b"):
        result = runner.invoke(cli_main, [
            "attack", "--manifest", str(manifest), "--out", str(tmp_path / out_name),
        ], catch_exceptions=False)
        assert result.exit_code == 0, result.output
    assert tree_digest(tmp_path / "run_a") == tree_digest(tmp_path / "run_b")
    assert time.perf_counter() - start < 20.0
