import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from stageattack.attack import ImagePair
from stageattack.errors import (
    BadPixelRange,
    EmptyScores,
    EncoderUnavailable,
    MalformedRecord,
    MissingImage,
    OutOfRangeScore,
    UnparseableReply,
)
from stageattack.evaluation import (
    DEFAULT_JUDGE_TEMPLATE,
    FixtureTargetAdapter,
    HttpJudgeClient,
    JudgeCache,
    JudgeScore,
    LexicalOverlapJudge,
    ScriptedJudge,
    average_similarity,
    compute_asr,
    evaluate,
    ingest_manifest,
    judge_similarity,
    load_adversarial_image,
    parse_similarity,
)
from stageattack.records import ADV_IMAGE, DELTA_FILE, pair_dir

from conftest import canonical_image


def write_run_tree(root, pair_ids, rng, size=8, delta_value=2 / 255):
    """Minimal attack output tree: adv.png and delta.npy per pair."""
    for pid in pair_ids:
        d = pair_dir(root, pid)
        d.mkdir(parents=True, exist_ok=True)
        img = np.rint(canonical_image(rng, size, size) * 255).astype(np.uint8)
        Image.fromarray(img).save(d / ADV_IMAGE)
        np.save(d / DELTA_FILE, np.full((size, size, 3), delta_value))


class TestParse:
    def test_bare_number(self):
        assert parse_similarity("0.85") == 0.85

    def test_number_in_prose(self):
        assert parse_similarity("Similarity: 0.7.") == 0.7
        assert parse_similarity("I rate this 1") == 1.0

    def test_first_number_wins(self):
        assert parse_similarity("0.2 or maybe 0.9") == 0.2

    def test_no_number_rejected(self):
        with pytest.raises(UnparseableReply):
            parse_similarity("no clue")

    def test_out_of_range_rejected(self):
        with pytest.raises(OutOfRangeScore):
            parse_similarity("1.5")
        with pytest.raises(OutOfRangeScore):
            parse_similarity("-0.2")

    def test_score_object_validates(self):
        with pytest.raises(OutOfRangeScore):
            JudgeScore("p", "t", 1.2, "1.2")


class TestJudgeSimilarity:
    def test_transient_failures_retried(self):
        class Flaky:
            calls = 0

            def reply(self, prompt, caption, target):
                Flaky.calls += 1
                if Flaky.calls <= 2:
                    raise EncoderUnavailable("down")
                return "0.6"

        score = judge_similarity("cap", "tgt", Flaky(), retries=2)
        assert score.similarity == 0.6
        assert score.retry_count == 2

    def test_unparseable_retried_then_fails(self):
        class Garbage:
            calls = 0

            def reply(self, prompt, caption, target):
                Garbage.calls += 1
                return "word salad"

        with pytest.raises(UnparseableReply):
            judge_similarity("cap", "tgt", Garbage(), retries=2)
        assert Garbage.calls == 3  # initial try plus two retries

    def test_out_of_range_never_retried(self):
        class Overeager:
            calls = 0

            def reply(self, prompt, caption, target):
                Overeager.calls += 1
                return "2.0"

        with pytest.raises(OutOfRangeScore):
            judge_similarity("cap", "tgt", Overeager(), retries=5)
        assert Overeager.calls == 1

    def test_template_formatted_into_prompt(self):
        seen = {}

        class Spy:
            def reply(self, prompt, caption, target):
                seen["prompt"] = prompt
                return "0.5"

        judge_similarity("the caption", "the target", Spy())
        assert "the caption" in seen["prompt"]
        assert "the target" in seen["prompt"]


class TestAggregates:
    def test_asr_strictly_above(self):
        assert compute_asr([0.4, 0.6]) == 0.5
        assert compute_asr([0.5, 0.5]) == 0.0  # exactly at threshold fails
        assert compute_asr([0.51]) == 1.0

    def test_asr_accepts_score_objects(self):
        scores = [JudgeScore("p", "t", 0.9, "0.9"), JudgeScore("q", "t", 0.1, "0.1")]
        assert compute_asr(scores) == 0.5
        assert average_similarity(scores) == pytest.approx(0.5)

    def test_empty_rejected(self):
        with pytest.raises(EmptyScores):
            compute_asr([])
        with pytest.raises(EmptyScores):
            average_similarity([])

    @given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=20),
           st.floats(0.0, 1.0))
    @settings(max_examples=100, deadline=None)
    def test_asr_bounds_and_permutation_invariance(self, values, threshold):
        a = compute_asr(values, threshold)
        b = compute_asr(list(reversed(values)), threshold)
        assert a == b
        assert 0.0 <= a <= 1.0
        assert average_similarity(values) == pytest.approx(float(np.mean(values)))


class TestManifest:
    def write_image(self, path, rng, size=6):
        arr = np.rint(canonical_image(rng, size, size) * 255).astype(np.uint8)
        Image.fromarray(arr).save(path)

    def test_happy_path_relative_paths(self, tmp_path, rng):
        self.write_image(tmp_path / "a.png", rng)
        self.write_image(tmp_path / "b.png", rng)
        lines = [
            json.dumps({"id": "p0", "image_path": "a.png", "target_text": "a dog"}),
            "",
            json.dumps({"id": "p1", "image_path": "b.png", "target_text": "a cat"}),
        ]
        m = tmp_path / "manifest.jsonl"
        m.write_text("\n".join(lines) + "\n")
        pairs = ingest_manifest(m)
        assert [p.pair_id for p in pairs] == ["p0", "p1"]
        assert pairs[0].image.shape == (6, 6, 3)

    def test_npy_images_validated(self, tmp_path):
        np.save(tmp_path / "bad.npy", np.full((4, 4, 3), 1.7))
        m = tmp_path / "manifest.jsonl"
        m.write_text(json.dumps({"id": "p", "image_path": "bad.npy",
                                 "target_text": "t"}) + "\n")
        with pytest.raises(BadPixelRange, match="line 1"):
            ingest_manifest(m)

    def test_resolution_resizes(self, tmp_path, rng):
        self.write_image(tmp_path / "a.png", rng, size=10)
        m = tmp_path / "manifest.jsonl"
        m.write_text(json.dumps({"id": "p", "image_path": "a.png",
                                 "target_text": "t"}) + "\n")
        pairs = ingest_manifest(m, resolution=(16, 16))
        assert pairs[0].image.shape == (16, 16, 3)

    def test_duplicate_id_rejected_with_line(self, tmp_path, rng):
        self.write_image(tmp_path / "a.png", rng)
        rec = json.dumps({"id": "p", "image_path": "a.png", "target_text": "t"})
        m = tmp_path / "manifest.jsonl"
        m.write_text(rec + "\n" + rec + "\n")
        with pytest.raises(MalformedRecord) as info:
            ingest_manifest(m)
        assert info.value.line_number == 2

    def test_bad_json_line_reported(self, tmp_path):
        m = tmp_path / "manifest.jsonl"
        m.write_text('{"id": "p"\n')
        with pytest.raises(MalformedRecord) as info:
            ingest_manifest(m)
        assert info.value.line_number == 1

    def test_missing_fields_reported(self, tmp_path):
        m = tmp_path / "manifest.jsonl"
        m.write_text(json.dumps({"id": "p", "image_path": "a.png"}) + "\n")
        with pytest.raises(MalformedRecord, match="target_text"):
            ingest_manifest(m)

    def test_missing_image_reported(self, tmp_path):
        m = tmp_path / "manifest.jsonl"
        m.write_text(json.dumps({"id": "p", "image_path": "gone.png",
                                 "target_text": "t"}) + "\n")
        with pytest.raises(MissingImage, match="line 1"):
            ingest_manifest(m)

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(MalformedRecord):
            ingest_manifest(tmp_path / "nope.jsonl")


class TestJudgeCache:
    def test_round_trip(self, tmp_path):
        cache = JudgeCache(tmp_path / "cache.json")
        key = JudgeCache.key("cap", "tgt", "tmpl")
        assert cache.get(key) is None
        cache.put(key, 0.7, "0.7", 1)
        cache.flush()
        reloaded = JudgeCache(tmp_path / "cache.json")
        entry = reloaded.get(key)
        assert entry == {"similarity": 0.7, "raw_reply": "0.7", "retry_count": 1}
        assert reloaded.hits == 1

    def test_key_distinguishes_fields(self):
        a = JudgeCache.key("cap", "tgt", "tmpl")
        assert a != JudgeCache.key("cap2", "tgt", "tmpl")
        assert a != JudgeCache.key("cap", "tgt2", "tmpl")
        assert a != JudgeCache.key("cap", "tgt", "tmpl2")
        # concatenation ambiguity must not collide
        assert JudgeCache.key("ab", "c", "t") != JudgeCache.key("a", "bc", "t")

    def test_foreign_file_rejected(self, tmp_path):
        p = tmp_path / "cache.json"
        p.write_text(json.dumps({"schema": "something-else", "entries": {}}))
        with pytest.raises(MalformedRecord):
            JudgeCache(p)

    def test_hit_miss_counters(self, tmp_path):
        cache = JudgeCache(tmp_path / "c.json")
        k = JudgeCache.key("a", "b", "c")
        cache.get(k)
        cache.put(k, 0.5, "0.5", 0)
        cache.get(k)
        assert cache.misses == 1 and cache.hits == 1


class TestStubs:
    def test_overlap_judge_identical(self):
        j = LexicalOverlapJudge()
        assert j.reply("", "a red fire truck", "a red fire truck") == "1.000000"

    def test_overlap_judge_disjoint(self):
        j = LexicalOverlapJudge()
        assert j.reply("", "blue sky", "green grass field") == "0.000000"

    def test_overlap_judge_partial(self):
        j = LexicalOverlapJudge()
        score = float(j.reply("", "a red truck", "a blue truck"))
        assert score == pytest.approx(2 / 4)

    def test_scripted_judge(self):
        j = ScriptedJudge({("cap", "tgt"): "0.9"})
        assert j.reply("p", "cap", "tgt") == "0.9"
        with pytest.raises(EncoderUnavailable):
            j.reply("p", "unknown", "tgt")

    def test_fixture_adapter(self, tmp_path, rng):
        p = tmp_path / "captions.json"
        p.write_text(json.dumps({"p0": "a dog on grass"}))
        adapter = FixtureTargetAdapter.from_file("target-a", p)
        img = canonical_image(rng, 4, 4)
        assert adapter.caption("p0", img, "prompt") == "a dog on grass"
        with pytest.raises(EncoderUnavailable):
            adapter.caption("p1", img, "prompt")

    def test_http_judge_requires_env(self, monkeypatch):
        monkeypatch.delenv("STAGEATTACK_JUDGE_ENDPOINT", raising=False)
        monkeypatch.delenv("STAGEATTACK_JUDGE_API_KEY", raising=False)
        with pytest.raises(EncoderUnavailable, match="STAGEATTACK_JUDGE_ENDPOINT"):
            HttpJudgeClient().reply("p", "c", "t")


class TestEvaluate:
    def make_pairs(self, rng, n=2):
        return [ImagePair(f"p{i}", canonical_image(rng, 8, 8), "a red fire truck")
                for i in range(n)]

    def test_end_to_end_with_overlap_judge(self, tmp_path, rng):
        pairs = self.make_pairs(rng)
        write_run_tree(tmp_path, [p.pair_id for p in pairs], rng)
        targets = {"target-a": FixtureTargetAdapter(
            "target-a", {"p0": "a red fire truck", "p1": "a green field"})}
        report = evaluate(pairs, tmp_path, targets, LexicalOverlapJudge())
        assert report.sample_count == 2
        t = report.per_target["target-a"]
        assert t["samples"] == 2
        assert t["asr"] == 0.5  # one exact match, one unrelated caption
        assert report.imperceptibility_l1 == pytest.approx(2 / 255, abs=1e-12)
        assert report.imperceptibility_l2 == pytest.approx(2 / 255, abs=1e-12)
        assert report.exclusions == ()

    def test_missing_artifacts_excluded_with_reason(self, tmp_path, rng):
        pairs = self.make_pairs(rng)
        write_run_tree(tmp_path, ["p0"], rng)  # p1 has no artifacts
        targets = {"t": FixtureTargetAdapter("t", {"p0": "a red fire truck",
                                                   "p1": "whatever"})}
        report = evaluate(pairs, tmp_path, targets, LexicalOverlapJudge())
        assert report.sample_count == 1
        assert len(report.exclusions) == 1
        assert report.exclusions[0]["pair_id"] == "p1"
        assert "missing-artifact" in report.exclusions[0]["reason"]

    def test_caption_failure_excluded(self, tmp_path, rng):
        pairs = self.make_pairs(rng)
        write_run_tree(tmp_path, [p.pair_id for p in pairs], rng)
        targets = {"t": FixtureTargetAdapter("t", {"p0": "a red fire truck"})}
        report = evaluate(pairs, tmp_path, targets, LexicalOverlapJudge())
        assert report.sample_count == 1
        assert any("caption-failed" in e["reason"] for e in report.exclusions)

    def test_judge_failure_excluded(self, tmp_path, rng):
        pairs = self.make_pairs(rng, n=2)
        write_run_tree(tmp_path, [p.pair_id for p in pairs], rng)
        targets = {"t": FixtureTargetAdapter("t", {"p0": "a red fire truck",
                                                   "p1": "junk"})}
        judge = ScriptedJudge({("a red fire truck", "a red fire truck"): "0.95",
                               ("junk", "a red fire truck"): "no number here"})
        report = evaluate(pairs, tmp_path, targets, judge, retries=0)
        assert report.sample_count == 1
        assert any("judge-failed" in e["reason"] for e in report.exclusions)

    def test_all_cells_failing_raises(self, tmp_path, rng):
        pairs = self.make_pairs(rng, n=1)
        targets = {"t": FixtureTargetAdapter("t", {})}
        with pytest.raises(EmptyScores):
            evaluate(pairs, tmp_path, targets, LexicalOverlapJudge())

    def test_cache_makes_rerun_idempotent(self, tmp_path, rng):
        pairs = self.make_pairs(rng)
        run_root = tmp_path / "run"
        write_run_tree(run_root, [p.pair_id for p in pairs], rng)
        targets = {"t": FixtureTargetAdapter("t", {"p0": "a red fire truck",
                                                   "p1": "a dog"})}

        class CountingJudge(LexicalOverlapJudge):
            calls = 0

            def reply(self, prompt, caption, target):
                CountingJudge.calls += 1
                return super().reply(prompt, caption, target)

        cache_path = tmp_path / "cache.json"
        first = evaluate(pairs, run_root, targets, CountingJudge(),
                         cache=JudgeCache(cache_path))
        calls_after_first = CountingJudge.calls
        assert calls_after_first == 2
        second = evaluate(pairs, run_root, targets, CountingJudge(),
                          cache=JudgeCache(cache_path))
        assert CountingJudge.calls == calls_after_first  # all served from cache
        assert second.to_record() == first.to_record()

    def test_cached_retry_count_preserved(self, tmp_path, rng):
        pairs = self.make_pairs(rng, n=1)
        run_root = tmp_path / "run"
        write_run_tree(run_root, ["p0"], rng)
        targets = {"t": FixtureTargetAdapter("t", {"p0": "something"})}

        class FlakyJudge:
            calls = 0

            def reply(self, prompt, caption, target):
                FlakyJudge.calls += 1
                if FlakyJudge.calls == 1:
                    raise EncoderUnavailable("down")
                return "0.4"

        cache_path = tmp_path / "cache.json"
        first = evaluate(pairs, run_root, targets, FlakyJudge(),
                         cache=JudgeCache(cache_path))
        assert first.scores[0].retry_count == 1
        second = evaluate(pairs, run_root, targets, FlakyJudge(),
                          cache=JudgeCache(cache_path))
        assert second.scores[0].retry_count == 1  # replayed, not recomputed

    def test_empty_inputs_rejected(self, tmp_path, rng):
        with pytest.raises(EmptyScores):
            evaluate([], tmp_path, {"t": FixtureTargetAdapter("t", {})},
                     LexicalOverlapJudge())
        with pytest.raises(EmptyScores):
            evaluate(self.make_pairs(rng), tmp_path, {}, LexicalOverlapJudge())

    def test_load_adversarial_round_trip(self, tmp_path, rng):
        write_run_tree(tmp_path, ["p0"], rng)
        img = load_adversarial_image(tmp_path, "p0")
        assert img.shape == (8, 8, 3)
        assert img.min() >= 0.0 and img.max() <= 1.0
        with pytest.raises(MissingImage):
            load_adversarial_image(tmp_path, "p1")
