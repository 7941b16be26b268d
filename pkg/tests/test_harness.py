import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphann.harness import (
    CandidateDatabase,
    CandidateRecord,
    EmptyDatabaseError,
    ModuleTag,
    PromptBundle,
    ResponseParseError,
    ResponseSections,
    SamplerConfig,
    assemble_prompt,
    normalize_group_rewards,
    parse_response,
    register_candidate,
    render_response,
    sample_exemplars,
    smooth_rewards,
    softmax_probabilities,
)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def _db(scores, path=None):
    db = CandidateDatabase(path)
    for i, s in enumerate(scores):
        register_candidate(db, f"code {i}", s, "search")
    return db


class TestDatabase:
    def test_first_insert(self):
        db = _db([42.0])
        assert len(db) == 1 and db.mean_score() == 42.0

    def test_mean(self):
        assert _db([80.0, 120.0]).mean_score() == 100.0

    def test_duplicate_code_kept(self):
        db = CandidateDatabase()
        a = register_candidate(db, "same", 1.0, "search")
        b = register_candidate(db, "same", 2.0, "search")
        assert a != b and len(db) == 2

    @pytest.mark.parametrize("bad", [float("nan"), float("inf"), -float("inf")])
    def test_non_finite(self, bad):
        with pytest.raises(ValueError):
            register_candidate(CandidateDatabase(), "x", bad, "search")

    def test_unknown_tag(self):
        with pytest.raises(ValueError):
            register_candidate(CandidateDatabase(), "x", 1.0, "compiler")

    def test_jsonl_schema(self, tmp_path):
        path = tmp_path / "c.jsonl"
        db = CandidateDatabase(path, clock=lambda: "2026-01-01T00:00:00+00:00")
        register_candidate(db, "int main() {}", 3.5, ModuleTag.REFINEMENT)
        doc = json.loads(path.read_text().splitlines()[0])
        assert set(doc) == {"id", "module_tag", "score", "code", "created_at"}
        assert doc["module_tag"] == "refinement" and doc["score"] == 3.5

    def test_append_only_across_sessions(self, tmp_path):
        path = tmp_path / "c.jsonl"
        _db([1.0, 2.0], path)
        db = CandidateDatabase.load(path)
        register_candidate(db, "more", 3.0, "graph_construction")
        assert len(CandidateDatabase.load(path)) == 3

    def test_duplicate_id_on_load(self, tmp_path):
        rec = CandidateRecord("abc", "search", 1.0, "x", "t")
        path = tmp_path / "d.jsonl"
        path.write_text(rec.to_json() + "\n" + rec.to_json() + "\n")
        with pytest.raises(ValueError, match="duplicate"):
            CandidateDatabase.load(path)

    def test_corrupt_line_named(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"id": "a"}\n')
        with pytest.raises(ValueError, match=":1:"):
            CandidateDatabase.load(path)


class TestSoftmax:
    def test_two_scores(self):
        p = softmax_probabilities([1.0, 0.0], 1.0)
        want = math.exp(0.5) / (math.exp(0.5) + math.exp(-0.5))
        assert p[0] == pytest.approx(want, abs=1e-15)
        assert p[0] == pytest.approx(0.7311, abs=1e-4)

    def test_equal_scores_uniform(self):
        np.testing.assert_allclose(softmax_probabilities([3.0] * 7, 1.0), 1 / 7)

    def test_no_overflow(self):
        p = softmax_probabilities([1e6, 0.0, -1e6], 0.01)
        assert np.all(np.isfinite(p)) and p[0] == 1.0

    @settings(max_examples=300)
    @given(st.lists(finite, min_size=1, max_size=20), st.floats(1e-3, 1e3))
    def test_sums_to_one(self, scores, tau):
        assert abs(softmax_probabilities(scores, tau).sum() - 1.0) <= 1e-12

    @settings(max_examples=300)
    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=20), st.floats(0.1, 10),
           st.floats(-1e3, 1e3))
    def test_shift_invariant(self, scores, tau, c):
        a = softmax_probabilities(scores, tau)
        b = softmax_probabilities(np.array(scores) + c, tau)
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


class TestSampler:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            SamplerConfig(temperature=0.0)
        with pytest.raises(ValueError):
            SamplerConfig(exemplar_count=0)

    def test_empty_db(self, rng):
        with pytest.raises(EmptyDatabaseError):
            sample_exemplars(CandidateDatabase(), SamplerConfig(), rng)

    def test_more_than_size_returns_all_with_warning(self, rng):
        db = _db([1.0, 2.0, 3.0])
        with pytest.warns(RuntimeWarning, match="returning all"):
            got = sample_exemplars(db, SamplerConfig(1.0, 5), rng)
        assert sorted(r.id for r in got) == sorted(r.id for r in db)

    def test_without_replacement(self, rng):
        db = _db(list(range(10)))
        for _ in range(50):
            got = sample_exemplars(db, SamplerConfig(2.0, 6), rng)
            assert len({r.id for r in got}) == 6

    def test_low_temperature_picks_max(self, rng):
        db = _db([0.1, 0.5, 0.9, 0.3])
        best = db.records[2].id
        hits = sum(sample_exemplars(db, SamplerConfig(0.01, 1), rng)[0].id == best
                   for _ in range(10_000))
        assert hits >= 9990

    def test_equal_scores_first_draw_uniform(self):
        db = _db([5.0] * 4)
        rng = np.random.default_rng(1)
        n = 40_000
        counts = {r.id: 0 for r in db}
        for _ in range(n):
            counts[sample_exemplars(db, SamplerConfig(1.0, 1), rng)[0].id] += 1
        se = math.sqrt(0.25 * 0.75 / n)
        assert all(abs(c / n - 0.25) <= 3 * se for c in counts.values())

    def test_frequencies_match_softmax(self):
        scores = [0.0, 1.0, 2.5, -1.0, 0.7, 3.0]
        tau = 1.5
        db = _db(scores)
        p = softmax_probabilities(scores, tau)
        rng = np.random.default_rng(7)
        n = 100_000
        counts = np.zeros(len(scores))
        index = {r.id: i for i, r in enumerate(db)}
        for _ in range(n):
            counts[index[sample_exemplars(db, SamplerConfig(tau, 1), rng)[0].id]] += 1
        se = np.sqrt(p * (1 - p) / n)
        assert np.all(np.abs(counts / n - p) <= 3 * se)

    def test_second_draw_renormalized_with_fixed_mean(self):
        # with 3 records, P(second = j | first = i) is softmax over the other two
        scores = [0.0, 1.0, 2.0]
        db = _db(scores)
        rng = np.random.default_rng(3)
        n = 60_000
        pairs = {}
        ids = [r.id for r in db]
        for _ in range(n):
            a, b = sample_exemplars(db, SamplerConfig(1.0, 2), rng)
            key = (ids.index(a.id), ids.index(b.id))
            pairs[key] = pairs.get(key, 0) + 1
        p1 = softmax_probabilities(scores, 1.0)
        for (i, j), c in pairs.items():
            rest = [k for k in range(3) if k != i]
            p2 = softmax_probabilities([scores[k] for k in rest], 1.0)[rest.index(j)]
            p = p1[i] * p2
            assert abs(c / n - p) <= 4 * math.sqrt(p * (1 - p) / n)


class TestSmoothRewards:
    def test_constant_group(self):
        assert smooth_rewards([5, 5, 5]) == [1.0, 1.0, 1.0]

    def test_zero_group(self):
        assert smooth_rewards([0.0, 0.0]) == [0.0, 0.0]

    def test_outlier_clipped(self):
        raw = list(range(1, 20)) + [10_000.0]
        out = smooth_rewards(raw)
        p95 = np.percentile(raw, 95)
        assert out[-1] == 1.0
        assert out[-2] == pytest.approx(19 / p95)

    def test_empty(self):
        with pytest.raises(ValueError):
            smooth_rewards([])

    @settings(max_examples=300)
    @given(st.lists(finite, min_size=1, max_size=40))
    def test_rank_preserving_and_bounded(self, raw):
        out = smooth_rewards(raw)
        order = np.argsort(raw, kind="stable")
        sorted_out = np.asarray(out)[order]
        assert np.all(np.diff(sorted_out) >= 0)
        assert np.all(np.abs(out) <= 1.0)


class TestGroupNormalization:
    def test_example(self):
        np.testing.assert_allclose(normalize_group_rewards([1, 2, 3], 3),
                                   [-1.2247, 0.0, 1.2247], atol=1e-4)

    def test_zero_variance_warns(self):
        with pytest.warns(RuntimeWarning, match="zero-variance"):
            assert normalize_group_rewards([2.0, 2.0], 2) == [0.0, 0.0]

    @pytest.mark.parametrize("G", [0, 1])
    def test_small_group(self, G):
        with pytest.raises(ValueError):
            normalize_group_rewards([1.0] * G, G)

    def test_length_must_match(self):
        with pytest.raises(ValueError):
            normalize_group_rewards([1.0, 2.0, 3.0], 2)

    @settings(max_examples=300)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=30))
    def test_moments(self, r):
        if np.ptp(r) < 1e-6:
            return
        out = np.array(normalize_group_rewards(r, len(r)))
        assert abs(out.mean()) <= 1e-12
        assert abs(out.std() - 1.0) <= 1e-9

    @settings(max_examples=300)
    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=30),
           st.floats(0.01, 100), st.floats(-100, 100))
    def test_affine_invariant(self, r, a, b):
        if np.ptp(r) < 1e-3:
            return
        base = normalize_group_rewards(r, len(r))
        moved = normalize_group_rewards([a * x + b for x in r], len(r))
        np.testing.assert_allclose(moved, base, atol=1e-9)


BUNDLE = PromptBundle(
    task_description="Make the search loop faster.",
    exemplars=(("int a() { return 1; }", 80), ("int b() { return 2; }", 91.23456)),
    generation_protocol="Explain, then design, then write code.",
    critical_requirements="Keep the public interface.",
)


class TestPrompt:
    def test_structure(self):
        text = assemble_prompt(BUNDLE)
        assert text.count("```cpp\n") == 2
        heads = [l for l in text.splitlines() if l.startswith("## ")]
        assert heads == ["## Task Description", "## Previous Implementations with Speed",
                         "## Generation Protocol", "## Critical Requirements"]

    def test_score_format(self):
        text = assemble_prompt(BUNDLE)
        assert "80.0000" in text and "91.2346" in text

    def test_deterministic(self):
        assert assemble_prompt(BUNDLE) == assemble_prompt(BUNDLE)

    @pytest.mark.parametrize("field", ["task_description", "generation_protocol",
                                       "critical_requirements"])
    def test_empty_section(self, field):
        from dataclasses import replace

        with pytest.raises(ValueError, match="empty"):
            assemble_prompt(replace(BUNDLE, **{field: "  "}))

    def test_no_exemplars(self):
        from dataclasses import replace

        with pytest.raises(ValueError):
            assemble_prompt(replace(BUNDLE, exemplars=()))

    def test_code_with_backticks_stays_fenced(self):
        from dataclasses import replace

        text = assemble_prompt(replace(BUNDLE, exemplars=(("s = '```'", 1.0),)))
        assert "````cpp\ns = '```'\n````" in text


RESPONSE = ResponseSections("Cache misses dominate.", "Prefetch the next row.",
                            "void f() {\n  // body\n}")


class TestResponse:
    def test_round_trip(self):
        assert parse_response(render_response(RESPONSE)) == RESPONSE

    @pytest.mark.parametrize("style", [
        "### {n}. {h}:", "**{h}**", "{h}", "{n}) {h}", "# STEP {n}: {h}", "## {hl}",
    ])
    def test_tolerant_headers(self, style):
        parts = []
        for n, (h, body) in enumerate(zip(
                ["Performance Analysis", "Algorithm Design", "Code Implementation"],
                [RESPONSE.performance_analysis, RESPONSE.algorithm_design,
                 "```python\n" + RESPONSE.code_implementation + "\n```"]), 1):
            parts.append(style.format(n=n, h=h, hl=h.lower()) + "\n" + body)
        assert parse_response("\n\n".join(parts)) == RESPONSE

    def test_code_is_first_fence_after_header(self):
        text = render_response(RESPONSE) + "\n```\nsecond block\n```\n"
        assert parse_response(text).code_implementation == RESPONSE.code_implementation

    def test_reordered(self):
        text = ("## Performance Analysis\na\n## Code Implementation\n```\nx\n```\n"
                "## Algorithm Design\nb\n")
        with pytest.raises(ResponseParseError) as exc:
            parse_response(text)
        assert exc.value.part == "Code Implementation"

    @pytest.mark.parametrize("missing", ["Performance Analysis", "Algorithm Design",
                                         "Code Implementation"])
    def test_missing_header(self, missing):
        text = render_response(RESPONSE).replace(missing, "Notes")
        with pytest.raises(ResponseParseError, match=missing) as exc:
            parse_response(text)
        assert exc.value.part == missing

    def test_missing_fence(self):
        text = "Performance Analysis\na\nAlgorithm Design\nb\nCode Implementation\nint x;\n"
        with pytest.raises(ResponseParseError) as exc:
            parse_response(text)
        assert exc.value.part == "code fence"

    def test_inline_mention_is_not_a_header(self):
        text = ("We discuss performance analysis below.\n" + render_response(RESPONSE))
        assert parse_response(text) == RESPONSE

    @settings(max_examples=200, deadline=None)
    @given(st.text(st.characters(blacklist_categories=("Cs",), blacklist_characters="\r"), min_size=1),
           st.text(st.characters(blacklist_categories=("Cs",), blacklist_characters="\r"), min_size=1))
    def test_round_trip_arbitrary_code(self, code, note):
        note = " ".join(note.split()) or "x"
        sec = ResponseSections("why " + note, "how " + note, code)
        if code.strip() == "":
            with pytest.raises(ResponseParseError):
                parse_response(render_response(sec))
        else:
            assert parse_response(render_response(sec)).code_implementation == code
