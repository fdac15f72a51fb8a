from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bettercheck.captioner import decompose
from bettercheck.gateway import Gateway, MockBackend
from bettercheck.selfcheck import (
    ConsistencyScore,
    SelfCheckError,
    check_prompt,
    filter_caption,
    load_captions,
    parse_verdict,
    run_checks,
    run_filter,
    scores_from_checks,
    score_sentence,
    sentence_text_digest,
)
from bettercheck.stores import read_jsonl, write_jsonl
from bettercheck.captioner import caption_to_record

from conftest import (
    N_IMAGES,
    N_PLANTED,
    caption_text,
    image_id_for,
    planted_sentence,
)


class TestCheckPrompt:
    def test_exact_layout(self):
        prompt = check_prompt("There are cars.", "There are people.")
        assert prompt == (
            "Context: There are cars.  Sentence: There are people.\n"
            "Is the sentence supported by the context above? Answer Yes or No:"
        )

    def test_ends_with_question(self):
        assert check_prompt("a", "b").endswith("Answer Yes or No:")

    def test_no_escaping(self):
        prompt = check_prompt('He said "hi".', "A & B < C")
        assert '"hi"' in prompt and "A & B < C" in prompt

    def test_empty_inputs_rejected(self):
        with pytest.raises(ValueError):
            check_prompt("", "x")
        with pytest.raises(ValueError):
            check_prompt("x", "")


class TestParseVerdict:
    @pytest.mark.parametrize(
        "reply,expected",
        [
            ("Yes", "yes"),
            ("Yes, it is supported.", "yes"),
            ("yes.", "yes"),
            ('"Yes"', "yes"),
            ("  YES  ", "yes"),
            ("No.", "no"),
            ("No", "no"),
            ("no way", "no"),
            ("The sentence seems plausible.", "unparseable"),
            ("Maybe", "unparseable"),
            ("", "unparseable"),
            ("123", "unparseable"),
        ],
    )
    def test_rule(self, reply, expected):
        assert parse_verdict(reply) == expected


def make_captions(texts_by_repeat, image_id="img", model="m"):
    return [decompose(image_id, model, i, text) for i, text in enumerate(texts_by_repeat)]


def scripted_gateway(replies_by_digest, default="Yes"):
    # keys: (image_id, prompt_kind, repeat_index, sentence_digest)
    script = {
        ("img", "check", None, digest): reply for digest, reply in replies_by_digest.items()
    }
    return Gateway(MockBackend(script, default=default))


class TestScoreSentence:
    def test_all_yes_scores_one(self):
        captions = make_captions(["There are cars.", "There are cars.", "There are cars."])
        gw = scripted_gateway({})
        score, verdicts = score_sentence(captions[0].sentences[0], captions[0], captions, "m", gw)
        assert score.score == 1
        assert score.total == 2
        assert [v.context_repeat_index for v in verdicts] == [1, 2]

    def test_mixed_scores_half(self):
        captions = make_captions(["There are dogs.", "There are cars.", "There are cars."])
        digest = sentence_text_digest("There are dogs.")
        script = {("img", "check", 1, digest): "Yes", ("img", "check", 2, digest): "No"}
        gw = Gateway(MockBackend(script, default="Yes"))
        score, _ = score_sentence(captions[0].sentences[0], captions[0], captions, "m", gw)
        assert score.score == Fraction(1, 2)

    def test_unparseable_counts_as_no(self):
        captions = make_captions(["There are dogs.", "There are cars.", "There are cars."])
        digest = sentence_text_digest("There are dogs.")
        script = {("img", "check", 1, digest): "Hard to say.", ("img", "check", 2, digest): "No"}
        gw = Gateway(MockBackend(script, default="Yes"))
        score, _ = score_sentence(captions[0].sentences[0], captions[0], captions, "m", gw)
        assert score.score == 0
        assert score.unparseable_count == 1

    def test_never_checked_against_own_caption(self):
        captions = make_captions(["There are cars.", "There are cars.", "There are cars."])
        for caption in captions:
            gw = scripted_gateway({})
            _, verdicts = score_sentence(caption.sentences[0], caption, captions, "m", gw)
            assert caption.repeat_index not in [v.context_repeat_index for v in verdicts]


def unit(sid):
    from bettercheck.captioner import SentenceUnit

    return SentenceUnit(sentence_id=sid, ordinal=0, text="t.", template_conformant=True)


class TestFilterCaption:
    def _caption(self, sids):
        from bettercheck.captioner import Caption

        return Caption(
            image_id="img", model="m", repeat_index=0, raw_text="",
            sentences=[unit(s) for s in sids],
        )

    def test_retain_and_exclude(self):
        scores = {
            "s1": ConsistencyScore("s1", yes_count=2, total=2),
            "s2": ConsistencyScore("s2", yes_count=0, total=2),
        }
        filtered = filter_caption(self._caption(["s1", "s2"]), scores, Fraction(1, 2))
        assert [s.sentence_id for s in filtered.retained] == ["s1"]
        assert [(s.sentence_id, float(score)) for s, score in filtered.excluded] == [("s2", 0.0)]

    def test_zero_threshold_keeps_everything(self):
        scores = {"s1": ConsistencyScore("s1", 0, 2)}
        filtered = filter_caption(self._caption(["s1"]), scores, 0)
        assert len(filtered.retained) == 1

    def test_tie_is_inclusive(self):
        scores = {"s1": ConsistencyScore("s1", 1, 2)}
        filtered = filter_caption(self._caption(["s1"]), scores, Fraction(1, 2))
        assert len(filtered.retained) == 1

    def test_missing_score_is_hard_error(self):
        with pytest.raises(SelfCheckError, match="s1"):
            filter_caption(self._caption(["s1"]), {}, 0.5)

    @settings(max_examples=200, deadline=None)
    @given(
        st.dictionaries(
            st.text("ab", min_size=1, max_size=3),
            st.integers(min_value=0, max_value=2),
            min_size=1,
            max_size=6,
        ),
        st.integers(min_value=0, max_value=4),
    )
    def test_raising_threshold_never_grows_retained(self, yes_by_sid, step):
        scores = {sid: ConsistencyScore(sid, y, 2) for sid, y in yes_by_sid.items()}
        caption = self._caption(sorted(yes_by_sid))
        low = Fraction(step, 4)
        high = Fraction(min(step + 1, 4), 4)
        retained_low = {s.sentence_id for s in filter_caption(caption, scores, low).retained}
        retained_high = {s.sentence_id for s in filter_caption(caption, scores, high).retained}
        assert retained_high <= retained_low


@pytest.fixture
def captioned_run(tmp_path, fixture_corpus):
    run_dir = tmp_path / "run"
    rows = []
    for i in range(N_IMAGES):
        for repeat in range(3):
            rows.append(
                caption_to_record(decompose(image_id_for(i), "mock-model", repeat, caption_text(i, repeat)))
            )
    write_jsonl(run_dir / "captions.jsonl", rows)
    return run_dir


class TestRunChecksAndFilter:
    def test_check_call_count(self, captioned_run, fixture_corpus):
        gw = Gateway(MockBackend.from_file(fixture_corpus["script"], default="Yes"))
        count = run_checks(captioned_run, "mock-model", gw)
        captions = load_captions(captioned_run)
        expected = sum(len(c.sentences) * 2 for c in captions)
        assert count == expected
        assert sum(1 for _ in read_jsonl(captioned_run / "checks.jsonl")) == expected

    def test_planted_sentences_excluded(self, captioned_run, fixture_corpus):
        gw = Gateway(MockBackend.from_file(fixture_corpus["script"], default="Yes"))
        run_checks(captioned_run, "mock-model", gw)
        run_filter(captioned_run, threshold=0.5)
        excluded_texts = []
        sentences = {
            s.sentence_id: s.text for c in load_captions(captioned_run) for s in c.sentences
        }
        for _, row in read_jsonl(captioned_run / "filtered.jsonl"):
            excluded_texts += [sentences[e["sentence_id"]] for e in row["excluded"]]
        assert sorted(excluded_texts) == sorted(planted_sentence(i) for i in range(N_PLANTED))

    def test_all_yes_keeps_everything(self, captioned_run):
        gw = Gateway(MockBackend({}, default="Yes"))
        run_checks(captioned_run, "mock-model", gw)
        run_filter(captioned_run, threshold=0.5)
        for _, row in read_jsonl(captioned_run / "filtered.jsonl"):
            assert row["excluded"] == []

    def test_filter_deterministic_given_checks(self, captioned_run, fixture_corpus):
        gw = Gateway(MockBackend.from_file(fixture_corpus["script"], default="Yes"))
        run_checks(captioned_run, "mock-model", gw)
        run_filter(captioned_run, threshold=0.5)
        first = (captioned_run / "filtered.jsonl").read_bytes()
        run_filter(captioned_run, threshold=0.5)
        assert (captioned_run / "filtered.jsonl").read_bytes() == first

    def test_checks_sorted(self, captioned_run, fixture_corpus):
        gw = Gateway(MockBackend.from_file(fixture_corpus["script"], default="Yes"))
        run_checks(captioned_run, "mock-model", gw)
        keys = [
            (r["image_id"], r["repeat_index"], r["ordinal"], r["context_repeat_index"])
            for _, r in read_jsonl(captioned_run / "checks.jsonl")
        ]
        assert keys == sorted(keys)

    def test_scores_rebuilt_from_store(self, captioned_run, fixture_corpus):
        gw = Gateway(MockBackend.from_file(fixture_corpus["script"], default="Yes"))
        run_checks(captioned_run, "mock-model", gw)
        scores = scores_from_checks(captioned_run)
        planted_digests = {planted_sentence(i) for i in range(N_PLANTED)}
        sentences = {
            s.sentence_id: s.text for c in load_captions(captioned_run) for s in c.sentences
        }
        for sid, score in scores.items():
            assert score.total == 2
            if sentences[sid] in planted_digests:
                assert score.score == 0
            else:
                assert score.score == 1
