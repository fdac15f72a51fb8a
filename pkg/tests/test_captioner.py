import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bettercheck.captioner import (
    CaptioningError,
    caption_image,
    caption_prompt,
    caption_to_record,
    caption_from_record,
    decompose,
    is_template_conformant,
    segment,
    split_segments,
)
from bettercheck.corpus import ingest
from bettercheck.gateway import Gateway, MockBackend
from bettercheck.stores import text_digest

from conftest import write_images, write_labels, image_id_for, caption_text


class TestCaptionPrompt:
    def test_contains_format_instruction(self):
        assert 'Use the format: "There are [object]."' in caption_prompt()

    def test_exact_text(self):
        assert caption_prompt() == (
            "Describe the different objects visible in the image. Please write very simple and "
            'clear sentences. Use the format: "There are [object]." For example, "There are cars. '
            'There are people. There are cyclists." Look carefully and make sure to mention all '
            "types of objects you see, especially people. If there are multiple types of objects "
            "in the image, provide a separate sentence for each type."
        )

    def test_constant_across_calls(self):
        assert caption_prompt() == caption_prompt()
        assert text_digest(caption_prompt()) == text_digest(caption_prompt())


class TestSegment:
    def test_two_simple_sentences(self):
        sentences, discarded = segment("There are cars. There are people.")
        assert sentences == ["There are cars.", "There are people."]
        assert discarded == []

    def test_long_tail_discarded(self):
        text = (
            "There's an SUV parked on a curb to our left. And another one in front of it, "
            "and then three more further down the road."
        )
        sentences, discarded = segment(text)
        assert sentences == ["There's an SUV parked on a curb to our left."]
        assert len(sentences[0]) == 44
        assert len(discarded) == 1
        assert discarded[0]["reason"] == "too_long"
        assert len(discarded[0]["text"]) > 50

    def test_empty_input(self):
        assert segment("") == ([], [])

    def test_question_and_exclamation_boundaries(self):
        sentences, _ = segment("Is that a car? Yes! There are cars.")
        assert sentences == ["Is that a car?", "Yes!", "There are cars."]

    def test_punctuation_without_space_not_a_boundary(self):
        sentences, _ = segment("It is 3.5 meters away.")
        assert sentences == ["It is 3.5 meters away."]

    def test_trailing_text_without_punctuation_kept(self):
        sentences, _ = segment("There are cars. There are trees")
        assert sentences == ["There are cars.", "There are trees"]


@st.composite
def caption_like_text(draw):
    words = st.text(alphabet="abcdefg ", min_size=1, max_size=12)
    parts = draw(st.lists(words, min_size=0, max_size=8))
    seps = draw(st.lists(st.sampled_from([". ", "? ", "! ", " ", ".", "?! "]), min_size=len(parts), max_size=len(parts)))
    return "".join(p + s for p, s in zip(parts, seps))


class TestSegmentProperties:
    @settings(max_examples=300, deadline=None)
    @given(caption_like_text())
    def test_raw_split_is_character_preserving(self, text):
        assert "".join(split_segments(text)) == text

    @settings(max_examples=300, deadline=None)
    @given(caption_like_text(), st.integers(min_value=5, max_value=80))
    def test_reconstruction(self, text, max_len):
        sentences, discarded = segment(text, max_sentence_len=max_len)
        # routing partitions the trimmed segments: merging both lists back in
        # raw-split order and stripping whitespace reproduces the input
        expected = [s.strip() for s in split_segments(text) if s.strip()]
        merged, si, di = [], 0, 0
        for seg in expected:
            if si < len(sentences) and sentences[si] == seg:
                merged.append(sentences[si])
                si += 1
            else:
                assert discarded[di]["text"] == seg
                merged.append(discarded[di]["text"])
                di += 1
        assert (si, di) == (len(sentences), len(discarded))
        assert "".join("".join(merged).split()) == "".join(text.split())

    @settings(max_examples=300, deadline=None)
    @given(caption_like_text())
    def test_idempotence(self, text):
        sentences, _ = segment(text, max_sentence_len=10_000)
        again, _ = segment(" ".join(sentences), max_sentence_len=10_000)
        assert again == sentences

    @settings(max_examples=300, deadline=None)
    @given(caption_like_text(), st.integers(min_value=5, max_value=80))
    def test_length_bound(self, text, max_len):
        sentences, _ = segment(text, max_sentence_len=max_len)
        assert all(len(s) <= max_len for s in sentences)
        assert all(s == s.strip() and s for s in sentences)


class TestTemplateConformance:
    def test_conformant(self):
        assert is_template_conformant("There are cars.")
        assert is_template_conformant("There is a dog.")

    def test_not_conformant(self):
        assert not is_template_conformant("The sky is overcast.")
        assert not is_template_conformant("There are cars")


class TestDecompose:
    def test_sentence_ids_stable(self):
        c1 = decompose("img", "m", 0, "There are cars. There are people.")
        c2 = decompose("img", "m", 0, "There are cars. There are people.")
        assert [s.sentence_id for s in c1.sentences] == [s.sentence_id for s in c2.sentences]
        assert len({s.sentence_id for s in c1.sentences}) == 2

    def test_roundtrip_record(self):
        c = decompose("img", "m", 1, "There are cars. " + "x" * 60 + ".")
        assert caption_from_record(caption_to_record(c)) == c


@pytest.fixture
def small_corpus(tmp_path, fixture_corpus):
    return ingest(
        fixture_corpus["image_dir"], fixture_corpus["labels"], 10, 25,
        created_at="2026-01-01T00:00:00Z",
    )


class TestCaptionImage:
    def test_three_repeats(self, small_corpus, fixture_corpus):
        gw = Gateway(MockBackend.from_file(fixture_corpus["script"], default="Yes"))
        record = small_corpus.records[0]
        captions = caption_image(record, "mock-model", gw, fixture_corpus["image_dir"], repeats=3)
        assert [c.repeat_index for c in captions] == [0, 1, 2]
        assert captions[0].raw_text == caption_text(0, 0)
        assert captions[1].raw_text == caption_text(0, 1)

    def test_repeats_one_rejected(self, small_corpus, fixture_corpus):
        gw = Gateway(MockBackend.from_file(fixture_corpus["script"]))
        with pytest.raises(ValueError, match="repeats"):
            caption_image(small_corpus.records[0], "m", gw, fixture_corpus["image_dir"], repeats=1)

    def test_partial_failure_carries_successes(self, small_corpus, fixture_corpus):
        # script only covers repeats 0..2; asking for 4 fails on repeat 3
        gw = Gateway(MockBackend.from_file(fixture_corpus["script"]))
        with pytest.raises(CaptioningError) as excinfo:
            caption_image(small_corpus.records[0], "m", gw, fixture_corpus["image_dir"], repeats=4)
        assert len(excinfo.value.successes) == 3
