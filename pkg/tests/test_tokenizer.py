import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lorafuse import synthdata as sd
from lorafuse.tokenizer import (
    DEFAULT_VOCAB,
    MAX_PROMPT_LEN,
    UnknownWordError,
    Vocabulary,
    detokenize,
    find_subject_spans,
    quantize_image,
    tokenize_prompt,
)


class TestVocabulary:
    def test_token_id_is_list_index(self):
        for i, w in enumerate(DEFAULT_VOCAB.words):
            assert DEFAULT_VOCAB.index(w) == i

    def test_identifier_block_contiguous(self):
        ids = [DEFAULT_VOCAB.index(w) for w in DEFAULT_VOCAB.identifiers]
        assert ids == list(range(min(ids), min(ids) + len(ids)))

    def test_save_load_roundtrip(self, tmp_path):
        path = tmp_path / "vocabulary.json"
        DEFAULT_VOCAB.save(path)
        loaded = Vocabulary.load(path)
        assert loaded.words == DEFAULT_VOCAB.words
        assert loaded.identifiers == DEFAULT_VOCAB.identifiers

    def test_load_rejects_wrong_format(self, tmp_path):
        path = tmp_path / "bogus.json"
        path.write_text('{"format": "something-else", "version": 1}')
        with pytest.raises(ValueError, match="not a vocabulary"):
            Vocabulary.load(path)

    def test_closed_world_size(self):
        assert len(DEFAULT_VOCAB) <= 50


class TestTokenizePrompt:
    def test_reference_prompt_is_five_ids(self):
        pt = tokenize_prompt("a photo of A1 cat")
        assert len(pt.ids) == 5
        assert pt.words == ("a", "photo", "of", "a1", "cat")

    def test_empty_prompt_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            tokenize_prompt("")

    def test_unknown_word_named(self):
        with pytest.raises(UnknownWordError, match="zzz"):
            tokenize_prompt("a zzz cat")

    def test_lowercasing(self):
        a = tokenize_prompt("A PHOTO OF B2 BEAR")
        b = tokenize_prompt("a photo of b2 bear")
        assert a.ids == b.ids

    def test_overlength_rejected(self):
        text = " ".join(["a"] * (MAX_PROMPT_LEN + 1))
        with pytest.raises(ValueError, match="maximum"):
            tokenize_prompt(text)

    def test_deterministic(self):
        t = "a photo of purple a1 cat on red background"
        assert tokenize_prompt(t).ids == tokenize_prompt(t).ids


class TestImageTokens:
    def test_all_white_is_zeros(self):
        img = np.zeros((16, 16), dtype=np.uint8)
        tokens = quantize_image(img)
        assert tokens.shape == (256,)
        assert np.all(tokens == 0)

    def test_single_pixel_raster_position(self):
        img = np.zeros((16, 16), dtype=np.uint8)
        img[0, 1] = 5
        tokens = quantize_image(img)
        assert tokens[1] == 5
        assert tokens.sum() == 5

    def test_roundtrip_on_random_images(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            img = rng.integers(0, sd.N_COLORS, size=(16, 16)).astype(np.uint8)
            assert np.array_equal(detokenize(quantize_image(img), 16, 16), img)

    @settings(max_examples=50, deadline=None)
    @given(
        arrays(
            np.uint8,
            st.tuples(st.integers(1, 16), st.integers(1, 16)),
            elements=st.integers(0, sd.N_COLORS - 1),
        )
    )
    def test_roundtrip_property(self, img):
        h, w = img.shape
        assert np.array_equal(detokenize(quantize_image(img), h, w), img)

    def test_out_of_range_token_rejected(self):
        tokens = np.zeros(256, dtype=np.int64)
        tokens[7] = 99
        with pytest.raises(ValueError, match="99"):
            detokenize(tokens, 16, 16)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="expected"):
            detokenize(np.zeros(100, dtype=np.int64), 16, 16)


class TestSubjectSpans:
    PAIRS = [("a1", "cat"), ("b2", "bear")]

    def test_paper_style_two_subject_prompt(self):
        pt = tokenize_prompt("purple A1 cat and B2 bear")
        spans = find_subject_spans(pt, self.PAIRS)
        assert [(s.subject_id, s.start, s.end) for s in spans] == [
            ("a1 cat", 1, 2),
            ("b2 bear", 4, 5),
        ]

    def test_no_identifier_no_span(self):
        pt = tokenize_prompt("a photo of cat on red background")
        assert find_subject_spans(pt, self.PAIRS) == []

    def test_repeated_subject_two_disjoint_spans(self):
        pt = tokenize_prompt("a1 cat and a1 cat")
        spans = find_subject_spans(pt, self.PAIRS)
        assert [(s.start, s.end) for s in spans] == [(0, 1), (3, 4)]

    def test_identifier_without_class_does_not_match(self):
        pt = tokenize_prompt("a photo of a1 on red background")
        assert find_subject_spans(pt, self.PAIRS) == []

    def test_wrong_class_does_not_match(self):
        pt = tokenize_prompt("a photo of a1 bear")
        assert find_subject_spans(pt, self.PAIRS) == []

    def test_shared_identifier_rejected(self):
        pt = tokenize_prompt("a photo of a1 cat")
        with pytest.raises(ValueError, match="registered for both"):
            find_subject_spans(pt, [("a1", "cat"), ("a1", "bear")])

    def test_spans_disjoint_and_in_range(self):
        pt = tokenize_prompt("a photo of a1 cat and b2 bear on red background")
        spans = find_subject_spans(pt, self.PAIRS)
        seen = set()
        for s in spans:
            positions = set(range(s.start, s.end + 1))
            assert not positions & seen
            assert max(positions) < len(pt)
            seen |= positions
