import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parcot.errors import DataError, VocabError
from parcot.tokenizer import (
    Vocab,
    decode,
    encode,
    manifest,
    read_manifest,
    sample_think_tokens,
    vocab_from_manifest,
    write_manifest,
)


@pytest.fixture(scope="module")
def vocab():
    return Vocab()


class TestVocabLayout:
    def test_default_size(self, vocab):
        assert vocab.size == 256 + 2 * 16 + 4 == 292

    def test_control_ids_contiguous_above_base(self, vocab):
        ids = (
            [vocab.think_open(i) for i in range(1, 17)]
            + [vocab.think_close(i) for i in range(1, 17)]
            + [vocab.summary_open, vocab.summary_close, vocab.eos, vocab.pad]
        )
        assert ids == list(range(256, 292))

    def test_open_ids_distinct_per_label(self, vocab):
        assert len({vocab.think_open(i) for i in range(1, 17)}) == 16

    def test_label_bounds(self, vocab):
        with pytest.raises(VocabError):
            vocab.think_open(0)
        with pytest.raises(VocabError):
            vocab.think_open(17)


class TestEncodeDecode:
    def test_bytes_identity(self, vocab):
        assert encode("ab", vocab) == [97, 98]

    def test_reserved_form_maps_to_control_id(self, vocab):
        assert encode("<think 3>", vocab) == [vocab.think_open(3)]
        assert encode("</think 3>", vocab) == [vocab.think_close(3)]
        assert encode("<summary>", vocab) == [vocab.summary_open]
        assert encode("</summary>", vocab) == [vocab.summary_close]

    def test_plain_mode_never_emits_control_ids(self, vocab):
        ids = encode("<think 3> and </summary>", vocab, markup=False)
        assert all(i < 256 for i in ids)
        assert decode(ids, vocab) == "<think 3> and </summary>"

    def test_near_miss_forms_stay_bytes(self, vocab):
        for text in ("<think 03>", "<think 99>", "<think  3>", "<Think 3>"):
            assert all(i < 256 for i in encode(text, vocab))

    def test_mixed_text_round_trip(self, vocab):
        text = "solve: <think 1>use algebra</think 1><summary>42</summary>"
        ids = encode(text, vocab)
        assert vocab.think_open(1) in ids and vocab.summary_close in ids
        assert decode(ids, vocab) == text

    def test_unknown_id_rejected(self, vocab):
        with pytest.raises(VocabError):
            decode([292], vocab)

    @given(st.text(max_size=80))
    @settings(max_examples=150, deadline=None)
    def test_markup_round_trip_any_text(self, text):
        vocab = Vocab()
        assert decode(encode(text, vocab), vocab) == text

    @given(
        st.lists(
            st.one_of(
                st.text(max_size=12),
                st.sampled_from(
                    ["<think 1>", "</think 1>", "<think 16>", "<summary>", "</summary>"]
                ),
            ),
            max_size=8,
        )
    )
    @settings(max_examples=100, deadline=None)
    def test_round_trip_with_embedded_markers(self, pieces):
        vocab = Vocab()
        text = "".join(pieces)
        assert decode(encode(text, vocab), vocab) == text


class TestSampleThinkTokens:
    def test_exhaustive_draw_is_permutation(self):
        assert sorted(sample_think_tokens(8, 8, seed=1)) == list(range(1, 9))

    def test_deterministic_per_seed(self):
        assert sample_think_tokens(4, 16, seed=9) == sample_think_tokens(4, 16, seed=9)

    def test_distinct(self):
        for seed in range(30):
            draw = sample_think_tokens(6, 16, seed=seed)
            assert len(set(draw)) == 6

    def test_over_capacity_rejected(self):
        with pytest.raises(DataError):
            sample_think_tokens(9, 8, seed=0)

    def test_uniform_over_seeds(self):
        counts = np.zeros(8, dtype=int)
        trials = 10_000
        for seed in range(trials):
            counts[sample_think_tokens(1, 8, seed=seed)[0] - 1] += 1
        expected = trials / 8
        sigma = np.sqrt(trials * (1 / 8) * (7 / 8))
        assert np.all(np.abs(counts - expected) <= 3 * sigma)


class TestManifest:
    def test_round_trip(self, vocab, tmp_path):
        path = str(tmp_path / "vocab.json")
        write_manifest(vocab, path)
        loaded = read_manifest(path)
        assert loaded == vocab
        assert manifest(loaded) == manifest(vocab)

    def test_tampered_assignment_rejected(self, vocab):
        data = manifest(vocab)
        data["eos"] = data["eos"] + 1
        with pytest.raises(VocabError):
            vocab_from_manifest(data)

    def test_wrong_format_rejected(self, vocab):
        data = manifest(vocab)
        data["format"] = "ptvocab-0"
        with pytest.raises(VocabError):
            vocab_from_manifest(data)
