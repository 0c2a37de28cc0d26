import numpy as np
import pytest

from ecoc_lm.corpus import (EOS, UNK, CorpusError, Vocabulary, batchify, build_vocab, bundled,
                            read_corpus, segments, synthetic_corpus, tokenize)


class TestVocabulary:
    def test_basic(self):
        v = build_vocab("a a b\n")
        assert v.tokens == (EOS, UNK, "a", "b")
        assert v.counts[v.index("a")] == 2

    def test_min_count_folds_into_unk(self):
        v = build_vocab("a a b", min_count=2)
        assert "b" not in v
        assert v.index("b") == v.unk_index
        assert v.counts[v.unk_index] == 1

    def test_max_size(self):
        v = build_vocab("a a b", max_size=1)
        assert v.tokens == (EOS, UNK, "a")

    def test_tie_break_first_occurrence(self):
        v = build_vocab("z y x y z x")
        assert v.tokens[2:] == ("z", "y", "x")

    def test_empty(self):
        with pytest.raises(CorpusError):
            build_vocab("   ")

    def test_idempotent_and_hash(self):
        text = read_corpus(bundled("toy.train.txt"))
        a, b = build_vocab(text), build_vocab(text)
        assert a.tokens == b.tokens and a.hash == b.hash

    def test_save_load(self, tmp_path):
        v = build_vocab("the cat sat\nthe dog\n")
        v.save(tmp_path / "v.txt")
        back = Vocabulary.load(tmp_path / "v.txt")
        assert back.tokens == v.tokens and back.counts == v.counts

    def test_tokenize_newlines(self):
        assert tokenize("a b\nc\n") == ["a", "b", EOS, "c", EOS]


class TestBatchify:
    def test_segments(self):
        seg = segments(np.arange(101), 5)
        assert seg.shape == (5, 20)
        assert seg[-1, -1] == 99

    def test_window_lengths(self):
        batches = batchify(np.arange(101), 5, 7)
        assert [b.length for b in batches] == [7, 7, 5]

    def test_targets_shifted(self):
        for b in batchify(np.arange(101), 5, 7):
            assert np.array_equal(b.targets, b.inputs + 1)

    def test_reconstruct_segments(self):
        stream = np.random.default_rng(0).integers(0, 50, 333)
        lanes = segments(stream, 4)
        batches = batchify(stream, 4, 9)
        rebuilt = np.concatenate([b.inputs for b in batches], axis=1)
        rebuilt = np.concatenate([rebuilt, batches[-1].targets[:, -1:]], axis=1)
        assert np.array_equal(rebuilt, lanes)

    def test_too_short(self):
        with pytest.raises(CorpusError):
            batchify(np.arange(9), 5, 3)


class TestBundledCorpora:
    def test_synth_size(self):
        text = read_corpus(bundled("synth.train.txt"))
        v = build_vocab(text)
        assert 150_000 < len(text.encode()) < 250_000
        assert 1500 < len(v) < 2500

    def test_generator_deterministic(self):
        assert synthetic_corpus(500, seed=1) == synthetic_corpus(500, seed=1)

    def test_unknown(self):
        with pytest.raises(CorpusError):
            bundled("nope.txt")
