import math

import numpy as np
import pytest

from ecoc_lm.embeddings import (EmbeddingError, EmbeddingMatrix, cooccurrence, cosine_rank,
                                load_embeddings, ppmi, ppmi_svd_embeddings, save_embeddings)


@pytest.fixture
def vec_file(tmp_path):
    path = tmp_path / "vecs.txt"
    path.write_text("the 0.1 0.2\ncat 0.3 0.4\n")
    return path


class TestLoad:
    def test_full_coverage(self, vec_file):
        emb = load_embeddings(vec_file, ["the", "cat"])
        assert emb.vectors.shape == (2, 2)
        assert emb.coverage == 1.0
        assert np.allclose(emb.vectors, [[0.1, 0.2], [0.3, 0.4]])

    def test_missing_token_gets_scaled_random_row(self, vec_file):
        emb = load_embeddings(vec_file, ["the", "cat", "dog"], seed=3)
        assert emb.coverage == pytest.approx(2 / 3)
        mean_norm = np.mean([math.hypot(0.1, 0.2), math.hypot(0.3, 0.4)])
        assert np.linalg.norm(emb.vectors[2]) == pytest.approx(mean_norm)
        again = load_embeddings(vec_file, ["the", "cat", "dog"], seed=3)
        assert np.array_equal(emb.vectors, again.vectors)

    def test_malformed_number_names_line(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("cat 0.3 0.4\nthe 0.1 x\n")
        with pytest.raises(EmbeddingError, match=":2:"):
            load_embeddings(path, ["the"])

    def test_dimension_mismatch(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("the 0.1 0.2\ncat 0.3\n")
        with pytest.raises(EmbeddingError, match="expected 2"):
            load_embeddings(path, ["the"])

    def test_word2vec_header_skipped(self, tmp_path):
        path = tmp_path / "w2v.txt"
        path.write_text("2 2\nthe 0.1 0.2\ncat 0.3 0.4\n")
        assert load_embeddings(path, ["cat"]).vectors.tolist() == [[0.3, 0.4]]

    def test_save_load_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        emb = EmbeddingMatrix(rng.normal(size=(5, 7)), tuple("abcde"))
        save_embeddings(emb, tmp_path / "a.txt")
        back = load_embeddings(tmp_path / "a.txt", list("abcde"))
        assert np.array_equal(back.vectors, emb.vectors)
        save_embeddings(back, tmp_path / "b.txt")
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()

    def test_rejects_nan(self):
        with pytest.raises(EmbeddingError):
            EmbeddingMatrix(np.array([[np.nan, 1.0]]), ("a",))


class TestCosineRank:
    def test_examples(self):
        emb = EmbeddingMatrix(np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 2.0], [1.0, 0.0]]),
                              tuple("abcd"))
        r = cosine_rank(emb, 0)
        assert r.scores[0] == 1.0
        assert r.scores[3] == pytest.approx(1.0)
        assert r.scores[1] == pytest.approx(1 / math.sqrt(2))
        assert r.scores[2] == pytest.approx(0.0)
        assert r.order.tolist() == [0, 3, 1, 2]

    def test_zero_rows_and_query(self):
        emb = EmbeddingMatrix(np.array([[1.0, 0.0], [0.0, 0.0]]), ("a", "b"))
        assert cosine_rank(emb, 0).scores[1] == 0.0
        with pytest.raises(EmbeddingError):
            cosine_rank(emb, 1)

    def test_query_first_and_bounded(self):
        rng = np.random.default_rng(1)
        emb = EmbeddingMatrix(rng.normal(size=(40, 6)), tuple(map(str, range(40))))
        for q in (0, 7, 39):
            r = cosine_rank(emb, q)
            assert r.order[0] == q
            assert abs(r.scores[q] - 1.0) < 1e-9
            assert np.all(np.abs(r.scores) <= 1.0)
            assert np.all(np.diff(r.scores[r.order]) <= 0)

    def test_scale_invariance(self):
        rng = np.random.default_rng(2)
        v = rng.normal(size=(30, 5))
        a = cosine_rank(EmbeddingMatrix(v, tuple(map(str, range(30)))), 4)
        b = cosine_rank(EmbeddingMatrix(v * 37.5, tuple(map(str, range(30)))), 4)
        assert a.order.tolist() == b.order.tolist()


class TestPpmiSvd:
    def test_symmetric_counts(self):
        c = cooccurrence([0, 1, 0, 1], 2, 1).toarray()
        assert c[0, 1] == c[1, 0] == 3

    def test_ppmi_nonnegative(self):
        rng = np.random.default_rng(0)
        m = ppmi(cooccurrence(rng.integers(0, 20, 500), 20, 2))
        assert m.data.min() > 0

    def test_shape_and_determinism(self):
        rng = np.random.default_rng(3)
        stream = rng.integers(0, 50, 3000)
        toks = [f"t{i}" for i in range(50)]
        a = ppmi_svd_embeddings(stream, toks, window=2, dim=8, seed=1)
        b = ppmi_svd_embeddings(stream, toks, window=2, dim=8, seed=1)
        assert a.vectors.shape == (50, 8)
        assert np.array_equal(a.vectors, b.vectors)

    def test_recovers_leading_subspace(self):
        # randomized power iteration should match a dense SVD on a small matrix
        rng = np.random.default_rng(4)
        stream = rng.integers(0, 30, 4000)
        emb = ppmi_svd_embeddings(stream, [str(i) for i in range(30)], 2, 5, seed=0)
        dense = ppmi(cooccurrence(stream, 30, 2)).toarray()
        s = np.linalg.svd(dense, compute_uv=False)
        got = np.sort(np.linalg.norm(emb.vectors, axis=0) ** 2)[::-1]
        assert np.allclose(got, s[:5], rtol=1e-3)

    def test_errors(self):
        with pytest.raises(EmbeddingError, match="shorter"):
            ppmi_svd_embeddings([0, 1], ["a", "b"], window=2, dim=1)
        with pytest.raises(EmbeddingError):
            ppmi_svd_embeddings([0, 1, 0, 1], ["a", "b"], window=1, dim=3)
