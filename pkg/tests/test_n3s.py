import numpy as np
import pytest

from ecgtext.corpus import SynthConfig, generate_examples
from ecgtext.n3s import (EmbeddingIndex, N3SConfig, bow_hash_embedder,
                         brute_force_farthest, build_index, load_index,
                         sample_negatives, sample_random_negatives, save_index,
                         top_k_farthest)


def _hand_index():
    return EmbeddingIndex(
        ids=["a", "b", "c"],
        vectors=np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]], dtype=np.float32))


class TestTopKFarthest:
    def test_hand_case_k1(self):
        index = _hand_index()
        assert top_k_farthest(index, "a", 1) == ["c"]   # distance 2 beats 1

    def test_hand_case_k2(self):
        index = _hand_index()
        assert top_k_farthest(index, "a", 2) == ["c", "b"]

    def test_query_excluded_and_duplicates_near(self):
        index = EmbeddingIndex(
            ids=["a", "dup", "b", "c"],
            vectors=np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]],
                             dtype=np.float32))
        result = top_k_farthest(index, "a", 2)
        assert "a" not in result
        assert "dup" not in result    # zero distance duplicate is the nearest

    def test_k_too_large(self):
        with pytest.raises(ValueError, match="smaller than the index size"):
            top_k_farthest(_hand_index(), "a", 3)

    def test_unknown_id(self):
        with pytest.raises(KeyError, match="unknown id"):
            top_k_farthest(_hand_index(), "zzz", 1)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        vectors = rng.normal(size=(60, 16)).astype(np.float32)
        ids = [f"r{i:03d}" for i in range(60)]
        index = EmbeddingIndex(ids=ids, vectors=vectors)
        for row in range(0, 60, 7):
            fast = top_k_farthest(index, ids[row], 10)
            slow = brute_force_farthest(ids, vectors, row, 10)
            assert fast == slow

    def test_exhaustive_k(self):
        ids = ["a", "b", "c", "d"]
        rng = np.random.default_rng(1)
        index = EmbeddingIndex(ids=ids, vectors=rng.normal(size=(4, 3)).astype(np.float32))
        result = top_k_farthest(index, "b", 3)
        assert sorted(result) == ["a", "c", "d"]

    def test_scale_invariance(self):
        rng = np.random.default_rng(2)
        vectors = rng.normal(size=(20, 8)).astype(np.float32)
        ids = [f"r{i}" for i in range(20)]
        base = EmbeddingIndex(ids=ids, vectors=vectors)
        scaled_vectors = vectors.copy()
        scaled_vectors[4] *= 37.0
        scaled_vectors[11] *= 0.001
        scaled = EmbeddingIndex(ids=ids, vectors=scaled_vectors)
        for query in ("r0", "r4", "r11"):
            assert top_k_farthest(base, query, 5) == top_k_farthest(scaled, query, 5)


class TestIndexBuildAndPersist:
    def test_duplicate_texts_identical_rows(self):
        index = build_index([("a", "sinus rhythm"), ("b", "sinus rhythm"),
                             ("c", "atrial flutter")])
        assert np.array_equal(index.vectors[0], index.vectors[1])
        assert not np.array_equal(index.vectors[0], index.vectors[2])

    def test_bow_embedder_order_insensitive_unit_norm(self):
        v1 = bow_hash_embedder("normal sinus rhythm")
        v2 = bow_hash_embedder("rhythm sinus normal")
        assert np.array_equal(v1, v2)
        assert abs(np.linalg.norm(v1) - 1.0) < 1e-6

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError, match="zero embedding"):
            build_index([("a", "")])

    def test_nonfinite_rejected(self):
        def bad_embedder(_):
            return np.array([np.nan, 1.0], dtype=np.float32)
        with pytest.raises(ValueError, match="non-finite"):
            build_index([("a", "x")], embedder=bad_embedder)

    def test_build_count(self):
        reports = [(f"r{i}", f"report number {i}") for i in range(1000)]
        index = build_index(reports)
        assert index.size == 1000
        assert index.dim == 512

    def test_save_load_round_trip_bit_exact(self, tmp_path):
        index = build_index([("a", "sinus rhythm"), ("b", "atrial flutter")])
        path = tmp_path / "reports.idx"
        save_index(index, path)
        loaded = load_index(path)
        assert loaded.ids == index.ids
        assert loaded.texts == index.texts
        assert loaded.embedder_id == index.embedder_id
        assert loaded.vectors.dtype == np.float32
        assert np.array_equal(loaded.vectors, index.vectors)
        # file-level determinism
        path2 = tmp_path / "again.idx"
        save_index(index, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_empty_reports(self):
        with pytest.raises(ValueError, match="no reports"):
            build_index([])


class TestSampleNegatives:
    def _corpus(self, n=40, dup=0.5):
        config = SynthConfig(n_examples=n, n_classes=4, length_l=32, n_leads=1,
                             duplicate_text_fraction=dup, seed=11)
        return generate_examples(config)

    def _index(self, examples):
        return build_index([(ex.id, ex.report.normalized) for ex in examples])

    def test_exact_substitution_count(self):
        examples = self._corpus()
        index = self._index(examples)
        batch = examples[:4]
        config = N3SConfig(k=8, negative_fraction=0.5)
        new_batch, labels = sample_negatives(index, batch, config,
                                             np.random.default_rng(0))
        assert int((~labels.y_match).sum()) == 2
        assert len(labels.substitutions) == 2

    def test_zero_fraction_no_change(self):
        examples = self._corpus()
        index = self._index(examples)
        batch = examples[:4]
        config = N3SConfig(k=8, negative_fraction=0.0)
        new_batch, labels = sample_negatives(index, batch, config,
                                             np.random.default_rng(0))
        assert labels.y_match.all()
        assert [ex.report.normalized for ex in new_batch] == \
               [ex.report.normalized for ex in batch]

    def test_substituted_text_never_equals_original(self):
        # distinct-phrase corpus: k small enough that the farthest set sits in
        # other classes, which never share a phrase
        examples = self._corpus(n=40, dup=0.0)
        index = self._index(examples)
        config = N3SConfig(k=10, negative_fraction=1.0)
        rng = np.random.default_rng(3)
        for start in range(0, 40, 8):
            batch = examples[start:start + 8]
            new_batch, labels = sample_negatives(index, batch, config, rng)
            for pos, _, _ in labels.substitutions:
                assert new_batch[pos].report.normalized != batch[pos].report.normalized

    def test_y_pair_structure(self):
        examples = self._corpus()
        index = self._index(examples)
        batch = examples[:4]
        config = N3SConfig(k=8, negative_fraction=0.5)
        _, labels = sample_negatives(index, batch, config, np.random.default_rng(1))
        diag = np.diag(labels.y_pair)
        assert np.array_equal(diag == 1.0, labels.y_match)
        off_diag = labels.y_pair[~np.eye(4, dtype=bool)]
        assert (off_diag == -1.0).all()

    def test_reproducible(self):
        examples = self._corpus()
        index = self._index(examples)
        batch = examples[:8]
        config = N3SConfig(k=8, negative_fraction=0.5)
        b1, l1 = sample_negatives(index, batch, config, np.random.default_rng(5))
        b2, l2 = sample_negatives(index, batch, config, np.random.default_rng(5))
        assert [ex.report.normalized for ex in b1] == [ex.report.normalized for ex in b2]
        assert l1.substitutions == l2.substitutions

    def test_input_batch_not_mutated(self):
        examples = self._corpus()
        index = self._index(examples)
        batch = examples[:4]
        texts_before = [ex.report.normalized for ex in batch]
        sample_negatives(index, batch, N3SConfig(k=8, negative_fraction=1.0),
                         np.random.default_rng(0))
        assert [ex.report.normalized for ex in batch] == texts_before

    def test_k_too_large(self):
        examples = self._corpus(n=8)
        index = self._index(examples)
        with pytest.raises(ValueError, match="smaller than the index size"):
            sample_negatives(index, examples[:4], N3SConfig(k=8),
                             np.random.default_rng(0))

    def test_empty_batch(self):
        examples = self._corpus(n=8)
        index = self._index(examples)
        with pytest.raises(ValueError, match="empty batch"):
            sample_negatives(index, [], N3SConfig(k=2), np.random.default_rng(0))


class TestRandomNegatives:
    def test_draw_excludes_self_entry(self):
        config = SynthConfig(n_examples=12, n_classes=4, length_l=32, n_leads=1, seed=2)
        examples = generate_examples(config)
        rng = np.random.default_rng(0)
        _, labels = sample_random_negatives(examples[:6], examples, 1.0, rng)
        for pos, original_id, replacement_id in labels.substitutions:
            assert replacement_id != original_id

    def test_same_interface_as_n3s(self):
        config = SynthConfig(n_examples=12, n_classes=4, length_l=32, n_leads=1, seed=2)
        examples = generate_examples(config)
        _, labels = sample_random_negatives(examples[:4], examples, 0.5,
                                            np.random.default_rng(1))
        assert int((~labels.y_match).sum()) == 2
        assert labels.y_pair.shape == (4, 4)
