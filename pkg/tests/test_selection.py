import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from config import SelectionConfig
from errors import InvalidInputError, InvalidStateError
from expansion import bootstrap_modules
from module_pool import ModulePool
from selection import (
    BasisStore, SubspaceBasis, basis_from_representations, compute_subspace, rank_scores,
    representation_similarity, sample_prompts, similarity_frame, similarity_scores, subspace_similarity,
    top_k_similar,
)


def _basis(task_id, B, R=None):
    return SubspaceBasis(task_id, np.asarray(B, dtype=float), 0.95, np.asarray(B).shape[1], 10,
                         np.ones(np.asarray(B).shape[1]), R)


def _random_orthonormal(rng, m, k):
    q, _ = np.linalg.qr(rng.normal(size=(m, k)))
    return q


class TestSubspaceSimilarity:
    def test_identical_subspaces(self):
        B = _random_orthonormal(np.random.default_rng(0), 6, 3)
        assert subspace_similarity(_basis("a", B), _basis("b", B)) == pytest.approx(1.0, abs=1e-9)

    def test_orthogonal_subspaces(self):
        I = np.eye(6)
        assert subspace_similarity(_basis("a", I[:, :2]), _basis("b", I[:, 2:5])) == pytest.approx(0.0, abs=1e-9)

    def test_half_in_half_out(self):
        I = np.eye(4)
        new = _basis("new", I[:, :2])
        old = _basis("old", I[:, [0, 2]])
        assert subspace_similarity(new, old) == pytest.approx(math.sqrt(0.5), abs=1e-9)

    def test_spectral_norm_variant(self):
        I = np.eye(4)
        q = subspace_similarity(_basis("new", I[:, :2]), _basis("old", I[:, [0, 2]]), norm="spectral")
        assert q == pytest.approx(1.0, abs=1e-9)
        with pytest.raises(InvalidInputError):
            subspace_similarity(_basis("new", I[:, :2]), _basis("old", I[:, :2]), norm="nuclear")

    def test_width_mismatch(self):
        with pytest.raises(InvalidInputError):
            subspace_similarity(_basis("a", np.eye(4)[:, :1]), _basis("b", np.eye(5)[:, :1]))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 5))
    def test_bounded_for_random_pairs(self, seed, k1, k2):
        rng = np.random.default_rng(seed)
        q = subspace_similarity(_basis("a", _random_orthonormal(rng, 8, k1)), _basis("b", _random_orthonormal(rng, 8, k2)))
        assert 0.0 <= q <= 1.0


class TestBasis:
    def test_rank_follows_energy(self):
        R = np.diag([3.0, 1.0, 0.1])
        assert basis_from_representations("t", R, 0.85).k == 1
        assert basis_from_representations("t", R, 0.95).k == 2
        assert basis_from_representations("t", R, 1.0).k == 3

    def test_zero_representations_rejected(self):
        with pytest.raises(InvalidStateError):
            basis_from_representations("t", np.zeros((3, 4)), 0.95)

    def test_compute_subspace(self, state, small_suite):
        pool = ModulePool(state)
        task = small_suite.tasks[0]
        bootstrap_modules(pool, task, 0)
        basis = compute_subspace(state, pool, task, SelectionConfig(n=12))
        assert basis.width == state.config.hidden_width
        assert basis.representations.shape == (state.config.hidden_width, 12)
        assert 1 <= basis.k <= 8
        gram = basis.basis.T @ basis.basis
        np.testing.assert_allclose(gram, np.eye(basis.k), atol=1e-8)

    def test_compute_subspace_needs_routing(self, state, small_suite):
        with pytest.raises(InvalidStateError):
            compute_subspace(state, ModulePool(state), small_suite.tasks[0], SelectionConfig(n=4))

    def test_prompt_sampling_is_seeded(self, small_suite):
        task = small_suite.tasks[0]
        assert sample_prompts(task, 5, 1, 32) == sample_prompts(task, 5, 1, 32)
        assert len(sample_prompts(task, 40, 1, 32)) == 40


class TestRanking:
    def test_rank_scores_ties_keep_learning_order(self):
        assert rank_scores([("a", 0.5), ("b", 0.9), ("c", 0.9)], 2) == ["b", "c"]
        assert rank_scores([("a", 0.5)], 3) == ["a"]
        with pytest.raises(InvalidInputError):
            rank_scores([("a", 0.5)], 0)

    def test_top_k_similar(self):
        I = np.eye(4)
        new = _basis("new", I[:, :2])
        bases = [_basis("far", I[:, 2:]), _basis("near", I[:, :2]), _basis("half", I[:, [0, 3]])]
        assert top_k_similar(bases, new, 2) == ["near", "half"]

    def test_scorers(self):
        I = np.eye(3)
        reps_a = np.array([[1.0, 1.0], [0.0, 0.1], [0.0, 0.0]])
        store = BasisStore()
        store.add(_basis("old", I[:, :1], reps_a))
        new = _basis("new", I[:, :1], reps_a)
        freq = {"old": np.array([1.0, 0.0]), "new": np.array([1.0, 1.0])}

        assert similarity_scores(new, store, SelectionConfig(scorer="subspace"))[0][1] == pytest.approx(1.0)
        score = similarity_scores(new, store, SelectionConfig(scorer="frequency"), freq)[0][1]
        assert score == pytest.approx(1 / math.sqrt(2))
        assert representation_similarity(new, store.get("old")) <= 1.0
        with pytest.raises(InvalidStateError):
            similarity_scores(new, store, SelectionConfig(scorer="frequency"))

    def test_representation_similarity_values(self):
        I = np.eye(2)
        same = np.array([[1.0, 2.0], [0.0, 0.0]])
        orthogonal = np.array([[0.0, 0.0], [3.0, 1.0]])
        assert representation_similarity(_basis("a", I[:, :1], same), _basis("b", I[:, :1], same)) == pytest.approx(1.0)
        assert representation_similarity(_basis("a", I[:, :1], same), _basis("b", I[:, :1], orthogonal)) == pytest.approx(0.0)

    def test_representation_similarity_rejects_zero_column(self):
        I = np.eye(2)
        zero_column = np.array([[1.0, 0.0], [0.0, 0.0]])
        fine = np.array([[1.0, 1.0], [0.0, 1.0]])
        with pytest.raises(InvalidInputError):
            representation_similarity(_basis("a", I[:, :1], zero_column), _basis("b", I[:, :1], fine))
        with pytest.raises(InvalidInputError):
            representation_similarity(_basis("a", I[:, :1], fine), _basis("b", I[:, :1], zero_column))


class TestBasisStore:
    def test_bases_are_frozen(self):
        store = BasisStore()
        store.add(_basis("a", np.eye(3)[:, :1]))
        with pytest.raises(InvalidStateError):
            store.add(_basis("a", np.eye(3)[:, :2]))
        with pytest.raises(InvalidStateError):
            store.get("missing")

    def test_save_and_load(self, tmp_path):
        store = BasisStore()
        store.add(_basis("a", np.eye(3)[:, :1], np.ones((3, 2))))
        store.add(_basis("b", np.eye(3)[:, 1:]))
        store.save(str(tmp_path))
        loaded = BasisStore.load(str(tmp_path))
        assert loaded.task_ids == ["a", "b"]
        np.testing.assert_array_equal(loaded.get("b").basis, np.eye(3)[:, 1:])
        assert loaded.get("b").representations is None
        np.testing.assert_array_equal(loaded.get("a").representations, np.ones((3, 2)))


def test_similarity_frame_columns():
    frame = similarity_frame([{"new_task": "b", "old_task": "a", "score": 0.4, "scorer": "subspace", "selected": True}])
    assert list(frame.columns) == ["new_task", "old_task", "score", "scorer", "selected"]
