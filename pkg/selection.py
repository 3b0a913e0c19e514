"""
Selection stage: find the learned tasks whose input subspace is closest to the new task's.

The input subspace of a task is spanned by the leading left-singular vectors
of its representation matrix R (m x n: last-token representations of n train
prompts), truncated where the kept energy reaches epsilon. Similarity is the
norm of the new basis projected onto an old subspace:

    Q(new -> old) = ||B_old B_old^T B_new|| / ||B_new||
"""

import os
import json
import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from config import SelectionConfig
from errors import InvalidInputError, InvalidStateError
from model import ModelState, Routing, forward, last_token_representations, pad_batch
from module_pool import ModulePool
from numerics import (
    cosine_similarity, frobenius_norm, rank_for_energy, seeded_rng, spectral_norm, svd,
)
from taskgen import TaskSpec, encode

logger = logging.getLogger(__name__)

SCORERS = ("subspace", "frequency", "representation")


@dataclass(frozen=True)
class SubspaceBasis:
    task_id: str
    basis: np.ndarray
    epsilon: float
    k: int
    n_samples: int
    singular_values: np.ndarray
    representations: Optional[np.ndarray] = None

    @property
    def width(self) -> int:
        return self.basis.shape[0]


def sample_prompts(task: TaskSpec, n: int, seed: int, max_length: int = 64) -> List[Tuple[int, ...]]:
    """Prompts (X <sep> Q <sep>) of n seeded-random train samples; with replacement if the split is smaller than n."""
    if not task.train:
        raise InvalidInputError(f"task '{task.task_id}' has no training samples")
    rng = seeded_rng(seed, task.task_id, "selection")
    replace = len(task.train) < n
    picks = rng.choice(len(task.train), size=n, replace=replace)
    return [encode(task.train[i], task, False, max_length).prompt for i in picks]


def representation_matrix(
    state: ModelState,
    routing: Routing,
    prompts: Sequence[Sequence[int]]
) -> np.ndarray:
    """m x n matrix whose columns are last-token representations of the prompts."""
    tokens = pad_batch(prompts)
    with torch.no_grad():
        trace = forward(state, tokens, routing)
    return last_token_representations(trace, tokens).T


def basis_from_representations(task_id: str, R: np.ndarray, epsilon: float, keep_representations: bool = True) -> SubspaceBasis:
    """
    Raises:
        InvalidStateError: If every representation is zero
    """
    R = np.asarray(R, dtype=np.float64)
    if R.size == 0 or frobenius_norm(R) == 0.0:
        raise InvalidStateError(f"representations of task '{task_id}' are all zero")
    result = svd(R)
    k = rank_for_energy(result.singular_values, epsilon)
    return SubspaceBasis(
        task_id=task_id,
        basis=result.left_singular_vectors[:, :k].copy(),
        epsilon=epsilon,
        k=k,
        n_samples=R.shape[1],
        singular_values=result.singular_values.copy(),
        representations=R.copy() if keep_representations else None,
    )


def compute_subspace(
    state: ModelState,
    pool: ModulePool,
    task: TaskSpec,
    config: SelectionConfig
) -> SubspaceBasis:
    """Basis of the task's input subspace under its post-expansion routing."""
    if task.task_id not in pool.routing:
        raise InvalidStateError(f"task '{task.task_id}' has no routing yet")
    routing = Routing.single(pool.routing[task.task_id])
    prompts = sample_prompts(task, config.n, config.seed, state.config.max_sequence_length)
    R = representation_matrix(state, routing, prompts)
    basis = basis_from_representations(task.task_id, R, config.epsilon)
    logger.info(f"Subspace of {task.task_id}: k={basis.k} of {min(R.shape)} (epsilon={config.epsilon})")
    return basis


def subspace_similarity(new: SubspaceBasis, old: SubspaceBasis, norm: str = "frobenius") -> float:
    """Directional similarity Q(new -> old) in [0, 1]."""
    if new.width != old.width:
        raise InvalidInputError(f"basis width mismatch: {new.width} vs {old.width}")
    projected = old.basis @ (old.basis.T @ new.basis)
    if norm == "frobenius":
        q = frobenius_norm(projected) / frobenius_norm(new.basis)
    elif norm == "spectral":
        q = spectral_norm(projected) / spectral_norm(new.basis)
    else:
        raise InvalidInputError(f"unknown norm '{norm}'")
    return float(np.clip(q, 0.0, 1.0))


def representation_similarity(new: SubspaceBasis, old: SubspaceBasis) -> float:
    """Mean pairwise cosine between the two tasks' representation columns."""
    if new.representations is None or old.representations is None:
        raise InvalidStateError("representation scorer needs stored representations")
    if new.width != old.width:
        raise InvalidInputError(f"basis width mismatch: {new.width} vs {old.width}")
    na = np.linalg.norm(new.representations, axis=0, keepdims=True)
    nb = np.linalg.norm(old.representations, axis=0, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise InvalidInputError("representation similarity of a zero column")
    a = new.representations / na
    b = old.representations / nb
    return float(np.clip(np.mean(a.T @ b), -1.0, 1.0))


def similarity_scores(
    new: SubspaceBasis,
    store: "BasisStore",
    config: SelectionConfig,
    freq_store: Optional[Mapping[str, np.ndarray]] = None
) -> List[Tuple[str, float]]:
    """Score of every stored task, in learning order, with the configured scorer."""
    scores = []
    for old in store.bases():
        if config.scorer == "subspace":
            score = subspace_similarity(new, old, config.norm)
        elif config.scorer == "frequency":
            if freq_store is None or new.task_id not in freq_store or old.task_id not in freq_store:
                raise InvalidStateError("frequency scorer needs both tasks' frequency vectors")
            score = cosine_similarity(freq_store[new.task_id], freq_store[old.task_id])
        elif config.scorer == "representation":
            score = representation_similarity(new, old)
        else:
            raise InvalidInputError(f"unknown similarity scorer '{config.scorer}'")
        scores.append((old.task_id, score))
    return scores


def rank_scores(scores: Sequence[Tuple[str, float]], K: int) -> List[str]:
    """Top-K task ids by score; ties go to the earlier entry (learning order)."""
    if K < 1:
        raise InvalidInputError("K must be >= 1")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i][1], i))
    return [scores[i][0] for i in order[:K]]


def top_k_similar(
    bases: Sequence[SubspaceBasis],
    new_basis: SubspaceBasis,
    K: int,
    norm: str = "frobenius"
) -> List[str]:
    """The K stored tasks with the highest subspace similarity, best first."""
    scores = [(b.task_id, subspace_similarity(new_basis, b, norm)) for b in bases]
    return rank_scores(scores, K)


class BasisStore:
    """Bases of learned tasks in learning order; a stored basis never changes."""

    def __init__(self):
        self._bases: Dict[str, SubspaceBasis] = {}

    def add(self, basis: SubspaceBasis):
        if basis.task_id in self._bases:
            raise InvalidStateError(f"basis of task '{basis.task_id}' is already stored")
        self._bases[basis.task_id] = basis

    def get(self, task_id: str) -> SubspaceBasis:
        if task_id not in self._bases:
            raise InvalidStateError(f"no basis stored for task '{task_id}'")
        return self._bases[task_id]

    def bases(self) -> List[SubspaceBasis]:
        return list(self._bases.values())

    @property
    def task_ids(self) -> List[str]:
        return list(self._bases)

    def __contains__(self, task_id: str) -> bool:
        return task_id in self._bases

    def __len__(self) -> int:
        return len(self._bases)

    def save(self, directory: str):
        """Write bases.json (index) and bases.npz (matrix blocks)."""
        os.makedirs(directory, exist_ok=True)
        index = {}
        arrays = {}
        for i, (task_id, b) in enumerate(self._bases.items()):
            index[task_id] = {"k": b.k, "epsilon": b.epsilon, "n": b.n_samples, "width": b.width, "block": i}
            arrays[f"basis_{i}"] = b.basis
            arrays[f"singular_values_{i}"] = b.singular_values
            if b.representations is not None:
                arrays[f"representations_{i}"] = b.representations
        with open(os.path.join(directory, "bases.json"), "w") as f:
            json.dump(index, f, indent=2)
        np.savez(os.path.join(directory, "bases.npz"), **arrays)

    @classmethod
    def load(cls, directory: str) -> "BasisStore":
        with open(os.path.join(directory, "bases.json"), "r") as f:
            index = json.load(f)
        store = cls()
        with np.load(os.path.join(directory, "bases.npz")) as arrays:
            for task_id, entry in index.items():
                i = entry["block"]
                reps = arrays[f"representations_{i}"] if f"representations_{i}" in arrays.files else None
                store.add(SubspaceBasis(
                    task_id=task_id,
                    basis=arrays[f"basis_{i}"],
                    epsilon=entry["epsilon"],
                    k=entry["k"],
                    n_samples=entry["n"],
                    singular_values=arrays[f"singular_values_{i}"],
                    representations=reps,
                ))
        return store


def similarity_frame(rows: Sequence[dict]) -> pd.DataFrame:
    """Similarity rows (new_task, old_task, score, scorer, selected) as a DataFrame."""
    columns = ["new_task", "old_task", "score", "scorer", "selected"]
    return pd.DataFrame(list(rows), columns=columns)
