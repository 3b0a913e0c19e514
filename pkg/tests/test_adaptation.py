import math

import numpy as np
import pytest
import torch
from torch.nn.utils import parameters_to_vector, vector_to_parameters

import adaptation
from adaptation import (
    MAX_ATTEMPT_FACTOR, PseudoSample, PseudoStats, estimate_gradient_norms, fusion_members, generate_pseudo,
    gradient_scale, pseudo_examples, replayed_tasks, run_adaptation, split_quota, total_loss,
)
from config import AdaptationConfig, DecodeConfig
from errors import InvalidInputError
from expansion import bootstrap_modules
from model import DTYPE, Routing, batch_loss, train_loss_batch
from module_pool import ModulePool
from numerics import finite_difference_gradient
from taskgen import training_examples

CONFIG = AdaptationConfig(
    epochs=2, learning_rate=1e-2, batch_size=8, q=8, pseudo_ratio=0.5,
    pseudo_decode=DecodeConfig(strategy="top_k", top_k=5, max_new_tokens=24),
)


class TestGradientScale:
    def test_decays_to_one(self):
        assert gradient_scale(2.0, 1.0, 1) == pytest.approx(1.0 + math.exp(-1), abs=1e-9)
        assert gradient_scale(2.0, 1.0, 0) == pytest.approx(2.0, abs=1e-9)
        assert gradient_scale(3.0, 3.0, 4) == pytest.approx(1.0, abs=1e-9)
        assert abs(gradient_scale(5.0, 1.0, 30) - 1.0) < 1e-9

    def test_zero_old_norm_clamps(self):
        assert gradient_scale(2.0, 0.0, 1) == 1.0

    def test_negative_epoch_rejected(self):
        with pytest.raises(InvalidInputError):
            gradient_scale(1.0, 1.0, -1)


@pytest.mark.parametrize("total, tasks, expected", [
    (7, 3, [3, 2, 2]),
    (6, 3, [2, 2, 2]),
    (1, 2, [1, 0]),
    (5, 0, []),
])
def test_split_quota(total, tasks, expected):
    assert split_quota(total, tasks) == expected


@pytest.fixture
def shared_pool(state, small_suite):
    """Two finished tasks routed through the same modules; the second is not yet adapted."""
    pool = ModulePool(state)
    first, second = small_suite.tasks[0], small_suite.tasks[1]
    bootstrap_modules(pool, first, 0)
    run_adaptation(state, pool, first, [], [], CONFIG)
    pool.register_routing(second.task_id, pool.routing[first.task_id])
    return pool


def test_replayed_tasks_follow_learning_order(state, small_suite):
    pool = ModulePool(state)
    a, b, c = small_suite.tasks[:3]
    bootstrap_modules(pool, a, 0)
    bootstrap_modules(pool, b, 0)
    pool.register_routing(c.task_id, [pool.routing[b.task_id][0], pool.routing[a.task_id][1]])
    assert replayed_tasks(pool, c.task_id) == [a.task_id, b.task_id]


def test_fusion_members_deduplicate(state, small_suite):
    pool = ModulePool(state)
    a, b, c = small_suite.tasks[:3]
    bootstrap_modules(pool, a, 0)
    pool.register_routing(b.task_id, [pool.routing[a.task_id][0], pool.insert_temp_module(1, 5)])
    pool.register_routing(c.task_id, pool.routing[b.task_id])
    members = fusion_members(pool, c.task_id, [b.task_id, a.task_id])
    assert members == [["l0-m0"], ["l1-m1", "l1-m0"]]


def test_total_loss_is_additive(state, small_suite):
    pool = ModulePool(state)
    a, b = small_suite.tasks[:2]
    bootstrap_modules(pool, a, 0)
    bootstrap_modules(pool, b, 1)
    new = training_examples(b, "train", 32)[:4]
    old = training_examples(a, "train", 32)[:3]
    r_new, r_old = Routing.single(pool.routing[b.task_id]), Routing.single(pool.routing[a.task_id])
    total, parts = total_loss(state, new, r_new, {a.task_id: (old, r_old)}, {a.task_id: 1.7}, 0.25)
    expected = train_loss_batch(state, new, r_new, 0.25) + 1.7 * train_loss_batch(state, old, r_old, 0.25)
    assert total.item() == pytest.approx(expected.item(), abs=1e-9)
    assert set(parts) == {"__new__", a.task_id}


def test_generate_pseudo_respects_quota(state, shared_pool, small_suite):
    first = small_suite.tasks[0]
    samples, stats = generate_pseudo(state, shared_pool, [first], 6, CONFIG.pseudo_decode, 0)
    assert len(stats) == 1
    assert stats[0].quota == 6
    assert stats[0].kept == len(samples) <= 6
    assert stats[0].attempted <= MAX_ATTEMPT_FACTOR * 6
    assert stats[0].shortfall == 6 - stats[0].kept
    for s in samples:
        assert s.q == first.instruction and s.origin_task_id == first.task_id
    assert len(pseudo_examples(samples, first, 32)) == len(samples)
    again, _ = generate_pseudo(state, shared_pool, [first], 6, CONFIG.pseudo_decode, 0)
    assert again == samples


def test_gradient_norms_restore_mask(state, shared_pool, small_suite):
    first, second = small_suite.tasks[:2]
    routing = Routing.single(shared_pool.routing[second.task_id])
    state.set_trainable(["l1-m0"], ())
    batch = training_examples(second, "train", 32)[:4]
    old = training_examples(first, "train", 32)[:4]
    g_new, g_old = estimate_gradient_norms(state, batch, old, ["l0-m0"], 0.25, routing, routing)
    assert g_new > 0 and g_old > 0
    assert state.mask.modules == frozenset({"l1-m0"})
    assert state.adapter("l1-m0").up.weight.requires_grad
    assert not state.adapter("l0-m0").up.weight.requires_grad


@pytest.fixture
def stored_pseudo(monkeypatch):
    """Replace generation with exact copies of the origin task's training samples."""

    def fake(state, pool, tasks, count_total, decode, seed, vocab=None):
        samples, stats = [], []
        for task, quota in zip(tasks, split_quota(count_total, len(tasks))):
            kept = [PseudoSample(task.task_id, s.x, task.instruction, s.y) for s in task.train[:quota]]
            samples.extend(kept)
            stats.append(PseudoStats(task.task_id, quota, len(kept), len(kept)))
        return samples, stats

    monkeypatch.setattr(adaptation, "generate_pseudo", fake)


def test_gradient_norms_match_finite_differences(state, shared_pool, small_suite):
    first, second = small_suite.tasks[:2]
    routing = Routing.single(shared_pool.routing[second.task_id])
    reused = list(shared_pool.routing[second.task_id])
    new = training_examples(second, "train", 32)[:4]
    old = training_examples(first, "train", 32)[:4]
    g_new, g_old = estimate_gradient_norms(state, new, old, reused, 0.25, routing, routing)

    params = [p for m in reused for p in state.adapter(m).parameters()]
    start = parameters_to_vector(params).detach().clone()

    def loss_at(batch):
        def f(x):
            with torch.no_grad():
                vector_to_parameters(torch.as_tensor(x, dtype=DTYPE), params)
                value = batch_loss(state, batch, routing, "train", 0.25).item()
                vector_to_parameters(start, params)
            return value
        return f

    fd_new = np.linalg.norm(finite_difference_gradient(loss_at(new), start.numpy(), h=1e-5))
    fd_old = np.linalg.norm(finite_difference_gradient(loss_at(old), start.numpy(), h=1e-5))
    assert g_new == pytest.approx(fd_new, rel=1e-3)
    assert g_old == pytest.approx(fd_old, rel=1e-3)


def test_adaptation_with_fusion_and_replay(state, shared_pool, small_suite, stored_pseudo):
    first, second = small_suite.tasks[:2]
    backbone = state.backbone_checksum()
    result = run_adaptation(state, shared_pool, second, [first.task_id], [first], CONFIG)

    assert state.backbone_checksum() == backbone
    assert result.coefficients is not None and result.coefficients.frozen
    assert shared_pool.inference_routing(second.task_id).coefficients is not None
    assert list(result.log.columns) == ["epoch", "task_id", "role", "loss", "eta", "g_new_norm", "g_old_norm"]
    assert (result.log["role"] == "new").sum() == CONFIG.epochs
    assert np.isfinite(result.final_loss)
    assert result.replayed_tasks == [first.task_id]
    assert result.pseudo_stats[0].kept == round(CONFIG.pseudo_ratio * len(second.train))

    replayed = result.log[result.log["role"] == "replayed"]
    assert list(replayed["epoch"]) == list(range(CONFIG.epochs))
    assert set(replayed["task_id"]) == {first.task_id}
    assert np.isfinite(replayed["loss"]).all()
    for row in replayed.itertuples():
        assert np.isfinite(row.g_new_norm) and row.g_new_norm > 0
        assert np.isfinite(row.g_old_norm) and row.g_old_norm > 0
        expected = (row.g_new_norm / row.g_old_norm - 1.0) * math.exp(-row.epoch) + 1.0
        assert row.eta == pytest.approx(expected, abs=1e-9)
    assert [(s.t, s.eta) for s in result.scale_states] == list(zip(replayed["epoch"], replayed["eta"]))
    assert not any(p.requires_grad for a in state.adapters.values() for p in a.parameters())


def test_no_scaling_fixes_eta(state, shared_pool, small_suite, stored_pseudo):
    first, second = small_suite.tasks[:2]
    result = run_adaptation(state, shared_pool, second, [], [first], CONFIG, scaling=False)
    replayed = result.log[result.log["role"] == "replayed"]
    assert len(replayed) == CONFIG.epochs
    assert (replayed["eta"] == 1.0).all()
    assert replayed["g_new_norm"].isna().all()
    assert result.scale_states == []


def test_modules_outside_routing_are_untouched(state, small_suite):
    pool = ModulePool(state)
    a, b = small_suite.tasks[:2]
    bootstrap_modules(pool, a, 0)
    run_adaptation(state, pool, a, [], [], CONFIG)
    before = state.module_checksums(list(pool.routing[a.task_id]))
    bootstrap_modules(pool, b, 0)
    run_adaptation(state, pool, b, [], [a], CONFIG)
    assert state.module_checksums(list(before)) == before


def test_zero_ratio_generates_nothing(state, shared_pool, small_suite):
    first, second = small_suite.tasks[:2]
    config = AdaptationConfig(epochs=1, batch_size=8, pseudo_ratio=0.0)
    result = run_adaptation(state, shared_pool, second, [], [first], config)
    assert result.pseudo_stats == []
    assert set(result.log["role"]) == {"new"}
    assert result.initial_loss > 0
