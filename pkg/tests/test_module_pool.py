import json

import numpy as np
import pytest
import torch

from errors import InvalidInputError, InvalidStateError, RoutingError
from module_pool import FusionCoefficients, ModulePool, select_largest
from numerics import cosine_similarity


def _pool_with_tasks(state, routings):
    """Pool whose layers hold permanent modules registered for the given task routings."""
    pool = ModulePool(state)
    for task_id, layers in routings.items():
        ids = []
        for l, existing in enumerate(layers):
            if existing is None:
                module_id = pool.insert_temp_module(l, seed=len(pool.owners))
            else:
                module_id = existing
            ids.append(module_id)
        pool.register_routing(task_id, ids)
    return pool


class TestFusionCoefficients:
    def test_create_and_names(self):
        c = FusionCoefficients.create("expansion", [["a", "b"], ["c"]], [[1.0, 2.0], [0.5]])
        assert c.names == ("expansion/0", "expansion/1")
        assert c.parameter_count() == 3
        assert all(v.requires_grad for v in c.values)
        np.testing.assert_allclose(c.weights()[1], [1.0])
        assert sum(c.weights()[0]) == pytest.approx(1.0)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            FusionCoefficients.create("expansion", [["a", "b"]], [[1.0]])
        with pytest.raises(InvalidInputError):
            FusionCoefficients.create("pruning", [["a"]], [[1.0]])

    def test_freeze_detaches(self):
        c = FusionCoefficients.create("adaptation", [["a", "b"]], [[0.0, 1.0]])
        frozen = c.freeze()
        assert frozen.frozen and not frozen.values[0].requires_grad
        with torch.no_grad():
            c.values[0][0] = 5.0
        assert frozen.as_lists() == [[0.0, 1.0]]

    def test_select_largest_breaks_ties_to_oldest(self):
        c = FusionCoefficients.create("expansion", [["old", "new"], ["a", "b", "t"]], [[1.0, 1.0], [0.2, 0.9, 0.5]])
        assert select_largest(c) == ["old", "b"]


class TestExpansionInit:
    def test_first_task_layer_gets_one(self, state):
        pool = ModulePool(state)
        pool.insert_temp_module(0, 0)
        np.testing.assert_array_equal(pool.init_expansion_coefficients(0, {}, "t1"), [1.0])

    @pytest.mark.parametrize("fixture_seed", range(20))
    def test_max_over_owners_then_min(self, state, fixture_seed):
        rng = np.random.default_rng(fixture_seed)
        num_tasks = int(rng.integers(1, 5))
        freq = {f"t{i}": rng.random(6) + 0.01 for i in range(num_tasks + 1)}
        routings = {}
        shared_layer0 = None
        for i in range(num_tasks):
            reuse = i > 0 and rng.random() < 0.5
            routings[f"t{i}"] = [shared_layer0 if reuse else None, None]
            if i == 0:
                shared_layer0 = "l0-m0"
        pool = _pool_with_tasks(state, routings)
        pool.insert_temp_module(0, 99)
        new = f"t{num_tasks}"

        got = pool.init_expansion_coefficients(0, freq, new)
        expected = [
            max(cosine_similarity(freq[o], freq[new]) for o in pool.owners[m])
            for m in pool.previous_modules(0)
        ]
        expected.append(min(expected))
        np.testing.assert_array_equal(got, expected)

    def test_requires_single_temporary(self, state):
        pool = ModulePool(state)
        with pytest.raises(InvalidStateError):
            pool.init_expansion_coefficients(0, {}, "t")

    def test_missing_frequency_vector(self, state):
        pool = _pool_with_tasks(state, {"a": [None, None]})
        pool.insert_temp_module(0, 5)
        with pytest.raises(InvalidStateError):
            pool.init_expansion_coefficients(0, {"b": np.ones(3)}, "b")

    def test_non_dynamic_is_all_ones(self, state):
        pool = _pool_with_tasks(state, {"a": [None, None], "b": [None, None]})
        for l in range(2):
            pool.insert_temp_module(l, 7)
        c = pool.expansion_coefficients({}, "c", dynamic=False)
        assert c.as_lists() == [[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]


class TestRoutingBookkeeping:
    def test_register_makes_modules_permanent(self, state):
        pool = ModulePool(state)
        ids = [pool.insert_temp_module(l, l) for l in range(2)]
        assert pool.previous_modules(0) == []
        pool.register_routing("a", ids)
        assert pool.previous_modules(0) == [ids[0]]
        assert pool.owners[ids[0]] == {"a"}
        assert pool.creator[ids[1]] == "a"
        assert pool.task_order == ["a"]

    def test_register_is_idempotent_but_immutable(self, state):
        pool = _pool_with_tasks(state, {"a": [None, None]})
        pool.register_routing("a", pool.routing["a"])
        assert pool.task_order == ["a"]
        other = pool.insert_temp_module(1, 3)
        with pytest.raises(InvalidStateError):
            pool.register_routing("a", [pool.routing["a"][0], other])

    def test_register_rejects_unknown_modules(self, state):
        pool = ModulePool(state)
        with pytest.raises(RoutingError):
            pool.register_routing("a", ["l0-m9", "l1-m9"])

    def test_discard_keeps_selection(self, state):
        pool = _pool_with_tasks(state, {"a": [None, None]})
        temp = pool.insert_temp_module(0, 4)
        pool.mark_selected(0, pool.routing["a"][0])
        pool.discard_unselected(0)
        assert temp not in pool.layers[0]
        assert temp not in state.adapters

    def test_owned_module_cannot_be_discarded(self, state):
        pool = _pool_with_tasks(state, {"a": [None, None]})
        with pytest.raises(InvalidStateError):
            pool.discard_module(pool.routing["a"][0])

    def test_reused_modules_and_owner_consistency(self, state):
        pool = _pool_with_tasks(state, {"a": [None, None], "b": ["l0-m0", None]})
        assert pool.reused_modules("b", "a") == ["l0-m0"]
        assert pool.owners["l0-m0"] == {"a", "b"}
        pool.check_owner_consistency()
        pool.owners["l1-m1"].add("ghost")
        with pytest.raises(InvalidStateError):
            pool.check_owner_consistency()

    def test_inference_coefficients_saved_once(self, state):
        pool = _pool_with_tasks(state, {"a": [None, None]})
        assert pool.inference_routing("a").coefficients is None
        coefficients = FusionCoefficients.create("adaptation", [["l0-m0"], ["l1-m0"]], [[1.0], [1.0]])
        pool.save_inference_coefficients("a", coefficients)
        assert pool.inference_routing("a").coefficients is not None
        with pytest.raises(InvalidStateError):
            pool.save_inference_coefficients("a", None)
        with pytest.raises(InvalidStateError):
            pool.inference_routing("unknown")

    def test_write_routing(self, state, tmp_path):
        pool = _pool_with_tasks(state, {"a": [None, None], "b": ["l0-m0", None]})
        pool.save_inference_coefficients("a", None)
        path = tmp_path / "routing.json"
        pool.write_routing(str(path))
        payload = json.loads(path.read_text())
        assert payload["routing"]["b"] == {"0": "l0-m0", "1": "l1-m1"}
        assert payload["owners"]["l0-m0"] == ["a", "b"]
        assert payload["inference"] == {}

    def test_learnable_parameter_count(self, state):
        pool = _pool_with_tasks(state, {"a": [None, None]})
        per_module = state.parameter_count(["l0-m0"])
        assert pool.learnable_parameter_count() == 2 * per_module
        pool.insert_temp_module(0, 8)
        assert pool.learnable_parameter_count() == 2 * per_module
