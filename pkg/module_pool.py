"""
Module pool: the growing set of adapter modules across tasks.

Tracks, per layer, which modules exist (including temporary ones inserted by
the expansion stage), which tasks own each module, every finished task's
routing, and the fusion coefficients saved for inference.
"""

import json
import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
import torch

from errors import InvalidInputError, InvalidStateError, RoutingError
from model import ModelState, Routing
from numerics import cosine_similarity, softmax_weights

logger = logging.getLogger(__name__)

FUSION_STAGES = ("expansion", "adaptation")


@dataclass
class FusionCoefficients:
    """
    Learnable per-layer coefficient vectors over the layer's member modules.

    ``values[l]`` holds one coefficient per entry of ``members[l]``; the
    fusion weights are their softmax.
    """

    stage: str
    members: Tuple[Tuple[str, ...], ...]
    values: Tuple[torch.Tensor, ...]
    frozen: bool = False

    @classmethod
    def create(
        cls,
        stage: str,
        members: Sequence[Sequence[str]],
        initial: Sequence[Sequence[float]],
        trainable: bool = True
    ) -> "FusionCoefficients":
        if stage not in FUSION_STAGES:
            raise InvalidInputError(f"unknown fusion stage '{stage}'")
        members = tuple(tuple(m) for m in members)
        if len(initial) != len(members):
            raise InvalidInputError("one coefficient vector per layer is required")
        values = []
        for layer, (mods, init) in enumerate(zip(members, initial)):
            init = np.asarray(init, dtype=np.float64)
            if init.shape != (len(mods),):
                raise InvalidInputError(f"layer {layer}: {init.size} coefficients for {len(mods)} modules")
            if not np.all(np.isfinite(init)):
                raise InvalidInputError(f"layer {layer}: non-finite coefficient")
            values.append(torch.tensor(init, dtype=torch.float64, requires_grad=trainable))
        return cls(stage=stage, members=members, values=tuple(values), frozen=not trainable)

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(f"{self.stage}/{l}" for l in range(len(self.members)))

    def routing(self) -> Routing:
        return Routing.fusion(self.members, self.values, self.names)

    def as_lists(self) -> List[List[float]]:
        return [v.detach().cpu().numpy().tolist() for v in self.values]

    def weights(self) -> List[np.ndarray]:
        return [softmax_weights(v.detach().cpu().numpy()) for v in self.values]

    def parameter_count(self) -> int:
        return sum(v.numel() for v in self.values)

    def freeze(self) -> "FusionCoefficients":
        """Detached, non-trainable copy."""
        return FusionCoefficients(
            stage=self.stage,
            members=self.members,
            values=tuple(v.detach().clone().requires_grad_(False) for v in self.values),
            frozen=True,
        )

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "members": [list(m) for m in self.members],
            "values": self.as_lists(),
            "weights": [w.tolist() for w in self.weights()],
        }


def select_largest(coefficients: FusionCoefficients) -> List[str]:
    """Per layer, the member with the largest coefficient; ties go to the lowest index (oldest module)."""
    selection = []
    for members, values in zip(coefficients.members, coefficients.values):
        v = values.detach().cpu().numpy()
        selection.append(members[int(np.argmax(v))])
    return selection


class ModulePool:
    """Owns module bookkeeping for one lifelong run; parameters live in the ModelState."""

    def __init__(self, state: ModelState):
        self.state = state
        self.layers: List[List[str]] = [[] for _ in range(state.config.num_layers)]
        self.temporary: Set[str] = set()
        self.owners: Dict[str, Set[str]] = {}
        self.routing: Dict[str, Tuple[str, ...]] = {}
        self.inference: Dict[str, Optional[FusionCoefficients]] = {}
        self.task_order: List[str] = []
        self.creator: Dict[str, str] = {}
        self._selected: Dict[int, str] = {}
        self._counters = [0] * state.config.num_layers

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def size(self) -> int:
        return sum(len(layer) for layer in self.layers)

    def layer_of(self, module_id: str) -> int:
        for l, layer in enumerate(self.layers):
            if module_id in layer:
                return l
        raise RoutingError(f"unknown module id '{module_id}'")

    def previous_modules(self, layer: int) -> List[str]:
        """Permanent modules of a layer, oldest first."""
        return [m for m in self.layers[layer] if m not in self.temporary]

    def _check_layer(self, layer: int):
        if not 0 <= layer < self.num_layers:
            raise InvalidInputError(f"layer {layer} out of range [0, {self.num_layers})")

    # -- expansion --------------------------------------------------------

    def insert_temp_module(self, layer: int, seed: int) -> str:
        """Append a freshly initialised, ownerless module to ``layer``."""
        self._check_layer(layer)
        module_id = f"l{layer}-m{self._counters[layer]}"
        self._counters[layer] += 1
        self.state.add_adapter(module_id, layer, seed)
        self.layers[layer].append(module_id)
        self.temporary.add(module_id)
        self.owners[module_id] = set()
        logger.debug(f"Inserted temporary module {module_id}")
        return module_id

    def init_expansion_coefficients(
        self,
        layer: int,
        freq_store: Mapping[str, np.ndarray],
        new_task: str
    ) -> np.ndarray:
        """
        Dynamic initial coefficients for one layer.

        Each previous module gets the largest frequency cosine between any of its
        owner tasks and the new task; the temporary module gets the smallest of
        those. A layer with no previous module gets [1.0].

        Raises:
            InvalidStateError: A needed frequency vector is missing, or a
                previous module has no owner
        """
        self._check_layer(layer)
        previous = self.previous_modules(layer)
        temps = [m for m in self.layers[layer] if m in self.temporary]
        if len(temps) != 1:
            raise InvalidStateError(f"layer {layer} must hold exactly one temporary module, found {len(temps)}")
        if not previous:
            return np.array([1.0])
        if new_task not in freq_store:
            raise InvalidStateError(f"no frequency vector for new task '{new_task}'")

        f_new = freq_store[new_task]
        lambdas = []
        for module_id in previous:
            owners = self.owners.get(module_id, set())
            if not owners:
                raise InvalidStateError(f"previous module {module_id} has no owner")
            sims = []
            for task_id in sorted(owners):
                if task_id not in freq_store:
                    raise InvalidStateError(f"no frequency vector for owner task '{task_id}'")
                sims.append(cosine_similarity(freq_store[task_id], f_new))
            lambdas.append(max(sims))
        lambdas.append(min(lambdas))
        return np.array(lambdas)

    def expansion_coefficients(
        self,
        freq_store: Mapping[str, np.ndarray],
        new_task: str,
        dynamic: bool = True
    ) -> FusionCoefficients:
        """λ over (previous modules..., temporary module) in every layer; all 1.0 when not dynamic."""
        members, initial = [], []
        for l in range(self.num_layers):
            layer_members = self.previous_modules(l) + [m for m in self.layers[l] if m in self.temporary]
            members.append(layer_members)
            if dynamic:
                initial.append(self.init_expansion_coefficients(l, freq_store, new_task))
            else:
                initial.append(np.ones(len(layer_members)))
        return FusionCoefficients.create("expansion", members, initial)

    def mark_selected(self, layer: int, module_id: str):
        self._check_layer(layer)
        if module_id not in self.layers[layer]:
            raise RoutingError(f"module '{module_id}' is not in layer {layer}")
        self._selected[layer] = module_id

    def discard_module(self, module_id: str):
        """
        Remove a module from the pool and the model.

        Raises:
            InvalidStateError: If the module has owners
        """
        if self.owners.get(module_id):
            raise InvalidStateError(f"cannot discard module {module_id} owned by {sorted(self.owners[module_id])}")
        layer = self.layer_of(module_id)
        self.layers[layer].remove(module_id)
        self.temporary.discard(module_id)
        self.owners.pop(module_id, None)
        self.state.remove_adapter(module_id)
        logger.debug(f"Discarded module {module_id}")

    def discard_unselected(self, layer: int):
        """Drop every temporary module of ``layer`` except the recorded selection."""
        self._check_layer(layer)
        if layer not in self._selected:
            raise InvalidStateError(f"no selection recorded for layer {layer}")
        keep = self._selected.pop(layer)
        for module_id in [m for m in self.layers[layer] if m in self.temporary and m != keep]:
            self.discard_module(module_id)

    # -- routing ----------------------------------------------------------

    def register_routing(self, task_id: str, module_ids: Sequence[str]):
        """
        Store a task's per-layer routing and add the task to each module's owners.

        Registering the same routing twice is a no-op; a different routing for
        a registered task is refused.
        """
        module_ids = tuple(module_ids)
        if len(module_ids) != self.num_layers:
            raise RoutingError(f"routing needs {self.num_layers} modules, got {len(module_ids)}")
        for l, module_id in enumerate(module_ids):
            if module_id not in self.layers[l]:
                raise RoutingError(f"unknown module id '{module_id}' for layer {l}")

        if task_id in self.routing:
            if self.routing[task_id] != module_ids:
                raise InvalidStateError(f"routing of finished task '{task_id}' cannot change")
            return

        for module_id in module_ids:
            if module_id in self.temporary:
                self.temporary.discard(module_id)
                self.creator[module_id] = task_id
            self.owners[module_id].add(task_id)
        self.routing[task_id] = module_ids
        self.task_order.append(task_id)
        logger.info(f"Registered routing for {task_id}: {list(module_ids)}")

    def reused_modules(self, task_id: str, other_task: str) -> List[str]:
        """Modules of ``task_id``'s routing that ``other_task`` also routes to."""
        mine = self._routing_of(task_id)
        theirs = set(self._routing_of(other_task))
        return [m for m in mine if m in theirs]

    def _routing_of(self, task_id: str) -> Tuple[str, ...]:
        if task_id not in self.routing:
            raise InvalidStateError(f"task '{task_id}' has no registered routing")
        return self.routing[task_id]

    def save_inference_coefficients(self, task_id: str, coefficients: Optional[FusionCoefficients]):
        """Keep the task's adaptation coefficients (or None) for inference; saved once."""
        self._routing_of(task_id)
        if task_id in self.inference:
            raise InvalidStateError(f"inference coefficients of '{task_id}' are already saved")
        self.inference[task_id] = coefficients.freeze() if coefficients is not None else None

    def inference_routing(self, task_id: str) -> Routing:
        routing = self._routing_of(task_id)
        coefficients = self.inference.get(task_id)
        if coefficients is None:
            return Routing.single(routing)
        return coefficients.routing()

    # -- consistency and export --------------------------------------------

    def check_owner_consistency(self):
        """
        Raises:
            InvalidStateError: owners disagree with routings, a routed module is
                missing, or a permanent module has no owner
        """
        expected: Dict[str, Set[str]] = {}
        for task_id, routing in self.routing.items():
            for module_id in routing:
                if module_id not in self.owners:
                    raise InvalidStateError(f"task '{task_id}' routes to missing module {module_id}")
                expected.setdefault(module_id, set()).add(task_id)
        for layer in self.layers:
            for module_id in layer:
                owners = self.owners.get(module_id, set())
                if owners != expected.get(module_id, set()):
                    raise InvalidStateError(f"owner set of {module_id} disagrees with routings")
                if module_id not in self.temporary and not owners:
                    raise InvalidStateError(f"permanent module {module_id} has no owner")

    def export_routing(self) -> Dict[str, Dict[str, str]]:
        return {
            task_id: {str(l): m for l, m in enumerate(routing)}
            for task_id, routing in self.routing.items()
        }

    def write_routing(self, path: str):
        payload = {
            "routing": self.export_routing(),
            "owners": {m: sorted(o) for m, o in self.owners.items()},
            "inference": {t: c.to_dict() for t, c in self.inference.items() if c is not None},
        }
        with open(path, "w") as f:
            json.dump(payload, f, indent=2)

    def learnable_parameter_count(self) -> int:
        """Parameters of all permanent modules plus every saved coefficient."""
        modules = [m for layer in self.layers for m in layer if m not in self.temporary]
        total = self.state.parameter_count(modules)
        total += sum(c.parameter_count() for c in self.inference.values() if c is not None)
        return total
