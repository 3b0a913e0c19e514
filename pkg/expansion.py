"""
Expansion stage: decide per layer whether to reuse a module or keep a new one.

A temporary module is inserted in every layer next to the layer's previous
modules. Only the temporary modules and the coefficients λ are trained, with
the layer output fused by softmax(λ). Afterwards each layer keeps the member
with the largest λ and the unselected temporaries are discarded.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Mapping, Optional, Sequence

import numpy as np
import torch

from config import ExpansionConfig
from errors import DMEAError, InvalidStateError, StageFailureError
from model import ModelState, make_optimizer, minibatches, train_loss_batch
from module_pool import ModulePool, select_largest
from numerics import derive_seed, seeded_rng
from taskgen import TaskSpec, TrainingExample, training_examples

logger = logging.getLogger(__name__)


@dataclass
class ExpansionResult:
    task_id: str
    selection: List[str]
    reused: List[bool]
    members: List[List[str]]
    initial_coefficients: List[List[float]]
    final_coefficients: List[List[float]]
    dynamic_init: bool
    bootstrap: bool
    epoch_losses: List[float] = field(default_factory=list)

    @property
    def reuse_fraction(self) -> float:
        return float(np.mean(self.reused)) if self.reused else 0.0

    def to_trace(self) -> dict:
        return {
            "task_id": self.task_id,
            "bootstrap": self.bootstrap,
            "dynamic_init": self.dynamic_init,
            "members": self.members,
            "initial_lambda": self.initial_coefficients,
            "final_lambda": self.final_coefficients,
            "selection": self.selection,
            "reused": self.reused,
            "epoch_losses": self.epoch_losses,
        }


def module_seed(seed: int, task_id: str, layer: int) -> int:
    """Initialisation seed of the module a task inserts into a layer."""
    return derive_seed(seed, task_id, "module", layer)


def bootstrap_modules(pool: ModulePool, task: TaskSpec, seed: int) -> ExpansionResult:
    """Fresh module in every layer, selected without search."""
    selection = []
    for l in range(pool.num_layers):
        module_id = pool.insert_temp_module(l, module_seed(seed, task.task_id, l))
        pool.mark_selected(l, module_id)
        pool.discard_unselected(l)
        selection.append(module_id)
    pool.register_routing(task.task_id, selection)
    return ExpansionResult(
        task_id=task.task_id,
        selection=selection,
        reused=[False] * len(selection),
        members=[[m] for m in selection],
        initial_coefficients=[[1.0] for _ in selection],
        final_coefficients=[[1.0] for _ in selection],
        dynamic_init=False,
        bootstrap=True,
    )


def run_expansion(
    state: ModelState,
    pool: ModulePool,
    task: TaskSpec,
    freq_store: Mapping[str, np.ndarray],
    config: ExpansionConfig,
    mu: float = 0.25,
    dynamic_init: bool = True,
    examples: Optional[Sequence[TrainingExample]] = None
) -> ExpansionResult:
    """
    Run the expansion stage for a new task and register its routing.

    Args:
        state: Model state holding the frozen backbone and all modules
        pool: Module pool of the current lifelong run
        task: The new task
        freq_store: Word-frequency vector per task, the new task included
        config: Expansion schedule
        mu: Weight of the data-generation loss
        dynamic_init: Initialise λ from frequency similarity; otherwise all 1.0
        examples: Training examples (encoded from the task's train split if None)

    Returns:
        ExpansionResult with the per-layer selection and the coefficient trace

    Raises:
        StageFailureError: If training diverges
        InvalidStateError: If a frozen parameter changed
    """
    if task.task_id in pool.routing:
        raise InvalidStateError(f"task '{task.task_id}' was already expanded")
    if not task.train:
        raise InvalidStateError(f"task '{task.task_id}' has no training data")

    if all(not pool.previous_modules(l) for l in range(pool.num_layers)):
        logger.info(f"Expansion for {task.task_id}: first task, selecting fresh modules")
        return bootstrap_modules(pool, task, config.seed)

    backbone_before = state.backbone_checksum()
    previous_ids = [m for l in range(pool.num_layers) for m in pool.previous_modules(l)]
    previous_before = state.module_checksums(previous_ids)

    temps = [pool.insert_temp_module(l, module_seed(config.seed, task.task_id, l)) for l in range(pool.num_layers)]
    coefficients = pool.expansion_coefficients(freq_store, task.task_id, dynamic=dynamic_init)
    initial = coefficients.as_lists()
    routing = coefficients.routing()

    if examples is None:
        examples = training_examples(task, "train", state.config.max_sequence_length)
    state.set_trainable(temps, coefficients.names)
    params = list(state.trainable_parameters(routing).values())
    optimizer = make_optimizer(params, config.optimizer, config.learning_rate)
    rng = seeded_rng(config.seed, task.task_id, "expansion")

    epoch_losses = []
    try:
        for epoch in range(config.epochs):
            losses = []
            for batch in minibatches(examples, config.batch_size, rng):
                loss = train_loss_batch(state, batch, routing, mu)
                if not torch.isfinite(loss):
                    raise StageFailureError(f"loss became non-finite in epoch {epoch}", task.task_id, "expansion")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                losses.append(loss.item())
            epoch_losses.append(float(np.mean(losses)))
            logger.debug(f"expansion {task.task_id} epoch {epoch}: loss {epoch_losses[-1]:.4f}")
    except StageFailureError:
        logger.error(f"Expansion diverged for {task.task_id}")
        raise
    except DMEAError as e:
        logger.error(f"Expansion failed for {task.task_id}: {e}")
        raise StageFailureError(str(e), task.task_id, "expansion") from e
    finally:
        state.freeze_all()

    selection = select_largest(coefficients)
    for l, module_id in enumerate(selection):
        pool.mark_selected(l, module_id)
        pool.discard_unselected(l)
    reused = [m not in temps for m in selection]
    pool.register_routing(task.task_id, selection)

    if state.backbone_checksum() != backbone_before:
        raise InvalidStateError("backbone parameters changed during expansion")
    for module_id, checksum in previous_before.items():
        if state.module_checksum(module_id) != checksum:
            raise InvalidStateError(f"previous module {module_id} changed during expansion")

    result = ExpansionResult(
        task_id=task.task_id,
        selection=selection,
        reused=reused,
        members=[list(m) for m in coefficients.members],
        initial_coefficients=initial,
        final_coefficients=coefficients.as_lists(),
        dynamic_init=dynamic_init,
        bootstrap=False,
        epoch_losses=epoch_losses,
    )
    logger.info(
        f"Expansion for {task.task_id}: selected {selection} "
        f"(reused {sum(reused)}/{len(reused)} layers)"
    )
    return result
