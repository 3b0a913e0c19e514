"""
Adaptation stage: train the new task's modules with fused transfer, pseudo replay
and dynamic gradient scaling.

Per layer the new task's module is fused with the modules of the similar tasks
picked by the selection stage, weighted by softmax(α) (α starts at 1.0). When
the new routing reuses modules of earlier tasks, those tasks are replayed from
pseudo samples the model generates itself from each task's generation token,
and each replayed loss is scaled by

    eta_t = (|g_new| / |g_old| - 1) * exp(-t) + 1

where the norms are gradients on the reused modules and t counts completed
epochs. Only the new task's modules and α are trained; α is then saved for
inference.
"""

import math
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from config import AdaptationConfig, DecodeConfig
from errors import DMEAError, InvalidInputError, InvalidSampleError, InvalidStateError, StageFailureError
from model import (
    ModelState, Routing, generate_batch, gradient_norm, gradients, make_optimizer, minibatches,
    train_loss_batch,
)
from module_pool import FusionCoefficients, ModulePool
from numerics import derive_seed, seeded_rng
from taskgen import (
    Sample, TaskSpec, TrainingExample, Vocabulary, build_vocabulary, encode, parse_body,
    training_examples,
)

logger = logging.getLogger(__name__)

MAX_ATTEMPT_FACTOR = 3


@dataclass(frozen=True)
class GradScaleState:
    replayed_task_id: str
    t: int
    g_new_norm: float
    g_old_norm: float
    eta: float


@dataclass(frozen=True)
class PseudoSample:
    origin_task_id: str
    x: Tuple[str, ...]
    q: Tuple[str, ...]
    y: Tuple[str, ...]
    well_formed: bool = True

    @property
    def sample(self) -> Sample:
        return Sample(x=self.x, y=self.y)


@dataclass(frozen=True)
class PseudoStats:
    task_id: str
    quota: int
    attempted: int
    kept: int

    @property
    def shortfall(self) -> int:
        return self.quota - self.kept

    @property
    def well_formed_rate(self) -> float:
        return self.kept / self.attempted if self.attempted else 0.0


@dataclass
class AdaptationResult:
    task_id: str
    coefficients: Optional[FusionCoefficients]
    similar_tasks: List[str]
    replayed_tasks: List[str]
    log: pd.DataFrame
    pseudo_stats: List[PseudoStats] = field(default_factory=list)
    scale_states: List[GradScaleState] = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")

    def pseudo_frame(self) -> pd.DataFrame:
        return pd.DataFrame([
            {"task_id": s.task_id, "quota": s.quota, "attempted": s.attempted,
             "kept": s.kept, "shortfall": s.shortfall, "well_formed_rate": s.well_formed_rate}
            for s in self.pseudo_stats
        ])


# ---------------------------------------------------------------------------
# Replay bookkeeping
# ---------------------------------------------------------------------------

def replayed_tasks(pool: ModulePool, new_task_id: str, new_routing: Optional[Sequence[str]] = None) -> List[str]:
    """Earlier tasks owning at least one module of the new routing, in learning order."""
    routing = tuple(new_routing) if new_routing is not None else pool.routing.get(new_task_id)
    if routing is None:
        raise InvalidStateError(f"task '{new_task_id}' has no routing")
    owners = set()
    for module_id in routing:
        owners |= pool.owners.get(module_id, set())
    return [t for t in pool.task_order if t in owners and t != new_task_id]


def split_quota(count_total: int, num_tasks: int) -> List[int]:
    """Equal shares; the remainder goes to the earliest tasks."""
    if num_tasks == 0:
        return []
    base, remainder = divmod(max(count_total, 0), num_tasks)
    return [base + (1 if i < remainder else 0) for i in range(num_tasks)]


def generate_pseudo(
    state: ModelState,
    pool: ModulePool,
    tasks: Sequence[TaskSpec],
    count_total: int,
    decode: DecodeConfig,
    seed: int,
    vocab: Optional[Vocabulary] = None
) -> Tuple[List[PseudoSample], List[PseudoStats]]:
    """
    Generate pseudo samples of earlier tasks from their generation tokens.

    Each task's share is generated under the task's saved inference routing.
    Malformed outputs (not X <sep> Q <sep> Y <eos>, or a Q that is not the
    task's instruction) are dropped; generation stops after
    MAX_ATTEMPT_FACTOR times the quota and any shortfall is logged.

    Returns:
        (kept pseudo samples, per-task statistics)
    """
    vocab = vocab or build_vocabulary()
    samples: List[PseudoSample] = []
    stats: List[PseudoStats] = []
    if not tasks or count_total <= 0:
        return samples, stats

    for task, quota in zip(tasks, split_quota(count_total, len(tasks))):
        routing = pool.inference_routing(task.task_id)
        generator = torch.Generator().manual_seed(derive_seed(seed, task.task_id, "pseudo"))
        prefix = [vocab.index[task.generation_token]]
        kept, attempted = [], 0

        while len(kept) < quota and attempted < MAX_ATTEMPT_FACTOR * quota:
            batch = min(quota - len(kept), MAX_ATTEMPT_FACTOR * quota - attempted)
            outputs = generate_batch(state, [prefix] * batch, routing, decode, generator, vocab.eos_id)
            attempted += batch
            for out in outputs:
                parsed = parse_body(out, vocab)
                if parsed is None:
                    continue
                sample, instruction = parsed
                if tuple(instruction) != tuple(task.instruction):
                    continue
                try:
                    encode(sample, task, True, state.config.max_sequence_length, vocab)
                except InvalidSampleError:
                    continue
                kept.append(PseudoSample(task.task_id, sample.x, tuple(instruction), sample.y))

        kept = kept[:quota]
        stats.append(PseudoStats(task.task_id, quota, attempted, len(kept)))
        if len(kept) < quota:
            logger.warning(
                f"Pseudo samples for {task.task_id}: kept {len(kept)}/{quota} after {attempted} attempts"
            )
        else:
            logger.info(f"Pseudo samples for {task.task_id}: {len(kept)} kept from {attempted} attempts")
        samples.extend(kept)
    return samples, stats


def pseudo_examples(
    samples: Sequence[PseudoSample],
    task: TaskSpec,
    max_length: int = 64
) -> List[TrainingExample]:
    return [
        TrainingExample(
            task=encode(s.sample, task, False, max_length),
            data=encode(s.sample, task, True, max_length),
        )
        for s in samples if s.origin_task_id == task.task_id
    ]


# ---------------------------------------------------------------------------
# Gradient scaling
# ---------------------------------------------------------------------------

def gradient_scale(g_new_norm: float, g_old_norm: float, t: int) -> float:
    """
    Dynamic scale factor of a replayed task's loss after t completed epochs.

    A zero old-task gradient norm clamps the factor to 1.
    """
    if t < 0:
        raise InvalidInputError("t must be >= 0")
    if g_old_norm <= 0.0:
        logger.warning("Old-task gradient norm is zero; gradient scale clamped to 1")
        return 1.0
    return (g_new_norm / g_old_norm - 1.0) * math.exp(-t) + 1.0


def estimate_gradient_norms(
    state: ModelState,
    new_batch: Sequence[TrainingExample],
    old_batch: Sequence[TrainingExample],
    reused_modules: Sequence[str],
    mu: float,
    new_routing: Routing,
    old_routing: Routing
) -> Tuple[float, float]:
    """
    Euclidean norms of the training-loss gradients restricted to the reused modules.

    The new batch is forwarded under the new task's training routing, the old
    batch under the replayed task's inference routing. The trainable mask is
    restored afterwards.
    """
    if not reused_modules:
        raise InvalidInputError("reused module set is empty")
    saved = state.mask
    try:
        state.set_trainable(reused_modules, ())
        g_new = gradient_norm(gradients(state, new_batch, new_routing, "train", mu))
        g_old = gradient_norm(gradients(state, old_batch, old_routing, "train", mu))
    finally:
        state.set_trainable(saved.modules, saved.coefficients)
    return g_new, g_old


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def fusion_members(pool: ModulePool, task_id: str, similar_tasks: Sequence[str]) -> List[List[str]]:
    """Per layer: the new task's module, then similar tasks' modules in score order, without duplicates."""
    members = []
    for l, module_id in enumerate(pool.routing[task_id]):
        layer = [module_id]
        for other in similar_tasks:
            candidate = pool.routing[other][l]
            if candidate not in layer:
                layer.append(candidate)
        members.append(layer)
    return members


def total_loss(
    state: ModelState,
    new_batch: Sequence[TrainingExample],
    new_routing: Routing,
    replay_batches: Dict[str, Tuple[Sequence[TrainingExample], Routing]],
    etas: Dict[str, float],
    mu: float
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """
    L_train(new) + sum_i eta_i * L_train(pseudo_i).

    Returns:
        (total loss, unweighted loss per part keyed by task id)
    """
    parts = {"__new__": train_loss_batch(state, new_batch, new_routing, mu)}
    total = parts["__new__"]
    for task_id, (batch, routing) in replay_batches.items():
        if not batch:
            continue
        parts[task_id] = train_loss_batch(state, batch, routing, mu)
        total = total + etas.get(task_id, 1.0) * parts[task_id]
    return total, parts


def _cyclic_batches(items: Sequence[TrainingExample], steps: int, rng: np.random.Generator) -> List[List[TrainingExample]]:
    """Split a shuffled pass over ``items`` into ``steps`` batches (cycling when items are few)."""
    if not items or steps == 0:
        return [[] for _ in range(steps)]
    size = max(1, math.ceil(len(items) / steps))
    order = rng.permutation(len(items))
    batches = []
    for s in range(steps):
        batches.append([items[order[(s * size + j) % len(items)]] for j in range(size)])
    return batches


def run_adaptation(
    state: ModelState,
    pool: ModulePool,
    task: TaskSpec,
    similar_tasks: Sequence[str],
    replayed: Sequence[TaskSpec],
    config: AdaptationConfig,
    scaling: bool = True,
    examples: Optional[Sequence[TrainingExample]] = None
) -> AdaptationResult:
    """
    Run the adaptation stage for a task whose routing is registered.

    Args:
        state: Model state
        pool: Module pool; receives the saved α
        task: The new task
        similar_tasks: Task ids from the selection stage, best first (empty: no fusion)
        replayed: Earlier tasks to replay from pseudo samples, learning order
        config: Adaptation schedule
        scaling: Recompute eta every epoch; otherwise eta = 1
        examples: Training examples (encoded from the task's train split if None)

    Returns:
        AdaptationResult with saved coefficients, per-epoch log and pseudo statistics

    Raises:
        StageFailureError: If training diverges
        InvalidStateError: If a parameter outside the new routing changed
    """
    if task.task_id not in pool.routing:
        raise InvalidStateError(f"task '{task.task_id}' has no registered routing")
    max_length = state.config.max_sequence_length
    if examples is None:
        examples = training_examples(task, "train", max_length)
    routing_ids = pool.routing[task.task_id]

    coefficients = None
    if similar_tasks:
        members = fusion_members(pool, task.task_id, similar_tasks)
        coefficients = FusionCoefficients.create("adaptation", members, [[1.0] * len(m) for m in members])
        train_routing = coefficients.routing()
    else:
        train_routing = Routing.single(routing_ids)

    outside = [m for layer in pool.layers for m in layer if m not in routing_ids]
    backbone_before = state.backbone_checksum()
    outside_before = state.module_checksums(outside)

    count_total = int(round(config.pseudo_ratio * len(examples)))
    pseudo, pseudo_stats = generate_pseudo(
        state, pool, replayed, count_total, config.pseudo_decode, config.seed
    )
    replay_sets = {t.task_id: pseudo_examples(pseudo, t, max_length) for t in replayed}
    replay_sets = {t: ex for t, ex in replay_sets.items() if ex}
    reused = {t: pool.reused_modules(task.task_id, t) for t in replay_sets}

    state.set_trainable(routing_ids, coefficients.names if coefficients is not None else ())
    optimizer = make_optimizer(
        list(state.trainable_parameters(train_routing).values()), config.optimizer, config.learning_rate
    )
    with torch.no_grad():
        initial_loss = train_loss_batch(state, examples, train_routing, config.mu).item()
    rng = seeded_rng(config.seed, task.task_id, "adaptation")

    rows, scale_states, epoch_new_losses = [], [], []
    try:
        for epoch in range(config.epochs):
            etas, norms = {}, {}
            for t_id, ex in replay_sets.items():
                if scaling and reused[t_id]:
                    q_new = [examples[i] for i in rng.choice(len(examples), min(config.q, len(examples)), replace=False)]
                    q_old = [ex[i] for i in rng.choice(len(ex), min(config.q, len(ex)), replace=False)]
                    g_new, g_old = estimate_gradient_norms(
                        state, q_new, q_old, reused[t_id], config.mu,
                        train_routing, pool.inference_routing(t_id)
                    )
                    etas[t_id] = gradient_scale(g_new, g_old, epoch)
                    norms[t_id] = (g_new, g_old)
                    scale_states.append(GradScaleState(t_id, epoch, g_new, g_old, etas[t_id]))
                else:
                    etas[t_id] = 1.0
                    norms[t_id] = (float("nan"), float("nan"))

            new_batches = minibatches(examples, config.batch_size, rng)
            replay_batches = {t_id: _cyclic_batches(ex, len(new_batches), rng) for t_id, ex in replay_sets.items()}

            losses: Dict[str, List[float]] = {}
            for step, batch in enumerate(new_batches):
                step_replay = {
                    t_id: (replay_batches[t_id][step], pool.inference_routing(t_id)) for t_id in replay_sets
                }
                loss, parts = total_loss(state, batch, train_routing, step_replay, etas, config.mu)
                if not torch.isfinite(loss):
                    raise StageFailureError(f"loss became non-finite in epoch {epoch}", task.task_id, "adaptation")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                for key, value in parts.items():
                    losses.setdefault(key, []).append(value.item())

            epoch_new_losses.append(float(np.mean(losses["__new__"])))
            rows.append({
                "epoch": epoch, "task_id": task.task_id, "role": "new",
                "loss": epoch_new_losses[-1], "eta": float("nan"),
                "g_new_norm": float("nan"), "g_old_norm": float("nan"),
            })
            for t_id in replay_sets:
                rows.append({
                    "epoch": epoch, "task_id": t_id, "role": "replayed",
                    "loss": float(np.mean(losses.get(t_id, [float("nan")]))), "eta": etas[t_id],
                    "g_new_norm": norms[t_id][0], "g_old_norm": norms[t_id][1],
                })
            logger.debug(f"adaptation {task.task_id} epoch {epoch}: loss {epoch_new_losses[-1]:.4f} eta {etas}")
    except StageFailureError:
        logger.error(f"Adaptation diverged for {task.task_id}")
        raise
    except DMEAError as e:
        logger.error(f"Adaptation failed for {task.task_id}: {e}")
        raise StageFailureError(str(e), task.task_id, "adaptation") from e
    finally:
        state.freeze_all()

    with torch.no_grad():
        final_loss = train_loss_batch(state, examples, train_routing, config.mu).item()
    pool.save_inference_coefficients(task.task_id, coefficients)

    if state.backbone_checksum() != backbone_before:
        raise InvalidStateError("backbone parameters changed during adaptation")
    for module_id, checksum in outside_before.items():
        if state.module_checksum(module_id) != checksum:
            raise InvalidStateError(f"module {module_id} outside the new routing changed during adaptation")

    log = pd.DataFrame(rows, columns=["epoch", "task_id", "role", "loss", "eta", "g_new_norm", "g_old_norm"])
    logger.info(
        f"Adaptation for {task.task_id}: similar={list(similar_tasks)} replayed={list(replay_sets)} "
        f"loss {initial_loss:.4f} -> {final_loss:.4f}"
    )
    return AdaptationResult(
        task_id=task.task_id,
        coefficients=pool.inference.get(task.task_id),
        similar_tasks=list(similar_tasks),
        replayed_tasks=list(replay_sets),
        log=log,
        pseudo_stats=pseudo_stats,
        scale_states=scale_states,
        initial_loss=initial_loss,
        final_loss=final_loss,
    )
