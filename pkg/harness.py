"""
Experiment harness for lifelong sequence generation.

Runs complete task sequences for DMEA, its ablations and the toy baselines,
evaluates every learned task after each step, and computes the summary
metrics (average score and forward knowledge transfer).
"""

import os
import json
import time
import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from adaptation import replayed_tasks, run_adaptation
from config import BackboneConfig, DecodeConfig, LabConfig
from errors import DMEAError, InvalidInputError, InvalidStateError, StageFailureError
from expansion import ExpansionResult, bootstrap_modules, run_expansion
from model import (
    ModelState, generate_batch, load_checkpoint, pretrain_backbone, save_checkpoint,
    teacher_forced_accuracy,
)
from module_pool import ModulePool
from numerics import derive_seed
from selection import BasisStore, compute_subspace, rank_scores, similarity_scores
from taskgen import (
    TaskSpec, TaskSuite, Vocabulary, build_vocabulary, encode, make_pretraining_corpus, make_suite,
    task_order, training_examples, word_frequency, write_task_files,
)

logger = logging.getLogger(__name__)

MODULE_SCHEMES = ("expand", "shared", "fresh", "multitask")


@dataclass(frozen=True)
class MethodSpec:
    """
    A lifelong-learning method as a set of stage switches.

    scheme:
        expand    - expansion search, then selection and adaptation
        shared    - one module set created by the first task, routed by every task
        fresh     - new modules for every task, no search
        multitask - at step i, fresh shared modules trained on tasks 1..i jointly
    """

    name: str
    scheme: str = "expand"
    dynamic_init: bool = True
    transfer: bool = True
    scaling: bool = True
    replay: bool = True
    description: str = ""


METHODS: Dict[str, MethodSpec] = {m.name: m for m in (
    MethodSpec("dmea", description="expansion, subspace transfer, replay with gradient scaling"),
    MethodSpec("dmea-no-transfer", transfer=False, description="DMEA without fusing similar tasks' modules"),
    MethodSpec("dmea-no-scaling", scaling=False, description="DMEA with the replay scale fixed to 1"),
    MethodSpec("dmea-no-init", dynamic_init=False, description="DMEA with every expansion coefficient starting at 1.0"),
    MethodSpec("acm", dynamic_init=False, transfer=False, scaling=False,
               description="expansion and pseudo replay only"),
    MethodSpec("acm-dynamic-init", transfer=False, scaling=False,
               description="expansion and pseudo replay with dynamic coefficient initialisation"),
    MethodSpec("seq-finetune", scheme="shared", dynamic_init=False, transfer=False, scaling=False, replay=False,
               description="one adapter set fine-tuned on every task in turn"),
    MethodSpec("per-task-adapters", scheme="fresh", dynamic_init=False, transfer=False, scaling=False, replay=False,
               description="isolated adapters per task"),
    MethodSpec("adapter-replay", scheme="shared", dynamic_init=False, transfer=False, scaling=False,
               description="one adapter set with pseudo replay"),
    MethodSpec("mtl", scheme="multitask", dynamic_init=False, transfer=False, scaling=False, replay=False,
               description="joint training on all tasks seen so far"),
)}


def get_method(method: Union[str, MethodSpec]) -> MethodSpec:
    if isinstance(method, MethodSpec):
        return method
    if method not in METHODS:
        raise InvalidInputError(f"unknown method '{method}', expected one of {sorted(METHODS)}")
    return METHODS[method]


# ---------------------------------------------------------------------------
# Results matrix and metrics
# ---------------------------------------------------------------------------

@dataclass
class ResultsMatrix:
    """
    Lower-triangular score matrix: scores[i, j] is the exact-match score on
    task j after learning task i (0-based, j <= i). Entries above the
    diagonal are NaN.
    """

    task_order: List[str]
    scores: np.ndarray
    token_accuracy: np.ndarray

    @classmethod
    def empty(cls, order: Sequence[str]) -> "ResultsMatrix":
        n = len(order)
        return cls(list(order), np.full((n, n), np.nan), np.full((n, n), np.nan))

    @property
    def size(self) -> int:
        return len(self.task_order)

    def record(self, i: int, j: int, score: float, token_accuracy: float = float("nan")):
        if not 0 <= j <= i < self.size:
            raise InvalidInputError(f"score ({i}, {j}) outside the lower triangle")
        if not 0.0 <= score <= 100.0:
            raise InvalidInputError(f"score {score} outside [0, 100]")
        self.scores[i, j] = score
        self.token_accuracy[i, j] = token_accuracy

    def row(self, i: int) -> List[float]:
        return [float(v) for v in self.scores[i, :i + 1]]

    def final_row(self) -> List[float]:
        return self.row(self.size - 1)

    def diagonal(self) -> List[float]:
        return [float(self.scores[i, i]) for i in range(self.size)]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for i in range(self.size):
            for j in range(i + 1):
                rows.append({
                    "step": i + 1,
                    "after_task": self.task_order[i],
                    "position": j + 1,
                    "task": self.task_order[j],
                    "score": float(self.scores[i, j]),
                    "token_accuracy": float(self.token_accuracy[i, j]),
                })
        return pd.DataFrame(rows, columns=["step", "after_task", "position", "task", "score", "token_accuracy"])

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "ResultsMatrix":
        order = frame.sort_values("position").drop_duplicates("position")["task"].tolist()
        frame = frame.assign(token_accuracy=pd.to_numeric(frame["token_accuracy"], errors="coerce"))
        matrix = cls.empty(order)
        for row in frame.itertuples(index=False):
            matrix.record(int(row.step) - 1, int(row.position) - 1, float(row.score), float(row.token_accuracy))
        return matrix

    def to_csv(self, path: str):
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def from_csv(cls, path: str) -> "ResultsMatrix":
        return cls.from_frame(pd.read_csv(path))


def average_score(row: Sequence[float]) -> float:
    """Arithmetic mean of a row of scores."""
    if len(row) == 0:
        raise InvalidInputError("cannot average an empty row")
    return float(np.mean(row))


def fkt(results: ResultsMatrix, t: int, standalone: Mapping[str, float]) -> float:
    """
    Forward knowledge transfer at step t (1-based): the mean over tasks 2..t of
    the diagonal score minus the task's standalone score.
    """
    if t < 2:
        raise InvalidInputError("forward transfer is defined from step 2 on")
    if t > results.size:
        raise InvalidInputError(f"step {t} beyond the {results.size} learned tasks")
    deltas = []
    for i in range(1, t):
        task_id = results.task_order[i]
        if task_id not in standalone:
            raise InvalidInputError(f"no standalone score for task '{task_id}'")
        deltas.append(results.scores[i, i] - standalone[task_id])
    return float(np.sum(deltas) / (t - 1))


def fkt_curve(results: ResultsMatrix, standalone: Mapping[str, float]) -> List[Tuple[int, float]]:
    return [(t, fkt(results, t, standalone)) for t in range(2, results.size + 1)]


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _until_eos(tokens: Sequence[int], eos_id: int) -> List[int]:
    tokens = list(tokens)
    return tokens[:tokens.index(eos_id)] if eos_id in tokens else tokens


def score_generations(
    predictions: Sequence[Sequence[int]],
    references: Sequence[Sequence[int]]
) -> Tuple[float, float]:
    """
    Exact-match and token-accuracy percentages.

    Token accuracy counts position-wise matches over the longer of the two
    sequences.
    """
    if len(predictions) != len(references):
        raise InvalidInputError("predictions and references differ in count")
    if not references:
        raise InvalidInputError("nothing to score")
    exact, token_scores = 0, []
    for pred, ref in zip(predictions, references):
        pred, ref = list(pred), list(ref)
        exact += int(pred == ref)
        longest = max(len(pred), len(ref))
        matches = sum(p == r for p, r in zip(pred, ref))
        token_scores.append(matches / longest if longest else 1.0)
    return 100.0 * exact / len(references), 100.0 * float(np.mean(token_scores))


def evaluate_task(
    state: ModelState,
    pool: ModulePool,
    task: TaskSpec,
    decode: DecodeConfig = DecodeConfig(),
    split: str = "test",
    vocab: Optional[Vocabulary] = None
) -> Tuple[float, float]:
    """
    Greedy generations for every sample of a split, scored against the references.

    Raises:
        InvalidStateError: If the task has no registered routing
    """
    vocab = vocab or build_vocabulary()
    routing = pool.inference_routing(task.task_id)
    samples = task.split(split)
    max_length = state.config.max_sequence_length
    prompts = [encode(s, task, False, max_length, vocab).prompt for s in samples]
    greedy = replace(decode, strategy="greedy")
    outputs = generate_batch(state, prompts, routing, greedy, eos_id=vocab.eos_id)
    predictions = [_until_eos(out, vocab.eos_id) for out in outputs]
    references = [vocab.ids(s.y) for s in samples]
    return score_generations(predictions, references)


def evaluate(state: ModelState, pool: ModulePool, task: TaskSpec, decode: DecodeConfig = DecodeConfig()) -> float:
    """Exact-match percentage on the test split."""
    return evaluate_task(state, pool, task, decode, "test")[0]


# ---------------------------------------------------------------------------
# Backbone
# ---------------------------------------------------------------------------

def backbone_config(config: LabConfig, vocab: Optional[Vocabulary] = None) -> BackboneConfig:
    vocab = vocab or build_vocabulary()
    b = config.backbone
    return b if b.vocab_size else replace(b, vocab_size=len(vocab))


def copy_accuracy(state: ModelState, sequences: Sequence[Sequence[int]], sep_id: int) -> float:
    """Teacher-forced accuracy on the copied half of copy sequences."""
    copies = [s for s in sequences if sep_id in s]
    starts = [list(s).index(sep_id) + 1 for s in copies]
    return teacher_forced_accuracy(state, copies, starts)


def prepare_backbone(config: LabConfig, cache_dir: Optional[str] = None) -> str:
    """
    Pretrained backbone checkpoint for this configuration, trained once and cached.

    Returns:
        Path to the checkpoint file
    """
    vocab = build_vocabulary()
    bconf = backbone_config(config, vocab)
    bconf.validate()
    cache_dir = cache_dir or config.harness.cache_dir
    os.makedirs(cache_dir, exist_ok=True)

    key = hashlib.sha256(json.dumps(asdict(bconf), sort_keys=True).encode("utf-8")).hexdigest()[:16]
    path = os.path.join(cache_dir, f"backbone-{key}.ckpt")
    if os.path.exists(path):
        logger.info(f"Using cached backbone {path}")
        return path

    logger.info(f"Pretraining backbone ({bconf.pretrain_steps} steps)")
    corpus = make_pretraining_corpus(bconf.pretrain_corpus_size, bconf.seed, bconf.max_sequence_length, vocab)
    state = pretrain_backbone(corpus, bconf.pretrain_steps, bconf.seed, bconf)

    held_out = make_pretraining_corpus(200, derive_seed(bconf.seed, "held-out"), bconf.max_sequence_length, vocab)
    logger.info(f"Backbone copy accuracy on held-out sequences: {100 * copy_accuracy(state, held_out, vocab.sep_id):.1f}%")

    tmp = f"{path}.{os.getpid()}.tmp"
    save_checkpoint(state, tmp)
    os.replace(tmp, path)
    return path


# ---------------------------------------------------------------------------
# Lifelong runs
# ---------------------------------------------------------------------------

@dataclass
class LifelongRun:
    method: str
    suite: str
    order_index: int
    seed: int
    task_order: List[str]
    results: ResultsMatrix
    expansion_traces: List[dict] = field(default_factory=list)
    adaptation_logs: Dict[str, pd.DataFrame] = field(default_factory=dict)
    pseudo_stats: List[dict] = field(default_factory=list)
    similarity_rows: List[dict] = field(default_factory=list)
    routing_snapshots: List[dict] = field(default_factory=list)
    checksum_snapshots: List[dict] = field(default_factory=list)
    learnable_parameters: int = 0
    seconds: float = 0.0
    backbone_checksum: str = ""
    pseudo_ratio: float = 0.0
    basis_store: Optional[BasisStore] = None

    @property
    def reuse_fractions(self) -> Dict[str, float]:
        return {
            t["task_id"]: float(np.mean(t["reused"]))
            for t in self.expansion_traces if not t["bootstrap"]
        }

    def metadata(self) -> dict:
        meta = {
            "method": self.method,
            "suite": self.suite,
            "order_index": self.order_index,
            "seed": self.seed,
            "task_order": self.task_order,
            "num_tasks": len(self.task_order),
            "pseudo_ratio": self.pseudo_ratio,
            "learnable_parameters": self.learnable_parameters,
            "seconds": self.seconds,
            "backbone_checksum": self.backbone_checksum,
            "final_average": average_score(self.results.final_row()),
        }
        reuse = self.reuse_fractions
        if reuse:
            meta["reuse_by_task"] = reuse
            meta["reuse_fraction"] = float(np.mean(list(reuse.values())))
        return meta


def _check_order(suite: TaskSuite, order: Sequence[str]) -> List[str]:
    order = list(order)
    if not order:
        raise InvalidInputError("task order is empty")
    if len(set(order)) != len(order):
        raise InvalidInputError("task order repeats a task")
    for task_id in order:
        suite.task(task_id)
    return order


def _shared_routing(pool: ModulePool, task: TaskSpec, first: TaskSpec, seed: int) -> ExpansionResult:
    if not pool.routing:
        return bootstrap_modules(pool, task, seed)
    routing = list(pool.routing[first.task_id])
    pool.register_routing(task.task_id, routing)
    return ExpansionResult(
        task_id=task.task_id,
        selection=routing,
        reused=[True] * len(routing),
        members=[[m] for m in routing],
        initial_coefficients=[[1.0] for _ in routing],
        final_coefficients=[[1.0] for _ in routing],
        dynamic_init=False,
        bootstrap=False,
    )


def run_lifelong(
    suite: TaskSuite,
    order: Sequence[str],
    method: Union[str, MethodSpec],
    seed: int,
    config: LabConfig = LabConfig(),
    checkpoint: Optional[str] = None,
    order_index: int = 1
) -> LifelongRun:
    """
    Learn the tasks of ``order`` one after another and evaluate every learned
    task after each step.

    Args:
        suite: Task suite
        order: Task ids in learning order
        method: Method name or MethodSpec
        seed: Run seed (replaces every training-stage seed)
        config: Lab configuration
        checkpoint: Pretrained backbone checkpoint (prepared from config if None)
        order_index: Order number recorded in the run metadata

    Returns:
        LifelongRun with the results matrix and all stage traces

    Raises:
        StageFailureError: Naming the task and stage that failed
    """
    method = get_method(method)
    order = _check_order(suite, order)
    cfg = config.with_seed(seed)
    torch.set_num_threads(1)
    checkpoint = checkpoint or prepare_backbone(config)

    if method.scheme == "multitask":
        return _run_multitask(suite, order, method, seed, cfg, checkpoint, order_index)
    if method.scheme not in MODULE_SCHEMES:
        raise InvalidInputError(f"unknown module scheme '{method.scheme}'")

    state = load_checkpoint(checkpoint)
    pool = ModulePool(state)
    store = BasisStore()
    vocab = build_vocabulary()
    freq_store = {t: word_frequency(suite.task(t), vocab) for t in order}
    run = LifelongRun(
        method=method.name, suite=suite.name, order_index=order_index, seed=seed,
        task_order=order, results=ResultsMatrix.empty(order),
        backbone_checksum=state.backbone_checksum(), pseudo_ratio=cfg.adaptation.pseudo_ratio,
        basis_store=store,
    )
    start = time.perf_counter()
    first = suite.task(order[0])

    for i, task_id in enumerate(order):
        task = suite.task(task_id)
        logger.info(f"[{method.name} seed {seed}] task {i + 1}/{len(order)}: {task_id}")
        stage = "expansion"
        try:
            examples = training_examples(task, "train", state.config.max_sequence_length, vocab)
            if method.scheme == "expand":
                expansion = run_expansion(
                    state, pool, task, freq_store, cfg.expansion, cfg.adaptation.mu,
                    method.dynamic_init, examples,
                )
            elif method.scheme == "fresh":
                expansion = bootstrap_modules(pool, task, cfg.expansion.seed)
            else:
                expansion = _shared_routing(pool, task, first, cfg.expansion.seed)
            run.expansion_traces.append(expansion.to_trace())

            stage = "selection"
            similar: List[str] = []
            if method.scheme == "expand":
                basis = compute_subspace(state, pool, task, cfg.selection)
                scores = similarity_scores(basis, store, cfg.selection, freq_store)
                if method.transfer and scores:
                    similar = rank_scores(scores, cfg.selection.K)
                for old_task, score in scores:
                    run.similarity_rows.append({
                        "new_task": task_id, "old_task": old_task, "score": score,
                        "scorer": cfg.selection.scorer, "selected": old_task in similar,
                    })
                store.add(basis)
                if similar:
                    logger.info(f"Similar tasks for {task_id}: {similar}")

            stage = "adaptation"
            replay = [suite.task(t) for t in replayed_tasks(pool, task_id)] if method.replay else []
            adaptation = run_adaptation(
                state, pool, task, similar, replay, cfg.adaptation,
                scaling=method.scaling, examples=examples,
            )
            run.adaptation_logs[task_id] = adaptation.log
            run.pseudo_stats.extend({"step": i + 1, **row} for row in adaptation.pseudo_frame().to_dict("records"))
            pool.check_owner_consistency()
            run.routing_snapshots.append(pool.export_routing())
            run.checksum_snapshots.append({"backbone": state.backbone_checksum(), "modules": state.module_checksums()})

            stage = "evaluation"
            for j in range(i + 1):
                em, acc = evaluate_task(
                    state, pool, suite.task(order[j]), cfg.harness.eval_decode, cfg.harness.eval_split, vocab
                )
                run.results.record(i, j, em, acc)
            logger.info(f"Scores after {task_id}: {[round(s, 1) for s in run.results.row(i)]}")

        except StageFailureError:
            logger.error(f"Run {method.name} seed {seed} failed at task {task_id}")
            raise
        except DMEAError as e:
            logger.error(f"Run {method.name} seed {seed} failed at {stage} of {task_id}: {e}")
            raise StageFailureError(str(e), task_id, stage) from e

    if state.backbone_checksum() != run.backbone_checksum:
        raise InvalidStateError("backbone parameters changed during the lifelong run")
    run.learnable_parameters = pool.learnable_parameter_count()
    run.seconds = time.perf_counter() - start
    return run


def _run_multitask(
    suite: TaskSuite,
    order: List[str],
    method: MethodSpec,
    seed: int,
    cfg: LabConfig,
    checkpoint: str,
    order_index: int
) -> LifelongRun:
    """At step i, fresh shared modules trained jointly on tasks 1..i."""
    vocab = build_vocabulary()
    run = LifelongRun(
        method=method.name, suite=suite.name, order_index=order_index, seed=seed,
        task_order=order, results=ResultsMatrix.empty(order), pseudo_ratio=0.0,
    )
    start = time.perf_counter()
    no_replay = replace(cfg.adaptation, pseudo_ratio=0.0)

    for i, task_id in enumerate(order):
        stage = "adaptation"
        try:
            state = load_checkpoint(checkpoint)
            if not run.backbone_checksum:
                run.backbone_checksum = state.backbone_checksum()
            pool = ModulePool(state)
            tasks = [suite.task(t) for t in order[:i + 1]]
            bootstrap_modules(pool, tasks[-1], cfg.expansion.seed)
            for other in tasks[:-1]:
                pool.register_routing(other.task_id, pool.routing[task_id])

            examples = []
            for t in tasks:
                examples.extend(training_examples(t, "train", state.config.max_sequence_length, vocab))
            adaptation = run_adaptation(state, pool, tasks[-1], [], [], no_replay, scaling=False, examples=examples)
            run.adaptation_logs[task_id] = adaptation.log
            run.routing_snapshots.append(pool.export_routing())

            stage = "evaluation"
            for j, t in enumerate(tasks):
                em, acc = evaluate_task(state, pool, t, cfg.harness.eval_decode, cfg.harness.eval_split, vocab)
                run.results.record(i, j, em, acc)
            run.learnable_parameters = pool.learnable_parameter_count()
        except DMEAError as e:
            logger.error(f"Multitask run failed at {stage} of step {i + 1}: {e}")
            raise StageFailureError(str(e), task_id, stage) from e

    run.seconds = time.perf_counter() - start
    return run


def standalone_scores(
    suite: TaskSuite,
    seed: int,
    config: LabConfig = LabConfig(),
    checkpoint: Optional[str] = None
) -> pd.DataFrame:
    """
    Every task trained alone with fresh adapters and scored on its own test split.

    Returns:
        DataFrame with task, score and token_accuracy columns
    """
    checkpoint = checkpoint or prepare_backbone(config)
    rows = []
    for task_id in suite.task_ids:
        run = run_lifelong(suite, [task_id], "per-task-adapters", seed, config, checkpoint)
        rows.append({
            "task": task_id,
            "score": float(run.results.scores[0, 0]),
            "token_accuracy": float(run.results.token_accuracy[0, 0]),
        })
    return pd.DataFrame(rows, columns=["task", "score", "token_accuracy"])


# ---------------------------------------------------------------------------
# Run directories and jobs
# ---------------------------------------------------------------------------

def run_name(suite: str, order_index: int, method: str, seed: int, tag: str = "") -> str:
    name = f"{suite}-order{order_index}-{method}-seed{seed}"
    return f"{name}-{tag}" if tag else name


def write_run(run: LifelongRun, out_dir: str, suite: TaskSuite, config: LabConfig) -> str:
    """
    Write one run directory: results.csv, run.json, traces/, bases/,
    similarity.csv and tasks/.
    """
    traces = os.path.join(out_dir, "traces")
    os.makedirs(traces, exist_ok=True)

    run.results.to_csv(os.path.join(out_dir, "results.csv"))
    with open(os.path.join(out_dir, "run.json"), "w") as f:
        json.dump({**run.metadata(), "config": config.to_dict()}, f, indent=2)

    for i, trace in enumerate(run.expansion_traces, start=1):
        with open(os.path.join(traces, f"expansion-{i:02d}-{trace['task_id']}.json"), "w") as f:
            json.dump(trace, f, indent=2)
    for i, (task_id, log) in enumerate(run.adaptation_logs.items(), start=1):
        log.to_csv(os.path.join(traces, f"adaptation-{i:02d}-{task_id}.csv"), index=False)
    for i, snapshot in enumerate(run.routing_snapshots, start=1):
        with open(os.path.join(traces, f"routing-{i:02d}.json"), "w") as f:
            json.dump(snapshot, f, indent=2)
    if run.checksum_snapshots:
        with open(os.path.join(traces, "checksums.json"), "w") as f:
            json.dump(run.checksum_snapshots, f, indent=2)
    if run.pseudo_stats:
        pd.DataFrame(run.pseudo_stats).to_csv(os.path.join(traces, "pseudo.csv"), index=False)

    if run.basis_store is not None and len(run.basis_store):
        run.basis_store.save(os.path.join(out_dir, "bases"))
    if run.similarity_rows:
        from selection import similarity_frame
        similarity_frame(run.similarity_rows).to_csv(os.path.join(out_dir, "similarity.csv"), index=False)

    write_task_files(suite, os.path.join(out_dir, "tasks"), run.task_order)
    logger.info(f"Run written to {out_dir}")
    return out_dir


@dataclass(frozen=True)
class RunJob:
    suite: str
    order_index: int
    method: str
    seed: int
    config: LabConfig
    out_dir: str
    checkpoint: str
    tag: str = ""


def execute_job(job: RunJob) -> str:
    """Run one (suite, order, method, seed) job and write its directory."""
    suite = make_suite(job.suite, job.config.taskgen.seed, job.config.taskgen)
    order = task_order(suite, job.order_index)
    run = run_lifelong(suite, order, job.method, job.seed, job.config, job.checkpoint, job.order_index)
    path = os.path.join(job.out_dir, run_name(job.suite, job.order_index, job.method, job.seed, job.tag))
    return write_run(run, path, suite, job.config)


def run_jobs(jobs: Sequence[RunJob], threads: int = 1) -> List[str]:
    """Execute jobs, at most ``threads`` at a time; each job owns its run directory."""
    if threads <= 1 or len(jobs) <= 1:
        return [execute_job(job) for job in tqdm(jobs, desc="runs", disable=len(jobs) < 2)]

    paths = []
    with ProcessPoolExecutor(max_workers=threads) as executor:
        futures = {executor.submit(execute_job, job): job for job in jobs}
        for future in tqdm(as_completed(futures), total=len(futures), desc="runs"):
            paths.append(future.result())
    return sorted(paths)


def write_standalone(scores: pd.DataFrame, out_dir: str, suite: str, seed: int) -> str:
    os.makedirs(out_dir, exist_ok=True)
    frame = scores.copy()
    frame.insert(0, "seed", seed)
    frame.insert(0, "suite", suite)
    path = os.path.join(out_dir, "standalone.csv")
    frame.to_csv(path, index=False)
    return path


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def find_run_dirs(in_dir: str) -> Tuple[List[str], List[str]]:
    """(run directories, standalone CSV files) below ``in_dir``."""
    runs, standalone = [], []
    for root, _, files in os.walk(in_dir):
        if "run.json" in files and "results.csv" in files:
            runs.append(root)
        if "standalone.csv" in files:
            standalone.append(os.path.join(root, "standalone.csv"))
    return sorted(runs), sorted(standalone)


def report(in_dir: str, out_dir: str) -> Dict[str, str]:
    """
    Build the report of every finished run below ``in_dir``: a results
    database, CSV score matrices, summary.json and SVG plots.

    Returns:
        Mapping of artefact name to path
    """
    from results_database import ResultsDatabase
    from export_results_api import export_summary, write_score_matrices
    from create_result_charts import create_all_charts

    run_dirs, standalone_files = find_run_dirs(in_dir)
    if not run_dirs:
        raise InvalidInputError(f"no completed runs found below {in_dir}")
    os.makedirs(out_dir, exist_ok=True)

    db_path = os.path.join(out_dir, "results.db")
    db = ResultsDatabase(db_path)
    try:
        for path in run_dirs:
            with open(os.path.join(path, "run.json"), "r") as f:
                meta = json.load(f)
            db.insert_run(os.path.basename(path), pd.read_csv(os.path.join(path, "results.csv")),
                          {**meta, "run_dir": path})
        for path in standalone_files:
            frame = pd.read_csv(path)
            for (suite, seed), group in frame.groupby(["suite", "seed"]):
                db.insert_standalone(suite, int(seed), group)

        artefacts = {"database": db_path}
        artefacts["summary"] = export_summary(db, os.path.join(out_dir, "summary.json"))
        artefacts["matrices"] = write_score_matrices(db, os.path.join(out_dir, "matrices"))
        db.export_to_csv(os.path.join(out_dir, "all_scores.csv"))
        artefacts["scores"] = os.path.join(out_dir, "all_scores.csv")
        artefacts["plots"] = create_all_charts(db, artefacts["summary"], os.path.join(out_dir, "plots"))
    finally:
        db.close()
    return artefacts
