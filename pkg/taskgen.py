"""
Synthetic task suites for lifelong sequence generation.

Every task is a stream of (X, Q, Y) triples over one shared word-level
vocabulary: X is the input, Q the task instruction and Y the target output.
Suites come in four flavours:

    similar  - five slot-to-text tasks sharing one template grammar, each with
               its own domain lexicon (restaurant, hotel, tv, laptop, e2e)
    random   - a mix of slot-to-text, copy, reverse, sort and arithmetic tasks
    long     - all five slot-to-text domains plus copy, sort and arithmetic
    repeat   - the similar suite whose last task is a second copy of the first

All generators are pure functions of their seed.
"""

import os
import json
import logging
from dataclasses import dataclass
from functools import lru_cache
from itertools import product
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import TaskgenConfig
from errors import InvalidInputError, InvalidSampleError
from numerics import seeded_rng

logger = logging.getLogger(__name__)

PAD = "<pad>"
EOS = "<eos>"
SEP = "<sep>"
MAX_GENERATION_TOKENS = 16
GENERATION_TOKENS = tuple(f"<gen{i}>" for i in range(MAX_GENERATION_TOKENS))
RESERVED_TOKENS = (PAD, EOS, SEP) + GENERATION_TOKENS

FUNCTION_WORDS = (
    "name", "is", "with", "and", "the", "describe",
    "copy", "reverse", "sort", "add", "letters", "numbers", "plus",
)
LETTERS = tuple("abcdefghijklmnopqrstuvwxyz")
DIGITS = tuple("0123456789")

FAMILIES = ("templated-nlg", "copy", "reverse", "sort", "arithmetic")
ALGORITHMIC_FAMILIES = ("copy", "reverse", "sort", "arithmetic")


@dataclass(frozen=True)
class NlgDomain:
    """Lexicon of one slot-to-text domain."""

    name: str
    noun: str
    slots: Tuple[str, str, str]
    num_entities: int = 8
    values_per_slot: int = 5

    @property
    def entities(self) -> Tuple[str, ...]:
        return tuple(f"{self.name}_{i}" for i in range(self.num_entities))

    def slot_values(self, slot: str) -> Tuple[str, ...]:
        return tuple(f"{slot}_{v}" for v in range(self.values_per_slot))

    @property
    def lexicon(self) -> Tuple[str, ...]:
        words = [self.noun, *self.slots, *self.entities]
        for slot in self.slots:
            words.extend(self.slot_values(slot))
        return tuple(words)


NLG_DOMAINS: Dict[str, NlgDomain] = {
    d.name: d for d in (
        NlgDomain("restaurant", "restaurant", ("food", "area", "pricerange")),
        NlgDomain("hotel", "hotel", ("stars", "district", "parking")),
        NlgDomain("tv", "television", ("screensize", "resolution", "series")),
        NlgDomain("laptop", "laptop", ("battery", "memory", "weight")),
        NlgDomain("e2e", "eatery", ("cuisine", "rating", "neighbourhood")),
    )
}

INSTRUCTIONS = {
    "copy": ("copy", "the", "letters"),
    "reverse": ("reverse", "the", "letters"),
    "sort": ("sort", "the", "letters"),
    "arithmetic": ("add", "the", "numbers"),
}


class Vocabulary:
    """Fixed word-level vocabulary shared by every task and the backbone."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = tuple(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise InvalidInputError("vocabulary contains duplicate tokens")
        self.pad_id = self.index[PAD]
        self.eos_id = self.index[EOS]
        self.sep_id = self.index[SEP]
        self.reserved_ids = frozenset(self.index[t] for t in RESERVED_TOKENS)
        self.content_ids = tuple(i for i in range(len(self.tokens)) if i not in self.reserved_ids)

    def __len__(self):
        return len(self.tokens)

    def ids(self, words: Sequence[str]) -> List[int]:
        try:
            return [self.index[w] for w in words]
        except KeyError as e:
            raise InvalidSampleError(f"token not in vocabulary: {e}")

    def words(self, ids: Sequence[int]) -> List[str]:
        return [self.tokens[i] for i in ids]


@lru_cache(maxsize=1)
def build_vocabulary() -> Vocabulary:
    """The shared vocabulary: reserved tokens first, pad at id 0."""
    tokens = list(RESERVED_TOKENS) + list(FUNCTION_WORDS) + list(LETTERS) + list(DIGITS)
    for domain in NLG_DOMAINS.values():
        tokens.extend(domain.lexicon)
    return Vocabulary(tokens)


@dataclass(frozen=True)
class Sample:
    """One (X, Y) pair; the instruction Q comes from the task."""

    x: Tuple[str, ...]
    y: Tuple[str, ...]


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    name: str
    family: str
    instruction: Tuple[str, ...]
    generation_token: str
    train: Tuple[Sample, ...]
    valid: Tuple[Sample, ...]
    test: Tuple[Sample, ...]
    domain_lexicon: frozenset
    seed: int

    def split(self, name: str) -> Tuple[Sample, ...]:
        if name not in ("train", "valid", "test"):
            raise InvalidInputError(f"unknown split: {name}")
        return getattr(self, name)


@dataclass(frozen=True)
class EncodedSample:
    """
    Token ids of one encoded sample.

    Layout is [G?] X <sep> Q <sep> Y <eos>; ``answer_start`` is the index of the
    separator that closes Q, so the answer region is tokens[answer_start + 1:].
    """

    tokens: Tuple[int, ...]
    answer_start: int
    total_length: int
    with_generation_token: bool = False

    @property
    def prompt(self) -> Tuple[int, ...]:
        """Tokens up to and including the separator that closes Q."""
        return self.tokens[:self.answer_start + 1]


@dataclass(frozen=True)
class TrainingExample:
    """A sample encoded twice: for the task loss (A) and for the data loss (A')."""

    task: EncodedSample
    data: EncodedSample


@dataclass(frozen=True)
class TaskSuite:
    name: str
    seed: int
    tasks: Tuple[TaskSpec, ...]

    def task(self, task_id: str) -> TaskSpec:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise InvalidInputError(f"task '{task_id}' not in suite '{self.name}'")

    @property
    def task_ids(self) -> List[str]:
        return [t.task_id for t in self.tasks]


# ---------------------------------------------------------------------------
# Sample generators
# ---------------------------------------------------------------------------

def _nlg_samples(domain: NlgDomain, count: int, rng: np.random.Generator) -> List[Sample]:
    value_sets = [domain.slot_values(s) for s in domain.slots]
    combos = list(product(domain.entities, *value_sets))
    if count > len(combos):
        raise InvalidInputError(f"domain {domain.name} has only {len(combos)} distinct inputs")
    picks = rng.choice(len(combos), size=count, replace=False)

    samples = []
    for idx in picks:
        entity, v1, v2, v3 = combos[idx]
        s1, s2, s3 = domain.slots
        x = ("name", entity, s1, v1, s2, v2, s3, v3)
        y = (entity, "is", "a", domain.noun, "with", v1, "and", v2, "and", v3)
        samples.append(Sample(x=x, y=y))
    return samples


def _letter_samples(family: str, count: int, rng: np.random.Generator) -> List[Sample]:
    seen = set()
    samples = []
    while len(samples) < count:
        length = int(rng.integers(3, 6))
        x = tuple(LETTERS[i] for i in rng.integers(0, len(LETTERS), size=length))
        if x in seen:
            continue
        seen.add(x)
        if family == "copy":
            y = x
        elif family == "reverse":
            y = x[::-1]
        else:
            y = tuple(sorted(x))
        samples.append(Sample(x=x, y=y))
    return samples


def _arithmetic_samples(count: int, rng: np.random.Generator) -> List[Sample]:
    pairs = list(product(range(10, 100), repeat=2))
    picks = rng.choice(len(pairs), size=count, replace=False)
    samples = []
    for idx in picks:
        a, b = pairs[idx]
        x = (*str(a), "plus", *str(b))
        y = tuple(str(a + b))
        samples.append(Sample(x=x, y=y))
    return samples


def make_task(
    family: str,
    task_id: str,
    generation_index: int,
    seed: int,
    config: TaskgenConfig = TaskgenConfig(),
    domain: Optional[str] = None
) -> TaskSpec:
    """
    Generate one task.

    Args:
        family: One of FAMILIES
        task_id: Identifier of the task within its suite
        generation_index: Which reserved generation token G the task owns
        seed: Data seed
        config: Split sizes
        domain: NLG domain name, required for templated-nlg

    Returns:
        TaskSpec with disjoint train/valid/test splits
    """
    if not 0 <= generation_index < MAX_GENERATION_TOKENS:
        raise InvalidInputError(f"generation index {generation_index} out of range")

    total = config.train_size + config.valid_size + config.test_size
    rng = seeded_rng(seed, "task", domain if family == "templated-nlg" else family)

    if family == "templated-nlg":
        if domain not in NLG_DOMAINS:
            raise InvalidInputError(f"unknown NLG domain: {domain}")
        d = NLG_DOMAINS[domain]
        samples = _nlg_samples(d, total, rng)
        instruction = ("describe", "the", d.noun)
        lexicon = frozenset(d.lexicon)
    elif family in ("copy", "reverse", "sort"):
        samples = _letter_samples(family, total, rng)
        instruction = INSTRUCTIONS[family]
        lexicon = frozenset(LETTERS)
    elif family == "arithmetic":
        samples = _arithmetic_samples(total, rng)
        instruction = INSTRUCTIONS[family]
        lexicon = frozenset(DIGITS) | {"plus"}
    else:
        raise InvalidInputError(f"unknown task family: {family}")

    train = tuple(samples[:config.train_size])
    valid = tuple(samples[config.train_size:config.train_size + config.valid_size])
    test = tuple(samples[config.train_size + config.valid_size:])

    return TaskSpec(
        task_id=task_id,
        name=domain if family == "templated-nlg" else family,
        family=family,
        instruction=instruction,
        generation_token=GENERATION_TOKENS[generation_index],
        train=train,
        valid=valid,
        test=test,
        domain_lexicon=lexicon,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------

def make_similar_suite(seed: int, config: TaskgenConfig = TaskgenConfig()) -> TaskSuite:
    tasks = tuple(
        make_task("templated-nlg", name, i, seed, config, domain=name)
        for i, name in enumerate(NLG_DOMAINS)
    )
    return TaskSuite(name="similar", seed=seed, tasks=tasks)


def make_random_suite(seed: int, config: TaskgenConfig = TaskgenConfig()) -> TaskSuite:
    """Five tasks drawn from at least three families; at most two slot-to-text tasks."""
    rng = seeded_rng(seed, "random-suite")
    num_nlg = int(rng.integers(1, 3))
    domains = list(rng.choice(list(NLG_DOMAINS), size=num_nlg, replace=False))
    algorithmic = list(rng.choice(ALGORITHMIC_FAMILIES, size=5 - num_nlg, replace=False))

    entries = [("templated-nlg", str(d)) for d in domains] + [(str(f), None) for f in algorithmic]
    entries = [entries[i] for i in rng.permutation(len(entries))]

    tasks = []
    for i, (family, domain) in enumerate(entries):
        task_id = domain if family == "templated-nlg" else family
        tasks.append(make_task(family, task_id, i, seed, config, domain=domain))
    return TaskSuite(name="random", seed=seed, tasks=tuple(tasks))


def make_long_suite(seed: int, config: TaskgenConfig = TaskgenConfig()) -> TaskSuite:
    """All five slot-to-text domains plus copy, sort and arithmetic (8 tasks)."""
    similar = make_similar_suite(seed, config)
    extra = [
        make_task(family, family, len(similar.tasks) + i, seed, config)
        for i, family in enumerate(("copy", "sort", "arithmetic"))
    ]
    return TaskSuite(name="long", seed=seed, tasks=similar.tasks + tuple(extra))


def make_repeat_suite(seed: int, config: TaskgenConfig = TaskgenConfig()) -> TaskSuite:
    """
    The similar suite with its last task replaced by a second task from the
    first task's generator and seed: same samples, own task id and generation token.
    """
    similar = make_similar_suite(seed, config)
    first = similar.tasks[0]
    repeat = make_task(
        "templated-nlg", f"{first.task_id}-2", len(similar.tasks) - 1, seed, config, domain=first.name
    )
    return TaskSuite(name="repeat", seed=seed, tasks=similar.tasks[:-1] + (repeat,))


SUITES = {
    "similar": make_similar_suite,
    "random": make_random_suite,
    "long": make_long_suite,
    "repeat": make_repeat_suite,
}


def make_suite(name: str, seed: int, config: TaskgenConfig = TaskgenConfig()) -> TaskSuite:
    if name not in SUITES:
        raise InvalidInputError(f"unknown suite '{name}', expected one of {sorted(SUITES)}")
    return SUITES[name](seed, config)


def task_order(suite: TaskSuite, order_index: int) -> List[str]:
    """
    Task order number ``order_index`` (1-based). Order 1 is the suite's natural
    order; higher orders are fixed seeded permutations.
    """
    if order_index < 1:
        raise InvalidInputError("order index is 1-based")
    ids = suite.task_ids
    if order_index == 1:
        return ids
    perm = seeded_rng(suite.seed, suite.name, "order", order_index).permutation(len(ids))
    return [ids[i] for i in perm]


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

def encode(
    sample: Sample,
    task: TaskSpec,
    with_generation_token: bool = False,
    max_length: int = 64,
    vocab: Optional[Vocabulary] = None
) -> EncodedSample:
    """
    Encode a sample as [G?] X <sep> Q <sep> Y <eos>.

    Raises:
        InvalidSampleError: empty X or Y, or the encoding exceeds ``max_length``
    """
    vocab = vocab or build_vocabulary()
    if not sample.x or not sample.y:
        raise InvalidSampleError("samples need a non-empty input and output")

    tokens = vocab.ids(sample.x) + [vocab.sep_id] + vocab.ids(task.instruction) + [vocab.sep_id]
    answer_start = len(tokens) - 1
    tokens += vocab.ids(sample.y) + [vocab.eos_id]

    if with_generation_token:
        tokens = [vocab.index[task.generation_token]] + tokens
        answer_start += 1

    if len(tokens) > max_length:
        raise InvalidSampleError(f"encoded length {len(tokens)} exceeds max length {max_length}")

    return EncodedSample(
        tokens=tuple(tokens),
        answer_start=answer_start,
        total_length=len(tokens),
        with_generation_token=with_generation_token,
    )


def decode(encoded: EncodedSample, vocab: Optional[Vocabulary] = None) -> Sample:
    """Inverse of ``encode`` for well-formed encodings."""
    vocab = vocab or build_vocabulary()
    body = encoded.tokens[1:] if encoded.with_generation_token else encoded.tokens
    parsed = parse_body(body, vocab)
    if parsed is None:
        raise InvalidSampleError("encoded sample is not well formed")
    sample, _ = parsed
    return sample


def parse_body(
    ids: Sequence[int],
    vocab: Optional[Vocabulary] = None
) -> Optional[Tuple[Sample, Tuple[str, ...]]]:
    """
    Parse X <sep> Q <sep> Y <eos> token ids.

    Returns:
        (Sample, instruction) or None when the sequence is malformed: missing
        eos, wrong separator count, an empty part, or a reserved token inside a part
    """
    vocab = vocab or build_vocabulary()
    ids = list(ids)
    if vocab.eos_id not in ids:
        return None
    body = ids[:ids.index(vocab.eos_id)]

    parts, current = [], []
    for tok in body:
        if tok == vocab.sep_id:
            parts.append(current)
            current = []
        else:
            current.append(tok)
    parts.append(current)

    if len(parts) != 3 or any(len(p) == 0 for p in parts):
        return None
    if any(tok in vocab.reserved_ids for p in parts for tok in p):
        return None

    x, q, y = (tuple(vocab.words(p)) for p in parts)
    return Sample(x=x, y=y), q


def training_examples(
    task: TaskSpec,
    split: str = "train",
    max_length: int = 64,
    vocab: Optional[Vocabulary] = None
) -> List[TrainingExample]:
    return [
        TrainingExample(
            task=encode(s, task, False, max_length, vocab),
            data=encode(s, task, True, max_length, vocab),
        )
        for s in task.split(split)
    ]


def word_frequency(task: TaskSpec, vocab: Optional[Vocabulary] = None) -> np.ndarray:
    """Normalized counts of every X, Q and Y token in the train split, dense over the vocabulary."""
    vocab = vocab or build_vocabulary()
    if not task.train:
        raise InvalidInputError(f"task {task.task_id} has no training samples")

    counts = np.zeros(len(vocab), dtype=np.float64)
    for sample in task.train:
        for ids in (vocab.ids(sample.x), vocab.ids(task.instruction), vocab.ids(sample.y)):
            np.add.at(counts, ids, 1.0)
    return counts / counts.sum()


def make_pretraining_corpus(
    size: int,
    seed: int,
    max_length: int = 64,
    vocab: Optional[Vocabulary] = None
) -> List[List[int]]:
    """
    Generic sequences for backbone pretraining, disjoint from task data.

    Half are copy sequences ``w1..wk <sep> w1..wk <eos>`` over the whole content
    vocabulary, half are successor runs ``w_i w_i+1 ... <eos>`` in vocabulary order.
    """
    vocab = vocab or build_vocabulary()
    rng = seeded_rng(seed, "pretraining-corpus")
    content = np.array(vocab.content_ids)
    corpus = []
    for i in range(size):
        if i % 2 == 0:
            k = int(rng.integers(3, min(9, (max_length - 1) // 2)))
            words = [int(t) for t in rng.choice(content, size=k)]
            corpus.append(words + [vocab.sep_id] + words + [vocab.eos_id])
        else:
            k = int(rng.integers(4, min(13, max_length)))
            start = int(rng.integers(0, len(content)))
            corpus.append([int(content[(start + j) % len(content)]) for j in range(k)] + [vocab.eos_id])
    return corpus


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def write_task_files(suite: TaskSuite, out_dir: str, order: Optional[List[str]] = None) -> str:
    """
    Write one JSON Lines file per task and split, plus a suite manifest.

    Args:
        suite: Suite to export
        out_dir: Directory to create
        order: Task order recorded in the manifest (natural order if None)

    Returns:
        Path to the manifest file
    """
    os.makedirs(out_dir, exist_ok=True)
    files = {}
    for task in suite.tasks:
        for split in ("train", "valid", "test"):
            df = pd.DataFrame([
                {"task": task.task_id, "x": " ".join(s.x), "q": " ".join(task.instruction), "y": " ".join(s.y)}
                for s in task.split(split)
            ])
            path = os.path.join(out_dir, f"{task.task_id}.{split}.jsonl")
            df.to_json(path, orient="records", lines=True)
            files.setdefault(task.task_id, {})[split] = os.path.basename(path)

    manifest = {
        "suite": suite.name,
        "seed": suite.seed,
        "order": order or suite.task_ids,
        "tasks": [
            {
                "task_id": t.task_id,
                "family": t.family,
                "name": t.name,
                "generation_token": t.generation_token,
                "instruction": " ".join(t.instruction),
                "seed": t.seed,
                "sizes": {"train": len(t.train), "valid": len(t.valid), "test": len(t.test)},
                "files": files[t.task_id],
            }
            for t in suite.tasks
        ],
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2)
    logger.info(f"Wrote {len(suite.tasks)} tasks of suite '{suite.name}' to {out_dir}")
    return path
