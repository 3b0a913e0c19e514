"""
Tiny decoder-only transformer backbone with per-layer adapter slots.

The backbone is pretrained once on a generic copy/next-token corpus and then
frozen. Everything learned afterwards lives in adapter modules, one slot per
layer, placed after the feed-forward sub-block:

    h   = x + Attention(LN(x))
    f   = FFN(LN(h))
    out = h + sum_s softmax(c)_s * Adapter_s(f)        Adapter(f) = f + Up(GELU(Down(f)))

With a single routed module the weight is 1; with no routing at all the layer
is the plain backbone block (out = h + f).

All tensors are float64 so analytic gradients can be checked against central
finite differences.
"""

import io
import json
import struct
import hashlib
import logging
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from config import BackboneConfig, DecodeConfig
from errors import (
    CheckpointError, InvalidInputError, InvalidSampleError, InvalidStateError,
    NumericalFailureError, RoutingError, TrainingFailureError,
)
from numerics import seeded_rng
from taskgen import EncodedSample, TrainingExample

logger = logging.getLogger(__name__)

DTYPE = torch.float64
PAD_ID = 0
EOS_ID = 1
CHECKPOINT_MAGIC = b"DMEA"
CHECKPOINT_VERSION = 1
CHECKPOINT_PREAMBLE = 10  # magic + <HI version, header length
LOSS_SELECTORS = ("task", "data", "train")


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------

class Adapter(nn.Module):
    """Bottleneck adapter with a residual connection around the transform."""

    def __init__(self, module_id: str, layer_index: int, hidden_width: int, bottleneck: int, seed: int = 0):
        super().__init__()
        if bottleneck < 1:
            raise InvalidInputError("adapter bottleneck must be >= 1")
        self.module_id = module_id
        self.layer_index = layer_index
        self.down = nn.Linear(hidden_width, bottleneck, dtype=DTYPE)
        self.up = nn.Linear(bottleneck, hidden_width, dtype=DTYPE)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int):
        g = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            self.down.weight.normal_(0.0, 0.02, generator=g)
            self.down.bias.zero_()
            self.up.weight.normal_(0.0, 0.02, generator=g)
            self.up.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.up(F.gelu(self.down(x)))


class CausalSelfAttention(nn.Module):

    def __init__(self, width: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(width, 3 * width, dtype=DTYPE)
        self.proj = nn.Linear(width, width, dtype=DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, C = x.shape
        d = C // self.num_heads
        q, k, v = self.qkv(x).split(C, dim=2)
        q = q.view(B, T, self.num_heads, d).transpose(1, 2)
        k = k.view(B, T, self.num_heads, d).transpose(1, 2)
        v = v.view(B, T, self.num_heads, d).transpose(1, 2)

        att = (q @ k.transpose(-2, -1)) / np.sqrt(d)
        causal = torch.ones(T, T, dtype=torch.bool).tril()
        att = att.masked_fill(~causal, float("-inf"))
        att = F.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).contiguous().view(B, T, C)
        return self.proj(y)


class Block(nn.Module):

    def __init__(self, config: BackboneConfig):
        super().__init__()
        m = config.hidden_width
        self.ln1 = nn.LayerNorm(m, dtype=DTYPE)
        self.attn = CausalSelfAttention(m, config.num_heads)
        self.ln2 = nn.LayerNorm(m, dtype=DTYPE)
        self.fc1 = nn.Linear(m, config.ffn_width, dtype=DTYPE)
        self.fc2 = nn.Linear(config.ffn_width, m, dtype=DTYPE)

    def forward(
        self,
        x: torch.Tensor,
        adapters: Sequence[Adapter] = (),
        weights: Optional[torch.Tensor] = None
    ) -> Tuple[torch.Tensor, List[torch.Tensor], Optional[torch.Tensor]]:
        h = x + self.attn(self.ln1(x))
        f = self.fc2(F.gelu(self.fc1(self.ln2(h))))
        if not adapters:
            return h + f, [], None

        outputs = [a(f) for a in adapters]
        if weights is None:
            fused = outputs[0]
        else:
            fused = torch.einsum("s,sbtc->btc", weights, torch.stack(outputs))
        return h + fused, outputs, fused


class Backbone(nn.Module):

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        m = config.hidden_width
        self.tok_emb = nn.Embedding(config.vocab_size, m, dtype=DTYPE)
        self.pos_emb = nn.Embedding(config.max_sequence_length, m, dtype=DTYPE)
        self.blocks = nn.ModuleList([Block(config) for _ in range(config.num_layers)])
        self.ln_f = nn.LayerNorm(m, dtype=DTYPE)
        self.head = nn.Linear(m, config.vocab_size, bias=False, dtype=DTYPE)

    def embed(self, tokens: torch.Tensor) -> torch.Tensor:
        positions = torch.arange(tokens.shape[1])
        return self.tok_emb(tokens) + self.pos_emb(positions)[None]

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """Logits of the bare backbone (no adapters)."""
        x = self.embed(tokens)
        for block in self.blocks:
            x, _, _ = block(x)
        return self.head(self.ln_f(x))


# ---------------------------------------------------------------------------
# Routing and traces
# ---------------------------------------------------------------------------

@dataclass
class Routing:
    """
    Per-layer module selection, optionally fused by softmax coefficients.

    ``members[l]`` lists the module ids used in layer l. Without coefficients
    every layer must hold exactly one module; with coefficients, layer l's
    outputs are averaged with softmax(coefficients[l]).
    """

    members: Tuple[Tuple[str, ...], ...]
    coefficients: Optional[Tuple[torch.Tensor, ...]] = None
    coefficient_names: Tuple[str, ...] = ()

    @classmethod
    def single(cls, module_ids: Sequence[str]) -> "Routing":
        return cls(members=tuple((m,) for m in module_ids))

    @classmethod
    def fusion(
        cls,
        members: Sequence[Sequence[str]],
        coefficients: Sequence[torch.Tensor],
        names: Optional[Sequence[str]] = None
    ) -> "Routing":
        members = tuple(tuple(m) for m in members)
        names = tuple(names) if names is not None else tuple(f"fusion/{l}" for l in range(len(members)))
        return cls(members=members, coefficients=tuple(coefficients), coefficient_names=names)

    @property
    def num_layers(self) -> int:
        return len(self.members)

    def module_ids(self) -> set:
        return {m for layer in self.members for m in layer}

    def layer_weights(self, layer: int) -> Optional[torch.Tensor]:
        if self.coefficients is None:
            return None
        return F.softmax(self.coefficients[layer], dim=0)

    def validate(self, num_layers: int, known_modules) -> None:
        if len(self.members) != num_layers:
            raise RoutingError(f"routing covers {len(self.members)} layers, model has {num_layers}")
        for l, layer in enumerate(self.members):
            if not layer:
                raise RoutingError(f"layer {l} routes to no module")
            for m in layer:
                if m not in known_modules:
                    raise RoutingError(f"unknown module id '{m}' in layer {l}")
            if self.coefficients is None:
                if len(layer) != 1:
                    raise RoutingError(f"layer {l} has {len(layer)} modules but no fusion coefficients")
            elif self.coefficients[l].numel() != len(layer):
                raise RoutingError(
                    f"layer {l}: {self.coefficients[l].numel()} coefficients for {len(layer)} modules"
                )


@dataclass
class ForwardTrace:
    module_outputs: List[List[torch.Tensor]]
    fused_outputs: List[Optional[torch.Tensor]]
    layer_outputs: List[torch.Tensor]
    final_hidden: torch.Tensor
    logits: torch.Tensor


@dataclass(frozen=True)
class TrainableMask:
    modules: frozenset = frozenset()
    coefficients: frozenset = frozenset()


# ---------------------------------------------------------------------------
# Model state
# ---------------------------------------------------------------------------

class ModelState:
    """Frozen backbone plus the store of adapter modules and the current trainable mask."""

    def __init__(self, config: BackboneConfig, backbone: Backbone):
        self.config = config
        self.backbone = backbone
        self.backbone.requires_grad_(False)
        self.backbone.eval()
        self.adapters = nn.ModuleDict()
        self.mask = TrainableMask()

    # -- adapters ---------------------------------------------------------

    def add_adapter(self, module_id: str, layer: int, seed: int) -> Adapter:
        if module_id in self.adapters:
            raise InvalidStateError(f"module '{module_id}' already exists")
        if not 0 <= layer < self.config.num_layers:
            raise InvalidInputError(f"layer {layer} out of range")
        adapter = Adapter(module_id, layer, self.config.hidden_width, self.config.adapter_bottleneck, seed)
        adapter.requires_grad_(False)
        self.adapters[module_id] = adapter
        return adapter

    def remove_adapter(self, module_id: str):
        if module_id not in self.adapters:
            raise RoutingError(f"unknown module id '{module_id}'")
        del self.adapters[module_id]
        self.mask = TrainableMask(self.mask.modules - {module_id}, self.mask.coefficients)

    def adapter(self, module_id: str) -> Adapter:
        if module_id not in self.adapters:
            raise RoutingError(f"unknown module id '{module_id}'")
        return self.adapters[module_id]

    # -- trainable mask ---------------------------------------------------

    def set_trainable(self, modules: Sequence[str] = (), coefficients: Sequence[str] = ()):
        """Make exactly ``modules`` (and the named fusion coefficients) trainable."""
        modules = frozenset(modules)
        for m in modules:
            self.adapter(m)
        for module_id, adapter in self.adapters.items():
            adapter.requires_grad_(module_id in modules)
        self.mask = TrainableMask(modules, frozenset(coefficients))

    def freeze_all(self):
        self.set_trainable((), ())

    def trainable_parameters(self, routing: Optional[Routing] = None) -> Dict[str, torch.Tensor]:
        params = {}
        for module_id in sorted(self.mask.modules):
            for name, p in self.adapters[module_id].named_parameters():
                params[f"adapter/{module_id}/{name}"] = p
        if routing is not None and routing.coefficients is not None:
            for name, c in zip(routing.coefficient_names, routing.coefficients):
                if name in self.mask.coefficients:
                    if not c.requires_grad:
                        raise InvalidStateError(f"coefficient '{name}' is masked trainable but frozen")
                    params[f"coefficient/{name}"] = c
        return params

    # -- checksums --------------------------------------------------------

    def backbone_checksum(self) -> str:
        return _checksum(self.backbone.state_dict())

    def module_checksum(self, module_id: str) -> str:
        return _checksum(self.adapter(module_id).state_dict())

    def module_checksums(self, module_ids: Optional[Sequence[str]] = None) -> Dict[str, str]:
        ids = list(self.adapters.keys()) if module_ids is None else list(module_ids)
        return {m: self.module_checksum(m) for m in ids}

    def parameter_count(self, module_ids: Sequence[str]) -> int:
        return sum(p.numel() for m in module_ids for p in self.adapter(m).parameters())


def _checksum(tensors: Dict[str, torch.Tensor]) -> str:
    digest = hashlib.sha256()
    for name in sorted(tensors):
        digest.update(name.encode("utf-8"))
        digest.update(tensors[name].detach().cpu().numpy().tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Forward evaluation
# ---------------------------------------------------------------------------

def pad_batch(sequences: Sequence[Sequence[int]], pad_id: int = PAD_ID) -> torch.Tensor:
    """Right-pad token sequences into a LongTensor."""
    if not sequences:
        raise InvalidInputError("empty batch")
    width = max(len(s) for s in sequences)
    out = torch.full((len(sequences), width), pad_id, dtype=torch.long)
    for i, s in enumerate(sequences):
        out[i, :len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


def _as_token_tensor(state: ModelState, tokens) -> torch.Tensor:
    if isinstance(tokens, torch.Tensor):
        t = tokens.long()
    elif len(tokens) > 0 and isinstance(tokens[0], (int, np.integer)):
        t = torch.as_tensor([int(x) for x in tokens], dtype=torch.long)
    else:
        t = pad_batch(tokens)
    if t.dim() == 1:
        t = t.unsqueeze(0)
    if t.numel() == 0:
        raise InvalidInputError("empty token sequence")
    if t.shape[1] > state.config.max_sequence_length:
        raise InvalidInputError(f"sequence length {t.shape[1]} exceeds {state.config.max_sequence_length}")
    if int(t.min()) < 0 or int(t.max()) >= state.config.vocab_size:
        raise InvalidInputError("token id outside the vocabulary")
    return t


def forward(state: ModelState, tokens, routing: Optional[Routing] = None) -> ForwardTrace:
    """
    Run the model on a token batch.

    Args:
        state: Model state
        tokens: One sequence, a list of sequences (right-padded here) or a LongTensor
        routing: Module selection / fusion directive; None runs the bare backbone

    Returns:
        ForwardTrace with per-layer module outputs, fused outputs and logits
    """
    t = _as_token_tensor(state, tokens)
    backbone = state.backbone
    if routing is not None:
        routing.validate(state.config.num_layers, state.adapters)

    x = backbone.embed(t)
    module_outputs, fused_outputs, layer_outputs = [], [], []
    for l, block in enumerate(backbone.blocks):
        if routing is None:
            x, outs, fused = block(x)
        else:
            adapters = [state.adapters[m] for m in routing.members[l]]
            x, outs, fused = block(x, adapters, routing.layer_weights(l))
        module_outputs.append(outs)
        fused_outputs.append(fused)
        layer_outputs.append(x)

    logits = backbone.head(backbone.ln_f(x))
    return ForwardTrace(
        module_outputs=module_outputs,
        fused_outputs=fused_outputs,
        layer_outputs=layer_outputs,
        final_hidden=x,
        logits=logits,
    )


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def token_nll(logits: torch.Tensor, tokens: torch.Tensor, target_mask: torch.Tensor) -> torch.Tensor:
    """
    Per-sequence sum of -log p(token_j | tokens_<j) over masked target positions.

    Args:
        logits: B x T x V
        tokens: B x T
        target_mask: B x T, 1 where position j is a prediction target (j >= 1)
    """
    logp = F.log_softmax(logits[:, :-1], dim=-1)
    targets = tokens[:, 1:]
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return (nll * target_mask[:, 1:].to(nll.dtype)).sum(dim=-1)


def _target_mask(samples: Sequence[EncodedSample], width: int, start: str) -> torch.Tensor:
    mask = torch.zeros(len(samples), width, dtype=DTYPE)
    for i, s in enumerate(samples):
        first = s.answer_start + 1 if start == "answer" else 1
        mask[i, first:s.total_length] = 1.0
    return mask


def _check_task_samples(samples: Sequence[EncodedSample]):
    if not samples:
        raise InvalidSampleError("empty sample batch")
    for s in samples:
        if s.total_length - s.answer_start - 1 < 1:
            raise InvalidSampleError("answer region is empty")


def _check_data_samples(samples: Sequence[EncodedSample]):
    if not samples:
        raise InvalidSampleError("empty sample batch")
    for s in samples:
        if not s.with_generation_token:
            raise InvalidSampleError("data loss needs a sample that starts with its generation token")
        if s.total_length < 2:
            raise InvalidSampleError("sample body after the generation token is empty")


def task_loss_batch(state: ModelState, samples: Sequence[EncodedSample], routing: Optional[Routing]) -> torch.Tensor:
    """Mean over the batch of the answer-region negative log-likelihood."""
    _check_task_samples(samples)
    tokens = pad_batch([s.tokens for s in samples])
    trace = forward(state, tokens, routing)
    mask = _target_mask(samples, tokens.shape[1], "answer")
    return token_nll(trace.logits, tokens, mask).mean()


def data_loss_batch(state: ModelState, samples: Sequence[EncodedSample], routing: Optional[Routing]) -> torch.Tensor:
    """Mean over the batch of the negative log-likelihood of every token after G."""
    _check_data_samples(samples)
    tokens = pad_batch([s.tokens for s in samples])
    trace = forward(state, tokens, routing)
    mask = _target_mask(samples, tokens.shape[1], "all")
    return token_nll(trace.logits, tokens, mask).mean()


def train_loss_batch(
    state: ModelState,
    examples: Sequence[TrainingExample],
    routing: Optional[Routing],
    mu: float
) -> torch.Tensor:
    if mu < 0:
        raise InvalidInputError("mu must be >= 0")
    loss = task_loss_batch(state, [e.task for e in examples], routing)
    if mu > 0:
        loss = loss + mu * data_loss_batch(state, [e.data for e in examples], routing)
    return loss


def loss_task(state: ModelState, sample: EncodedSample, routing: Optional[Routing]) -> torch.Tensor:
    return task_loss_batch(state, [sample], routing)


def loss_data(state: ModelState, sample: EncodedSample, routing: Optional[Routing]) -> torch.Tensor:
    return data_loss_batch(state, [sample], routing)


def loss_train(state: ModelState, example: TrainingExample, routing: Optional[Routing], mu: float) -> torch.Tensor:
    return train_loss_batch(state, [example], routing, mu)


def batch_loss(state: ModelState, batch, routing: Optional[Routing], selector: str, mu: float = 0.25) -> torch.Tensor:
    """Dispatch on the loss selector: 'task', 'data' or 'train'."""
    if selector == "task":
        return task_loss_batch(state, [e.task if isinstance(e, TrainingExample) else e for e in batch], routing)
    if selector == "data":
        return data_loss_batch(state, [e.data if isinstance(e, TrainingExample) else e for e in batch], routing)
    if selector == "train":
        return train_loss_batch(state, batch, routing, mu)
    raise InvalidInputError(f"unknown loss selector '{selector}', expected one of {LOSS_SELECTORS}")


# ---------------------------------------------------------------------------
# Gradients and optimisation
# ---------------------------------------------------------------------------

def gradients(
    state: ModelState,
    batch: Sequence,
    routing: Optional[Routing],
    selector: str = "train",
    mu: float = 0.25
) -> Dict[str, torch.Tensor]:
    """
    Gradients of the mean batch loss with respect to every trainable parameter.

    Frozen parameters (backbone, unmasked adapters and coefficients) are absent
    from the returned store.

    Raises:
        NumericalFailureError: If any gradient entry is non-finite
    """
    params = state.trainable_parameters(routing)
    if not params:
        return {}
    loss = batch_loss(state, batch, routing, selector, mu)
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)

    store = {}
    for (name, p), g in zip(params.items(), grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        if not torch.all(torch.isfinite(g)):
            raise NumericalFailureError(f"non-finite gradient for '{name}'")
        store[name] = g
    return store


def gradient_norm(store: Dict[str, torch.Tensor]) -> float:
    if not store:
        return 0.0
    return float(torch.sqrt(sum((g * g).sum() for g in store.values())))


def make_optimizer(params: Sequence[torch.Tensor], name: str, learning_rate: float) -> torch.optim.Optimizer:
    if name == "sgd":
        return torch.optim.SGD(list(params), lr=learning_rate)
    if name == "adam":
        return torch.optim.Adam(list(params), lr=learning_rate)
    raise InvalidInputError(f"unknown optimizer '{name}'")


def minibatches(items: Sequence, batch_size: int, rng: np.random.Generator) -> List[List]:
    """Shuffle ``items`` and cut them into batches of at most ``batch_size``."""
    order = rng.permutation(len(items))
    return [[items[i] for i in order[s:s + batch_size]] for s in range(0, len(items), batch_size)]


# ---------------------------------------------------------------------------
# Generation and representations
# ---------------------------------------------------------------------------

def _pick_next(logits: torch.Tensor, decode: DecodeConfig, generator: torch.Generator) -> torch.Tensor:
    if decode.strategy == "greedy":
        return logits.argmax(dim=-1)
    if decode.strategy != "top_k":
        raise InvalidInputError(f"unknown decoding strategy '{decode.strategy}'")
    logits = logits / max(decode.temperature, 1e-8)
    k = min(decode.top_k, logits.shape[-1])
    if k > 0:
        threshold = torch.topk(logits, k, dim=-1).values[..., -1, None]
        logits = logits.masked_fill(logits < threshold, float("-inf"))
    probs = F.softmax(logits, dim=-1)
    return torch.multinomial(probs, 1, generator=generator).squeeze(-1)


def generate_batch(
    state: ModelState,
    prefixes: Sequence[Sequence[int]],
    routing: Optional[Routing],
    decode: DecodeConfig = DecodeConfig(),
    generator: Optional[torch.Generator] = None,
    eos_id: int = EOS_ID
) -> List[List[int]]:
    """
    Autoregressive continuation of several prefixes.

    Prefixes of equal length are decoded together. Each continuation stops
    after the end token, after ``decode.max_new_tokens`` tokens, or when the
    sequence reaches the backbone's maximum length.
    """
    if any(len(p) == 0 for p in prefixes):
        raise InvalidInputError("generation prefix must be non-empty")
    results: List[List[int]] = [[] for _ in prefixes]
    if decode.max_new_tokens <= 0:
        return results
    if generator is None:
        generator = torch.Generator().manual_seed(int(decode.seed))

    groups: Dict[int, List[int]] = {}
    for i, p in enumerate(prefixes):
        groups.setdefault(len(p), []).append(i)

    with torch.no_grad():
        for length in sorted(groups):
            rows = groups[length]
            seqs = torch.as_tensor([list(prefixes[i]) for i in rows], dtype=torch.long)
            finished = torch.zeros(len(rows), dtype=torch.bool)
            for _ in range(decode.max_new_tokens):
                if seqs.shape[1] >= state.config.max_sequence_length:
                    break
                logits = forward(state, seqs, routing).logits[:, -1]
                nxt = _pick_next(logits, decode, generator)
                nxt = torch.where(finished, torch.full_like(nxt, PAD_ID), nxt)
                for j, row in enumerate(rows):
                    if not finished[j]:
                        results[row].append(int(nxt[j]))
                finished |= nxt == eos_id
                seqs = torch.cat([seqs, nxt[:, None]], dim=1)
                if bool(finished.all()):
                    break
    return results


def generate(
    state: ModelState,
    prefix: Sequence[int],
    routing: Optional[Routing],
    decode: DecodeConfig = DecodeConfig(),
    generator: Optional[torch.Generator] = None
) -> List[int]:
    return generate_batch(state, [prefix], routing, decode, generator)[0]


def last_token_representations(trace: ForwardTrace, tokens, pad_id: int = PAD_ID) -> np.ndarray:
    """
    Final-layer representation at the last non-padding token of every row.

    Returns:
        B x m array

    Raises:
        InvalidInputError: If a row is all padding
    """
    if isinstance(tokens, torch.Tensor):
        t = tokens
    elif isinstance(tokens[0], (int, np.integer)):
        t = torch.as_tensor([list(tokens)])
    else:
        t = pad_batch(tokens)
    if t.dim() == 1:
        t = t.unsqueeze(0)
    reps = []
    for b in range(t.shape[0]):
        real = (t[b] != pad_id).nonzero()
        if real.numel() == 0:
            raise InvalidInputError("input consists only of padding")
        reps.append(trace.final_hidden[b, int(real[-1])].detach().cpu().numpy())
    return np.stack(reps)


def last_token_representation(trace: ForwardTrace, tokens, pad_id: int = PAD_ID) -> np.ndarray:
    return last_token_representations(trace, tokens, pad_id)[0]


# ---------------------------------------------------------------------------
# Backbone pretraining
# ---------------------------------------------------------------------------

def build_backbone(config: BackboneConfig, seed: int) -> Backbone:
    """Randomly initialised backbone; does not disturb the global torch RNG."""
    config.validate()
    if config.vocab_size < 1:
        raise InvalidInputError("backbone vocab_size is not set")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        return Backbone(config)


def _lm_loss(backbone: Backbone, tokens: torch.Tensor) -> torch.Tensor:
    logits = backbone(tokens)
    mask = (tokens != PAD_ID).to(DTYPE)
    nll = token_nll(logits, tokens, mask)
    return nll.sum() / mask[:, 1:].sum()


def pretrain_backbone(
    corpus: Sequence[Sequence[int]],
    steps: int,
    seed: int,
    config: BackboneConfig
) -> ModelState:
    """
    Train the backbone on a generic corpus, then freeze it.

    Args:
        corpus: Token-id sequences (next-token objective over every position)
        steps: Optimizer steps; 0 returns the random initialisation
        seed: Controls initialisation and batch sampling
        config: Backbone shape and pretraining schedule

    Returns:
        ModelState with a frozen backbone and an empty adapter store

    Raises:
        TrainingFailureError: If the loss becomes non-finite
    """
    if not corpus:
        raise InvalidInputError("pretraining corpus is empty")
    backbone = build_backbone(config, seed)

    if steps > 0:
        rng = seeded_rng(seed, "pretrain-batches")
        optimizer = torch.optim.Adam(backbone.parameters(), lr=config.pretrain_learning_rate)
        backbone.train()
        progress = tqdm(range(steps), desc="pretraining backbone", disable=steps < 200, leave=False)
        for step in progress:
            idx = rng.integers(0, len(corpus), size=config.pretrain_batch_size)
            tokens = pad_batch([corpus[i] for i in idx])
            loss = _lm_loss(backbone, tokens)
            if not torch.isfinite(loss):
                logger.error(f"Pretraining diverged at step {step}")
                raise TrainingFailureError(f"pretraining loss became non-finite at step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            if step % 200 == 0:
                logger.debug(f"pretrain step {step}: loss {loss.item():.4f}")
        logger.info(f"Pretrained backbone for {steps} steps, final batch loss {loss.item():.4f}")

    return ModelState(config, backbone)


def teacher_forced_accuracy(
    state: ModelState,
    sequences: Sequence[Sequence[int]],
    start_positions: Sequence[int],
    routing: Optional[Routing] = None
) -> float:
    """Fraction of tokens after each start position that the model predicts exactly (argmax)."""
    tokens = pad_batch(sequences)
    with torch.no_grad():
        predictions = forward(state, tokens, routing).logits.argmax(dim=-1)
    correct = total = 0
    for b, (seq, start) in enumerate(zip(sequences, start_positions)):
        for j in range(max(start, 1), len(seq)):
            correct += int(predictions[b, j - 1] == seq[j])
            total += 1
    return correct / total if total else 0.0


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(state: ModelState, path: str):
    """
    Write a checkpoint: magic "DMEA", format version, JSON header with the
    BackboneConfig and block index, then the raw parameter blocks.
    """
    blocks: List[Tuple[str, np.ndarray]] = []
    for name, p in state.backbone.state_dict().items():
        blocks.append((f"backbone/{name}", p.detach().cpu().numpy()))
    for module_id, adapter in state.adapters.items():
        for name, p in adapter.state_dict().items():
            blocks.append((f"adapter/{module_id}/{name}", p.detach().cpu().numpy()))

    header = {
        "config": asdict(state.config),
        "adapters": {m: a.layer_index for m, a in state.adapters.items()},
        "blocks": [
            {"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape), "nbytes": int(arr.nbytes)}
            for name, arr in blocks
        ],
    }
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<HI", CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for _, arr in blocks:
            f.write(np.ascontiguousarray(arr).tobytes())
    logger.info(f"Checkpoint saved to {path} ({len(blocks)} blocks)")


def load_checkpoint(path: str) -> ModelState:
    """
    Read a checkpoint written by ``save_checkpoint``.

    Raises:
        CheckpointError: Bad magic bytes, mismatched format version or truncated data
    """
    with open(path, "rb") as f:
        raw = f.read()

    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a DMEA checkpoint")
    if len(raw) < CHECKPOINT_PREAMBLE:
        raise CheckpointError(f"{path} is shorter than the checkpoint header")
    version, header_len = struct.unpack("<HI", raw[4:CHECKPOINT_PREAMBLE])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} does not match supported version {CHECKPOINT_VERSION}")
    if len(raw) < CHECKPOINT_PREAMBLE + header_len:
        raise CheckpointError(f"checkpoint header truncated in {path}")

    header = json.loads(raw[CHECKPOINT_PREAMBLE:CHECKPOINT_PREAMBLE + header_len].decode("utf-8"))
    config = BackboneConfig(**header["config"])
    stream = io.BytesIO(raw[CHECKPOINT_PREAMBLE + header_len:])

    tensors: Dict[str, torch.Tensor] = {}
    for block in header["blocks"]:
        data = stream.read(block["nbytes"])
        if len(data) != block["nbytes"]:
            raise CheckpointError(f"checkpoint truncated in block {block['name']}")
        arr = np.frombuffer(data, dtype=np.dtype(block["dtype"])).reshape(block["shape"]).copy()
        tensors[block["name"]] = torch.from_numpy(arr)

    backbone = build_backbone(config, seed=0)
    backbone.load_state_dict({k[len("backbone/"):]: v for k, v in tensors.items() if k.startswith("backbone/")})
    state = ModelState(config, backbone)
    for module_id, layer in header["adapters"].items():
        adapter = state.add_adapter(module_id, int(layer), seed=0)
        prefix = f"adapter/{module_id}/"
        adapter.load_state_dict({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
    return state
