"""Training the tiny model on single-hop recall and partitioning two-hop questions."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .corpus import (
    NO_COT, CotDemo, KnowledgeGraph, PromptCondition, TwoHopInstance, Vocab, build_prompt,
    chain_text, extract_answer, render_queries, single_hop_prompt,
)
from .errors import ConfigError, FilteredInputError, TrainingError
from .model import ModelConfig, TinyTransformer, init_weights

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    lr: float = 3e-3
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "adam"  # adam | sgd
    holdout_fraction: float = 0.1
    demo_formats: tuple[str, ...] = ("no_cot", "zero_shot", "few_shot")
    few_shot_k: int = 4
    eval_every: int = 10
    min_lr_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class OmegaPartition:
    omega_t: frozenset
    omega_f: frozenset

    def __post_init__(self):
        if self.omega_t & self.omega_f:
            raise ValueError("omega_t and omega_f overlap")

    @property
    def all(self) -> frozenset:
        return self.omega_t | self.omega_f


@dataclass
class Example:
    prompt: list[int]
    target: list[int]

    @property
    def tokens(self) -> list[int]:
        return self.prompt + self.target


def heldout_index(fact_id: str, n_queries: int) -> int:
    h = hashlib.sha256(fact_id.encode()).digest()
    return int.from_bytes(h[:4], "little") % n_queries


def heldout_indices(fact_id: str, n_queries: int, fraction: float) -> set[int]:
    """Paraphrase slots excluded from training for one fact."""
    k = max(1, int(math.ceil(fraction * n_queries))) if fraction > 0 else 0
    start = heldout_index(fact_id, n_queries)
    return {(start + j) % n_queries for j in range(k)}


def answer_ids(world: KnowledgeGraph, vocab: Vocab, entity: int) -> list[int]:
    return vocab.encode(world.name(entity))


def build_examples(world: KnowledgeGraph, vocab: Vocab, config: TrainConfig) -> list[Example]:
    """Single-hop paraphrases (minus held-out slots) plus the demonstration pool.

    Evaluation two-hop questions never appear here.
    """
    out = []
    for fact in world.facts:
        queries = render_queries(fact, world)
        held = heldout_indices(fact.id, len(queries), config.holdout_fraction)
        target = answer_ids(world, vocab, fact.o) + [vocab.eoa]
        for j, q in enumerate(queries):
            if j not in held:
                out.append(Example(vocab.encode(single_hop_prompt(q)), target))
    rng = np.random.default_rng(config.seed + 7919)
    for i, demo in enumerate(world.demos):
        bridge, answer = world.name(demo.bridge), world.name(demo.answer)
        for fmt in config.demo_formats:
            cond = PromptCondition.parse(fmt, config.few_shot_k)
            if cond.kind == "few_shot":
                others = [j for j in range(len(world.demos)) if j != i]
                if len(others) < cond.k:
                    continue
                picks = rng.choice(others, size=cond.k, replace=False)
                demos = tuple(CotDemo(world.demos[j].reason_q, world.name(world.demos[j].bridge),
                                      world.name(world.demos[j].answer)) for j in picks)
                demo = TwoHopInstance(demo.id, demo.fact1, demo.fact2, demo.fact1_queries,
                                      demo.fact2_queries, demo.reason_q, demo.answer, demos)
            prompt = vocab.encode(" ".join(build_prompt(demo, cond)))
            text = answer if cond.kind == "no_cot" else chain_text(bridge, answer)
            out.append(Example(prompt, vocab.encode(text) + [vocab.eoa]))
    return out


def _batches(examples: Sequence[Example], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    # group similar lengths to limit padding, then shuffle batch order
    order = rng.permutation(len(examples))
    lengths = np.array([len(examples[i].tokens) for i in order])
    order = order[np.argsort(lengths, kind="stable")]
    batches = [order[i:i + batch_size].tolist() for i in range(0, len(order), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def _pack(examples: Sequence[Example], idx: Sequence[int], pad: int):
    seqs = [examples[i] for i in idx]
    T = max(len(e.tokens) for e in seqs) - 1
    inputs = np.full((len(seqs), T), pad, dtype=np.int64)
    targets = np.zeros((len(seqs), T), dtype=np.int64)
    weights = np.zeros((len(seqs), T))
    for b, e in enumerate(seqs):
        toks = e.tokens
        n = len(toks) - 1
        inputs[b, :n] = toks[:-1]
        targets[b, :n] = toks[1:]
        start = len(e.prompt) - 1
        weights[b, start:n] = 1.0
    return inputs, targets, weights


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, betas=(0.9, 0.98), eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k in sorted(params):
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] = params[k] - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class SGD:
    def __init__(self, params, lr: float):
        self.lr = lr

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        for k in sorted(params):
            params[k] = params[k] - lr * grads[k]


def train_model(
    config: TrainConfig,
    world: KnowledgeGraph,
    vocab: Vocab,
    model_config: ModelConfig | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[TinyTransformer, list[dict]]:
    """Fit the model on answer-span cross-entropy; returns the model and per-epoch log."""
    examples = build_examples(world, vocab, config)
    if not examples:
        raise ConfigError("training corpus is empty")
    if model_config is None:
        model_config = ModelConfig(vocab_size=len(vocab))
    longest = max(len(e.tokens) for e in examples)
    if longest > model_config.max_seq_len:
        raise ConfigError(f"training sequence of {longest} tokens exceeds max_seq_len")
    params = init_weights(model_config, config.seed)
    opt = Adam(params, config.lr) if config.optimizer == "adam" else SGD(params, config.lr)
    rng = np.random.default_rng(config.seed)
    history = []
    batches_per_epoch = math.ceil(len(examples) / config.batch_size)
    total_steps = config.epochs * batches_per_epoch
    step = 0
    for epoch in range(1, config.epochs + 1):
        losses = []
        for idx in _batches(examples, config.batch_size, rng):
            inputs, targets, weights = _pack(examples, idx, vocab.pad)
            tape = ad.Tape()
            leaves = {k: tape.variable(v) for k, v in params.items()}
            model = TinyTransformer.__new__(TinyTransformer)
            model.config = model_config
            model.weights = params
            model._mask_cache = {}
            logits, _ = model.forward(inputs, params=leaves)
            flat = ad.reshape(logits, (-1, model_config.vocab_size))
            loss = ad.cross_entropy(flat, targets.reshape(-1), weights.reshape(-1))
            if not np.isfinite(loss.value):
                raise TrainingError("loss diverged", epoch)
            grads = ad.grad(loss, leaves.values())
            tape.release()
            # cosine decay to min_lr_fraction of the base rate
            frac = step / max(1, total_steps - 1)
            lr = config.lr * (config.min_lr_fraction + (1 - config.min_lr_fraction) * 0.5 * (1 + math.cos(math.pi * frac)))
            opt.step(params, {k: grads[leaves[k]] for k in params}, lr)
            losses.append(float(loss.value))
            step += 1
        row = {"epoch": epoch, "mean_loss": float(np.mean(losses)), "recall": None}
        if config.eval_every and (epoch % config.eval_every == 0 or epoch == config.epochs):
            m = TinyTransformer(model_config, params)
            row["recall"] = single_hop_recall(m, world, vocab)
        history.append(row)
        log.info("epoch %d loss %.4f recall %s", epoch, row["mean_loss"], row["recall"])
        if on_epoch:
            on_epoch(row)
    return TinyTransformer(model_config, params), history


# --- knowledge filter ----------------------------------------------------------

def greedy_answer(model: TinyTransformer, vocab: Vocab, prompt: Sequence[int], max_new: int, hooks=None):
    toks, traces = model.generate_greedy(prompt, max_new, hooks, eoa=vocab.eoa, capture=False)
    return toks


def knows_fact(model: TinyTransformer, fact, world: KnowledgeGraph, vocab: Vocab) -> bool:
    """True iff every paraphrase decodes to exactly the object's tokens."""
    gold = answer_ids(world, vocab, fact.o)
    for q in render_queries(fact, world):
        toks = greedy_answer(model, vocab, vocab.encode(single_hop_prompt(q)), len(gold) + 1)
        if not toks or toks[-1] != vocab.eoa or extract_answer(toks, vocab) != gold:
            return False
    return True


def single_hop_recall(model: TinyTransformer, world: KnowledgeGraph, vocab: Vocab) -> float:
    if not world.facts:
        return 0.0
    return sum(knows_fact(model, f, world, vocab) for f in world.facts) / len(world.facts)


def decode_two_hop(
    model: TinyTransformer,
    vocab: Vocab,
    instance: TwoHopInstance,
    world: KnowledgeGraph,
    condition: PromptCondition = NO_COT,
    context=None,
    hooks=None,
    capture: bool = False,
    max_new: int | None = None,
):
    """Greedy decode of the reasoning question; returns (tokens, answer span, correct, traces)."""
    prompt = vocab.encode(" ".join(build_prompt(instance, condition, context)))
    if max_new is None:
        max_new = len(vocab.encode(world.name(instance.bridge))) + len(vocab.encode(world.name(instance.answer))) + 3
    toks, traces = model.generate_greedy(prompt, max_new, hooks, eoa=vocab.eoa, capture=capture)
    ans = extract_answer(toks, vocab)
    correct = ans == answer_ids(world, vocab, instance.answer)
    return toks, ans, correct, traces


def partition_omega(
    model: TinyTransformer,
    instances: Sequence[TwoHopInstance],
    world: KnowledgeGraph,
    vocab: Vocab,
    condition: PromptCondition = NO_COT,
    known_facts: set[str] | None = None,
    decode_log: list | None = None,
) -> OmegaPartition:
    """Split instances by whether the greedy answer equals the second-hop object."""
    cache: dict[str, bool] = {}

    def known(f):
        if known_facts is not None:
            return f.id in known_facts
        if f.id not in cache:
            cache[f.id] = knows_fact(model, f, world, vocab)
        return cache[f.id]

    t, f = set(), set()
    for inst in instances:
        if not (known(inst.fact1) and known(inst.fact2)):
            raise FilteredInputError(f"instance {inst.id} fails the single-hop knowledge filter")
        toks, ans, ok, _ = decode_two_hop(model, vocab, inst, world, condition)
        (t if ok else f).add(inst.id)
        if decode_log is not None:
            decode_log.append({"id": inst.id, "tokens": toks, "answer": ans, "correct": ok})
    return OmegaPartition(frozenset(t), frozenset(f))
