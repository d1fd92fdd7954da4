from dataclasses import dataclass

import pytest

from knpl.corpus import KnowledgeGraph, TwoHopInstance, Vocab, generate_world
from knpl.model import ModelConfig, TinyTransformer
from knpl.train import TrainConfig, train_model


@dataclass
class Tiny:
    world: KnowledgeGraph
    instances: list[TwoHopInstance]
    vocab: Vocab
    model: TinyTransformer
    history: list


@pytest.fixture(scope="session")
def tiny() -> Tiny:
    """A 21-fact world and a model trained on it in about a second."""
    kg, inst = generate_world(3, 16, 3, 6, n_demo=4)
    vocab = Vocab.for_world(kg)
    cfg = TrainConfig(epochs=60, lr=5e-3, batch_size=16, seed=0, eval_every=0)
    model, hist = train_model(cfg, kg, vocab, ModelConfig(len(vocab), 2, 32, 64, 4, 128))
    return Tiny(kg, inst, vocab, model, hist)
