"""Shared builders for the test suite."""

import numpy as np

from lexnmt import data as D
from lexnmt import synthetic as S
from lexnmt import tensor as T
from lexnmt.model import Model, ModelConfig, param_shapes
from lexnmt.train import TrainConfig, build_model, train


def random_model(variant, d=4, vocab=12, layers=1, seed=0, scale=0.5, **kw):
    """Model with uniform(-scale, scale) parameters (biases included)."""
    rng = np.random.default_rng(seed)
    radius = kw.pop("radius", None)
    cfg = ModelConfig(vocab, vocab, variant=variant, hidden_size=d, num_layers=layers, dropout=0.0, radius=radius, **kw)
    params = {n: T.parameter(rng.uniform(-scale, scale, size=s), name=n) for n, s in param_shapes(cfg).items()}
    return Model(cfg, params)


def two_sentence_batch(vocab=12, seed=0):
    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in range(vocab - 4)]
    v = D.Vocabulary(words)
    pairs = [
        ([words[i] for i in rng.integers(0, len(words), 4)], [words[i] for i in rng.integers(0, len(words), 3)]),
        ([words[i] for i in rng.integers(0, len(words), 2)], [words[i] for i in rng.integers(0, len(words), 5)]),
    ]
    return D.make_batch(pairs, v, v)


def model_gradient_error(model, batch):
    """Largest relative error between backprop and central differences."""
    params = model.parameters()
    for p in params:
        p.zero_grad()
    T.backward(model.forward_teacher_forced(batch).loss, params)
    worst = 0.0
    for p in params:
        numeric = T.finite_difference_grad(lambda: model.forward_teacher_forced(batch).loss.value, p)
        worst = max(worst, T.max_relative_error(p.grad, numeric))
    return worst


def dictionary_setup(n_pairs=100, n_types=20, seed=0):
    rng = np.random.default_rng(seed)
    lexicon = S.dictionary(n_types)
    corpus = S.dictionary_copy_corpus(n_pairs, lexicon, rng)
    vs = D.build_vocab([s for s, _ in corpus], 1)
    vt = D.build_vocab([t for _, t in corpus], 1)
    return lexicon, corpus, vs, vt


def train_toy(variant, corpus, vs, vt, epochs, d=64, radius=None, batch_size=8, seed=1, dropout=0.0, **kw):
    cfg = ModelConfig(len(vs), len(vt), variant=variant, hidden_size=d, num_layers=1, dropout=dropout, radius=radius)
    model = build_model(cfg, np.random.default_rng(seed))
    result = train(model, corpus, vs, vt, TrainConfig(epochs=epochs, batch_size=batch_size, seed=seed, **kw))
    return model, result
