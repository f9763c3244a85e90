"""Synthetic parallel corpora for desk-scale experiments."""

import numpy as np


def dictionary(n_types, src_prefix="f", tgt_prefix="e"):
    """Word-for-word translation table ``f{i} -> e{i}``."""
    return {f"{src_prefix}{i}": f"{tgt_prefix}{i}" for i in range(n_types)}


def dictionary_copy_corpus(n_pairs, lexicon, rng, min_len=2, max_len=5, weights=None):
    """Sentences of random dictionary words, translated word by word in order."""
    src_words = list(lexicon)
    p = None if weights is None else np.asarray(weights, dtype=float) / np.sum(weights)
    corpus = []
    for _ in range(n_pairs):
        n = int(rng.integers(min_len, max_len + 1))
        words = [src_words[i] for i in rng.choice(len(src_words), size=n, p=p)]
        corpus.append((words, [lexicon[w] for w in words]))
    return corpus


def zipf_weights(n_types, exponent=1.0):
    ranks = np.arange(1, n_types + 1, dtype=float)
    w = ranks ** -exponent
    return w / w.sum()


def zipf_corpus(n_pairs, n_types, rng, exponent=1.0, min_len=3, max_len=10):
    """Dictionary-copy corpus whose words follow a Zipf law over ``n_types``."""
    return dictionary_copy_corpus(n_pairs, dictionary(n_types), rng, min_len, max_len, zipf_weights(n_types, exponent))


def rare_copy_corpus(n_pairs, lexicon, rare_words, rng, min_len=2, max_len=5):
    """Dictionary-copy corpus where every sentence also carries one rare word
    that is copied verbatim to the target (an UNK once the vocabulary
    threshold drops it)."""
    corpus = []
    for src, tgt in dictionary_copy_corpus(n_pairs, lexicon, rng, min_len, max_len):
        pos = int(rng.integers(0, len(src) + 1))
        word = rare_words[int(rng.integers(len(rare_words)))]
        corpus.append((src[:pos] + [word] + src[pos:], tgt[:pos] + [word] + tgt[pos:]))
    return corpus
