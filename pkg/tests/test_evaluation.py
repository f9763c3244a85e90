import math

import numpy as np
import pytest
from support import dictionary_setup, random_model

from lexnmt import data as D
from lexnmt.evaluation import bootstrap_significance, corpus_bleu, perplexity


def brute_bleu(hyps, refs, max_n=4):
    """Reference BLEU: explicit n-gram lists, clipped by linear search."""
    matches, totals = [0] * max_n, [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hg = [tuple(h[i : i + n]) for i in range(len(h) - n + 1)]
            rg = [tuple(r[i : i + n]) for i in range(len(r) - n + 1)]
            totals[n - 1] += len(hg)
            for g in set(hg):
                matches[n - 1] += min(hg.count(g), rg.count(g))
    if min(matches) == 0:
        return 0.0
    logp = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = 1.0 if hyp_len >= ref_len else math.exp(1 - ref_len / hyp_len)
    return 100 * bp * math.exp(logp)


def random_corpus(rng, n, vocab=4):
    words = [f"t{i}" for i in range(vocab)]
    return [[words[j] for j in rng.integers(0, vocab, size=int(rng.integers(1, 12)))] for _ in range(n)]


@pytest.mark.parametrize("seed", range(10))
def test_bleu_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    refs = random_corpus(rng, 8)
    hyps = random_corpus(rng, 8)
    assert corpus_bleu(hyps, refs).bleu == pytest.approx(brute_bleu(hyps, refs), abs=1e-9)


def test_bleu_identical_is_100():
    refs = [["a", "b", "c", "d", "e"], ["x", "y", "z", "w"]]
    report = corpus_bleu(refs, refs)
    assert report.bleu == 100.0
    assert report.precisions == [1.0] * 4 and report.bp == 1.0


def test_bleu_brevity_penalty_and_zero():
    refs = [["a", "b", "c", "d", "e", "f"]]
    short = corpus_bleu([["a", "b", "c", "d"]], refs)
    assert short.bp == pytest.approx(math.exp(1 - 6 / 4))
    assert corpus_bleu([["q"]], refs).bleu == 0.0
    assert corpus_bleu([[]], refs).bleu == 0.0


def test_bleu_length_mismatch():
    with pytest.raises(ValueError):
        corpus_bleu([["a"]], [["a"], ["b"]])


def test_bleu_report_format():
    text = corpus_bleu([["a", "b"]], [["a", "b"]]).format()
    keys = [line.split("\t")[0] for line in text.splitlines()]
    assert keys == ["bleu", "p1", "p2", "p3", "p4", "bp", "hyp_len", "ref_len"]


def test_bootstrap_identical_systems():
    rng = np.random.default_rng(0)
    refs = random_corpus(rng, 20)
    hyps = random_corpus(rng, 20)
    report = bootstrap_significance(hyps, hyps, refs, n_resamples=200)
    assert report.p_value == 1.0  # B >= A on every resample


def test_bootstrap_clear_winner():
    rng = np.random.default_rng(1)
    refs = random_corpus(rng, 30)
    good = [r if i % 5 else r[:-1] for i, r in enumerate(refs)]
    bad = random_corpus(rng, 30)
    assert bootstrap_significance(good, bad, refs, n_resamples=300).p_value < 0.05
    assert bootstrap_significance(bad, good, refs, n_resamples=300).p_value > 0.95


def test_bootstrap_matches_per_sample_loop():
    rng = np.random.default_rng(2)
    refs = random_corpus(rng, 12)
    a, b = random_corpus(rng, 12), random_corpus(rng, 12)
    report = bootstrap_significance(a, b, refs, n_resamples=50, rng=np.random.default_rng(7))
    idx = np.random.default_rng(7).integers(0, 12, size=(50, 12))
    wins = [corpus_bleu([b[i] for i in row], [refs[i] for i in row]).bleu >= corpus_bleu([a[i] for i in row], [refs[i] for i in row]).bleu for row in idx]
    assert report.p_value == pytest.approx(np.mean(wins))


def test_perplexity_is_exp_mean_nll():
    _, corpus, vs, vt = dictionary_setup(n_pairs=7, n_types=8)
    model = random_model("fixnorm", vocab=len(vs))
    nll = tokens = 0.0
    for s, t in corpus:
        r = model.forward_teacher_forced(D.make_batch([(s, t)], vs, vt))
        nll += r.nll_sum
        tokens += r.n_tokens
    assert perplexity(model, corpus, vs, vt, batch_size=3) == pytest.approx(math.exp(nll / tokens), rel=1e-12)
