"""Corpus BLEU, teacher-forced perplexity and paired bootstrap resampling."""

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import make_batches


@dataclass
class BleuReport:
    bleu: float
    precisions: list
    bp: float
    hyp_len: int
    ref_len: int

    def format(self):
        lines = [f"bleu\t{self.bleu:.4f}"]
        lines += [f"p{i + 1}\t{p:.6f}" for i, p in enumerate(self.precisions)]
        lines += [f"bp\t{self.bp:.6f}", f"hyp_len\t{self.hyp_len}", f"ref_len\t{self.ref_len}"]
        return "\n".join(lines)


def ngram_stats(hyp, ref, max_n=4):
    """Per-sentence sufficient statistics: clipped matches and totals per order."""
    stats = np.zeros(2 * max_n + 2, dtype=np.int64)
    for n in range(1, max_n + 1):
        h = Counter(tuple(hyp[i : i + n]) for i in range(len(hyp) - n + 1))
        r = Counter(tuple(ref[i : i + n]) for i in range(len(ref) - n + 1))
        stats[2 * (n - 1)] = sum(min(c, r[g]) for g, c in h.items())
        stats[2 * (n - 1) + 1] = max(len(hyp) - n + 1, 0)
    stats[-2] = len(hyp)
    stats[-1] = len(ref)
    return stats


def bleu_from_stats(stats, max_n=4):
    matches = [int(stats[2 * i]) for i in range(max_n)]
    totals = [int(stats[2 * i + 1]) for i in range(max_n)]
    hyp_len, ref_len = int(stats[-2]), int(stats[-1])
    precisions = [m / t if t > 0 else 0.0 for m, t in zip(matches, totals)]
    if hyp_len == 0:
        bp = 0.0
    elif hyp_len < ref_len:
        bp = math.exp(1 - ref_len / hyp_len)
    else:
        bp = 1.0
    if min(precisions) == 0:
        score = 0.0
    else:
        score = 100 * bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuReport(score, precisions, bp, hyp_len, ref_len)


def corpus_bleu(hypotheses, references, max_n=4):
    """Tokenized, case-sensitive, single-reference corpus BLEU (no smoothing).

    ``hypotheses`` and ``references`` are lists of token lists.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    total = np.zeros(2 * max_n + 2, dtype=np.int64)
    for h, r in zip(hypotheses, references):
        total += ngram_stats(h, r, max_n)
    return bleu_from_stats(total, max_n)


def perplexity(model, corpus, src_vocab, tgt_vocab, batch_size=32):
    """``exp`` of the mean teacher-forced NLL over all non-PAD target tokens."""
    nll = tokens = 0
    with T.no_grad():
        for batch in make_batches(corpus, src_vocab, tgt_vocab, batch_size, shuffle=False):
            result = model.forward_teacher_forced(batch, training=False)
            nll += result.nll_sum
            tokens += result.n_tokens
    return math.exp(nll / tokens)


@dataclass
class SignificanceReport:
    p_value: float
    n_resamples: int
    mean_bleu_a: float
    mean_bleu_b: float
    bleu_a: float
    bleu_b: float

    def format(self):
        return "\n".join(
            [
                f"bleu_a\t{self.bleu_a:.4f}",
                f"bleu_b\t{self.bleu_b:.4f}",
                f"mean_bleu_a\t{self.mean_bleu_a:.4f}",
                f"mean_bleu_b\t{self.mean_bleu_b:.4f}",
                f"resamples\t{self.n_resamples}",
                f"p_value\t{self.p_value:.4f}",
            ]
        )


def _bleu_rows(stats, max_n):
    """Vectorised BLEU over rows of summed statistics."""
    matches = stats[:, 0 : 2 * max_n : 2].astype(np.float64)
    totals = stats[:, 1 : 2 * max_n : 2].astype(np.float64)
    hyp_len, ref_len = stats[:, -2].astype(np.float64), stats[:, -1].astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        prec = np.where(totals > 0, matches / totals, 0.0)
        logs = np.where(prec > 0, np.log(np.where(prec > 0, prec, 1.0)), -np.inf)
        bp = np.where(hyp_len >= ref_len, 1.0, np.exp(1 - ref_len / np.maximum(hyp_len, 1)))
    bp = np.where(hyp_len == 0, 0.0, bp)
    score = 100 * bp * np.exp(logs.sum(axis=1) / max_n)
    return np.where(np.isfinite(logs).all(axis=1), score, 0.0)


def bootstrap_significance(hyp_a, hyp_b, references, n_resamples=1000, rng=None, max_n=4):
    """Paired bootstrap test of "system A beats system B".

    The p-value is the fraction of resampled test sets on which B scores at
    least as well as A.
    """
    if not len(hyp_a) == len(hyp_b) == len(references):
        raise ValueError("hypothesis and reference files must have the same number of lines")
    rng = rng if rng is not None else np.random.default_rng(0)
    sa = np.stack([ngram_stats(h, r, max_n) for h, r in zip(hyp_a, references)])
    sb = np.stack([ngram_stats(h, r, max_n) for h, r in zip(hyp_b, references)])
    n = len(references)
    idx = rng.integers(0, n, size=(n_resamples, n))
    counts = np.stack([np.bincount(row, minlength=n) for row in idx])
    bleu_a = _bleu_rows(counts @ sa, max_n)
    bleu_b = _bleu_rows(counts @ sb, max_n)
    return SignificanceReport(
        p_value=float(np.mean(bleu_b >= bleu_a)),
        n_resamples=n_resamples,
        mean_bleu_a=float(bleu_a.mean()),
        mean_bleu_b=float(bleu_b.mean()),
        bleu_a=corpus_bleu(hyp_a, references, max_n).bleu,
        bleu_b=corpus_bleu(hyp_b, references, max_n).bleu,
    )
