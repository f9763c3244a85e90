"""Beam-search decoding with length normalisation and UNK replacement."""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import BOS, EOS, PAD, UNK_TOKEN, decode, encode
from .model import DecoderState, EncoderOutput

log = logging.getLogger(__name__)


@dataclass
class BeamConfig:
    beam_size: int = 12
    alpha: float = 0.8
    max_len: int = None  # default 2 * source length + 10

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")


def length_penalty(length, alpha):
    """``((5 + length) / 6) ** alpha``."""
    if length < 1:
        raise ValueError("length must be >= 1")
    return ((5.0 + length) / 6.0) ** alpha


@dataclass
class BeamHypothesis:
    tokens: list  # generated ids after BOS; ends with EOS when finished
    log_prob: float
    attention: list = field(default_factory=list)  # one [S] vector per generated token
    finished: bool = False

    def score(self, alpha):
        return self.log_prob / length_penalty(max(len(self.tokens), 1), alpha)

    @property
    def words(self):
        """Output ids without the trailing EOS."""
        return self.tokens[:-1] if self.finished else list(self.tokens)


@dataclass
class BeamResult:
    best: BeamHypothesis
    nbest: list


def _tile(node, index):
    return T.constant(node.value[index])


def beam_search(model, src_ids, config=None):
    """Decode one sentence; ``src_ids`` are encoder-order (reversed) ids.

    Pruning keeps the ``beam_size`` best expansions by raw cumulative
    log-probability; EOS expansions ranked inside that window move to the
    completed pool and the live beam is refilled from the remaining
    expansions. Completed hypotheses are ranked by ``log p / lp``.
    """
    config = config or BeamConfig()
    src_ids = np.asarray(src_ids, dtype=np.int64)
    if src_ids.size == 0:
        raise ValueError("cannot translate an empty source sentence")
    k = config.beam_size
    max_len = config.max_len if config.max_len is not None else 2 * len(src_ids) + 10
    V = model.config.tgt_vocab_size

    with T.no_grad():
        out = model.output_weights()
        enc = model.encode(src_ids[None, :])
        state = model.initial_state(enc)
        live = [BeamHypothesis([], 0.0)]
        completed = []
        for _ in range(max_len):
            n = len(live)
            if n == 1:
                enc_n = enc
            else:
                rows = np.zeros(n, dtype=np.intp)
                enc_n = EncoderOutput(_tile(enc.states, rows), None, _tile(enc.src_emb, rows), enc.mask[rows])
            prev = np.array([h.tokens[-1] if h.tokens else BOS for h in live])
            htilde, att, state = model.decoder_step(prev, state, enc_n, out=out)
            h_lex = model.lex_step(att.weights, enc_n.src_emb) if model.config.lex else None
            logp = T.log_softmax_rows(model.output_logits(htilde, h_lex, out)).value.astype(np.float64)
            logp[:, PAD] = -np.inf
            logp[:, BOS] = -np.inf
            totals = np.array([h.log_prob for h in live])[:, None] + logp
            flat = totals.reshape(-1)
            order = np.argsort(-flat, kind="stable")
            weights = att.weights.value
            new_live, keep = [], []
            for rank, idx in enumerate(order):
                score = flat[idx]
                if score == -np.inf or (len(new_live) >= k and rank >= k):
                    break
                hi, tok = divmod(int(idx), V)
                parent = live[hi]
                hyp = BeamHypothesis(parent.tokens + [tok], float(score), parent.attention + [weights[hi]])
                if tok == EOS:
                    if rank < k:
                        hyp.finished = True
                        completed.append(hyp)
                elif len(new_live) < k:
                    new_live.append(hyp)
                    keep.append(hi)
            live = new_live
            if not live or len(completed) >= k:
                break
            keep = np.array(keep, dtype=np.intp)
            state = DecoderState([(_tile(h, keep), _tile(c, keep)) for h, c in state.layers], _tile(state.feed, keep))
    pool = completed if completed else live
    ranked = sorted(pool, key=lambda h: -h.score(config.alpha))
    return BeamResult(ranked[0], ranked)


def greedy_decode(model, src_ids, max_len=None):
    """Argmax decoding, used as the beam-size-one reference."""
    src_ids = np.asarray(src_ids, dtype=np.int64)
    max_len = max_len if max_len is not None else 2 * len(src_ids) + 10
    tokens, total = [], 0.0
    with T.no_grad():
        out = model.output_weights()
        enc = model.encode(src_ids[None, :])
        state = model.initial_state(enc)
        prev = BOS
        for _ in range(max_len):
            htilde, att, state = model.decoder_step(np.array([prev]), state, enc, out=out)
            h_lex = model.lex_step(att.weights, enc.src_emb) if model.config.lex else None
            logp = T.log_softmax_rows(model.output_logits(htilde, h_lex, out)).value[0].astype(np.float64)
            logp[[PAD, BOS]] = -np.inf
            prev = int(np.argmax(logp))
            tokens.append(prev)
            total += logp[prev]
            if prev == EOS:
                break
    return tokens, total


def unk_replace(tokens, attention, src_tokens):
    """Replace each UNK output with the most-attended source word.

    ``attention[t]`` is over encoder (reversed) positions; position ``j``
    maps back to original index ``S - 1 - j``. Ties go to the lowest
    encoder position.
    """
    S = len(src_tokens)
    out = []
    for t, tok in enumerate(tokens):
        if tok == UNK_TOKEN and t < len(attention):
            j = int(np.argmax(np.asarray(attention[t])[:S]))
            out.append(src_tokens[S - 1 - j])
        else:
            out.append(tok)
    return out


@dataclass
class Translation:
    text: str
    tokens: list
    attention: np.ndarray  # [T, S] in original source order, T = len(tokens)
    log_prob: float = float("nan")
    error: str = None


def translate_corpus(model, src_vocab, tgt_vocab, sentences, config=None, replace_unk=True):
    """Translate each line; failures yield an empty line and a logged error."""
    config = config or BeamConfig()
    results = []
    for lineno, line in enumerate(sentences, 1):
        src_tokens = line.split()
        try:
            ids = encode(src_vocab, src_tokens, reverse=True)
            best = beam_search(model, ids, config).best
        except ValueError as exc:
            log.warning("line %d: %s", lineno, exc)
            results.append(Translation("", [], np.zeros((0, len(src_tokens))), error=f"line {lineno}: {exc}"))
            continue
        words = best.words
        tokens = decode(tgt_vocab, words, strip_specials=False)
        att = np.array(best.attention[: len(words)]).reshape(len(words), len(src_tokens))
        if replace_unk:
            tokens = unk_replace(tokens, att, src_tokens)
        results.append(Translation(" ".join(tokens), tokens, att[:, ::-1], best.log_prob))
    return results


def format_attention(results):
    """``SENT i T S`` header, then T rows of S weights (6 decimals)."""
    lines = []
    for i, r in enumerate(results):
        n_t, n_s = r.attention.shape
        lines.append(f"SENT {i} {n_t} {n_s}")
        lines.extend(" ".join(f"{w:.6f}" for w in row) for row in r.attention)
    return "\n".join(lines) + ("\n" if lines else "")
