"""Corpus handling: vocabularies, length filtering, batching and BPE."""

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, UNK, BOS, EOS = 0, 1, 2, 3
PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN = "<pad>", "<unk>", "<s>", "</s>"
SPECIALS = (PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN)

BPE_MARKER = "@@"


class Vocabulary:
    """Token <-> id map with the four reserved specials at ids 0..3."""

    def __init__(self, tokens=(), counts=None):
        self.itos = list(SPECIALS)
        self.counts = dict(counts or {})
        for tok in tokens:
            if tok in SPECIALS:
                continue
            self.itos.append(tok)
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos and self.counts == other.counts

    def id(self, token):
        return self.stoi.get(token, UNK)

    def token(self, idx):
        return self.itos[idx] if 0 <= idx < len(self.itos) else UNK_TOKEN

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.itos:
                fh.write(f"{tok}\t{self.counts.get(tok, 0)}\n")

    @classmethod
    def load(cls, path):
        tokens, counts = [], {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                tok, _, count = line.rstrip("\n").partition("\t")
                tokens.append(tok)
                counts[tok] = int(count or 0)
        if tuple(tokens[:4]) != SPECIALS:
            raise ValueError(f"{path}: vocabulary must start with {SPECIALS}")
        return cls(tokens[4:], {t: c for t, c in counts.items() if t not in SPECIALS})


def build_vocab(sentences, min_count=5):
    """Vocabulary of tokens seen at least ``min_count`` times.

    Types are ordered by descending frequency, ties alphabetically.
    """
    counts = Counter(tok for sent in sentences for tok in sent)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in SPECIALS), key=lambda t: (-counts[t], t))
    return Vocabulary(kept, {t: counts[t] for t in kept})


def encode(vocab, tokens, reverse=False, add_bos_eos=False):
    ids = [vocab.id(t) for t in tokens]
    if reverse:
        ids.reverse()
    if add_bos_eos:
        ids = [BOS] + ids + [EOS]
    return ids


def decode(vocab, ids, strip_specials=True):
    out = []
    for i in ids:
        if strip_specials and i in (PAD, BOS, EOS):
            continue
        out.append(vocab.token(int(i)))
    return out


# --------------------------------------------------------------------------
# parallel corpora


def read_lines(path):
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


def tokenize(line):
    return line.split()


class LineCountMismatch(ValueError):
    def __init__(self, n_src, n_tgt):
        super().__init__(f"line count mismatch: source has {n_src} lines, target has {n_tgt}")
        self.n_src, self.n_tgt = n_src, n_tgt


def load_parallel(src_path, tgt_path):
    src, tgt = read_lines(src_path), read_lines(tgt_path)
    if len(src) != len(tgt):
        raise LineCountMismatch(len(src), len(tgt))
    return [(tokenize(s), tokenize(t)) for s, t in zip(src, tgt)]


def filter_by_length(corpus, max_len=50):
    """Keep pairs whose sides are non-empty and at most ``max_len`` tokens."""
    return [(s, t) for s, t in corpus if 0 < len(s) <= max_len and 0 < len(t) <= max_len]


def unk_rate(sentences, vocab):
    total = unk = 0
    for sent in sentences:
        total += len(sent)
        unk += sum(1 for tok in sent if tok not in vocab)
    return unk / total if total else 0.0


@dataclass
class Batch:
    src_ids: np.ndarray  # [B, S], reversed, PAD on the right
    src_mask: np.ndarray  # [B, S]
    tgt_in: np.ndarray  # [B, T], BOS-prefixed
    tgt_out: np.ndarray  # [B, T], EOS-suffixed
    src_lengths: np.ndarray
    tgt_lengths: np.ndarray
    indices: list = field(default_factory=list)

    @property
    def tgt_mask(self):
        return (self.tgt_out != PAD).astype(np.float64)

    @property
    def n_tokens(self):
        return int(self.tgt_lengths.sum())

    def __len__(self):
        return len(self.src_ids)


def pad(seqs, value=PAD):
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), value, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def make_batch(pairs, vocab_src, vocab_tgt, indices=None):
    """Pad a list of token-sequence pairs into a :class:`Batch`."""
    src = [encode(vocab_src, s, reverse=True) for s, _ in pairs]
    tgt = [encode(vocab_tgt, t) for _, t in pairs]
    src_ids = pad(src)
    return Batch(
        src_ids=src_ids,
        src_mask=(src_ids != PAD).astype(np.float64),
        tgt_in=pad([[BOS] + t for t in tgt]),
        tgt_out=pad([t + [EOS] for t in tgt]),
        src_lengths=np.array([len(s) for s in src]),
        tgt_lengths=np.array([len(t) + 1 for t in tgt]),
        indices=list(indices) if indices is not None else list(range(len(pairs))),
    )


def make_batches(corpus, vocab_src, vocab_tgt, batch_size=32, rng=None, shuffle=True):
    """One epoch of length-bucketed batches.

    Pairs are shuffled, stably sorted by target length, sliced into batches
    and the batch order shuffled again, so padding stays small while both
    batch membership (among equal lengths) and order vary per epoch.
    """
    n = len(corpus)
    order = np.arange(n)
    if shuffle:
        if rng is None:
            raise ValueError("shuffling requires an rng")
        order = rng.permutation(n)
    order = sorted(order, key=lambda i: len(corpus[i][1]))
    chunks = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if shuffle:
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    for chunk in chunks:
        yield make_batch([corpus[i] for i in chunk], vocab_src, vocab_tgt, indices=[int(i) for i in chunk])


def augment_singleton_unk(corpus, unk=UNK_TOKEN):
    """Append a copy of ``corpus`` with per-side hapax types replaced by UNK."""
    src_counts = Counter(t for s, _ in corpus for t in s)
    tgt_counts = Counter(t for _, s in corpus for t in s)

    def mask(sent, counts):
        return [unk if counts[t] == 1 else t for t in sent]

    copy = [(mask(s, src_counts), mask(t, tgt_counts)) for s, t in corpus]
    return list(corpus) + copy


# --------------------------------------------------------------------------
# byte pair encoding


class BpeModel:
    """Ordered merge list. Non-final pieces of a word carry ``@@``."""

    def __init__(self, merges):
        self.merges = [tuple(m) for m in merges]
        self.ranks = {m: i for i, m in enumerate(self.merges)}
        self._cache = {}

    def __len__(self):
        return len(self.merges)

    def segment(self, word):
        if word in self._cache:
            return self._cache[word]
        pieces = list(word)
        while len(pieces) > 1:
            ranked = [(self.ranks.get(pair, None), i) for i, pair in enumerate(zip(pieces, pieces[1:]))]
            ranked = [(r, i) for r, i in ranked if r is not None]
            if not ranked:
                break
            best = min(ranked)[0]
            pieces = _merge_word(pieces, self.merges[best])
        self._cache[word] = pieces
        return pieces

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{len(self.merges)}\n")
            for left, right in self.merges:
                fh.write(f"{left} {right}\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"BPE model not found: {path}")
        lines = path.read_text(encoding="utf-8").splitlines()
        try:
            count = int(lines[0])
        except (IndexError, ValueError):
            raise ValueError(f"{path}: missing merge-count header") from None
        merges = [tuple(line.split(" ")) for line in lines[1 : 1 + count]]
        if len(merges) != count or any(len(m) != 2 for m in merges):
            raise ValueError(f"{path}: expected {count} 'left right' merge lines")
        return cls(merges)


def _merge_word(pieces, pair):
    left, right = pair
    out, i = [], 0
    while i < len(pieces):
        if i + 1 < len(pieces) and pieces[i] == left and pieces[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(pieces[i])
            i += 1
    return out


def bpe_learn(sentences, n_merges):
    """Learn ``n_merges`` merges, most frequent adjacent pair first.

    Ties go to the lexicographically smallest ``(left, right)`` pair.
    Merges never cross word boundaries.
    """
    if n_merges < 0:
        raise ValueError("n_merges must be >= 0")
    word_counts = Counter(tok for sent in sentences for tok in sent)
    words = {w: list(w) for w in word_counts}
    pair_counts = Counter()
    for w, pieces in words.items():
        for pair in zip(pieces, pieces[1:]):
            pair_counts[pair] += word_counts[w]

    merges = []
    for _ in range(n_merges):
        pair_counts = +pair_counts  # drop zero/negative entries
        if not pair_counts:
            break
        top = max(pair_counts.values())
        best = min(p for p, c in pair_counts.items() if c == top)
        merges.append(best)
        for w, pieces in words.items():
            if len(pieces) < 2 or best[0] not in pieces:
                continue
            new = _merge_word(pieces, best)
            if new == pieces:
                continue
            c = word_counts[w]
            for pair in zip(pieces, pieces[1:]):
                pair_counts[pair] -= c
            for pair in zip(new, new[1:]):
                pair_counts[pair] += c
            words[w] = new
    return BpeModel(merges)


def bpe_apply(model, tokens):
    out = []
    for tok in tokens:
        pieces = model.segment(tok)
        if not pieces:
            out.append(tok)
            continue
        out.extend(p + BPE_MARKER for p in pieces[:-1])
        out.append(pieces[-1])
    return out


def bpe_undo(subwords):
    return " ".join(subwords).replace(BPE_MARKER + " ", "").split(" ") if subwords else []


def bpe_apply_line(model, line):
    # split on single spaces so runs of blanks survive the round trip
    return " ".join(bpe_apply(model, line.split(" ")))


def bpe_undo_line(line):
    return line.replace(BPE_MARKER + " ", "")
