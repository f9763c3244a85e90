import itertools
import math

import numpy as np
import pytest
from support import random_model

from lexnmt import data as D
from lexnmt import tensor as T
from lexnmt.infer import (
    BeamConfig,
    BeamHypothesis,
    beam_search,
    format_attention,
    greedy_decode,
    length_penalty,
    translate_corpus,
    unk_replace,
)


def test_length_penalty_values():
    for alpha in (0.0, 0.3, 0.8, 1.0, 2.5):
        assert length_penalty(1, alpha) == 1.0
    assert abs(length_penalty(13, 0.8) - math.pow(3.0, 0.8)) < 1e-9
    assert length_penalty(13, 0.8) == pytest.approx(2.40822, abs=1e-5)
    with pytest.raises(ValueError):
        length_penalty(0, 0.8)


def test_hypothesis_score_counts_eos():
    h = BeamHypothesis([4, 5, D.EOS], -3.0, finished=True)
    assert h.score(0.8) == pytest.approx(-3.0 / length_penalty(3, 0.8))
    assert h.words == [4, 5]


def test_beam_config_validation():
    with pytest.raises(ValueError):
        BeamConfig(beam_size=0)
    with pytest.raises(ValueError):
        BeamConfig(alpha=-1)


def sequence_log_prob(model, src_ids, tokens):
    """Teacher-forced log-probability of ``tokens`` (ending with EOS)."""
    v = D.Vocabulary([f"w{i}" for i in range(model.config.tgt_vocab_size - 4)])
    src = [v.token(i) for i in src_ids[::-1]]
    tgt = [v.token(i) for i in tokens[:-1]]
    logits = model.forward_teacher_forced(D.make_batch([(src, tgt)], v, v)).logits
    logp = T.log_softmax_rows(logits).value
    total = 0.0
    for t, tok in enumerate(tokens):  # left to right, like the decoder
        total += float(logp[t, tok])
    return total


def exhaustive_best(model, src_ids, max_len):
    words = [i for i in range(model.config.tgt_vocab_size) if i not in (D.PAD, D.BOS, D.EOS)]
    best = (-np.inf, None)
    for n in range(max_len):
        for seq in itertools.product(words, repeat=n):
            tokens = list(seq) + [D.EOS]
            lp = sequence_log_prob(model, src_ids, tokens)
            if lp > best[0]:
                best = (lp, tokens)
    return best


@pytest.mark.parametrize("seed", range(5))
def test_beam_equals_exhaustive_search(seed):
    rng = np.random.default_rng(seed)
    V = int(rng.integers(5, 7))
    model = random_model("fixnorm_lex" if seed % 2 else "tied", vocab=V, seed=seed, scale=1.0)
    src = list(rng.integers(4, V, size=3))
    max_len = 4
    lp, tokens = exhaustive_best(model, src, max_len)
    wide = (V - 3) ** (max_len - 1) * (V - 2)  # every prefix fits in the beam
    best = beam_search(model, src, BeamConfig(beam_size=wide, alpha=0.0, max_len=max_len)).best
    assert best.tokens == tokens
    assert best.log_prob == pytest.approx(lp, abs=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_beam_one_equals_greedy(seed):
    model = random_model("fixnorm" if seed % 2 else "untied", vocab=10, seed=seed, scale=1.0)
    src = [4, 7, 5, 9]
    tokens, total = greedy_decode(model, src)
    best = beam_search(model, src, BeamConfig(beam_size=1, alpha=0.0)).best
    assert best.tokens == tokens
    assert best.log_prob == pytest.approx(total, abs=1e-12)


def test_beam_never_emits_pad_or_bos():
    model = random_model("tied", vocab=8, seed=3, scale=2.0)
    for h in beam_search(model, [4, 5], BeamConfig(beam_size=5)).nbest:
        assert D.PAD not in h.tokens and D.BOS not in h.tokens
        assert len(h.attention) == len(h.tokens)


def test_beam_rejects_empty_source():
    with pytest.raises(ValueError):
        beam_search(random_model("tied"), [])


def test_unk_replace_uses_reversed_index():
    src = ["a", "b", "c"]  # encoder order is c b a
    attention = [[0.1, 0.2, 0.7], [0.8, 0.1, 0.1], [0.3, 0.4, 0.3]]
    out = unk_replace([D.UNK_TOKEN, "x", D.UNK_TOKEN], attention, src)
    assert out == ["a", "x", "b"]


def test_translate_corpus_outputs():
    model = random_model("tied", vocab=9, seed=2, scale=2.0)
    v = D.Vocabulary([f"w{i}" for i in range(5)])
    lines = ["w0 w1 zzz", "", "w3"]
    results = translate_corpus(model, v, v, lines, BeamConfig(beam_size=3))
    assert len(results) == 3
    assert results[1].text == "" and results[1].error
    for r, line in zip(results, lines):
        assert D.UNK_TOKEN not in r.tokens
        assert r.attention.shape == (len(r.tokens), len(line.split()))
    dump = format_attention(results).splitlines()
    assert dump[0] == f"SENT 0 {len(results[0].tokens)} 3"


def test_translate_without_replacement_keeps_unk():
    # bias the output layer towards UNK so it is produced
    model = random_model("tied", vocab=9, seed=2)
    model["out_bias"].value[D.UNK] = 50.0
    v = D.Vocabulary([f"w{i}" for i in range(5)])
    kept = translate_corpus(model, v, v, ["w0 w1"], BeamConfig(beam_size=2, max_len=3), replace_unk=False)[0]
    replaced = translate_corpus(model, v, v, ["w0 w1"], BeamConfig(beam_size=2, max_len=3))[0]
    assert D.UNK_TOKEN in kept.tokens
    assert D.UNK_TOKEN not in replaced.tokens
    for k, r, row in zip(kept.tokens, replaced.tokens, replaced.attention):
        if k == D.UNK_TOKEN:
            assert r == ["w0", "w1"][int(np.argmax(row))]  # rows are in original source order
