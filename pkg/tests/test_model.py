import numpy as np
import pytest
from support import model_gradient_error, random_model, two_sentence_batch

from lexnmt import data as D
from lexnmt import tensor as T
from lexnmt.model import VARIANTS, ContractError, ModelConfig, logit_from_factors, param_shapes


def test_default_radius_per_variant():
    assert ModelConfig(5, 5, variant="fixnorm").radius == 5.0
    assert ModelConfig(5, 5, variant="fixnorm_lex").radius == 3.5
    assert ModelConfig(5, 5, variant="tied").radius is None


@pytest.mark.parametrize("kw", [dict(variant="tied", radius=3.0), dict(variant="fixnorm", radius=0.0), dict(variant="bogus"), dict(variant="untied", normalize_htilde=False), dict(dropout=1.0)])
def test_invalid_configs(kw):
    with pytest.raises(ContractError):
        ModelConfig(5, 5, **kw)


def test_param_shapes_by_variant():
    shapes = {v: param_shapes(ModelConfig(7, 9, variant=v, hidden_size=4, num_layers=2)) for v in VARIANTS}
    assert shapes["untied"]["out_proj"] == (9, 4)
    assert "out_proj" not in shapes["tied"] and "out_proj" not in shapes["fixnorm"]
    assert shapes["fixnorm_lex"]["lex_out"] == (9, 4) and shapes["fixnorm_lex"]["lex_W"] == (4, 4)
    assert "lex_hidden_b" not in shapes["fixnorm_lex"]
    assert shapes["tied"]["dec0_W"] == (8, 16) and shapes["tied"]["dec1_W"] == (4, 16)
    assert shapes["tied"]["attn_W"] == (4, 4) and shapes["tied"]["combine_W"] == (8, 4)


def test_tied_variants_share_one_table():
    for variant in ("tied", "fixnorm", "fixnorm_lex"):
        out = random_model(variant).output_weights()
        assert out.tgt_emb is out.out_proj
    out = random_model("untied").output_weights()
    assert out.tgt_emb is not out.out_proj


@pytest.mark.parametrize("variant", ["fixnorm", "fixnorm_lex"])
def test_fixnorm_effective_norms(variant):
    m = random_model(variant, radius=2.0)
    out = m.output_weights()
    np.testing.assert_allclose(np.linalg.norm(out.out_proj.value, axis=1), 2.0, atol=1e-9)
    if variant == "fixnorm_lex":
        np.testing.assert_allclose(np.linalg.norm(out.lex_out.value, axis=1), 2.0, atol=1e-9)


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("seed", range(3))
def test_full_model_gradients(variant, seed):
    model = random_model(variant, seed=seed)
    assert model_gradient_error(model, two_sentence_batch(seed=seed)) < 1e-4


def test_lex_hidden_bias_gradient():
    model = random_model("fixnorm_lex", lex_hidden_bias=True, seed=4)
    assert "lex_hidden_b" in model.params
    assert model_gradient_error(model, two_sentence_batch(seed=4)) < 1e-4


def test_unnormalised_htilde_ablation_gradient():
    model = random_model("fixnorm", normalize_htilde=False, seed=5)
    assert model_gradient_error(model, two_sentence_batch(seed=5)) < 1e-4


def test_attention_is_a_distribution_over_real_tokens():
    model = random_model("tied")
    batch = two_sentence_batch()
    att = model.forward_teacher_forced(batch).attention  # [B, T, S]
    np.testing.assert_allclose(att.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(att[1, :, 2:] == 0.0)  # second source has two tokens


def test_padding_does_not_change_a_sentence_loss():
    model = random_model("fixnorm_lex", seed=2)
    batch = two_sentence_batch(seed=2)
    v = D.Vocabulary([f"w{i}" for i in range(8)])
    alone = []
    for i in range(2):
        src = [v.token(int(t)) for t in batch.src_ids[i][::-1] if t != D.PAD]
        tgt = [v.token(int(t)) for t in batch.tgt_out[i] if t not in (D.PAD, D.EOS)]
        alone.append(model.forward_teacher_forced(D.make_batch([(src, tgt)], v, v)).nll_sum)
    assert model.forward_teacher_forced(batch).nll_sum == pytest.approx(sum(alone), abs=1e-10)


def test_attend_rejects_fully_masked_source():
    model = random_model("tied")
    h = T.constant(np.zeros((1, 4)))
    with pytest.raises(ContractError):
        model.attend(h, T.constant(np.zeros((1, 3, 4))), np.zeros((1, 3)))


def test_output_logits_contract():
    tied, lex = random_model("tied"), random_model("fixnorm_lex")
    h = T.constant(np.ones((1, 4)))
    with pytest.raises(ContractError):
        tied.output_logits(h, h_lex=h)
    with pytest.raises(ContractError):
        lex.output_logits(h)


def test_lexicon_probs_simplex_and_contract():
    probs = random_model("fixnorm_lex").lexicon_probs()
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    with pytest.raises(ContractError):
        random_model("fixnorm").lexicon_probs()


def test_extract_lexicon_layout():
    m = random_model("fixnorm_lex")
    v = D.Vocabulary([f"w{i}" for i in range(8)])
    table = m.extract_lexicon(v, v, top_k=3)
    assert list(table) == v.itos[4:]
    for entries in table.values():
        probs = [p for _, p in entries]
        assert len(entries) == 3 and probs == sorted(probs, reverse=True)


@pytest.mark.parametrize("variant", VARIANTS)
def test_inspect_logits_match_model_logits(variant):
    m = random_model(variant, seed=3)
    steps = m.step_states([5, 6, 7], [4, 9])
    htilde, h_lex, _ = steps[-1]
    rows = m.inspect_logits(htilde, range(12), h_lex)
    with T.no_grad():
        ref = m.output_logits(T.constant(htilde[None]), None if h_lex is None else T.constant(h_lex[None])).value[0]
    np.testing.assert_allclose([r.logit for r in rows], ref, atol=1e-10)
    for r in rows:
        lex = 0.0 if r.lex_cos is None else r.lex_scale * r.lex_cos + r.lex_bias
        assert logit_from_factors(r.w_norm, r.h_norm, r.cos, r.bias) + lex == pytest.approx(r.logit, abs=1e-9)
        if m.config.fixnorm:
            assert r.w_norm == pytest.approx(m.config.radius) and r.h_norm == pytest.approx(m.config.radius)


def test_step_states_follow_teacher_forcing():
    m = random_model("tied", seed=1)
    batch = D.make_batch([(["w1", "w2"], ["w3", "w0"])], *(2 * [D.Vocabulary([f"w{i}" for i in range(8)])]))
    steps = m.step_states(batch.src_ids[0], batch.tgt_in[0, 1:])
    fw = m.forward_teacher_forced(batch)
    np.testing.assert_allclose(np.stack([a for _, _, a in steps]), fw.attention[0], atol=1e-12)


def test_float32_forward():
    m = random_model("fixnorm_lex")
    for p in m.parameters():
        p.value = p.value.astype(np.float32)
    m.config.dtype = "float32"
    loss = m.forward_teacher_forced(two_sentence_batch()).loss
    assert loss.value.dtype == np.float32
