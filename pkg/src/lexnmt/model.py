"""Attentional encoder-decoder with tied / fixed-norm / lexical output layers.

Weights are stored for row-vector inputs (``x @ W``). The source is fed to
a stacked unidirectional LSTM encoder (already reversed by the data
pipeline); the decoder uses input feeding and "general" attention scoring
``h_t . (W_a hbar_s)``.

Output-layer variants:

``untied``       ``softmax(W_o htilde + b_o)`` with a separate ``W_o``
``tied``         ``W_o`` is the target embedding table
``fixnorm``      rows of ``W_o`` and ``htilde`` rescaled to norm ``r``
``fixnorm_lex``  fixnorm plus a lexical FFNN over attended source embeddings
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .data import BOS, PAD

VARIANTS = ("untied", "tied", "fixnorm", "fixnorm_lex")
DEFAULT_RADIUS = {"fixnorm": 5.0, "fixnorm_lex": 3.5}


class ContractError(ValueError):
    pass


@dataclass
class ModelConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    variant: str = "tied"
    hidden_size: int = 512
    num_layers: int = 2
    radius: float = None
    dropout: float = 0.2
    lex_hidden_bias: bool = False
    normalize_htilde: bool = True  # fixnorm variants only; False is the ablation
    dtype: str = "float64"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant in DEFAULT_RADIUS:
            if self.radius is None:
                self.radius = DEFAULT_RADIUS[self.variant]
            if self.radius <= 0:
                raise ContractError(f"radius must be positive, got {self.radius}")
        elif self.radius is not None:
            raise ContractError(f"radius only applies to fixnorm variants, not {self.variant!r}")
        if self.hidden_size <= 0 or self.num_layers < 1:
            raise ContractError("hidden_size must be > 0 and num_layers >= 1")
        if not 0 <= self.dropout < 1:
            raise ContractError(f"dropout must be in [0, 1), got {self.dropout}")
        if not self.normalize_htilde and not self.fixnorm:
            raise ContractError("normalize_htilde=False only applies to fixnorm variants")
        if self.dtype not in ("float64", "float32"):
            raise ContractError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def fixnorm(self):
        return self.variant in ("fixnorm", "fixnorm_lex")

    @property
    def lex(self):
        return self.variant == "fixnorm_lex"

    def to_dict(self):
        return asdict(self)


def param_shapes(config):
    """Name -> shape for every learned array of ``config``'s variant."""
    d, Vf, Ve = config.hidden_size, config.src_vocab_size, config.tgt_vocab_size
    shapes = {"src_emb": (Vf, d), "tgt_emb": (Ve, d), "out_bias": (Ve,)}
    if config.variant == "untied":
        shapes["out_proj"] = (Ve, d)
    for side in ("enc", "dec"):
        for layer in range(config.num_layers):
            n_in = 2 * d if side == "dec" and layer == 0 else d
            shapes[f"{side}{layer}_W"] = (n_in, 4 * d)
            shapes[f"{side}{layer}_U"] = (d, 4 * d)
            shapes[f"{side}{layer}_b"] = (4 * d,)
    shapes["attn_W"] = (d, d)
    shapes["combine_W"] = (2 * d, d)
    if config.lex:
        shapes["lex_W"] = (d, d)
        shapes["lex_out"] = (Ve, d)
        shapes["lex_bias"] = (Ve,)
        if config.lex_hidden_bias:
            shapes["lex_hidden_b"] = (d,)
    return shapes


def is_bias(name):
    return name.endswith("_b") or name.endswith("bias")


@dataclass
class EncoderOutput:
    states: T.Node  # [B, S, d] top-layer hidden states
    final: list  # per layer (h, c)
    src_emb: T.Node  # [B, S, d] raw source embeddings, used by the lexical module
    mask: np.ndarray  # [B, S]


@dataclass
class DecoderState:
    layers: list  # per layer (h, c)
    feed: T.Node  # previous attentional hidden state


@dataclass
class AttentionResult:
    weights: T.Node  # [B, S]
    context: T.Node  # [B, d]


@dataclass
class OutputWeights:
    """Effective output-side matrices, computed once per forward pass."""

    tgt_emb: T.Node
    out_proj: T.Node
    lex_out: T.Node = None


@dataclass
class ForwardResult:
    loss: T.Node
    logits: T.Node  # [B*T, V], row b*T + t
    attention: np.ndarray  # [B, T, S]
    nll_sum: float
    n_tokens: int


@dataclass
class LogitRow:
    token_id: int
    w_norm: float
    h_norm: float
    cos: float
    bias: float
    logit: float
    lex_scale: float = None  # |lex_out_e| |h_lex|
    lex_cos: float = None
    lex_bias: float = None


def _cos(u, v):
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    return float(u @ v / (nu * nv)) if nu > 0 and nv > 0 else 0.0


class Model:
    def __init__(self, config, params):
        self.config = config
        missing = set(param_shapes(config)) - set(params)
        if missing:
            raise ContractError(f"missing parameters: {sorted(missing)}")
        self.params = params

    def __getitem__(self, name):
        return self.params[name]

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    # ----------------------------------------------------------------- pieces

    def output_weights(self):
        p, cfg = self.params, self.config
        if cfg.fixnorm:
            emb = T.normalize_to_radius(p["tgt_emb"], cfg.radius)
            lex_out = T.normalize_to_radius(p["lex_out"], cfg.radius) if cfg.lex else None
            return OutputWeights(emb, emb, lex_out)
        proj = p["out_proj"] if cfg.variant == "untied" else p["tgt_emb"]
        return OutputWeights(p["tgt_emb"], proj)

    def _zeros(self, *shape):
        return T.constant(np.zeros(shape, dtype=self.dtype))

    def _lstm(self, prefix, x, h, c):
        d = self.config.hidden_size
        p = self.params
        gates = T.matmul(x, p[prefix + "_W"]) + T.matmul(h, p[prefix + "_U"]) + p[prefix + "_b"]
        sig = T.sigmoid(T.slice_cols(gates, 0, 3 * d))
        i, f, o = T.slice_cols(sig, 0, d), T.slice_cols(sig, d, 2 * d), T.slice_cols(sig, 2 * d, 3 * d)
        g = T.tanh(T.slice_cols(gates, 3 * d, 4 * d))
        c_new = f * c + i * g
        return o * T.tanh(c_new), c_new

    def encode(self, src_ids, mask=None, training=False, rng=None):
        """Run the encoder over ``src_ids`` [B, S] (PAD-right, reversed)."""
        cfg = self.config
        src_ids = np.asarray(src_ids)
        B, S = src_ids.shape
        if mask is None:
            mask = (src_ids != PAD).astype(self.dtype)
        mask = np.asarray(mask, dtype=self.dtype)
        raw = [T.lookup(self.params["src_emb"], src_ids[:, t]) for t in range(S)]
        inputs = [T.dropout(x, cfg.dropout, training, rng) for x in raw]
        final = []
        for layer in range(cfg.num_layers):
            h, c = self._zeros(B, cfg.hidden_size), self._zeros(B, cfg.hidden_size)
            outputs = []
            for t in range(S):
                h_new, c_new = self._lstm(f"enc{layer}", inputs[t], h, c)
                m = mask[:, t : t + 1]
                if m.all():
                    h, c = h_new, c_new
                else:
                    h = m * h_new + (1 - m) * h
                    c = m * c_new + (1 - m) * c
                outputs.append(h)
            final.append((h, c))
            if layer < cfg.num_layers - 1:
                inputs = [T.dropout(x, cfg.dropout, training, rng) for x in outputs]
            else:
                inputs = outputs
        return EncoderOutput(T.stack(inputs, axis=1), final, T.stack(raw, axis=1), mask)

    def initial_state(self, enc):
        B = enc.mask.shape[0]
        return DecoderState(list(enc.final), self._zeros(B, self.config.hidden_size))

    def attend(self, h_t, states, mask):
        """General attention: ``a_t = softmax_s(h_t W_a hbar_s)`` over unmasked ``s``."""
        mask = np.asarray(mask)
        if not np.all(mask.any(axis=-1)):
            raise ContractError("attention over a fully masked source")
        scores = T.rowdot(T.matmul(h_t, self.params["attn_W"]), states)
        weights = T.softmax_rows(scores, mask=mask > 0)
        return AttentionResult(weights, T.weighted_sum(weights, states))

    def decoder_step(self, prev_ids, state, enc, training=False, rng=None, out=None):
        """One input-fed decoder step; returns ``(htilde, attention, state)``."""
        cfg = self.config
        out = out or self.output_weights()
        emb = T.dropout(T.lookup(out.tgt_emb, prev_ids), cfg.dropout, training, rng)
        x = T.concat([emb, state.feed])
        layers = []
        for layer, (h, c) in enumerate(state.layers):
            h, c = self._lstm(f"dec{layer}", x, h, c)
            layers.append((h, c))
            x = T.dropout(h, cfg.dropout, training, rng) if layer < cfg.num_layers - 1 else h
        att = self.attend(x, enc.states, enc.mask)
        htilde = T.tanh(T.matmul(T.concat([att.context, x]), self.params["combine_W"]))
        return htilde, att, DecoderState(layers, htilde)

    def lex_step(self, weights, src_emb):
        """``h_l = tanh(W f_l) + f_l`` with ``f_l = tanh(sum_s a(s) f_s)``."""
        f = T.tanh(T.weighted_sum(weights, src_emb))
        return self._lex_hidden(f)

    def _lex_hidden(self, f):
        pre = T.matmul(f, self.params["lex_W"])
        if self.config.lex_hidden_bias:
            pre = pre + self.params["lex_hidden_b"]
        return T.tanh(pre) + f

    def output_logits(self, htilde, h_lex=None, out=None):
        cfg = self.config
        if (h_lex is not None) != cfg.lex:
            raise ContractError(f"lexical hidden state must be given iff variant is fixnorm_lex (variant={cfg.variant})")
        out = out or self.output_weights()
        if cfg.fixnorm and cfg.normalize_htilde:
            htilde = T.normalize_to_radius(htilde, cfg.radius)
        logits = T.matmul(htilde, T.transpose(out.out_proj)) + self.params["out_bias"]
        if cfg.lex:
            h_lex = T.normalize_to_radius(h_lex, cfg.radius)
            logits = logits + T.matmul(h_lex, T.transpose(out.lex_out)) + self.params["lex_bias"]
        return logits

    # ----------------------------------------------------------------- whole passes

    def forward_teacher_forced(self, batch, training=False, rng=None):
        """Mean per-token NLL of ``batch.tgt_out`` given the gold prefix."""
        cfg = self.config
        out = self.output_weights()
        enc = self.encode(batch.src_ids, batch.src_mask, training, rng)
        state = self.initial_state(enc)
        B, n_steps = batch.tgt_in.shape
        htildes, lexes, attention = [], [], []
        for t in range(n_steps):
            htilde, att, state = self.decoder_step(batch.tgt_in[:, t], state, enc, training, rng, out)
            htildes.append(htilde)
            attention.append(att.weights.value)
            if cfg.lex:
                lexes.append(self.lex_step(att.weights, enc.src_emb))
        d = cfg.hidden_size
        flat = T.reshape(T.stack(htildes, axis=1), (B * n_steps, d))
        flat = T.dropout(flat, cfg.dropout, training, rng)
        h_lex = T.reshape(T.stack(lexes, axis=1), (B * n_steps, d)) if cfg.lex else None
        logits = self.output_logits(flat, h_lex, out)
        logp = T.log_softmax_rows(logits)
        targets = batch.tgt_out.reshape(-1)
        mask = (targets != PAD).astype(self.dtype)
        n_tokens = int(mask.sum())
        nll = T.sum(T.pick(logp, targets) * mask)
        loss = T.mul(nll, -1.0 / n_tokens)
        return ForwardResult(loss, logits, np.stack(attention, axis=1), -float(nll.value), n_tokens)

    # ----------------------------------------------------------------- diagnostics

    def lexicon_probs(self, src_ids=None):
        """Lexical-module distribution for each source type with one-hot attention.

        Returns an array [len(src_ids), V_e] whose rows sum to one.
        """
        if not self.config.lex:
            raise ContractError(f"lexicon requires variant fixnorm_lex, not {self.config.variant!r}")
        if src_ids is None:
            src_ids = np.arange(self.config.src_vocab_size)
        with T.no_grad():
            f = T.tanh(T.lookup(self.params["src_emb"], src_ids))
            h = T.normalize_to_radius(self._lex_hidden(f), self.config.radius)
            lex_out = T.normalize_to_radius(self.params["lex_out"], self.config.radius)
            logits = T.matmul(h, T.transpose(lex_out)) + self.params["lex_bias"]
            return T.softmax_rows(logits).value

    def extract_lexicon(self, src_vocab, tgt_vocab, top_k=5):
        """Map each non-special source type to its ``top_k`` (target, prob) pairs."""
        ids = np.arange(4, len(src_vocab))
        probs = self.lexicon_probs(ids)
        table = {}
        for row, sid in zip(probs, ids):
            best = np.argsort(-row, kind="stable")[:top_k]
            table[src_vocab.token(int(sid))] = [(tgt_vocab.token(int(j)), float(row[j])) for j in best]
        return table

    def inspect_logits(self, htilde, candidates, h_lex=None):
        """Split each candidate's logit into norm, cosine and bias factors.

        ``htilde`` is the raw attentional hidden state of one step; for the
        fixnorm variants the reported vectors are the effective (rescaled)
        ones, so ``w_norm == h_norm == r``.
        """
        cfg = self.config
        htilde = np.asarray(htilde, dtype=np.float64).reshape(-1)
        with T.no_grad():
            out = self.output_weights()
            W = out.out_proj.value
            h = htilde
            if cfg.fixnorm and cfg.normalize_htilde:
                h = T.normalize_to_radius(T.constant(htilde), cfg.radius).value
            if cfg.lex:
                if h_lex is None:
                    raise ContractError("fixnorm_lex inspection needs the lexical hidden state")
                hl = T.normalize_to_radius(T.constant(np.asarray(h_lex).reshape(-1)), cfg.radius).value
                Wl = out.lex_out.value
        b = self.params["out_bias"].value
        rows = []
        for e in candidates:
            w = W[e]
            row = LogitRow(
                token_id=int(e),
                w_norm=float(np.linalg.norm(w)),
                h_norm=float(np.linalg.norm(h)),
                cos=_cos(w, h),
                bias=float(b[e]),
                logit=float(w @ h + b[e]),
            )
            if cfg.lex:
                lb = self.params["lex_bias"].value[e]
                row.lex_scale = float(np.linalg.norm(Wl[e]) * np.linalg.norm(hl))
                row.lex_cos = _cos(Wl[e], hl)
                row.lex_bias = float(lb)
                row.logit = float(w @ h + Wl[e] @ hl + b[e] + lb)
            rows.append(row)
        return rows

    def step_states(self, src_ids, tgt_prefix):
        """Teacher-force ``tgt_prefix`` and return per-step (htilde, h_lex, attention).

        ``src_ids`` are encoder-order ids; ``tgt_prefix`` starts after BOS.
        """
        src = np.asarray(src_ids)[None, :]
        steps = []
        with T.no_grad():
            out = self.output_weights()
            enc = self.encode(src)
            state = self.initial_state(enc)
            prev = BOS
            for tok in list(tgt_prefix) + [None]:
                htilde, att, state = self.decoder_step(np.array([prev]), state, enc, out=out)
                h_lex = self.lex_step(att.weights, enc.src_emb).value[0] if self.config.lex else None
                steps.append((htilde.value[0], h_lex, att.weights.value[0]))
                if tok is None:
                    break
                prev = tok
        return steps


def logit_from_factors(w_norm, h_norm, cos, bias):
    """``|W_e| |htilde| cos(theta) + b_e``."""
    return w_norm * h_norm * cos + bias

