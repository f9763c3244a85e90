"""Initialisation, Adadelta, gradient clipping, the epoch loop and checkpoints."""

import copy
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Vocabulary, make_batches
from .model import Model, ModelConfig, is_bias, param_shapes

log = logging.getLogger(__name__)

MAGIC = b"LEXNMTCK"
FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; ``checkpoint`` is the last good state."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class CheckpointError(ValueError):
    pass


def init_params(config, rng, init_range=0.01, uniform_biases=False):
    """Uniform ``[-init_range, init_range]`` matrices and zero biases."""
    dtype = np.dtype(config.dtype)
    params = {}
    for name, shape in param_shapes(config).items():
        if is_bias(name) and not uniform_biases:
            value = np.zeros(shape, dtype=dtype)
        else:
            value = rng.uniform(-init_range, init_range, size=shape).astype(dtype)
        params[name] = T.parameter(value, name=name)
    return params


def build_model(config, rng, init_range=0.01, uniform_biases=False):
    return Model(config, init_params(config, rng, init_range, uniform_biases))


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_global_norm(grads, max_norm=5.0):
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise FloatingPointError(f"non-finite gradient norm ({norm})")
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def clip_per_parameter(grads, max_norm=5.0):
    norms = []
    for g in grads:
        n = math.sqrt(float(np.sum(np.square(g, dtype=np.float64))))
        if not math.isfinite(n):
            raise FloatingPointError("non-finite gradient")
        if n > max_norm:
            g *= max_norm / n
        norms.append(n)
    return max(norms, default=0.0)


@dataclass
class AdadeltaState:
    sq_grad: list  # running E[g^2], one array per parameter
    sq_update: list  # running E[dx^2]
    rho: float = 0.95
    eps: float = 1e-6

    @classmethod
    def zeros_like(cls, params, rho=0.95, eps=1e-6):
        return cls([np.zeros_like(p.value) for p in params], [np.zeros_like(p.value) for p in params], rho, eps)


def adadelta_step(params, grads, state):
    """One Adadelta update (rho/eps from ``state``), applied in place."""
    rho, eps = state.rho, state.eps
    for p, g, eg, ex in zip(params, grads, state.sq_grad, state.sq_update):
        if p.value.shape != g.shape:
            raise T.ShapeError(f"gradient shape {g.shape} does not match parameter {p.value.shape}")
        eg *= rho
        eg += (1 - rho) * g * g
        delta = -np.sqrt(ex + eps) / np.sqrt(eg + eps) * g
        ex *= rho
        ex += (1 - rho) * delta * delta
        p.value += delta


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    clip_norm: float = 5.0
    clip_mode: str = "global"
    init_range: float = 0.01
    uniform_biases: bool = False
    rho: float = 0.95
    eps: float = 1e-6
    seed: int = 1
    dev_beam_size: int = 12
    dev_alpha: float = 0.8
    debug: bool = False

    def __post_init__(self):
        if self.clip_mode not in ("global", "per_parameter"):
            raise ValueError(f"clip_mode must be 'global' or 'per_parameter', got {self.clip_mode!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict  # name -> ndarray
    optimizer: AdadeltaState
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    epoch: int = 0
    step: int = 0
    best_metric: float = float("nan")
    best_epoch: int = 0
    rng_state: dict = None
    train_config: dict = field(default_factory=dict)

    def model(self):
        params = {k: T.parameter(v.copy(), name=k) for k, v in self.params.items()}
        return Model(self.model_config, params)


@dataclass
class EpochLog:
    epoch: int
    step: int
    train_ppl: float
    dev_bleu: float
    dev_ppl: float
    is_best: bool

    def row(self):
        return f"{self.epoch}\t{self.step}\t{self.train_ppl:.6f}\t{self.dev_bleu:.4f}\t{int(self.is_best)}"


LOG_HEADER = "epoch\tstep\ttrain_ppl\tdev_bleu\tis_best"


def snapshot(model, state, src_vocab, tgt_vocab, epoch, step, best_metric, best_epoch, rng, train_config):
    return Checkpoint(
        model_config=copy.deepcopy(model.config),
        params={k: p.value.copy() for k, p in model.named_parameters()},
        optimizer=AdadeltaState([a.copy() for a in state.sq_grad], [a.copy() for a in state.sq_update], state.rho, state.eps),
        src_vocab=src_vocab,
        tgt_vocab=tgt_vocab,
        epoch=epoch,
        step=step,
        best_metric=best_metric,
        best_epoch=best_epoch,
        rng_state=copy.deepcopy(rng.bit_generator.state) if rng is not None else None,
        train_config=asdict(train_config) if train_config is not None else {},
    )


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    log: list


def train_step(model, batch, state, config, rng):
    """Forward, backward, clip, update. Returns (nll_sum, n_tokens)."""
    params = model.parameters()
    for p in params:
        p.zero_grad()
    result = model.forward_teacher_forced(batch, training=True, rng=rng)
    if not math.isfinite(float(result.loss.value)):
        raise FloatingPointError(f"non-finite loss {float(result.loss.value)}")
    T.backward(result.loss, params)
    grads = [p.grad for p in params]
    if config.clip_mode == "global":
        clip_global_norm(grads, config.clip_norm)
    else:
        clip_per_parameter(grads, config.clip_norm)
    adadelta_step(params, grads, state)
    return result.nll_sum, result.n_tokens


def train(model, train_corpus, src_vocab, tgt_vocab, config, dev_corpus=None, resume=None, on_epoch=None):
    """Run the epoch loop and keep the checkpoint with the best dev BLEU.

    Without a dev corpus the best checkpoint is the one with the lowest
    training perplexity. ``resume`` continues from a checkpoint saved at the
    end of an epoch (params, optimizer and rng state restored).
    """
    from .evaluation import corpus_bleu, perplexity
    from .infer import BeamConfig, translate_corpus

    if resume is not None:
        for name, p in model.named_parameters():
            p.value = resume.params[name].copy()
        state = AdadeltaState(
            [a.copy() for a in resume.optimizer.sq_grad],
            [a.copy() for a in resume.optimizer.sq_update],
            resume.optimizer.rho,
            resume.optimizer.eps,
        )
        rng = np.random.default_rng()
        rng.bit_generator.state = copy.deepcopy(resume.rng_state)
        start, step = resume.epoch, resume.step
        best_metric, best_epoch = resume.best_metric, resume.best_epoch
    else:
        state = AdadeltaState.zeros_like(model.parameters(), config.rho, config.eps)
        rng = np.random.default_rng(config.seed)
        start, step = 0, 0
        best_metric, best_epoch = float("nan"), 0

    def take(epoch):
        return snapshot(model, state, src_vocab, tgt_vocab, epoch, step, best_metric, best_epoch, rng, config)

    last = take(start)
    # when resuming, the earlier best lives in its own file; report only new bests
    best = None if resume is not None else last
    history = []
    use_dev = bool(dev_corpus)
    with T.debug_mode(config.debug):
        for epoch in range(start + 1, config.epochs + 1):
            nll = tokens = 0
            for batch in make_batches(train_corpus, src_vocab, tgt_vocab, config.batch_size, rng):
                try:
                    batch_nll, n = train_step(model, batch, state, config, rng)
                except FloatingPointError as exc:
                    raise TrainingDiverged(f"epoch {epoch} step {step + 1}: {exc}", last) from exc
                nll += batch_nll
                tokens += n
                step += 1
            train_ppl = math.exp(nll / tokens)
            dev_bleu = dev_ppl = float("nan")
            if use_dev:
                dev_ppl = perplexity(model, dev_corpus, src_vocab, tgt_vocab, config.batch_size)
                beam = BeamConfig(beam_size=config.dev_beam_size, alpha=config.dev_alpha)
                hyps = translate_corpus(model, src_vocab, tgt_vocab, [" ".join(s) for s, _ in dev_corpus], beam)
                dev_bleu = corpus_bleu([h.text.split() for h in hyps], [t for _, t in dev_corpus]).bleu
                metric = dev_bleu
                improved = math.isnan(best_metric) or metric > best_metric
            else:
                metric = -train_ppl
                improved = math.isnan(best_metric) or metric > best_metric
            if improved:
                best_metric, best_epoch = metric, epoch
            last = take(epoch)
            if improved:
                best = last
            entry = EpochLog(epoch, step, train_ppl, dev_bleu, dev_ppl, improved)
            history.append(entry)
            log.info("epoch %d step %d train_ppl %.4f dev_bleu %.2f", epoch, step, train_ppl, dev_bleu)
            if on_epoch is not None:
                on_epoch(entry, last, best)
    return TrainResult(best, last, history)


def write_log(path, entries):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(LOG_HEADER + "\n")
        for e in entries:
            fh.write(e.row() + "\n")


# --------------------------------------------------------------------------
# checkpoint container
#
#   MAGIC | u32 version | u32 header length | JSON header | arrays...
#   array: u16 name length | name | u8 dtype code | u8 ndim | u32 dims | raw LE bytes

_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<f4"), 3: np.dtype("<i8")}
_CODES = {np.dtype("float64"): 1, np.dtype("float32"): 2, np.dtype("int64"): 3}


def _write_array(fh, name, array):
    array = np.ascontiguousarray(array)
    code = _CODES[array.dtype]
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)) + raw)
    fh.write(struct.pack("<BB", code, array.ndim))
    fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
    fh.write(array.astype(_DTYPES[code], copy=False).tobytes())


def _read_exact(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("checkpoint file is truncated")
    return data


def _read_array(fh):
    (n,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, n).decode("utf-8")
    code, ndim = struct.unpack("<BB", _read_exact(fh, 2))
    if code not in _DTYPES:
        raise CheckpointError(f"unknown dtype code {code} for array {name!r}")
    shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
    dtype = _DTYPES[code]
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(fh, count * dtype.itemsize), dtype=dtype).reshape(shape)
    return name, data.astype(dtype.newbyteorder("="))


def save_checkpoint(path, ckpt):
    header = {
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "best_metric": None if math.isnan(ckpt.best_metric) else ckpt.best_metric,
        "best_epoch": ckpt.best_epoch,
        "rng_state": ckpt.rng_state,
        "rho": ckpt.optimizer.rho,
        "eps": ckpt.optimizer.eps,
        "src_vocab": [ckpt.src_vocab.itos, ckpt.src_vocab.counts],
        "tgt_vocab": [ckpt.tgt_vocab.itos, ckpt.tgt_vocab.counts],
        "params": list(ckpt.params),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
    buf.write(blob)
    for name, value in ckpt.params.items():
        _write_array(buf, "param/" + name, value)
    for i, (eg, ex) in enumerate(zip(ckpt.optimizer.sq_grad, ckpt.optimizer.sq_update)):
        _write_array(buf, f"adadelta/g/{i}", eg)
        _write_array(buf, f"adadelta/x/{i}", ex)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
        version, n = struct.unpack("<II", _read_exact(fh, 8))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
        try:
            header = json.loads(_read_exact(fh, n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header ({exc})") from None
        arrays = {}
        while True:
            peek = fh.read(1)
            if not peek:
                break
            fh.seek(-1, io.SEEK_CUR)
            name, value = _read_array(fh)
            arrays[name] = value

    def vocab(entry):
        itos, counts = entry
        return Vocabulary(itos[4:], counts)

    names = header["params"]
    try:
        params = {k: arrays["param/" + k] for k in names}
        sq_grad = [arrays[f"adadelta/g/{i}"] for i in range(len(names))]
        sq_update = [arrays[f"adadelta/x/{i}"] for i in range(len(names))]
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing array {exc}") from None
    best = header["best_metric"]
    rng_state = header["rng_state"]
    return Checkpoint(
        model_config=ModelConfig(**header["model_config"]),
        params=params,
        optimizer=AdadeltaState(sq_grad, sq_update, header["rho"], header["eps"]),
        src_vocab=vocab(header["src_vocab"]),
        tgt_vocab=vocab(header["tgt_vocab"]),
        epoch=header["epoch"],
        step=header["step"],
        best_metric=float("nan") if best is None else best,
        best_epoch=header["best_epoch"],
        rng_state=rng_state,
        train_config=header["train_config"],
    )
