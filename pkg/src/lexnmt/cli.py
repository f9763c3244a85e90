"""Command-line entry point: ``lexnmt <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .config import CONFIG_ENV, ConfigError, dump_config, load_config, set_option
from .evaluation import bootstrap_significance, corpus_bleu
from .infer import BeamConfig, format_attention, translate_corpus
from .model import VARIANTS, ContractError, logit_from_factors
from .train import (
    CheckpointError,
    TrainingDiverged,
    build_model,
    load_checkpoint,
    save_checkpoint,
    train,
    write_log,
)

log = logging.getLogger("lexnmt")


class UsageError(Exception):
    """Bad flags or inputs detected after argument parsing; exit code 2."""


def _write(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _out(args, text):
    if getattr(args, "output", None):
        _write(args.output, text)
    else:
        sys.stdout.write(text)


# --------------------------------------------------------------------------
# prep


def cmd_prep(args):
    try:
        corpus = D.load_parallel(args.src, args.tgt)
    except D.LineCountMismatch as exc:
        raise UsageError(str(exc)) from None
    kept = D.filter_by_length(corpus, args.max_len)
    vs = D.build_vocab([s for s, _ in kept], args.min_count)
    vt = D.build_vocab([t for _, t in kept], args.min_count)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vs.save(out / "vocab.src")
    vt.save(out / "vocab.tgt")
    _write(out / "train.src", "".join(" ".join(s) + "\n" for s, _ in kept))
    _write(out / "train.tgt", "".join(" ".join(t) + "\n" for _, t in kept))
    _write(out / "train.ids.src", "".join(" ".join(map(str, D.encode(vs, s))) + "\n" for s, _ in kept))
    _write(out / "train.ids.tgt", "".join(" ".join(map(str, D.encode(vt, t))) + "\n" for _, t in kept))
    print(f"pairs\t{len(corpus)}")
    print(f"kept\t{len(kept)}")
    print(f"src_vocab\t{len(vs)}")
    print(f"tgt_vocab\t{len(vt)}")
    print(f"src_unk_rate\t{D.unk_rate([s for s, _ in kept], vs):.6f}")
    print(f"tgt_unk_rate\t{D.unk_rate([t for _, t in kept], vt):.6f}")
    return 0


# --------------------------------------------------------------------------
# bpe


def cmd_bpe_learn(args):
    lines = D.read_lines(args.input)
    model = D.bpe_learn([line.split() for line in lines], args.merges)
    model.save(args.output)
    print(f"merges\t{len(model)}")
    return 0


def cmd_bpe_apply(args):
    if args.undo:
        if args.model or args.augment_singleton_unk:
            raise UsageError("--undo takes no --model and no --augment-singleton-unk")
        if len(args.input) != len(args.output):
            raise UsageError("give one --output per --input")
        for src, dst in zip(args.input, args.output):
            _write(dst, "".join(D.bpe_undo_line(line) + "\n" for line in D.read_lines(src)))
        return 0
    if not (len(args.model) == len(args.input) == len(args.output)):
        raise UsageError("give the same number of --model, --input and --output")
    segmented = []
    for model_path, src in zip(args.model, args.input):
        model = D.BpeModel.load(model_path)
        segmented.append([D.bpe_apply_line(model, line) for line in D.read_lines(src)])
    if args.augment_singleton_unk:
        if len(segmented) != 2:
            raise UsageError("--augment-singleton-unk needs a source and a target (two --input)")
        if len(segmented[0]) != len(segmented[1]):
            raise UsageError(str(D.LineCountMismatch(len(segmented[0]), len(segmented[1]))))
        pairs = D.augment_singleton_unk([(s.split(), t.split()) for s, t in zip(*segmented)])
        segmented = [[" ".join(s) for s, _ in pairs], [" ".join(t) for _, t in pairs]]
    for lines, dst in zip(segmented, args.output):
        _write(dst, "".join(line + "\n" for line in lines))
    return 0


# --------------------------------------------------------------------------
# train


def resolve_config(args):
    run = load_config(args.config)
    for spec in args.set or []:
        key, sep, value = spec.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects section.key=value, got {spec!r}")
        if section not in ("data", "model", "train", "beam"):
            raise ConfigError(f"--set: unknown section {section!r}")
        set_option(getattr(run, section), name, value, f"--set {spec}")
    flags = {
        ("model", "variant"): args.variant,
        ("model", "radius"): args.r,
        ("model", "hidden_size"): args.hidden_size,
        ("model", "num_layers"): args.layers,
        ("model", "dropout"): args.dropout,
        ("train", "epochs"): args.epochs,
        ("train", "batch_size"): args.batch_size,
        ("train", "seed"): args.seed,
        ("data", "train_src"): args.train_src,
        ("data", "train_tgt"): args.train_tgt,
        ("data", "dev_src"): args.dev_src,
        ("data", "dev_tgt"): args.dev_tgt,
        ("data", "out_dir"): args.out_dir,
    }
    for (section, name), value in flags.items():
        if value is not None:
            setattr(getattr(run, section), name, value)
    return run.validate()


def _prior_log_rows(path, upto):
    if not path.exists():
        return []
    rows = []
    with open(path, encoding="utf-8") as fh:
        next(fh, None)
        for line in fh:
            if line.strip() and int(line.split("\t", 1)[0]) <= upto:
                rows.append(line.rstrip("\n"))
    return rows


def cmd_train(args):
    run = resolve_config(args)
    d = run.data
    if not d.train_src or not d.train_tgt:
        raise ConfigError("training data missing: set [data] train_src/train_tgt or pass --train-src/--train-tgt")
    out = Path(d.out_dir)
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None and resume.model_config.to_dict() != run.model.build(
        resume.model_config.src_vocab_size, resume.model_config.tgt_vocab_size
    ).to_dict():
        raise ConfigError("--resume checkpoint was trained with a different model configuration")

    corpus = D.filter_by_length(D.load_parallel(d.train_src, d.train_tgt), d.max_len)
    if not corpus:
        raise ConfigError("no training pairs left after length filtering")
    if resume is not None:
        vs, vt = resume.src_vocab, resume.tgt_vocab
    else:
        vs = D.Vocabulary.load(d.src_vocab) if d.src_vocab else D.build_vocab([s for s, _ in corpus], d.min_count)
        vt = D.Vocabulary.load(d.tgt_vocab) if d.tgt_vocab else D.build_vocab([t for _, t in corpus], d.min_count)
    if d.augment_singleton_unk:
        corpus = D.augment_singleton_unk(corpus)
    dev = None
    if d.dev_src or d.dev_tgt:
        if not (d.dev_src and d.dev_tgt):
            raise ConfigError("set both dev_src and dev_tgt")
        dev = [(s, t) for s, t in D.load_parallel(d.dev_src, d.dev_tgt) if s and t]

    model = build_model(run.model.build(len(vs), len(vt)), np.random.default_rng(run.train.seed), run.train.init_range, run.train.uniform_biases)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.ini", dump_config(run))
    log_path = out / "train.log"
    prior = _prior_log_rows(log_path, resume.epoch) if resume is not None else []

    def on_epoch(entry, last, best):
        save_checkpoint(out / "last.ckpt", last)
        if entry.is_best:
            save_checkpoint(out / "best.ckpt", best)
        history.append(entry)
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write("epoch\tstep\ttrain_ppl\tdev_bleu\tis_best\n")
            fh.writelines(r + "\n" for r in prior)
            fh.writelines(e.row() + "\n" for e in history)
        print(entry.row(), flush=True)

    history = []
    try:
        result = train(model, corpus, vs, vt, run.train, dev_corpus=dev, resume=resume, on_epoch=on_epoch)
    except TrainingDiverged as exc:
        if exc.checkpoint is not None:
            save_checkpoint(out / "diverged.ckpt", exc.checkpoint)
        raise
    if resume is None and not history:
        save_checkpoint(out / "best.ckpt", result.best)
        save_checkpoint(out / "last.ckpt", result.last)
        write_log(log_path, [])
    return 0


# --------------------------------------------------------------------------
# translate / evaluate / significance


def _input_lines(path):
    if path in (None, "-"):
        return [line.rstrip("\n") for line in sys.stdin]
    return D.read_lines(path)


def cmd_translate(args):
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model()
    config = BeamConfig(beam_size=args.beam, alpha=args.alpha, max_len=args.max_len)
    results = translate_corpus(model, ckpt.src_vocab, ckpt.tgt_vocab, _input_lines(args.input), config, args.replace_unk)
    _out(args, "".join(r.text + "\n" for r in results))
    if args.dump_attention:
        _write(args.dump_attention, format_attention(results))
    failed = [r.error for r in results if r.error]
    for msg in failed:
        print(f"error: {msg}", file=sys.stderr)
    return 0


def _token_lines(path):
    return [line.split() for line in D.read_lines(path)]


def cmd_evaluate(args):
    report = corpus_bleu(_token_lines(args.hyp), _token_lines(args.ref))
    print(report.format())
    return 0


def cmd_significance(args):
    rng = np.random.default_rng(args.seed)
    report = bootstrap_significance(
        _token_lines(args.hyp_a), _token_lines(args.hyp_b), _token_lines(args.ref), args.resamples, rng
    )
    print(report.format())
    return 0


# --------------------------------------------------------------------------
# diagnostics


def format_lexicon_row(src, entries):
    """``src ⇒ tgt1 (p1) tgt2 (p2) ...`` with two-decimal probabilities."""
    return f"{src} ⇒ " + " ".join(f"{t} ({p:.2f})" for t, p in entries)


def cmd_lexicon(args):
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model()
    table = model.extract_lexicon(ckpt.src_vocab, ckpt.tgt_vocab, args.top_k)
    words = args.words or list(table)
    lines = []
    for w in words:
        if w not in table:
            raise UsageError(f"{w!r} is not a source vocabulary type")
        lines.append(format_lexicon_row(w, table[w]))
    _out(args, "".join(line + "\n" for line in lines))
    return 0


INSPECT_HEADER = ["token", "‖W_e‖", "‖h̃‖", "cos θ", "b_e"]


def format_inspect(rows, tgt_vocab, lex=False):
    header = INSPECT_HEADER + (["lex_scale", "lex_cos", "lex_b"] if lex else []) + ["logit"]
    lines = ["\t".join(header)]
    for r in rows:
        cols = [tgt_vocab.token(r.token_id), f"{r.w_norm:.6f}", f"{r.h_norm:.6f}", f"{r.cos:.6f}", f"{r.bias:.6f}"]
        if lex:
            cols += [f"{r.lex_scale:.6f}", f"{r.lex_cos:.6f}", f"{r.lex_bias:.6f}"]
        lines.append("\t".join(cols + [f"{r.logit:.6f}"]))
    return "\n".join(lines) + "\n"


def recompose(row):
    """Logit rebuilt from the printed factors."""
    total = logit_from_factors(row.w_norm, row.h_norm, row.cos, row.bias)
    if row.lex_cos is not None:
        total += row.lex_scale * row.lex_cos + row.lex_bias
    return total


def cmd_inspect(args):
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model()
    vs, vt = ckpt.src_vocab, ckpt.tgt_vocab
    src = args.source.split()
    if not src:
        raise UsageError("--source is empty")
    prefix = D.encode(vt, args.prefix.split()) if args.prefix else []
    steps = model.step_states(D.encode(vs, src, reverse=True), prefix)
    position = len(prefix) if args.position is None else args.position
    if not 0 <= position < len(steps):
        raise UsageError(f"--position must be in [0, {len(steps) - 1}]")
    htilde, h_lex, _ = steps[position]
    unknown = [w for w in args.candidates if w not in vt]
    if unknown:
        raise UsageError(f"not in the target vocabulary: {' '.join(unknown)}")
    rows = model.inspect_logits(htilde, [vt.id(w) for w in args.candidates], h_lex)
    _out(args, format_inspect(rows, vt, model.config.lex))
    return 0


# --------------------------------------------------------------------------
# report


def cmd_report(args):
    from . import report as R

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "norms":
        if len(args.inputs) != 1:
            raise UsageError("report norms takes exactly one checkpoint")
        ckpt = load_checkpoint(args.inputs[0])
        rows = R.output_norms(ckpt.model(), ckpt.tgt_vocab)
        _write(out / "norms.tsv", R.norms_tsv(rows))
        R.plot_norms(rows, out / "norms.png", args.exclude_top)
        counts = [r.count for r in rows]
        print(f"types\t{len(rows)}")
        print(f"spearman_norm\t{R.frequency_correlation(counts, [r.norm for r in rows], args.exclude_top):.4f}")
        print(f"spearman_bias\t{R.frequency_correlation(counts, [r.bias for r in rows], args.exclude_top):.4f}")
    else:
        labels = args.labels or [Path(p).parent.name or Path(p).stem for p in args.inputs]
        if len(labels) != len(args.inputs):
            raise UsageError("give one --labels entry per log")
        logs = [R.read_log(p) for p in args.inputs]
        _write(out / "curves.tsv", R.curves_tsv(logs, labels))
        R.plot_curves(logs, labels, out / "curves.png")
        print("run\tfinal_train_ppl\tbest_dev_bleu")
        for label, cols in zip(labels, logs):
            bleu = [b for b in cols.get("dev_bleu", []) if not math.isnan(b)]
            best = f"{max(bleu):.4f}" if bleu else "nan"
            print(f"{label}\t{cols['train_ppl'][-1]:.6f}\t{best}" if cols["train_ppl"] else f"{label}\tnan\t{best}")
    return 0


# --------------------------------------------------------------------------
# parser


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Annotate defaults, except ``None`` (value comes from the config)."""

    def _get_help_string(self, action):
        if action.default is None or action.default is False:
            return action.help
        return super()._get_help_string(action)


def _parser():
    fmt = _HelpFormatter
    p = argparse.ArgumentParser(prog="lexnmt", description="Attentional NMT with fixed-norm output layers and a lexical module.", formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prep", help="filter a parallel corpus and build vocabularies", formatter_class=fmt)
    s.add_argument("--src", required=True, help="source side, one tokenized sentence per line")
    s.add_argument("--tgt", required=True, help="target side, line-aligned with --src")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--min-count", type=int, default=5, help="minimum type frequency kept in a vocabulary")
    s.add_argument("--max-len", type=int, default=50, help="drop pairs with a longer side")
    s.set_defaults(func=cmd_prep)

    s = sub.add_parser("bpe-learn", help="learn BPE merges from a tokenized file", formatter_class=fmt)
    s.add_argument("--input", required=True)
    s.add_argument("--merges", type=int, default=1000, help="number of merge operations (1k/2k/3k are typical)")
    s.add_argument("--output", required=True, help="merge file")
    s.set_defaults(func=cmd_bpe_learn)

    s = sub.add_parser("bpe-apply", help="segment files with BPE models (or undo segmentation)", formatter_class=fmt)
    s.add_argument("--model", action="append", default=[], help="merge file, repeat once per --input")
    s.add_argument("--input", action="append", required=True, help="file to segment; repeatable")
    s.add_argument("--output", action="append", required=True, help="destination, one per --input")
    s.add_argument(
        "--augment-singleton-unk",
        action="store_true",
        help="with a source and a target input, append a copy where types seen once per side become <unk>",
    )
    s.add_argument("--undo", action="store_true", help="join @@-marked pieces back into words")
    s.set_defaults(func=cmd_bpe_apply)

    s = sub.add_parser("train", help="train a model", formatter_class=fmt)
    s.add_argument("--config", default=None, help=f"INI run configuration (default: ${CONFIG_ENV} if set)")
    s.add_argument("--variant", choices=VARIANTS, default=None, help="output layer; config default fixnorm_lex")
    s.add_argument("--r", type=float, default=None, help="fixed norm radius; default 5 for fixnorm, 3.5 for fixnorm_lex")
    s.add_argument("--hidden-size", type=int, default=None, help="config default 512")
    s.add_argument("--layers", type=int, default=None, help="config default 2")
    s.add_argument("--dropout", type=float, default=None, help="config default 0.2")
    s.add_argument("--epochs", type=int, default=None, help="config default 50")
    s.add_argument("--batch-size", type=int, default=None, help="config default 32")
    s.add_argument("--seed", type=int, default=None, help="config default 1")
    s.add_argument("--train-src", default=None)
    s.add_argument("--train-tgt", default=None)
    s.add_argument("--dev-src", default=None)
    s.add_argument("--dev-tgt", default=None)
    s.add_argument("--out-dir", default=None, help="config default ./run")
    s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config key")
    s.add_argument("--resume", default=None, help="continue from a last.ckpt")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("translate", help="beam-search translation", formatter_class=fmt)
    s.add_argument("checkpoint")
    s.add_argument("--input", default=None, help="source file (default stdin)")
    s.add_argument("--output", default=None, help="destination (default stdout)")
    s.add_argument("--beam", type=int, default=12, help="beam width")
    s.add_argument("--alpha", type=float, default=0.8, help="length penalty exponent")
    s.add_argument("--max-len", type=int, default=None, help="default 2 * source length + 10")
    s.add_argument("--replace-unk", action=argparse.BooleanOptionalAction, default=True, help="copy the most-attended source word over each <unk>")
    s.add_argument("--dump-attention", default=None, metavar="FILE", help="write per-sentence attention matrices")
    s.set_defaults(func=cmd_translate)

    s = sub.add_parser("evaluate", help="corpus BLEU of a hypothesis file", formatter_class=fmt)
    s.add_argument("hyp")
    s.add_argument("ref")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("significance", help="paired bootstrap: is system A better than B?", formatter_class=fmt)
    s.add_argument("hyp_a")
    s.add_argument("hyp_b")
    s.add_argument("ref")
    s.add_argument("--resamples", type=int, default=1000, help="bootstrap samples")
    s.add_argument("--seed", type=int, default=1, help="resampling seed")
    s.set_defaults(func=cmd_significance)

    s = sub.add_parser("lexicon", help="top lexical-module translations per source word", formatter_class=fmt)
    s.add_argument("checkpoint")
    s.add_argument("--top-k", type=int, default=5, help="entries per source word")
    s.add_argument("--words", nargs="*", default=None, help="source words to show (default all)")
    s.add_argument("--output", default=None)
    s.set_defaults(func=cmd_lexicon)

    s = sub.add_parser("inspect", help="decompose candidate logits at one decoding step", formatter_class=fmt)
    s.add_argument("checkpoint")
    s.add_argument("--source", required=True, help="tokenized source sentence")
    s.add_argument("--prefix", default="", help="target words already produced (teacher forced)")
    s.add_argument("--position", type=int, default=None, help="decoder step (default: right after the prefix)")
    s.add_argument("--candidates", nargs="+", required=True, help="target words to decompose")
    s.add_argument("--output", default=None)
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("report", help="TSV tables with PNG figures", formatter_class=fmt)
    s.add_argument("kind", choices=("norms", "curves"), help="norms: output norm/bias vs frequency of a checkpoint; curves: training logs")
    s.add_argument("inputs", nargs="+", help="a checkpoint (norms) or training logs (curves)")
    s.add_argument("--labels", nargs="*", default=None, help="run names for curves")
    s.add_argument("--exclude-top", type=float, default=0.01, help="fraction of most frequent types left out of the correlation")
    s.add_argument("--out-dir", default="report", help="where the TSV and PNG files go")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"lexnmt {args.command}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, CheckpointError, ContractError, TrainingDiverged, KeyError) as exc:
        print(f"lexnmt {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
