"""Tab-separated reports with matching PNG figures.

Figures are rendered with the non-interactive Agg backend so the report
path works on headless machines.
"""

import math
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy.stats import spearmanr  # noqa: E402

from .data import SPECIALS  # noqa: E402


@dataclass
class NormRow:
    token: str
    count: int
    norm: float
    bias: float


def output_norms(model, tgt_vocab):
    """Effective output-embedding norm and bias of every non-special target type."""
    out = model.output_weights()
    W = out.out_proj.value
    b = model["out_bias"].value
    rows = []
    for i, tok in enumerate(tgt_vocab.itos):
        if tok in SPECIALS:
            continue
        rows.append(NormRow(tok, int(tgt_vocab.counts.get(tok, 0)), float(np.linalg.norm(W[i])), float(b[i])))
    return rows


def frequency_correlation(counts, values, exclude_top=0.01):
    """Spearman rank correlation of ``log(count)`` with ``values``.

    The ``ceil(exclude_top * n)`` most frequent types are dropped first.
    Types with a zero count are ignored.
    """
    counts = np.asarray(counts, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    seen = counts > 0
    counts, values = counts[seen], values[seen]
    order = np.argsort(-counts, kind="stable")
    keep = order[int(math.ceil(exclude_top * len(counts))) :]
    if len(keep) < 3:
        raise ValueError("need at least three types to correlate")
    return float(spearmanr(np.log(counts[keep]), values[keep]).statistic)


def norms_tsv(rows):
    lines = ["token\tcount\tnorm\tbias"]
    lines += [f"{r.token}\t{r.count}\t{r.norm:.6f}\t{r.bias:.6f}" for r in rows]
    return "\n".join(lines) + "\n"


def plot_norms(rows, path, exclude_top=0.01):
    counts = np.array([r.count for r in rows], dtype=float)
    norms = np.array([r.norm for r in rows])
    bias = np.array([r.bias for r in rows])
    seen = counts > 0
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
    for ax, values, label in zip(axes, (norms, bias), ("output embedding norm", "output bias")):
        ax.scatter(counts[seen], values[seen], s=6, alpha=0.5)
        ax.set_xscale("log")
        ax.set_xlabel("training frequency")
        ax.set_ylabel(label)
        rho = frequency_correlation(counts, values, exclude_top) if seen.sum() >= 3 else float("nan")
        ax.set_title(f"spearman {rho:.3f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def read_log(path):
    """Parse a training log into a dict of column -> list of floats."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        columns = {h: [] for h in header}
        for line in fh:
            if not line.strip():
                continue
            for h, v in zip(header, line.rstrip("\n").split("\t")):
                columns[h].append(float(v))
    if "epoch" not in columns or "train_ppl" not in columns:
        raise ValueError(f"{path}: not a training log")
    return columns


def curves_tsv(logs, labels):
    lines = ["run\tepoch\ttrain_ppl\tdev_bleu"]
    for label, cols in zip(labels, logs):
        for e, p, b in zip(cols["epoch"], cols["train_ppl"], cols.get("dev_bleu", [])):
            lines.append(f"{label}\t{int(e)}\t{p:.6f}\t{b:.4f}")
    return "\n".join(lines) + "\n"


def plot_curves(logs, labels, path):
    fig, (ax_p, ax_b) = plt.subplots(1, 2, figsize=(9, 3.6))
    for label, cols in zip(labels, logs):
        ax_p.plot(cols["epoch"], cols["train_ppl"], label=label)
        bleu = np.asarray(cols.get("dev_bleu", []), dtype=float)
        if bleu.size and np.isfinite(bleu).any():
            ax_b.plot(cols["epoch"], bleu, label=label)
    ax_p.set_yscale("log")
    ax_p.set_xlabel("epoch")
    ax_p.set_ylabel("train perplexity")
    ax_b.set_xlabel("epoch")
    ax_b.set_ylabel("dev BLEU")
    ax_p.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_attention(matrix, src_tokens, tgt_tokens, path):
    fig, ax = plt.subplots(figsize=(0.4 * len(src_tokens) + 2, 0.4 * len(tgt_tokens) + 1.5))
    ax.imshow(matrix, cmap="Greys", vmin=0, vmax=1, aspect="auto")
    ax.set_xticks(range(len(src_tokens)), src_tokens, rotation=90, fontsize=8)
    ax.set_yticks(range(len(tgt_tokens)), tgt_tokens, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
