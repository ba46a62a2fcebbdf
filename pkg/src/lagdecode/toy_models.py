"""Synthetic corpora and small models standing in for pretrained ones.

Token 0 is reserved as end-of-sequence and doubles as the start marker
that precedes every LM context.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .simplex import one_hot

log = logging.getLogger(__name__)

EOS = 0
FORMAT_NAME = "lagdecode-model"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ToyModel:
    kind: str  # "lm" | "classifier" | "embedder"
    vocab_size: int
    params: dict[str, np.ndarray]
    eos_id: int | None = None
    n_classes: int | None = None
    seed: int = 0
    info: dict = field(default_factory=dict)

    @property
    def embedding(self) -> np.ndarray:
        return self.params["E"]

    @property
    def embed_dim(self) -> int:
        return self.params["E"].shape[1]

    def require(self, kind: str) -> "ToyModel":
        if self.kind != kind:
            raise ModelFormatError(f"expected a {kind} model, got {self.kind}")
        return self


@dataclass
class Corpus:
    sequences: list[tuple[int, ...]]
    labels: list[int]
    vocab: list[str]
    seed: int
    n_classes: int

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def split(self, holdout: float = 0.2) -> tuple["Corpus", "Corpus"]:
        """Deterministic head/tail split (sequence order is already random)."""
        k = int(round(len(self.sequences) * (1.0 - holdout)))
        head = Corpus(self.sequences[:k], self.labels[:k], self.vocab, self.seed, self.n_classes)
        tail = Corpus(self.sequences[k:], self.labels[k:], self.vocab, self.seed, self.n_classes)
        return head, tail


# --- corpus -----------------------------------------------------------------

def class_token_sets(vocab_size: int, n_classes: int) -> list[list[int]]:
    """Disjoint preferred-token sets, one per class, carved from ids 1..V-1.

    Whatever is left over after equal-sized class blocks is shared.
    """
    content = list(range(1, vocab_size))
    per_class = max(1, len(content) // (n_classes + 1))
    return [content[c * per_class:(c + 1) * per_class] for c in range(n_classes)]


def generate_corpus(vocab_size: int = 32, n_classes: int = 2, n: int = 2000, seed: int = 0,
                    min_len: int = 6, max_len: int = 14, preference: float = 4.0) -> Corpus:
    if vocab_size < 6:
        raise ValueError("vocab_size must be >= 6")
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if n < 100:
        raise ValueError("need at least 100 sequences")
    if (vocab_size - 1) // (n_classes + 1) < 1:
        raise ValueError("vocabulary too small for the requested class count")
    rng = np.random.default_rng(seed)
    n_content = vocab_size - 1
    bigram = rng.dirichlet(np.full(n_content, 0.3), size=n_content)
    sets = class_token_sets(vocab_size, n_classes)
    weights = np.ones((n_classes, n_content))
    for c, toks in enumerate(sets):
        for other in range(n_classes):
            for t in toks:
                weights[other, t - 1] = preference if other == c else 1.0 / preference

    sequences, labels = [], []
    for _ in range(n):
        c = int(rng.integers(n_classes))
        length = int(rng.integers(min_len, max_len + 1))
        p = weights[c] / weights[c].sum()
        tok = int(rng.choice(n_content, p=p))
        seq = [tok + 1]
        for _ in range(length - 1):
            p = bigram[tok] * weights[c]
            tok = int(rng.choice(n_content, p=p / p.sum()))
            seq.append(tok + 1)
        sequences.append(tuple(seq))
        labels.append(c)
    vocab = ["</s>"] + [f"w{i}" for i in range(1, vocab_size)]
    return Corpus(sequences, labels, vocab, seed, n_classes)


def save_corpus(corpus: Corpus, path) -> None:
    lines = [f"{lab}\t{' '.join(map(str, seq))}" for seq, lab in zip(corpus.sequences, corpus.labels)]
    header = f"# vocab_size={corpus.vocab_size} n_classes={corpus.n_classes} seed={corpus.seed}"
    Path(path).write_text("\n".join([header] + lines) + "\n")


def load_corpus(path) -> Corpus:
    text = Path(path).read_text().splitlines()
    meta = dict(kv.split("=") for kv in text[0].lstrip("# ").split())
    seqs, labels = [], []
    for line in text[1:]:
        if not line.strip():
            continue
        lab, ids = line.split("\t")
        labels.append(int(lab))
        seqs.append(tuple(int(t) for t in ids.split()))
    V = int(meta["vocab_size"])
    vocab = ["</s>"] + [f"w{i}" for i in range(1, V)]
    return Corpus(seqs, labels, vocab, int(meta["seed"]), int(meta["n_classes"]))


# --- forward passes ---------------------------------------------------------

def causal_mean_matrix(lengths: Sequence[int]) -> np.ndarray:
    """Block-diagonal matrix averaging each row with its predecessors."""
    n = int(np.sum(lengths))
    A = np.zeros((n, n))
    start = 0
    for L in lengths:
        for i in range(L):
            A[start + i, start:start + i + 1] = 1.0 / (i + 1)
        start += L
    return A


def lm_logits(model: ToyModel, rows, lengths: Sequence[int] | None = None) -> ad.Node:
    """Next-token logits for every input row.

    Each position sees its own token embedding and the running mean of all
    embeddings up to and including it.
    """
    p = model.params
    rows = ad.as_node(rows)
    lengths = [rows.shape[0]] if lengths is None else lengths
    emb = rows @ p["E"]
    ctx = ad.constant(causal_mean_matrix(lengths)) @ emb
    h = ad.tanh(emb @ p["Wp"] + ctx @ p["Wc"] + p["b1"])
    return h @ p["Wo"] + p["bo"]


def lm_next_log_probs(model: ToyModel, tokens: Sequence[int]) -> np.ndarray:
    """Log-distribution over the token following ``tokens`` (no graph kept)."""
    logits = lm_logits(model, one_hot(tokens, model.vocab_size)).value[-1]
    z = logits - logits.max()
    return z - np.log(np.exp(z).sum())


def classifier_logits(model: ToyModel, rows, pool: np.ndarray | None = None) -> ad.Node:
    p = model.params
    emb = ad.as_node(rows) @ p["E"]
    pooled = ad.mean_rows(emb) if pool is None else ad.constant(pool) @ emb
    h = ad.tanh(pooled @ p["W1"] + p["b1"])
    return h @ p["W2"] + p["b2"]


def classifier_probs(model: ToyModel, tokens: Sequence[int]) -> np.ndarray:
    z = classifier_logits(model, one_hot(tokens, model.vocab_size)).value
    e = np.exp(z - z.max())
    return e / e.sum()


def pooled_embedding(model: ToyModel, rows) -> ad.Node:
    return ad.mean_rows(ad.as_node(rows) @ model.params["E"])


# --- construction -----------------------------------------------------------

def init_lm(vocab_size: int, embed_dim: int = 16, hidden: int = 32, seed: int = 0) -> ToyModel:
    rng = np.random.default_rng(seed)
    params = {
        "E": rng.normal(0, 0.5, (vocab_size, embed_dim)),
        "Wp": rng.normal(0, 1 / np.sqrt(embed_dim), (embed_dim, hidden)),
        "Wc": rng.normal(0, 1 / np.sqrt(embed_dim), (embed_dim, hidden)),
        "b1": np.zeros(hidden),
        "Wo": rng.normal(0, 0.01, (hidden, vocab_size)),
        "bo": np.zeros(vocab_size),
    }
    return ToyModel("lm", vocab_size, params, eos_id=EOS, seed=seed)


def init_classifier(vocab_size: int, n_classes: int = 2, embed_dim: int = 16,
                    hidden: int = 32, seed: int = 0) -> ToyModel:
    rng = np.random.default_rng(seed)
    params = {
        "E": rng.normal(0, 0.5, (vocab_size, embed_dim)),
        "W1": rng.normal(0, 1 / np.sqrt(embed_dim), (embed_dim, hidden)),
        "b1": np.zeros(hidden),
        "W2": rng.normal(0, 0.01, (hidden, n_classes)),
        "b2": np.zeros(n_classes),
    }
    return ToyModel("classifier", vocab_size, params, n_classes=n_classes, seed=seed)


def uniform_lm(vocab_size: int, eos_id: int | None = EOS, embed_dim: int = 4) -> ToyModel:
    """LM whose predictive distribution is uniform regardless of context."""
    m = init_lm(vocab_size, embed_dim=embed_dim, hidden=4)
    for k in ("Wo", "bo"):
        m.params[k] = np.zeros_like(m.params[k])
    m.eos_id = eos_id
    return m


def embedder_from(model: ToyModel) -> ToyModel:
    """Embedder sharing (by copy) another model's embedding table."""
    return ToyModel("embedder", model.vocab_size, {"E": model.embedding.copy()}, seed=model.seed)


# --- training ---------------------------------------------------------------

class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.params, self.lr, self.b1, self.b2, self.eps = params, lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1 ** self.t)
            vhat = self.v[k] / (1 - self.b2 ** self.t)
            self.params[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _lm_batch_loss(model, leaves, batch):
    seqs = [(EOS,) + s + (EOS,) for s in batch]
    inputs = np.concatenate([one_hot(s[:-1], model.vocab_size) for s in seqs])
    targets = np.concatenate([one_hot(s[1:], model.vocab_size) for s in seqs])
    lengths = [len(s) - 1 for s in seqs]
    p = leaves
    emb = ad.constant(inputs) @ p["E"]
    ctx = ad.constant(causal_mean_matrix(lengths)) @ emb
    h = ad.tanh(emb @ p["Wp"] + ctx @ p["Wc"] + p["b1"])
    logits = h @ p["Wo"] + p["bo"]
    return ad.cross_entropy(logits, targets) * (1.0 / len(targets))


def lm_corpus_nll(model: ToyModel, sequences: Sequence[Sequence[int]]) -> float:
    """Mean per-token NLL (including the closing end token)."""
    total, count = 0.0, 0
    leaves = {k: ad.constant(v) for k, v in model.params.items()}
    for i in range(0, len(sequences), 64):
        batch = [tuple(s) for s in sequences[i:i + 64]]
        n_tok = sum(len(s) + 1 for s in batch)
        total += float(_lm_batch_loss(model, leaves, batch).value) * n_tok
        count += n_tok
    return total / count


def _fit(model: ToyModel, batches_fn, loss_fn, epochs: int, lr: float, seed: int):
    rng = np.random.default_rng(seed)
    opt = Adam(model.params, lr)
    for epoch in range(epochs):
        for batch in batches_fn(rng):
            leaves = {k: ad.leaf(v, name=k) for k, v in model.params.items()}
            loss = loss_fn(model, leaves, batch)
            grads = ad.backward(loss, list(leaves.values()))
            opt.step(dict(zip(leaves.keys(), grads)))
    return model


def _batches(items, batch_size):
    def gen(rng):
        order = rng.permutation(len(items))
        for i in range(0, len(order), batch_size):
            yield [items[j] for j in order[i:i + batch_size]]
    return gen


def train_lm(corpus: Corpus, epochs: int = 8, lr: float = 0.01, seed: int = 0,
             embed_dim: int = 16, hidden: int = 32, batch_size: int = 32) -> ToyModel:
    model = init_lm(corpus.vocab_size, embed_dim, hidden, seed)
    initial = lm_corpus_nll(model, corpus.sequences)
    _fit(model, _batches(corpus.sequences, batch_size), _lm_batch_loss, epochs, lr, seed)
    final = lm_corpus_nll(model, corpus.sequences)
    if epochs > 0 and not final < initial:
        raise TrainingDiverged(f"LM training NLL rose from {initial:.4f} to {final:.4f}")
    model.info.update(train_nll=final, initial_nll=initial, epochs=epochs, lr=lr)
    log.info("lm trained: per-token nll %.4f -> %.4f", initial, final)
    return model


def _clf_batch_loss(model, leaves, batch):
    seqs = [s for s, _ in batch]
    inputs = np.concatenate([one_hot(s, model.vocab_size) for s in seqs])
    pool = np.zeros((len(seqs), len(inputs)))
    start = 0
    for i, s in enumerate(seqs):
        pool[i, start:start + len(s)] = 1.0 / len(s)
        start += len(s)
    targets = one_hot([lab for _, lab in batch], model.n_classes)
    p = leaves
    pooled = ad.constant(pool) @ (ad.constant(inputs) @ p["E"])
    h = ad.tanh(pooled @ p["W1"] + p["b1"])
    logits = h @ p["W2"] + p["b2"]
    return ad.cross_entropy(logits, targets) * (1.0 / len(seqs))


def classifier_accuracy(model: ToyModel, sequences, labels) -> float:
    hits = [int(np.argmax(classifier_probs(model, s))) == lab for s, lab in zip(sequences, labels)]
    return float(np.mean(hits))


def train_classifier(corpus: Corpus, epochs: int = 8, lr: float = 0.01, seed: int = 0,
                     embed_dim: int = 16, hidden: int = 32, batch_size: int = 32,
                     holdout: float = 0.2) -> ToyModel:
    train, test = corpus.split(holdout)
    model = init_classifier(corpus.vocab_size, corpus.n_classes, embed_dim, hidden, seed)
    pairs = list(zip(train.sequences, train.labels))
    _fit(model, _batches(pairs, batch_size), _clf_batch_loss, epochs, lr, seed)
    acc = classifier_accuracy(model, test.sequences, test.labels) if test.sequences else float("nan")
    model.info.update(heldout_accuracy=acc, epochs=epochs, lr=lr)
    log.info("classifier trained: held-out accuracy %.3f", acc)
    return model


# --- persistence ------------------------------------------------------------

def save_model(model: ToyModel, path) -> None:
    names = sorted(model.params)
    payload = b"".join(np.ascontiguousarray(model.params[k], dtype="<f8").tobytes() for k in names)
    header = {
        "format": FORMAT_NAME,
        "format_version": FORMAT_VERSION,
        "kind": model.kind,
        "vocab_size": model.vocab_size,
        "embed_dim": model.embed_dim,
        "eos_id": model.eos_id,
        "n_classes": model.n_classes,
        "seed": model.seed,
        "params": [{"name": k, "shape": list(model.params[k].shape)} for k in names],
        "payload_bytes": len(payload),
        "checksum": hashlib.sha256(payload).hexdigest(),
        "info": model.info,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def load_model(path, kind: str | None = None) -> ToyModel:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ModelFormatError(f"{path}: missing header")
    try:
        header = json.loads(raw[:nl])
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: unreadable header") from exc
    if header.get("format") != FORMAT_NAME:
        raise ModelFormatError(f"{path}: not a {FORMAT_NAME} file")
    if header.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported format version {header.get('format_version')}")
    payload = raw[nl + 1:]
    if len(payload) != header["payload_bytes"] or hashlib.sha256(payload).hexdigest() != header["checksum"]:
        raise ModelFormatError(f"{path}: checksum mismatch")
    if kind is not None and header["kind"] != kind:
        raise ModelFormatError(f"{path}: expected a {kind} model, found {header['kind']}")
    params, offset = {}, 0
    for spec in header["params"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape)
        params[spec["name"]] = arr.astype(np.float64)
        offset += 8 * count
    return ToyModel(header["kind"], header["vocab_size"], params, header["eos_id"],
                    header["n_classes"], header["seed"], header.get("info", {}))
