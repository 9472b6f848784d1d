"""Word embeddings from context-window co-occurrence with one-hot codes."""
from __future__ import annotations

import csv
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import scipy.sparse as sp

from .core import CooccurrenceStats, SpectralEmbedding, column_cosines, solve_embedding

TOKEN_RE = re.compile(r"\w+|[^\w\s]")
DEFAULT_WINDOW = 8


def tokenize(text):
    """Lowercase, split off punctuation as separate tokens, split on whitespace."""
    return TOKEN_RE.findall(text.lower())


@dataclass
class Vocabulary:
    tokens: list
    frequencies: list
    max_size: int | None = None
    index: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.index:
            self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def id(self, token):
        try:
            return self.index[token]
        except KeyError:
            raise KeyError(f"{token!r} is not in the vocabulary") from None

    def encode(self, tokens, oov_consumes_slots=False):
        """Token ids; OOV tokens are dropped, or kept as -1 placeholders."""
        if oov_consumes_slots:
            return np.array([self.index.get(t, -1) for t in tokens], dtype=np.int64)
        return np.array([self.index[t] for t in tokens if t in self.index], dtype=np.int64)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for tok, count in zip(self.tokens, self.frequencies):
                fh.write(f"{tok}\t{count}\n")

    @classmethod
    def load(cls, path):
        tokens, freqs = [], []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, count = line.rsplit("\t", 1)
                tokens.append(tok)
                freqs.append(int(count))
        return cls(tokens, freqs)


def _documents(corpus):
    for doc in corpus:
        yield tokenize(doc) if isinstance(doc, str) else list(doc)


def build_vocab(corpus: Iterable, max_size=33474):
    """Most frequent ``max_size`` tokens, ordered by descending count then lexicographically."""
    if max_size < 1:
        raise ValueError("max_size must be >= 1")
    counts = Counter()
    for doc in _documents(corpus):
        counts.update(doc)
    if not counts:
        raise ValueError("empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:max_size]
    return Vocabulary([t for t, _ in ranked], [c for _, c in ranked], max_size)


def context_pairs(ids, window=DEFAULT_WINDOW):
    """Ordered (id_p, id_q) pairs for 0 < |p - q| <= window, position-major.

    Negative ids mark out-of-vocabulary placeholders: they occupy a slot but
    emit no pairs.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    ids = np.asarray(ids, dtype=np.int64)
    n = len(ids)
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    offsets = np.concatenate([np.arange(-window, 0), np.arange(1, window + 1)])
    p = np.repeat(np.arange(n), len(offsets))
    q = p + np.tile(offsets, n)
    ok = (q >= 0) & (q < n)
    p, q = p[ok], q[ok]
    a, b = ids[p], ids[q]
    keep = (a >= 0) & (b >= 0)
    return np.stack([a[keep], b[keep]], axis=1)


@dataclass
class CooccurrenceTable:
    """Symmetric counts: entry (a, b) is the number of windows where a and b co-occur."""

    counts: sp.csr_matrix
    window: int

    def count(self, a, b):
        return int(self.counts[a, b])


def build_cooccurrence(corpus: Iterable, vocab: Vocabulary, window=DEFAULT_WINDOW,
                       oov_consumes_slots=False, chunk_pairs=8_000_000):
    """Count ordered context pairs over documents (windows never cross documents)."""
    K = len(vocab)
    total = sp.csr_matrix((K, K), dtype=np.float64)
    buf = []
    size = 0
    for doc in _documents(corpus):
        pairs = context_pairs(vocab.encode(doc, oov_consumes_slots), window)
        if len(pairs):
            buf.append(pairs)
            size += len(pairs)
        if size >= chunk_pairs:
            total = total + _count(buf, K)
            buf, size = [], 0
    if buf:
        total = total + _count(buf, K)
    return CooccurrenceTable(total.tocsr(), window)


def _count(buf, K):
    pairs = np.concatenate(buf)
    return sp.csr_matrix(
        (np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(K, K)
    )


def stats_from_table(table: CooccurrenceTable) -> CooccurrenceStats:
    """Pairwise statistics of the ordered pair stream implied by ``table``.

    For one-hot codes, (e_a - e_b)(e_a - e_b)^T summed over pairs is twice
    the graph Laplacian of the off-diagonal counts, and V (each endpoint
    weighted 1/2) is the diagonal of per-token pair participations.
    """
    N = table.counts.tocsr()
    K = N.shape[0]
    off = N - sp.diags(N.diagonal())
    deg = np.asarray(off.sum(axis=1)).ravel()
    C = (2.0 * (sp.diags(deg) - off)).tocsr()
    part = np.asarray(N.sum(axis=1)).ravel()
    V = sp.diags(part).tocsr()
    n = int(round(N.sum()))
    return CooccurrenceStats(K, "pairwise", True, False, V, C, n, n)


def train_word_smt(corpus, vocab: Vocabulary, window=DEFAULT_WINDOW, d_emb=300, drop_first=0,
                   v_floor_rel=1e-7, method="auto", table=None):
    """Fit the word embedding; column i of the returned P embeds token i.

    Returns (embedding, table).
    """
    if table is None:
        table = build_cooccurrence(corpus, vocab, window)
    stats = stats_from_table(table)
    emb = solve_embedding(stats, d_emb, drop_first, v_floor_rel, method=method)
    return emb, table


def nearest_words(embedding: SpectralEmbedding, vocab: Vocabulary, word, n=10):
    """Top-n (word, cosine) by cosine between columns of P, query excluded."""
    i = vocab.id(word)
    cos = column_cosines(embedding.P, i)
    order = np.argsort(-cos, kind="stable")
    order = order[order != i][:n]
    return [(vocab.tokens[j], float(cos[j])) for j in order]


def cooccurrence_vs_similarity(word, table: CooccurrenceTable, embedding: SpectralEmbedding,
                               vocab: Vocabulary, n=10):
    """Rows comparing the top-n neighbours by cosine with the top-n by raw co-occurrence."""
    i = vocab.id(word)
    cos = column_cosines(embedding.P, i)
    row = np.asarray(table.counts[i].toarray()).ravel()
    rows = []
    for w, c in nearest_words(embedding, vocab, word, n):
        j = vocab.index[w]
        rows.append({"ranking": "cosine", "word": w, "cosine": c, "cooccurrence": int(row[j])})
    by_count = [j for j in np.argsort(-row, kind="stable") if j != i and row[j] > 0][:n]
    for j in by_count:
        rows.append({
            "ranking": "cooccurrence", "word": vocab.tokens[j],
            "cosine": float(cos[j]), "cooccurrence": int(row[j]),
        })
    rank = {"cosine": 0, "cooccurrence": 0}
    for r in rows:
        rank[r["ranking"]] += 1
        r["rank"] = rank[r["ranking"]]
    return rows


def write_report_csv(rows, path):
    fields = ["ranking", "rank", "word", "cosine", "cooccurrence"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in fields})


def save_word2vec_text(embedding: SpectralEmbedding, vocab: Vocabulary, path):
    P = embedding.P
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(vocab)} {P.shape[0]}\n")
        for i, tok in enumerate(vocab.tokens):
            fh.write(tok + " " + " ".join(f"{v:.6g}" for v in P[:, i]) + "\n")


def load_word2vec_text(path):
    with open(path, encoding="utf-8") as fh:
        n, d = map(int, fh.readline().split())
        tokens, cols = [], []
        for line in fh:
            parts = line.rstrip("\n").split(" ")
            tokens.append(parts[0])
            cols.append([float(v) for v in parts[1:]])
    P = np.array(cols).T.reshape(d, n)
    return tokens, P


def read_corpus(path):
    """Non-empty lines of a UTF-8 text file, each treated as one document."""
    with open(Path(path), encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield line
