"""Corpora, tagging schemes, spans, embeddings, and batching.

File formats
------------
Aspect corpus: UTF-8 TSV, one token per line as
``token<TAB>ate-tag<TAB>ote-tag<TAB>sentiment-or-_``, blank line between
sentences. An optional sidecar at ``<path>.adj`` lists dependency edges as
``<sentence-index> <i> <j>`` (0-based); matrices are symmetrized and get a
unit diagonal. Without a sidecar, adjacency is the identity.

Document corpus: JSONL with keys ``text`` (required), ``domain`` and
``sentiment`` (each optional, at least one present).

Embeddings: word2vec text format, optional ``count dim`` header.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class CorpusError(ValueError):
    """Malformed corpus, embedding, or label content."""


@dataclass(frozen=True)
class TagSchemes:
    """Tag inventories for the three token-level tasks and two document tasks.

    Token-level BIO inventories are ordered (begin, inside, outside), so index
    0/1/2 always mean B/I/O.
    """

    ate_tags: tuple[str, ...] = ("BA", "IA", "O")
    ote_tags: tuple[str, ...] = ("BP", "IP", "O")
    asc_tags: tuple[str, ...] = ("pos", "neg", "neu")
    domain_labels: tuple[str, ...] = ("Laptop", "Restaurant")
    dsc_labels: tuple[str, ...] = ("pos", "neg", "neu")

    @property
    def token_classes(self) -> int:
        return len(self.ate_tags)

    def doc_classes(self, task: str) -> int:
        if task == "ddc":
            return len(self.domain_labels)
        if task == "dsc":
            return len(self.dsc_labels)
        raise KeyError(task)

    def tags_for(self, task: str) -> tuple[str, ...]:
        return {"ate": self.ate_tags, "ote": self.ote_tags,
                "asc": self.asc_tags}[task]

    def index(self, task: str, tag: str) -> int:
        tags = self.tags_for(task)
        try:
            return tags.index(tag)
        except ValueError:
            raise CorpusError(f"unknown {task} tag {tag!r}; "
                              f"expected one of {tags}") from None

    def to_dict(self) -> dict:
        return {"ate_tags": list(self.ate_tags), "ote_tags": list(self.ote_tags),
                "asc_tags": list(self.asc_tags),
                "domain_labels": list(self.domain_labels),
                "dsc_labels": list(self.dsc_labels)}

    @classmethod
    def from_dict(cls, d: dict) -> "TagSchemes":
        return cls(tuple(d["ate_tags"]), tuple(d["ote_tags"]),
                   tuple(d["asc_tags"]), tuple(d["domain_labels"]),
                   tuple(d["dsc_labels"]))


DEFAULT_SCHEMES = TagSchemes()

BEGIN, INSIDE, OUTSIDE = 0, 1, 2


@dataclass
class Sentence:
    tokens: tuple[str, ...]
    ate_gold: tuple[int, ...]
    ote_gold: tuple[int, ...]
    asc_gold: tuple[int | None, ...]
    adjacency: np.ndarray
    general_ids: np.ndarray | None = None
    domain_ids: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.tokens)


@dataclass
class Document:
    tokens: tuple[str, ...]
    domain_gold: int | None
    sentiment_gold: int | None
    general_ids: np.ndarray | None = None
    domain_ids: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.tokens)


# ---------------------------------------------------------------------------
# BIO validity and spans


def bio_valid(tags: Sequence[int]) -> bool:
    """Strict BIO: an inside tag must continue a begin/inside run."""
    prev = OUTSIDE
    for t in tags:
        if t == INSIDE and prev not in (BEGIN, INSIDE):
            return False
        prev = t
    return True


def extract_spans(tags: Sequence[int], begin: int = BEGIN,
                  inside: int = INSIDE) -> tuple[tuple[int, int], ...]:
    """Maximal begin-then-inside runs as (start, end-exclusive) spans.

    Decoding is lenient: an orphan inside tag opens a new span, so model
    output never has to be repaired before evaluation.
    """
    spans: list[tuple[int, int]] = []
    start: int | None = None
    for i, t in enumerate(tags):
        if t == begin:
            if start is not None:
                spans.append((start, i))
            start = i
        elif t == inside:
            if start is None:
                start = i
        else:
            if start is not None:
                spans.append((start, i))
                start = None
    if start is not None:
        spans.append((start, len(tags)))
    return tuple(spans)


def tags_from_spans(spans: Iterable[tuple[int, int]], n: int,
                    begin: int = BEGIN, inside: int = INSIDE,
                    outside: int = OUTSIDE) -> tuple[int, ...]:
    """Inverse of extract_spans for disjoint span sets."""
    tags = [outside] * n
    for s, e in spans:
        tags[s] = begin
        for i in range(s + 1, e):
            tags[i] = inside
    return tuple(tags)


def gold_pairs(sent: Sentence) -> tuple[tuple[tuple[int, int], int], ...]:
    """Gold (aspect span, sentiment) pairs; the span's first token labels it."""
    out = []
    for s, e in extract_spans(sent.ate_gold):
        lab = sent.asc_gold[s]
        if lab is not None:
            out.append(((s, e), lab))
    return tuple(out)


# ---------------------------------------------------------------------------
# aspect corpus


def _identity_adjacency(n: int) -> np.ndarray:
    return np.eye(n, dtype=np.float32)


def _load_adjacency(path: str, sentences: list[Sentence]) -> None:
    edges: dict[int, list[tuple[int, int]]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise CorpusError(f"{path}:{lineno}: expected "
                                  f"'<sentence> <i> <j>', got {line!r}")
            try:
                si, i, j = (int(p) for p in parts)
            except ValueError:
                raise CorpusError(f"{path}:{lineno}: non-integer edge "
                                  f"entry {line!r}") from None
            if not 0 <= si < len(sentences):
                raise CorpusError(f"{path}:{lineno}: sentence index {si} out "
                                  f"of range (corpus has {len(sentences)})")
            n = sentences[si].n
            if not (0 <= i < n and 0 <= j < n):
                raise CorpusError(f"{path}:{lineno}: token index out of range "
                                  f"for sentence {si} of length {n}")
            edges.setdefault(si, []).append((i, j))
    for si, pairs in edges.items():
        a = sentences[si].adjacency
        for i, j in pairs:
            a[i, j] = 1.0
            a[j, i] = 1.0


def load_aspect_corpus(path: str, schemes: TagSchemes = DEFAULT_SCHEMES,
                       adjacency_path: str | None = None) -> list[Sentence]:
    """Parse the TSV corpus, validating tags, BIO structure, and sentiment
    placement. ``adjacency_path`` defaults to ``<path>.adj`` when that file
    exists."""
    sentences: list[Sentence] = []
    tokens: list[str] = []
    ate: list[int] = []
    ote: list[int] = []
    asc: list[int | None] = []
    first_line = 0

    def flush(lineno: int) -> None:
        nonlocal tokens, ate, ote, asc
        if not tokens:
            return
        idx = len(sentences)
        where = f"sentence {idx} (line {first_line})"
        if not bio_valid(ate):
            raise CorpusError(f"{path}: {where}: invalid aspect BIO sequence "
                              f"{[schemes.ate_tags[t] for t in ate]}")
        if not bio_valid(ote):
            raise CorpusError(f"{path}: {where}: invalid opinion BIO sequence "
                              f"{[schemes.ote_tags[t] for t in ote]}")
        inside_aspect = [False] * len(tokens)
        for s, e in extract_spans(ate):
            for i in range(s, e):
                inside_aspect[i] = True
        for i, lab in enumerate(asc):
            if inside_aspect[i] and lab is None:
                raise CorpusError(f"{path}: {where}: token {i} is inside an "
                                  "aspect span but carries no sentiment")
            if not inside_aspect[i] and lab is not None:
                raise CorpusError(f"{path}: {where}: token {i} is outside all "
                                  "aspect spans but carries a sentiment")
        sentences.append(Sentence(tuple(tokens), tuple(ate), tuple(ote),
                                  tuple(asc),
                                  _identity_adjacency(len(tokens))))
        tokens, ate, ote, asc = [], [], [], []

    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                flush(lineno)
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise CorpusError(
                    f"{path}:{lineno}: expected 4 tab-separated fields "
                    f"(token, aspect, opinion, sentiment), got {len(parts)}")
            if not tokens:
                first_line = lineno
            tok, a, o, s = parts
            try:
                ate.append(schemes.index("ate", a))
                ote.append(schemes.index("ote", o))
                asc.append(None if s == "_" else schemes.index("asc", s))
            except CorpusError as e:
                raise CorpusError(f"{path}:{lineno}: {e}") from None
            tokens.append(tok)
    flush(lineno if sentences or tokens else 0)

    if adjacency_path is None:
        candidate = path + ".adj"
        adjacency_path = candidate if os.path.exists(candidate) else None
    if adjacency_path is not None:
        _load_adjacency(adjacency_path, sentences)
    return sentences


def corpus_stats(sentences: Sequence[Sentence]) -> dict[str, int]:
    return {
        "sentences": len(sentences),
        "aspect_terms": sum(len(extract_spans(s.ate_gold)) for s in sentences),
        "opinion_terms": sum(len(extract_spans(s.ote_gold)) for s in sentences),
    }


# ---------------------------------------------------------------------------
# document corpus


def load_document_corpus(path: str,
                         schemes: TagSchemes = DEFAULT_SCHEMES) -> list[Document]:
    docs: list[Document] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}:{lineno}: bad JSON: {e}") from None
            text = rec.get("text")
            if not isinstance(text, str) or not text.split():
                raise CorpusError(f"{path}:{lineno}: missing or empty 'text'")
            domain = rec.get("domain")
            sentiment = rec.get("sentiment")
            if domain is None and sentiment is None:
                raise CorpusError(f"{path}:{lineno}: record carries neither "
                                  "'domain' nor 'sentiment'")
            di = None
            if domain is not None:
                if domain not in schemes.domain_labels:
                    raise CorpusError(f"{path}:{lineno}: unknown domain "
                                      f"{domain!r}; expected one of "
                                      f"{schemes.domain_labels}")
                di = schemes.domain_labels.index(domain)
            si = None
            if sentiment is not None:
                if sentiment not in schemes.dsc_labels:
                    raise CorpusError(f"{path}:{lineno}: unknown sentiment "
                                      f"{sentiment!r}; expected one of "
                                      f"{schemes.dsc_labels}")
                si = schemes.dsc_labels.index(sentiment)
            docs.append(Document(tuple(text.split()), di, si))
    return docs


# ---------------------------------------------------------------------------
# embeddings


@dataclass
class EmbeddingTable:
    vocab: dict[str, int]
    matrix: np.ndarray
    dim: int
    unk_index: int
    pad_index: int

    def lookup(self, tokens: Sequence[str]) -> np.ndarray:
        unk = self.unk_index
        return np.array([self.vocab.get(t, unk) for t in tokens],
                        dtype=np.int64)

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    def word_list(self) -> list[str]:
        words = [""] * len(self.vocab)
        for w, i in self.vocab.items():
            words[i] = w
        return words

    @classmethod
    def from_words(cls, words: Sequence[str], matrix: np.ndarray,
                   unk_row: np.ndarray) -> "EmbeddingTable":
        dim = matrix.shape[1] if matrix.size else unk_row.shape[0]
        full = np.vstack([matrix.reshape(-1, dim), unk_row.reshape(1, dim),
                          np.zeros((1, dim), dtype=np.float32)])
        vocab = {w: i for i, w in enumerate(words)}
        return cls(vocab, full.astype(np.float32), dim,
                   unk_index=len(words), pad_index=len(words) + 1)


def load_embeddings(path: str) -> EmbeddingTable:
    """Word2vec text format; first-seen row wins on duplicate words."""
    words: list[str] = []
    rows: list[np.ndarray] = []
    seen: set[str] = set()
    dim: int | None = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            parts = raw.rstrip("\n").split(" ")
            parts = [p for p in parts if p != ""]
            if not parts:
                continue
            if lineno == 1 and len(parts) == 2:
                try:
                    int(parts[0]), int(parts[1])
                    continue  # count/dim header
                except ValueError:
                    pass
            word, vals = parts[0], parts[1:]
            if dim is None:
                dim = len(vals)
                if dim == 0:
                    raise CorpusError(f"{path}:{lineno}: row has no values")
            if len(vals) != dim:
                raise CorpusError(f"{path}:{lineno}: expected {dim} values, "
                                  f"got {len(vals)}")
            if word in seen:
                warnings.warn(f"{path}:{lineno}: duplicate word {word!r}; "
                              "keeping the first occurrence")
                continue
            try:
                vec = np.array([float(v) for v in vals], dtype=np.float32)
            except ValueError:
                raise CorpusError(f"{path}:{lineno}: non-numeric value in "
                                  f"embedding row for {word!r}") from None
            seen.add(word)
            words.append(word)
            rows.append(vec)
    if dim is None:
        raise CorpusError(f"{path}: embedding file is empty")
    matrix = np.vstack(rows)
    unk = matrix.mean(axis=0)
    return EmbeddingTable.from_words(words, matrix, unk)


def random_embeddings(words: Sequence[str], dim: int,
                      rng: np.random.Generator) -> EmbeddingTable:
    """Offline fallback: rows uniform in [-0.25, 0.25], zero pad row."""
    words = list(dict.fromkeys(words))
    matrix = rng.uniform(-0.25, 0.25, size=(len(words), dim)).astype(np.float32)
    unk = rng.uniform(-0.25, 0.25, size=dim).astype(np.float32)
    return EmbeddingTable.from_words(words, matrix, unk)


def corpus_words(sentences: Iterable[Sentence],
                 documents: Iterable[Document] = ()) -> list[str]:
    seen: dict[str, None] = {}
    for s in sentences:
        for t in s.tokens:
            seen.setdefault(t, None)
    for d in documents:
        for t in d.tokens:
            seen.setdefault(t, None)
    return list(seen)


def assign_embedding_ids(items: Iterable[Sentence | Document],
                         general: EmbeddingTable,
                         domain: EmbeddingTable) -> None:
    for it in items:
        it.general_ids = general.lookup(it.tokens)
        it.domain_ids = domain.lookup(it.tokens)


# ---------------------------------------------------------------------------
# splitting and batching


def dev_split(items: Sequence, fraction: float = 0.2,
              seed: int = 0) -> tuple[list, list]:
    """Deterministic, disjoint, exhaustive split; dev takes floor(fraction*n)."""
    if not 0 < fraction < 1:
        raise ValueError(f"dev fraction must be in (0, 1), got {fraction}")
    idx = np.random.default_rng(seed).permutation(len(items))
    n_dev = int(math.floor(fraction * len(items)))
    dev_idx = set(idx[:n_dev].tolist())
    train = [items[i] for i in range(len(items)) if i not in dev_idx]
    dev = [items[i] for i in range(len(items)) if i in dev_idx]
    return train, dev


@dataclass
class Batch:
    """Padded sentence batch; every padded slot is masked out of the loss."""

    sentences: tuple[Sentence, ...]
    mask: np.ndarray        # [B, L] bool, True on real tokens
    general_ids: np.ndarray  # [B, L] int64
    domain_ids: np.ndarray
    ate_gold: np.ndarray    # [B, L] int64 (outside-tag at padding)
    ote_gold: np.ndarray
    asc_gold: np.ndarray    # [B, L] int64, 0 where unlabeled
    asc_mask: np.ndarray    # [B, L] bool, True where a sentiment label exists

    @property
    def size(self) -> int:
        return len(self.sentences)


def _pad_batch(group: Sequence[Sentence], general_pad: int,
               domain_pad: int) -> Batch:
    b = len(group)
    length = max(s.n for s in group)
    mask = np.zeros((b, length), dtype=bool)
    gids = np.full((b, length), general_pad, dtype=np.int64)
    dids = np.full((b, length), domain_pad, dtype=np.int64)
    ate = np.full((b, length), OUTSIDE, dtype=np.int64)
    ote = np.full((b, length), OUTSIDE, dtype=np.int64)
    asc = np.zeros((b, length), dtype=np.int64)
    asc_mask = np.zeros((b, length), dtype=bool)
    for r, s in enumerate(group):
        if s.general_ids is None or s.domain_ids is None:
            raise ValueError("sentence has no embedding ids; run "
                             "assign_embedding_ids first")
        n = s.n
        mask[r, :n] = True
        gids[r, :n] = s.general_ids
        dids[r, :n] = s.domain_ids
        ate[r, :n] = s.ate_gold
        ote[r, :n] = s.ote_gold
        for i, lab in enumerate(s.asc_gold):
            if lab is not None:
                asc[r, i] = lab
                asc_mask[r, i] = True
    return Batch(tuple(group), mask, gids, dids, ate, ote, asc, asc_mask)


def make_batches(sentences: Sequence[Sentence], batch_size: int, seed: int,
                 general_pad: int, domain_pad: int) -> list[Batch]:
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng(seed).permutation(len(sentences))
    shuffled = [sentences[i] for i in order]
    return [_pad_batch(shuffled[i:i + batch_size], general_pad, domain_pad)
            for i in range(0, len(shuffled), batch_size)]
