"""Corpus ingestion: tokenizers, vocabulary, encoding, splits and loaders.

Word ids: ``PAD = 0``, ``UNK = 1`` and corpus words from 2 upward in
descending training frequency (ties broken lexicographically), so id 2 is
the most frequent word.

Encoded-dataset cache layout (``.npz``, ``format_version`` 1):

* ``format``: the string ``"clusteremb-encoded"``
* ``format_version``: int
* ``meta``: JSON string with ``name``, ``num_classes``, ``max_len``, ``tokenizer``
* ``words``: JSON list of vocabulary words in id order (id 2 first)
* ``counts``: int64 training frequencies aligned with ``words``
* ``lengths``: int32 sequence lengths
* ``ids``: int32 concatenated sequences
* ``labels``: int32 class indices
"""

from __future__ import annotations

import csv
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import Rng

PAD = 0
UNK = 1
FIRST_WORD_ID = 2

CACHE_FORMAT = "clusteremb-encoded"
CACHE_VERSION = 1

IMDB_MAX_LEN = 400
DEFAULT_MAX_LEN = 256


class DataError(ValueError):
    """Malformed or unusable input data."""


# ----------------------------------------------------------------- tokenizers

# Applied in order to lowercased text. This is the regex tokenizer's whole
# rule set, after the convention of Kim (2014)'s sentence cleaner.
REGEX_RULES: list[tuple[str, str]] = [
    (r"[‘’´]", "'"),
    (r"[^a-z0-9(),!?'`.:;\-]", " "),
    (r"(?<![a-z0-9])'", " ' "),
    (r"'(s|ve|t|re|d|ll|m)\b", r" '\1"),
    (r"'(?![a-z])", " ' "),
    (r"([.,!?():;])", r" \1 "),
    (r"\s{2,}", " "),
]
_REGEX_RULES = [(re.compile(p), r) for p, r in REGEX_RULES]

_SIMPLE_TOKEN = re.compile(r"[^\W_]+(?:'[^\W_]+)*|[^\w\s]")
_HTML_BREAK = re.compile(r"<br\s*/?>", re.IGNORECASE)


def tokenize_regex(text: str) -> list[str]:
    """Lowercase and split with :data:`REGEX_RULES`.

    >>> tokenize_regex("Don't stop!")
    ['don', "'t", 'stop', '!']
    """
    s = text.lower()
    for pat, rep in _REGEX_RULES:
        s = pat.sub(rep, s)
    return s.split()


def tokenize_simple(text: str, max_len: int = IMDB_MAX_LEN) -> list[str]:
    """Lowercase, split words and detach punctuation, keep the first ``max_len`` tokens."""
    s = _HTML_BREAK.sub(" ", text.lower())
    return _SIMPLE_TOKEN.findall(s)[:max_len]


TOKENIZERS = {"regex": tokenize_regex, "simple": tokenize_simple}


def tokenize(text: str, variant: str) -> list[str]:
    try:
        return TOKENIZERS[variant](text)
    except KeyError:
        raise ValueError(f"unknown tokenizer {variant!r}") from None


# ---------------------------------------------------------------- vocabulary


@dataclass
class Vocab:
    """Top-``v`` training words; ``words[i]`` has id ``i + 2``."""

    words: list[str]
    counts: list[int]
    requested_v: int | None = None
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {w: i + FIRST_WORD_ID for i, w in enumerate(self.words)}

    @property
    def v(self) -> int:
        return len(self.words)

    @property
    def size(self) -> int:
        """Number of ids including PAD and UNK."""
        return len(self.words) + FIRST_WORD_ID

    def id_of(self, word: str) -> int:
        return self.index.get(word, UNK)

    def word_of(self, i: int) -> str:
        if i == PAD:
            return "<pad>"
        if i == UNK:
            return "<unk>"
        return self.words[i - FIRST_WORD_ID]

    def encode(self, tokens: Sequence[str], max_len: int | None = None) -> list[int]:
        ids = [self.index.get(t, UNK) for t in tokens]
        if max_len is not None:
            ids = ids[:max_len]
        return ids or [UNK]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.word_of(int(i)) for i in ids]

    def frequency(self, i: int) -> int:
        return self.counts[i - FIRST_WORD_ID] if i >= FIRST_WORD_ID else 0


def build_vocab(tokenized: Iterable[Sequence[str]], v: int) -> Vocab:
    """Keep the ``v`` most frequent words; ties go to the lexicographically smaller word.

    If fewer than ``v`` distinct words exist all are kept and ``Vocab.v``
    reports the actual size.
    """
    if v < 1:
        raise ValueError("v must be >= 1")
    counter: Counter[str] = Counter()
    for toks in tokenized:
        counter.update(toks)
    ranked = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))[:v]
    return Vocab([w for w, _ in ranked], [c for _, c in ranked], requested_v=v)


# ------------------------------------------------------------------ datasets


@dataclass
class RawDataset:
    records: list[tuple[int, str]]
    num_classes: int
    name: str = ""

    def __post_init__(self):
        if not self.records:
            raise DataError(f"dataset {self.name!r} is empty")
        for lab, _ in self.records:
            if not 0 <= lab < self.num_classes:
                raise DataError(f"label {lab} outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r[0] for r in self.records], dtype=np.int64)

    def subset(self, indices: Iterable[int]) -> "RawDataset":
        return RawDataset([self.records[i] for i in indices], self.num_classes, self.name)


@dataclass
class EncodedDataset:
    sequences: list[np.ndarray]
    labels: np.ndarray
    num_classes: int
    max_len: int | None = None
    name: str = ""

    def __len__(self):
        return len(self.sequences)

    def subset(self, indices: Iterable[int]) -> "EncodedDataset":
        idx = list(indices)
        return EncodedDataset([self.sequences[i] for i in idx], self.labels[idx],
                              self.num_classes, self.max_len, self.name)

    def batch(self, indices: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Right-padded id matrix and labels for ``indices``."""
        seqs = [self.sequences[i] for i in indices]
        return pad_batch(seqs), self.labels[list(indices)]


def pad_batch(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for r, s in enumerate(seqs):
        out[r, :len(s)] = s
    return out


def tokenize_dataset(ds: RawDataset, variant: str) -> list[list[str]]:
    return [tokenize(text, variant) for _, text in ds.records]


def encode_dataset(tokenized: Sequence[Sequence[str]], labels: Sequence[int], vocab: Vocab,
                   num_classes: int, max_len: int | None, name: str = "") -> EncodedDataset:
    seqs = [np.asarray(vocab.encode(t, max_len), dtype=np.int32) for t in tokenized]
    return EncodedDataset(seqs, np.asarray(labels, dtype=np.int64), num_classes, max_len, name)


# ------------------------------------------------------------ split helpers


def split_dev(ds, n_dev: int, seed: int):
    """Random disjoint (train', dev) split; both keep the original order."""
    n = len(ds)
    if n_dev >= n:
        raise DataError(f"n_dev={n_dev} must be smaller than the training set ({n})")
    if n_dev < 0:
        raise DataError("n_dev must be non-negative")
    perm = Rng(seed).permutation(n)
    dev_idx = np.sort(perm[:n_dev])
    train_idx = np.sort(perm[n_dev:])
    return ds.subset(train_idx.tolist()), ds.subset(dev_idx.tolist())


def stratified_counts(labels: np.ndarray, fraction: float) -> dict[int, int]:
    """Per-class sample sizes summing to ``floor(fraction * n)``.

    Each class gets ``floor(fraction * n_c)``; leftover slots go to the
    classes with the largest fractional remainders, lowest class first.
    """
    classes, sizes = np.unique(labels, return_counts=True)
    target = int(np.floor(fraction * len(labels) + 1e-9))
    exact = fraction * sizes
    base = np.floor(exact + 1e-9).astype(int)
    rem = exact - base
    order = sorted(range(len(classes)), key=lambda i: (-rem[i], classes[i]))
    for i in order[:max(0, target - int(base.sum()))]:
        base[i] += 1
    return {int(c): int(b) for c, b in zip(classes, base)}


def subsample(ds, fraction: float, seed: int):
    """Class-stratified subset of ``floor(fraction * len(ds))`` examples."""
    if not 0 < fraction <= 1:
        raise DataError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1:
        return ds
    labels = np.asarray(ds.labels)
    counts = stratified_counts(labels, fraction)
    rng = Rng(seed)
    keep: list[int] = []
    for c in sorted(counts):
        members = np.flatnonzero(labels == c)
        pick = members[rng.permutation(len(members))[:counts[c]]]
        keep.extend(pick.tolist())
    return ds.subset(sorted(keep))


# ------------------------------------------------------------------ loaders


def load_csv(path, num_classes: int | None = None, name: str | None = None) -> RawDataset:
    """Label-first CSV (label, title, body...) with 1-based labels.

    Text columns after the label are joined by a single space. If
    ``num_classes`` is omitted it is the largest label seen.
    """
    path = Path(path)
    records: list[tuple[int, str]] = []
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) < 2:
                raise DataError(f"{path}:{lineno}: expected label and text columns, got {len(row)}")
            try:
                label = int(row[0].strip())
            except ValueError:
                raise DataError(f"{path}:{lineno}: label {row[0]!r} is not an integer") from None
            if label < 1 or (num_classes is not None and label > num_classes):
                raise DataError(f"{path}:{lineno}: unknown label {label}")
            text = " ".join(col.strip() for col in row[1:])
            records.append((label - 1, text))
    if not records:
        raise DataError(f"{path}: no records")
    c = num_classes if num_classes is not None else max(r[0] for r in records) + 1
    return RawDataset(records, c, name or path.stem)


def load_review_dirs(path, name: str | None = None) -> RawDataset:
    """``pos/`` and ``neg/`` directories of ``.txt`` reviews; neg=0, pos=1."""
    path = Path(path)
    records: list[tuple[int, str]] = []
    for label, sub in ((0, "neg"), (1, "pos")):
        d = path / sub
        if not d.is_dir():
            raise DataError(f"{path}: missing {sub}/ directory")
        for f in sorted(d.glob("*.txt")):
            records.append((label, f.read_text(encoding="utf-8", errors="replace")))
    if not records:
        raise DataError(f"{path}: no .txt files under pos/ or neg/")
    return RawDataset(records, 2, name or path.name)


def load_dataset(path, num_classes: int | None = None) -> RawDataset:
    """Dispatch on path type: a CSV file or a pos/neg review directory."""
    p = Path(path)
    if p.is_dir():
        return load_review_dirs(p)
    if p.is_file():
        return load_csv(p, num_classes)
    raise DataError(f"{p}: no such file or directory")


# -------------------------------------------------------------------- cache


def save_encoded(path, ds: EncodedDataset, vocab: Vocab, tokenizer: str):
    lengths = np.array([len(s) for s in ds.sequences], dtype=np.int32)
    ids = (np.concatenate(ds.sequences).astype(np.int32) if ds.sequences
           else np.zeros(0, np.int32))
    meta = {"name": ds.name, "num_classes": ds.num_classes, "max_len": ds.max_len,
            "tokenizer": tokenizer}
    with open(path, "wb") as fh:
        np.savez(fh, format=np.array(CACHE_FORMAT), format_version=np.array(CACHE_VERSION),
                 meta=np.array(json.dumps(meta)), words=np.array(json.dumps(vocab.words)),
                 counts=np.asarray(vocab.counts, dtype=np.int64), lengths=lengths, ids=ids,
                 labels=ds.labels.astype(np.int32))


def load_encoded(path) -> tuple[EncodedDataset, Vocab, str]:
    with np.load(path, allow_pickle=False) as z:
        if str(z["format"]) != CACHE_FORMAT:
            raise DataError(f"{path}: not an encoded-dataset cache")
        if int(z["format_version"]) != CACHE_VERSION:
            raise DataError(f"{path}: cache version {int(z['format_version'])} unsupported")
        meta = json.loads(str(z["meta"]))
        vocab = Vocab(json.loads(str(z["words"])), z["counts"].tolist())
        bounds = np.concatenate([[0], np.cumsum(z["lengths"])])
        ids = z["ids"]
        seqs = [ids[a:b].copy() for a, b in zip(bounds[:-1], bounds[1:])]
        ds = EncodedDataset(seqs, z["labels"].astype(np.int64), meta["num_classes"],
                            meta["max_len"], meta["name"])
    return ds, vocab, meta["tokenizer"]


# ---------------------------------------------------------------- synthetic


def synthetic_topics(n: int, num_classes: int = 2, seed: int = 0, length: tuple[int, int] = (4, 12),
                     words_per_class: int = 6, filler: int = 30, signal: float = 0.35,
                     name: str = "synthetic") -> RawDataset:
    """Separable toy corpus: every text mixes filler words with class keywords.

    Class ``c`` owns keywords ``c{c}w{j}``; each position is a keyword of the
    true class with probability ``signal`` and at least one keyword is always
    present, so a bag-of-words rule separates the classes perfectly.
    """
    rng = np.random.default_rng(seed)
    fill = [f"f{j}" for j in range(filler)]
    records = []
    for i in range(n):
        c = i % num_classes
        L = int(rng.integers(length[0], length[1] + 1))
        toks = []
        for _ in range(L):
            if rng.random() < signal:
                toks.append(f"c{c}w{rng.integers(words_per_class)}")
            else:
                toks.append(fill[rng.integers(filler)])
        toks[int(rng.integers(L))] = f"c{c}w{rng.integers(words_per_class)}"
        records.append((c, " ".join(toks)))
    return RawDataset(records, num_classes, name)
