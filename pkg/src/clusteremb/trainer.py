"""Training loop, evaluation, sweeps and training-fraction experiments."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import data as D
from . import tensor as T
from .embedders import EmbedMode, Embedder
from .sequence import ENCODERS, EVAL_BATCH, ClassifierHead, TextClassifier, logits_from_table

log = logging.getLogger(__name__)

RESULT_COLUMNS = ["mode", "v", "m", "k", "u", "size_bits", "size_mb", "dev_acc", "test_acc", "seed"]
EXTRA_COLUMNS = ["books", "codes", "encoder", "fraction", "dataset"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "se"
    v: int = 3000
    m: int = 8
    k: int = 1
    u: int = 0
    books: int = 1
    codes: int = 2
    tau: float = 0.9
    hidden: int = 50
    encoder: str = "lstm"
    lr: float = 0.001
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 3
    seed: int = 0
    max_len: int | None = D.DEFAULT_MAX_LEN
    fraction: float = 1.0
    clip_norm: float | None = None
    tokenizer: str = "regex"

    def __post_init__(self):
        self.mode = self.mode.lower()
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.encoder not in ENCODERS:
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be >= 1")
        if not 0 < self.fraction <= 1:
            raise ValueError("fraction must be in (0, 1]")
        self.embed_mode(self.v)

    def embed_mode(self, vocab_v: int) -> EmbedMode:
        """Embedding shapes for a vocabulary of ``vocab_v`` words (+1 row for UNK)."""
        return EmbedMode(self.mode, v=vocab_v + 1, m=self.m, k=self.k, u=self.u,
                         books=self.books, codes=self.codes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    model: TextClassifier
    params: dict[str, np.ndarray]
    train_loss: list[float]
    dev_acc: list[float]
    best_epoch: int
    wall_clock: float
    config: TrainConfig | None = None

    @property
    def best_dev_acc(self) -> float:
        return self.dev_acc[self.best_epoch]

    def history(self) -> dict:
        return {"train_loss": self.train_loss, "dev_acc": self.dev_acc,
                "best_epoch": self.best_epoch}


def build_model(config: TrainConfig, vocab_v: int, num_classes: int, seed_rng: T.Rng,
                unique_ids=None) -> TextClassifier:
    mode = config.embed_mode(vocab_v)
    emb = Embedder.init(mode, seed_rng, unique_ids)
    return TextClassifier.init(emb, num_classes, config.hidden, config.encoder, seed_rng)


def _snapshot(model: TextClassifier) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in model.named_parameters().items()}


def _restore(model: TextClassifier, params: dict[str, np.ndarray]):
    for n, p in model.named_parameters().items():
        p.data[...] = params[n]


def predict_dataset(model: TextClassifier, ds: D.EncodedDataset, path: str = "hard",
                    tau: float = 0.9, batch_size: int = EVAL_BATCH) -> np.ndarray:
    table = model.embedder.eval_table() if path == "hard" else None
    preds = []
    for lo in range(0, len(ds), batch_size):
        ids, _ = ds.batch(range(lo, min(lo + batch_size, len(ds))))
        if path == "hard":
            logits = logits_from_table(table, ids, model.encoder, model.head)
        elif path == "soft":
            logits = model.logits_soft(ids, tau)
        else:
            raise ValueError(f"unknown evaluation path {path!r}")
        preds.append(np.argmax(logits, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model: TextClassifier, ds: D.EncodedDataset, path: str = "hard",
             tau: float = 0.9) -> float:
    """Accuracy of argmax predictions; ``path="hard"`` uses cluster pointers."""
    if len(ds) == 0:
        return 0.0
    return float(np.mean(predict_dataset(model, ds, path, tau) == ds.labels))


def train(config: TrainConfig, train_ds: D.EncodedDataset, dev_ds: D.EncodedDataset,
          vocab_v: int, unique_ids=None) -> TrainResult:
    """Adam on shuffled minibatches; keeps the parameters of the best dev epoch."""
    if len(train_ds) == 0:
        raise D.DataError("empty training set")
    start = time.perf_counter()
    init_rng, shuffle_rng, noise_rng = T.Rng(config.seed).spawn(3)
    model = build_model(config, vocab_v, train_ds.num_classes, init_rng, unique_ids)
    opt = T.Adam(model.parameters(), lr=config.lr, clip_norm=config.clip_norm)

    losses: list[float] = []
    dev_hist: list[float] = []
    best_epoch, best_acc, best_params = -1, -1.0, _snapshot(model)
    stale = 0
    n = len(train_ds)
    for epoch in range(config.max_epochs):
        order = shuffle_rng.permutation(n)
        total, count = 0.0, 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            ids, labels = train_ds.batch(idx)
            try:
                loss = model.loss(ids, labels, noise_rng, config.tau)
                loss.backward()
                opt.step()
            except T.NonFiniteError as exc:
                raise TrainingDiverged(
                    f"non-finite values at epoch {epoch}, batch {lo // config.batch_size}: {exc}"
                ) from exc
            total += float(loss.data) * len(idx)
            count += len(idx)
        losses.append(total / count)
        acc = evaluate(model, dev_ds)
        dev_hist.append(acc)
        log.info("epoch %d loss %.4f dev %.4f", epoch, losses[-1], acc)
        if acc > best_acc:
            best_epoch, best_acc, best_params = epoch, acc, _snapshot(model)
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    _restore(model, best_params)
    return TrainResult(model, best_params, losses, dev_hist, best_epoch,
                       time.perf_counter() - start, config)


# -------------------------------------------------------------- checkpoint

CHECKPOINT_FORMAT = "clusteremb-model"


def save_model(path, model: TextClassifier, config: TrainConfig, vocab: D.Vocab,
               extra: dict | None = None):
    """Trained (pre-finalization) model: ``.npz`` of parameters plus a JSON header."""
    meta = {"format": CHECKPOINT_FORMAT, "version": 1, "config": config.to_dict(),
            "words": vocab.words, "counts": list(map(int, vocab.counts)),
            "num_classes": model.num_classes,
            "unique_ids": model.embedder.unique_ids.tolist(), **(extra or {})}
    arrays = {n: p.data for n, p in model.named_parameters().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_model(path) -> tuple[TextClassifier, TrainConfig, D.Vocab, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a trained-model checkpoint")
        arrays = {n: z[n] for n in z.files if n != "__meta__"}
    config = TrainConfig.from_dict(meta["config"])
    vocab = D.Vocab(meta["words"], meta["counts"])
    mode = config.embed_mode(vocab.v)

    def group(prefix):
        return {n.split(".", 1)[1]: T.Tensor(a, requires_grad=True, dtype=a.dtype)
                for n, a in arrays.items() if n.startswith(prefix + ".")}

    emb = Embedder(mode, group("emb"), meta["unique_ids"] if config.mode == "me" else None)
    model = TextClassifier(emb, ENCODERS[config.encoder](group("enc")),
                           ClassifierHead(group("head")))
    return model, config, vocab, meta


# ----------------------------------------------------------------- corpora


@dataclass
class Corpus:
    """Tokenized train/dev/test splits; encodings are cached per vocabulary size."""

    name: str
    num_classes: int
    tokenizer: str
    max_len: int | None
    train_tokens: list[list[str]]
    train_labels: np.ndarray
    dev_tokens: list[list[str]]
    dev_labels: np.ndarray
    test_tokens: list[list[str]] | None = None
    test_labels: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def encode(self, v: int, fraction: float = 1.0, seed: int = 0):
        """(vocab, train, dev, test) with the vocabulary built on the (sub)sampled train split."""
        key = (v, fraction, seed)
        if key in self._cache:
            return self._cache[key]
        idx = np.arange(len(self.train_tokens))
        if fraction < 1:
            picked = D.subsample(_IndexSet(idx, self.train_labels), fraction, seed)
            idx = picked.indices
        toks = [self.train_tokens[i] for i in idx]
        vocab = D.build_vocab(toks, v)
        enc = lambda tk, lab: D.encode_dataset(tk, lab, vocab, self.num_classes, self.max_len,
                                               self.name)
        train_ds = enc(toks, self.train_labels[idx])
        dev_ds = enc(self.dev_tokens, self.dev_labels)
        test_ds = enc(self.test_tokens, self.test_labels) if self.test_tokens is not None else None
        out = (vocab, train_ds, dev_ds, test_ds)
        self._cache[key] = out
        return out


@dataclass
class _IndexSet:
    indices: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.indices)

    def subset(self, idx):
        idx = list(idx)
        return _IndexSet(self.indices[idx], self.labels[idx])


def prepare_corpus(train_path, test_path=None, n_dev: int | None = None, seed: int = 0,
                   tokenizer: str | None = None, max_len: int | None = -1,
                   num_classes: int | None = None) -> Corpus:
    """Load, split off a dev set and tokenize.

    Review directories default to the simple tokenizer, a 400-token cap and a
    2,000-example dev split; CSV corpora to the regex tokenizer, the default
    length cap and 5,000 dev examples.
    """
    raw = D.load_dataset(train_path, num_classes)
    reviews = Path(train_path).is_dir()
    tokenizer = tokenizer or ("simple" if reviews else "regex")
    if max_len == -1:
        max_len = D.IMDB_MAX_LEN if reviews else D.DEFAULT_MAX_LEN
    if n_dev is None:
        n_dev = 2000 if reviews else 5000
    train_raw, dev_raw = D.split_dev(raw, n_dev, seed)
    test_raw = D.load_dataset(test_path, raw.num_classes) if test_path else None
    tok = lambda ds: D.tokenize_dataset(ds, tokenizer) if ds is not None else None
    return Corpus(raw.name, raw.num_classes, tokenizer, max_len,
                  tok(train_raw), train_raw.labels, tok(dev_raw), dev_raw.labels,
                  tok(test_raw), test_raw.labels if test_raw is not None else None)


def corpus_from_raw(train_raw: D.RawDataset, dev_raw: D.RawDataset,
                    test_raw: D.RawDataset | None = None, tokenizer: str = "regex",
                    max_len: int | None = D.DEFAULT_MAX_LEN) -> Corpus:
    tok = lambda ds: D.tokenize_dataset(ds, tokenizer) if ds is not None else None
    return Corpus(train_raw.name, train_raw.num_classes, tokenizer, max_len,
                  tok(train_raw), train_raw.labels, tok(dev_raw), dev_raw.labels,
                  tok(test_raw), test_raw.labels if test_raw is not None else None)


# ------------------------------------------------------------------- sweeps


@dataclass
class SweepRecord:
    config: TrainConfig
    size_bits: int
    size_mb: float
    dev_acc: float
    test_acc: float | None = None
    dataset: str = ""

    def row(self) -> dict:
        c = self.config
        return {"mode": c.mode, "v": c.v, "m": c.m, "k": c.k, "u": c.u,
                "size_bits": self.size_bits, "size_mb": f"{self.size_mb:.3f}",
                "dev_acc": f"{self.dev_acc:.4f}",
                "test_acc": "" if self.test_acc is None else f"{self.test_acc:.4f}",
                "seed": c.seed, "books": c.books, "codes": c.codes, "encoder": c.encoder,
                "fraction": c.fraction, "dataset": self.dataset}


def run_config(config: TrainConfig, corpus: Corpus) -> tuple[SweepRecord, TrainResult, D.Vocab]:
    from .deployment import model_size_bits  # deployment imports the model stack

    vocab, train_ds, dev_ds, test_ds = corpus.encode(config.v, config.fraction, config.seed)
    result = train(config, train_ds, dev_ds, vocab.v)
    model = result.model
    mode = model.embedder.mode
    size = model_size_bits(mode.kind, mode.v, mode.m, mode.k, mode.u,
                           model.other_param_count(), books=mode.books, codes=mode.codes)
    test_acc = evaluate(model, test_ds) if test_ds is not None else None
    rec = SweepRecord(config, size.total_bits, size.mb_binary, result.best_dev_acc, test_acc,
                      corpus.name)
    return rec, result, vocab


def expand_grid(spec: dict) -> list[TrainConfig]:
    """Expand ``{"base": {...}, "grid": {key: [values]}}`` or ``{"runs": [...]}``.

    ``grid`` may also be a list of such dicts, each expanded as a Cartesian
    product over the shared ``base``.
    """
    base = dict(spec.get("base", {}))
    configs: list[TrainConfig] = []
    for run in spec.get("runs", []):
        configs.append(TrainConfig.from_dict({**base, **run}))
    grids = spec.get("grid", [])
    if isinstance(grids, dict):
        grids = [grids]
    for g in grids:
        keys = sorted(g)
        for values in itertools.product(*(g[k] for k in keys)):
            configs.append(TrainConfig.from_dict({**base, **dict(zip(keys, values))}))
    return configs


def load_grid(path) -> list[TrainConfig]:
    with open(path) as fh:
        return expand_grid(json.load(fh))


def _config_key(c: TrainConfig) -> tuple:
    return (c.mode, c.v, c.m, c.k, c.u, c.books, c.codes, c.encoder, float(c.fraction), c.seed)


def _row_key(row: dict) -> tuple:
    return (row["mode"], int(row["v"]), int(row["m"]), int(row["k"]), int(row["u"]),
            int(row.get("books") or 1), int(row.get("codes") or 2), row.get("encoder") or "lstm",
            float(row.get("fraction") or 1.0), int(row["seed"]))


def read_results(path) -> list[dict]:
    p = Path(path)
    if not p.exists():
        return []
    with p.open(newline="") as fh:
        return list(csv.DictReader(fh))


def append_result(path, rec: SweepRecord):
    """Append one row with a single write followed by fsync."""
    p = Path(path)
    new = not p.exists() or p.stat().st_size == 0
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RESULT_COLUMNS + EXTRA_COLUMNS, lineterminator="\n")
    if new:
        w.writeheader()
    w.writerow(rec.row())
    with p.open("a", newline="") as fh:
        fh.write(buf.getvalue())
        fh.flush()
        os.fsync(fh.fileno())


def _worker(args):
    config, corpus = args
    try:
        rec, _, _ = run_config(config, corpus)
        return rec, None
    except Exception as exc:  # one failed run must not stop the sweep
        return None, f"{type(exc).__name__}: {exc}"


def sweep(configs: Sequence[TrainConfig], corpus: Corpus, out_csv=None,
          workers: int = 1) -> list[SweepRecord]:
    """Train every config; rows are appended to ``out_csv`` as runs finish.

    Configs already present in ``out_csv`` are skipped, so an interrupted
    sweep resumes where it stopped. Failures go to ``<out_csv>.errors.jsonl``.
    Returns the new records sorted by model size.
    """
    if not configs:
        raise ValueError("empty sweep grid")
    done = {_row_key(r) for r in read_results(out_csv)} if out_csv else set()
    todo = [c for c in configs if _config_key(c) not in done]
    records: list[SweepRecord] = []

    def handle(config, rec, err):
        if rec is not None:
            records.append(rec)
            if out_csv:
                append_result(out_csv, rec)
        else:
            log.error("run %s failed: %s", config, err)
            if out_csv:
                with open(f"{out_csv}.errors.jsonl", "a") as fh:
                    fh.write(json.dumps({"config": config.to_dict(), "error": err}) + "\n")

    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            for config, (rec, err) in zip(todo, ex.map(_worker, [(c, corpus) for c in todo])):
                handle(config, rec, err)
    else:
        for config in todo:
            handle(config, *_worker((config, corpus)))
    return sorted(records, key=lambda r: (r.size_bits, r.config.mode))


def fraction_experiment(config: TrainConfig, corpus: Corpus, fractions: Iterable[float],
                        out_csv=None) -> list[SweepRecord]:
    """One train/evaluate per training fraction; dev and test stay fixed."""
    fr = list(fractions)
    for f in fr:
        if not 0 < f <= 1:
            raise ValueError(f"fraction {f} outside (0, 1]")
    configs = [replace(config, fraction=float(f)) for f in fr]
    records = []
    for c in configs:
        rec, _, _ = run_config(c, corpus)
        records.append(rec)
        if out_csv:
            append_result(out_csv, rec)
    return records
