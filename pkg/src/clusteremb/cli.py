"""Command-line interface: ``clusteremb <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import analysis as A
from . import data as D
from . import deployment as Dep
from . import trainer as Tr


def _add_mode_args(p: argparse.ArgumentParser):
    p.add_argument("--mode", choices=["se", "ce", "cae", "me", "cc"], default="se")
    p.add_argument("--vocab", type=int, default=3000, help="vocabulary size v")
    p.add_argument("--dim", type=int, default=8, help="embedding dimension m")
    p.add_argument("--clusters", type=int, default=1, help="number of clusters k")
    p.add_argument("--unique", type=int, default=0, help="unique embeddings u (ME)")
    p.add_argument("--books", type=int, default=1, help="codebooks M (CC)")
    p.add_argument("--codes", type=int, default=2, help="codes per book K (CC)")


def _add_train_args(p: argparse.ArgumentParser):
    p.add_argument("--dataset", required=True,
                   help="training CSV, pos/neg review directory, or encoded cache (.npz)")
    p.add_argument("--test", help="test CSV or review directory")
    p.add_argument("--classes", type=int, help="number of classes (default: largest label)")
    p.add_argument("--dev-size", type=int, help="dev examples (default 5000, 2000 for reviews)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden", type=int, default=50)
    p.add_argument("--encoder", choices=["lstm", "rnn"], default="lstm")
    p.add_argument("--tau", type=float, default=0.9)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--max-len", type=int, help="token cap (default 256, 400 for reviews); 0 = none")
    p.add_argument("--tokenizer", choices=["regex", "simple"])
    p.add_argument("--clip-norm", type=float)


def _config_from_args(a) -> Tr.TrainConfig:
    return Tr.TrainConfig(
        mode=a.mode, v=a.vocab, m=a.dim, k=a.clusters, u=a.unique, books=a.books, codes=a.codes,
        tau=a.tau, hidden=a.hidden, encoder=a.encoder, lr=a.lr, batch_size=a.batch_size,
        max_epochs=a.epochs, patience=a.patience, seed=a.seed, clip_norm=a.clip_norm)


def _corpus_from_args(a) -> Tr.Corpus:
    max_len = -1 if a.max_len is None else (a.max_len or None)
    return Tr.prepare_corpus(a.dataset, a.test, a.dev_size, a.seed, a.tokenizer, max_len,
                             a.classes)


def _finish_config(config: Tr.TrainConfig, corpus: Tr.Corpus) -> Tr.TrainConfig:
    return replace(config, max_len=corpus.max_len, tokenizer=corpus.tokenizer)


def cmd_train(a):
    config = _config_from_args(a)
    if a.dataset.endswith(".npz"):
        ds, vocab, tokenizer = D.load_encoded(a.dataset)
        train_ds, dev_ds = D.split_dev(ds, a.dev_size or min(5000, len(ds) // 10 or 1), a.seed)
        config = replace(config, max_len=ds.max_len, tokenizer=tokenizer)
        result = Tr.train(config, train_ds, dev_ds, vocab.v)
        test_acc = None
    else:
        corpus = _corpus_from_args(a)
        config = _finish_config(config, corpus)
        rec, result, vocab = Tr.run_config(config, corpus)
        test_acc = rec.test_acc
        dev_ds = corpus.encode(config.v, config.fraction, config.seed)[2]
    for e, (loss, acc) in enumerate(zip(result.train_loss, result.dev_acc)):
        print(f"epoch\t{e}\tloss\t{loss:.4f}\tdev_acc\t{acc:.4f}")
    print(f"best_epoch\t{result.best_epoch}\tdev_acc\t{result.best_dev_acc:.4f}")
    if result.model.embedder.mode.clustered:
        soft = Tr.evaluate(result.model, dev_ds, path="soft", tau=config.tau)
        print(f"soft_dev_acc\t{soft:.4f}\thard_minus_soft\t{result.best_dev_acc - soft:+.4f}")
    if test_acc is not None:
        print(f"test_acc\t{test_acc:.4f}")
    if a.out:
        Tr.save_model(a.out, result.model, config, vocab)
        print(f"saved\t{a.out}")


def cmd_sweep(a):
    configs = Tr.load_grid(a.grid)
    if a.seeds:
        configs = [replace(c, seed=s) for c in configs for s in _int_list(a.seeds)]
    corpus = Tr.prepare_corpus(a.dataset, a.test, a.dev_size, a.split_seed, a.tokenizer,
                               -1 if a.max_len is None else (a.max_len or None), a.classes)
    configs = [_finish_config(c, corpus) for c in configs]
    records = Tr.sweep(configs, corpus, a.out, workers=a.workers)
    for r in records:
        row = r.row()
        print("\t".join(str(row[c]) for c in Tr.RESULT_COLUMNS))


def cmd_fractions(a):
    config = _config_from_args(a)
    corpus = _corpus_from_args(a)
    config = _finish_config(config, corpus)
    fractions = [float(x) for x in a.list.split(",") if x.strip()]
    for r in Tr.fraction_experiment(config, corpus, fractions, a.out):
        print(f"fraction\t{r.config.fraction}\tdev_acc\t{r.dev_acc:.4f}\ttest_acc\t"
              f"{'' if r.test_acc is None else f'{r.test_acc:.4f}'}")


def _is_compact(path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(4) == Dep.MAGIC


def cmd_finalize(a):
    model, config, vocab, _ = Tr.load_model(a.inp)
    cm = Dep.finalize(model, vocab, config.tokenizer, config.max_len)
    n = Dep.save_compact(a.out, cm)
    for line in cm.size_report().lines():
        print(line)
    print(f"file_bytes\t{n}")
    print(f"overhead_bytes\t{Dep.disk_overhead_bytes(cm)}")


def cmd_size(a):
    if a.model:
        if _is_compact(a.model):
            cm = Dep.load_compact(a.model)
            report = cm.size_report()
            extra = [f"overhead_bytes\t{Dep.disk_overhead_bytes(cm)}"]
        else:
            model, _, _, _ = Tr.load_model(a.model)
            md = model.embedder.mode
            report = Dep.model_size_bits(md.kind, md.v, md.m, md.k, md.u,
                                         model.other_param_count(), md.books, md.codes)
            extra = []
    else:
        spec = {}
        if a.config:
            with open(a.config) as fh:
                spec = json.load(fh)
        get = lambda key, default: spec.get(key, default)
        mode = get("mode", a.mode)
        v, m = get("v", a.vocab), get("m", a.dim)
        k, u = get("k", a.clusters), get("u", a.unique)
        books, codes = get("books", a.books), get("codes", a.codes)
        hidden, classes = get("hidden", a.hidden), get("classes", a.classes)
        encoder = get("encoder", a.encoder)
        width = m + 1 if mode == "cae" else m
        o = Dep.other_params(width, hidden, classes, encoder)
        report = Dep.model_size_bits(mode, v, m, k, u, o, books, codes)
        extra = [f"other_params\t{o}"]
    for line in report.lines() + extra:
        print(line)


def cmd_infer(a):
    cm = Dep.load_compact(a.model)
    if a.text is not None:
        texts = [a.text]
    else:
        with open(a.file, encoding="utf-8") as fh:
            texts = [line.rstrip("\n") for line in fh]
    labels, probs = Dep.infer_batch(cm, texts)
    for lab, p in zip(labels, probs):
        print(f"{int(lab)}\t" + " ".join(f"{x:.6f}" for x in p))


def _load_any(path):
    """(model, vocab, tokenizer, max_len) from a compact file or a checkpoint."""
    if _is_compact(path):
        cm = Dep.load_compact(path)
        return cm, cm.vocab(), cm.tokenizer, cm.max_len
    model, config, vocab, _ = Tr.load_model(path)
    return model, vocab, config.tokenizer, config.max_len


def cmd_clusters(a):
    model, vocab, _, _ = _load_any(a.model)
    report = A.dump_clusters(model, vocab, book=a.book)
    print("cluster\tsize\twords")
    for line in report.lines(a.top):
        print(line)


def cmd_hidden(a):
    model, vocab, tokenizer, max_len = _load_any(a.model)
    raw = D.load_dataset(a.data, a.classes)
    toks = D.tokenize_dataset(raw, tokenizer)
    ds = D.encode_dataset(toks, raw.labels, vocab, raw.num_classes, max_len)
    pts = A.export_hidden_states(model, ds)
    A.write_points(a.out, pts)
    print(f"points\t{len(pts.points)}\tarea_ratio\t{A.area_ratio(pts.points).ratio:.4f}")


def cmd_area(a):
    pts = A.read_points(a.points)
    r = A.area_ratio(pts.points, a.grid)
    print(f"grid\t{r.grid}\toccupied\t{r.occupied}\tratio\t{r.ratio:.6f}")


def cmd_curves(a):
    rows = A.emit_curves(Tr.read_results(a.sweep), accuracy=a.accuracy)
    A.write_curves(a.out, rows)
    print(f"rows\t{len(rows)}")


def cmd_encode(a):
    max_len = -1 if a.max_len is None else (a.max_len or None)
    raw = D.load_dataset(a.dataset, a.classes)
    reviews = Path(a.dataset).is_dir()
    tokenizer = a.tokenizer or ("simple" if reviews else "regex")
    if max_len == -1:
        max_len = D.IMDB_MAX_LEN if reviews else D.DEFAULT_MAX_LEN
    toks = D.tokenize_dataset(raw, tokenizer)
    vocab = D.build_vocab(toks, a.vocab)
    ds = D.encode_dataset(toks, raw.labels, vocab, raw.num_classes, max_len, raw.name)
    D.save_encoded(a.out, ds, vocab, tokenizer)
    print(f"examples\t{len(ds)}\tvocab\t{vocab.v}")


def _int_list(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clusteremb", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    _add_mode_args(p)
    _add_train_args(p)
    p.add_argument("--out", help="write the trained model checkpoint here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train a grid of configs, append rows to a results CSV")
    p.add_argument("--grid", required=True, help="JSON grid file")
    p.add_argument("--out", required=True, help="results CSV (resumable)")
    p.add_argument("--dataset", required=True)
    p.add_argument("--test")
    p.add_argument("--classes", type=int)
    p.add_argument("--dev-size", type=int)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--tokenizer", choices=["regex", "simple"])
    p.add_argument("--max-len", type=int)
    p.add_argument("--seeds", help="comma-separated seeds; each config runs once per seed")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fractions", help="train on stratified fractions of the training set")
    _add_mode_args(p)
    _add_train_args(p)
    p.add_argument("--list", default="0.1,0.25,0.5,1.0")
    p.add_argument("--out", help="results CSV")
    p.set_defaults(func=cmd_fractions)

    p = sub.add_parser("finalize", help="convert a checkpoint into a compact model")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finalize)

    p = sub.add_parser("size", help="print the model-size report")
    p.add_argument("--config", help="JSON with mode, v, m, k, u, books, codes, hidden, classes")
    p.add_argument("--model", help="compact model or checkpoint")
    _add_mode_args(p)
    p.add_argument("--hidden", type=int, default=50)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--encoder", choices=["lstm", "rnn"], default="lstm")
    p.set_defaults(func=cmd_size)

    p = sub.add_parser("infer", help="classify text with a compact model")
    p.add_argument("--model", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--text")
    g.add_argument("--file", help="one text per line")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("clusters", help="dump learned word clusters")
    p.add_argument("--model", required=True)
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--book", type=int, default=0, help="codebook to report (CC)")
    p.set_defaults(func=cmd_clusters)

    p = sub.add_parser("hidden", help="export final RNN hidden states (H=2) as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--classes", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_hidden)

    p = sub.add_parser("area", help="area ratio of hidden-state points")
    p.add_argument("--points", required=True)
    p.add_argument("--grid", type=int, default=100)
    p.set_defaults(func=cmd_area)

    p = sub.add_parser("curves", help="accuracy-vs-size curve data from a results CSV")
    p.add_argument("--sweep", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--accuracy", choices=["dev_acc", "test_acc"], default="dev_acc")
    p.set_defaults(func=cmd_curves)

    p = sub.add_parser("encode", help="tokenize and encode a dataset into a cache file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--vocab", type=int, default=3000)
    p.add_argument("--classes", type=int)
    p.add_argument("--tokenizer", choices=["regex", "simple"])
    p.add_argument("--max-len", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (D.DataError, Dep.FormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
