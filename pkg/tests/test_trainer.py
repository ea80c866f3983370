import csv
import json
from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from clusteremb import data as D
from clusteremb import deployment as Dep
from clusteremb import trainer as Tr

MODES = [("se", {}), ("ce", {"k": 4}), ("cae", {"k": 4}), ("me", {"k": 4, "u": 5}),
         ("cc", {"books": 2, "codes": 4})]


def small(mode="se", **kw):
    base = dict(mode=mode, v=60, m=4, hidden=8, lr=0.01, max_epochs=4, patience=4)
    base.update(kw)
    return Tr.TrainConfig(**base)


@pytest.fixture(scope="module")
def big_corpus():
    raw = D.synthetic_topics(1060, 2, seed=3)
    train_raw, dev_raw = D.split_dev(raw, 60, 0)
    return Tr.corpus_from_raw(train_raw, dev_raw)


class TestConfig:
    def test_defaults(self):
        c = Tr.TrainConfig()
        assert (c.tau, c.hidden, c.lr, c.batch_size, c.max_epochs, c.patience) == (0.9, 50, 0.001, 32, 20, 3)
        assert c.clip_norm is None

    @pytest.mark.parametrize("kw", [{"tau": 0}, {"fraction": 0}, {"batch_size": 0},
                                    {"encoder": "gru"}, {"mode": "ce", "k": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            Tr.TrainConfig(**kw)

    def test_dict_roundtrip(self):
        c = small("me", k=3, u=2, seed=5)
        assert Tr.TrainConfig.from_dict(c.to_dict()) == c
        with pytest.raises(ValueError):
            Tr.TrainConfig.from_dict({"bogus": 1})

    def test_embed_mode_adds_unk_row(self):
        assert small().embed_mode(60).v == 61


class TestTrain:
    def test_single_class(self):
        raw = D.RawDataset([(0, f"a b c{i % 3}") for i in range(40)], 2)
        corpus = Tr.corpus_from_raw(*D.split_dev(raw, 8, 0))
        vocab, train_ds, _, _ = corpus.encode(10)
        result = Tr.train(small(max_epochs=5), train_ds, train_ds, vocab.v)
        assert Tr.evaluate(result.model, train_ds) == 1.0

    def test_separable(self):
        raw = D.synthetic_topics(260, 2, seed=3)
        corpus = Tr.corpus_from_raw(*D.split_dev(raw, 60, 0))
        config = Tr.TrainConfig(mode="se", v=100, m=4, hidden=16, lr=0.01, max_epochs=20, patience=20)
        rec, result, _ = Tr.run_config(config, corpus)
        assert result.best_dev_acc >= 0.95

    @pytest.mark.parametrize("mode, kw", MODES)
    def test_loss_decreases(self, big_corpus, mode, kw):
        config = Tr.TrainConfig(mode=mode, v=100, m=4, hidden=16, lr=0.005, max_epochs=3,
                                patience=5, **kw)
        _, result, _ = Tr.run_config(config, big_corpus)
        loss = result.train_loss
        assert loss[0] > loss[1] > loss[2]

    def test_best_epoch_selection(self, toy_corpus):
        _, result, _ = Tr.run_config(small("ce", k=3, max_epochs=6, patience=6), toy_corpus)
        assert result.best_dev_acc == max(result.dev_acc)
        assert result.dev_acc[result.best_epoch] == result.best_dev_acc
        _, _, dev_ds, _ = toy_corpus.encode(60)
        assert Tr.evaluate(result.model, dev_ds) == result.best_dev_acc

    def test_patience(self, toy_corpus):
        vocab, train_ds, dev_ds, _ = toy_corpus.encode(60)
        one_class_dev = dev_ds.subset([i for i in range(len(dev_ds)) if dev_ds.labels[i] == 0][:5])
        result = Tr.train(small(max_epochs=20, patience=2), train_ds, one_class_dev, vocab.v)
        assert len(result.dev_acc) <= result.best_epoch + 1 + 2
        assert len(result.dev_acc) < 20

    def test_deterministic(self, toy_corpus):
        a = Tr.run_config(small("ce", k=3, seed=4), toy_corpus)[1]
        b = Tr.run_config(small("ce", k=3, seed=4), toy_corpus)[1]
        assert a.history() == b.history()
        for name in a.params:
            assert_array_equal(a.params[name], b.params[name])
        c = Tr.run_config(small("ce", k=3, seed=5), toy_corpus)[1]
        assert a.train_loss != c.train_loss

    def test_empty_train(self, toy_corpus):
        vocab, train_ds, dev_ds, _ = toy_corpus.encode(60)
        with pytest.raises(D.DataError):
            Tr.train(small(), train_ds.subset([]), dev_ds, vocab.v)

    def test_divergence(self, toy_corpus):
        vocab, train_ds, dev_ds, _ = toy_corpus.encode(60)
        with pytest.raises(Tr.TrainingDiverged):
            Tr.train(small(lr=float("nan")), train_ds, dev_ds, vocab.v)


class TestEvaluate:
    def test_constant_predictor(self, toy_corpus):
        vocab, train_ds, dev_ds, _ = toy_corpus.encode(60)
        model = Tr.build_model(small(), vocab.v, 2, Tr.T.Rng(0))
        for p in model.head.params.values():
            p.data[...] = 0
        balanced = dev_ds.subset(np.concatenate([np.flatnonzero(dev_ds.labels == c)[:10] for c in (0, 1)]))
        assert Tr.evaluate(model, balanced) == 0.5

    def test_repeatable_and_rng_free(self, toy_corpus):
        vocab, _, dev_ds, _ = toy_corpus.encode(60)
        model = Tr.build_model(small("ce", k=3), vocab.v, 2, Tr.T.Rng(1))
        state = np.random.get_state()
        a = Tr.evaluate(model, dev_ds)
        assert Tr.evaluate(model, dev_ds) == a
        assert np.random.get_state()[1].tolist() == state[1].tolist()

    def test_soft_path(self, toy_corpus):
        vocab, _, dev_ds, _ = toy_corpus.encode(60)
        model = Tr.build_model(small("ce", k=3), vocab.v, 2, Tr.T.Rng(1))
        assert 0.0 <= Tr.evaluate(model, dev_ds, path="soft") <= 1.0
        with pytest.raises(ValueError):
            Tr.evaluate(model, dev_ds, path="fuzzy")


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, toy_corpus):
        rec, result, vocab = Tr.run_config(small("cae", k=3, max_epochs=1), toy_corpus)
        Tr.save_model(tmp_path / "m.npz", result.model, result.config, vocab)
        model, config, vocab2, _ = Tr.load_model(tmp_path / "m.npz")
        assert config == result.config and vocab2.words == vocab.words
        _, _, dev_ds, _ = toy_corpus.encode(60)
        assert Tr.evaluate(model, dev_ds) == rec.dev_acc


class TestSweep:
    def test_grid_expansion(self):
        spec = {"base": {"v": 60, "hidden": 8},
                "grid": [{"mode": ["se"], "m": [1, 2]}, {"mode": ["ce"], "k": [2, 4], "m": [3]}],
                "runs": [{"mode": "me", "k": 2, "u": 3}]}
        configs = Tr.expand_grid(spec)
        assert len(configs) == 5
        assert all(c.v == 60 for c in configs)

    def test_single_record(self, toy_corpus):
        records = Tr.sweep([small(max_epochs=1)], toy_corpus)
        assert len(records) == 1
        r = records[0]
        assert r.size_bits > 0 and 0 <= r.dev_acc <= 1 and 0 <= r.test_acc <= 1

    def test_empty_grid(self, toy_corpus):
        with pytest.raises(ValueError):
            Tr.sweep([], toy_corpus)

    def test_size_matches_deployment(self, toy_corpus):
        config = small("ce", k=3, max_epochs=1)
        rec, result, vocab = Tr.run_config(config, toy_corpus)
        cm = Dep.finalize(result.model, vocab)
        assert rec.size_bits == cm.size_report().total_bits

    def test_resumable_and_sorted(self, tmp_path, toy_corpus):
        out = tmp_path / "res.csv"
        configs = [small("se", m=4, max_epochs=1), small("ce", k=2, m=2, max_epochs=1)]
        Tr.sweep(configs[:1], toy_corpus, out)
        records = Tr.sweep(configs, toy_corpus, out)
        assert [r.config.mode for r in records] == ["ce"]
        rows = Tr.read_results(out)
        assert len(rows) == 2
        assert list(rows[0])[:10] == Tr.RESULT_COLUMNS
        assert Tr.sweep(configs, toy_corpus, out) == []

    def test_failure_is_recorded(self, tmp_path, toy_corpus):
        out = tmp_path / "res.csv"
        bad = small("me", v=1000, k=2, u=500, max_epochs=1)  # corpus has far fewer words
        records = Tr.sweep([bad, small(max_epochs=1)], toy_corpus, out)
        assert len(records) == 1
        errors = [json.loads(l) for l in open(f"{out}.errors.jsonl")]
        assert errors[0]["config"]["u"] == 500

    def test_parallel_matches_serial(self, toy_corpus):
        configs = [small("se", m=2, max_epochs=1), small("ce", k=2, max_epochs=1)]
        serial = Tr.sweep(configs, toy_corpus)
        parallel = Tr.sweep(configs, toy_corpus, workers=2)
        assert [r.row() for r in serial] == [r.row() for r in parallel]


CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def config_mb(c: Tr.TrainConfig, classes: int) -> float:
    width = c.m + 1 if c.mode == "cae" else c.m
    o = Dep.other_params(width, c.hidden, classes, c.encoder)
    return Dep.model_size_bits(c.mode, c.embed_mode(c.v).v, c.m, c.k, c.u, o, c.books,
                               c.codes).mb_binary


class TestPublishedGrids:
    @pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.json")), ids=lambda p: p.stem)
    def test_parses(self, path):
        assert Tr.load_grid(path)

    def test_tradeoff_grid_spans_size_range(self):
        sizes = [config_mb(c, 4) for c in Tr.load_grid(CONFIGS / "ag_news_size_tradeoff.json")]
        assert min(sizes) <= 0.01 and 0.5 <= max(sizes) <= 1.0


class TestFractions:
    def test_full_fraction_equals_train(self, toy_corpus):
        config = small(max_epochs=2)
        [rec] = Tr.fraction_experiment(config, toy_corpus, [1.0])
        plain, _, _ = Tr.run_config(config, toy_corpus)
        assert rec.row() == plain.row()

    def test_rows_and_subsample(self, tmp_path, toy_corpus):
        out = tmp_path / "f.csv"
        recs = Tr.fraction_experiment(small(max_epochs=1), toy_corpus, [0.25, 1.0], out)
        assert [r.config.fraction for r in recs] == [0.25, 1.0]
        _, train_ds, dev_ds, _ = toy_corpus.encode(60, 0.25, 0)
        assert len(train_ds) == int(0.25 * len(toy_corpus.train_tokens))
        assert len(dev_ds) == len(toy_corpus.dev_tokens)
        with open(out) as fh:
            assert len(list(csv.DictReader(fh))) == 2

    def test_invalid_fraction(self, toy_corpus):
        with pytest.raises(ValueError):
            Tr.fraction_experiment(small(), toy_corpus, [0.0])
