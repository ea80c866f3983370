import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp
from numpy.testing import assert_allclose, assert_array_equal

from clusteremb import embedders as E
from clusteremb import tensor as T
from clusteremb.embedders import EmbedMode, Embedder
from clusteremb.tensor import Tensor

logit_rows = hnp.arrays(np.float64, (3, 4), elements=st.floats(-4, 4, allow_nan=False))


class OneHotNoise:
    """Noise so large on chosen columns that the softmax is numerically one-hot."""

    def __init__(self, cols):
        self.cols = cols

    def gumbel(self, shape):
        g = np.full(shape, -1e4)
        flat = g.reshape(-1, shape[-1])
        flat[np.arange(len(flat)), np.resize(self.cols, len(flat))] = 0.0
        return g


def make(kind, v=7, m=3, k=4, u=0, books=1, codes=2, seed=0):
    return Embedder.init(EmbedMode(kind, v=v, m=m, k=k, u=u, books=books, codes=codes), T.Rng(seed))


class TestGumbelSoftmax:
    def test_single_cluster(self):
        t = E.gumbel_softmax(Tensor(np.array([[3.7]])), np.array([[-1.2]]), 0.9)
        assert_array_equal(t.data, [[1.0]])

    def test_symmetric(self):
        t = E.gumbel_softmax(Tensor(np.zeros(2)), np.zeros(2), 0.9)
        assert_allclose(t.data, [0.5, 0.5])

    def test_value(self):
        with T.precision(np.float64):
            t = E.gumbel_softmax(Tensor(np.array([1.0, 0.0])), np.zeros(2), 0.9)
        assert_allclose(t.data[0], 1 / (1 + math.exp(-1 / 0.9)), rtol=1e-14)
        assert abs(t.data[0] - 0.7523) < 1e-4

    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            E.gumbel_softmax(Tensor(np.zeros(2)), np.zeros(2), 0.0)

    @settings(max_examples=80, deadline=None)
    @given(logit_rows, logit_rows, st.floats(0.05, 5.0))
    def test_simplex(self, a, g, tau):
        with T.precision(np.float64):
            t = E.gumbel_softmax(Tensor(a), g, tau).data
        assert np.all(t >= 0)
        assert_allclose(t.sum(axis=-1), 1.0, atol=1e-5)

    @settings(max_examples=80, deadline=None)
    @given(logit_rows, logit_rows)
    def test_low_temperature_is_one_hot(self, a, g):
        z = a + g
        top2 = np.sort(z, axis=-1)[:, -2:]
        if np.any(top2[:, 1] - top2[:, 0] < 0.05):
            return
        with T.precision(np.float64):
            t = E.gumbel_softmax(Tensor(a), g, 1e-3).data
        assert np.all(t.max(axis=-1) > 0.999)
        assert_array_equal(t.argmax(axis=-1), z.argmax(axis=-1))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        g, w = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        with T.precision(np.float64):
            a = Tensor.param(rng.normal(size=(2, 3)))
            err = T.gradient_check(lambda: T.total(T.mul(E.gumbel_softmax(a, g, 0.9), Tensor(w))), [a])
        assert err < 1e-3


class TestParamCounts:
    @pytest.mark.parametrize("mode, expected", [
        (EmbedMode("ce", v=3000, m=5, k=50), (250, 3000, 6)),
        (EmbedMode("se", v=3000, m=8), (24000, 0, 0)),
        (EmbedMode("cae", v=3000, m=5, k=50), (3250, 3000, 6)),
        (EmbedMode("me", v=3000, m=5, k=50, u=300), (1750, 2700, 6)),
        (EmbedMode("cc", v=100, m=4, books=3, codes=8), (96, 300, 3)),
        (EmbedMode("ce", v=10, m=2, k=1), (2, 10, 0)),
    ])
    def test_examples(self, mode, expected):
        assert E.param_counts(mode) == expected

    @pytest.mark.parametrize("k, bits", [(1, 0), (2, 1), (3, 2), (4, 2), (5, 3), (50, 6), (256, 8), (257, 9)])
    def test_pointer_bits(self, k, bits):
        assert E.pointer_bits(k) == bits
        assert bits == (math.ceil(math.log2(k)) if k > 1 else 0)

    def test_size_check(self):
        assert E.size_check(EmbedMode("ce", v=3000, m=5, k=2))
        assert not E.size_check(EmbedMode("ce", v=3000, m=5, k=5))

    @pytest.mark.parametrize("kwargs", [
        dict(kind="xe", v=3, m=1), dict(kind="ce", v=3, m=0), dict(kind="ce", v=3, m=1, k=0),
        dict(kind="me", v=3, m=1, u=4),
    ])
    def test_invalid_modes(self, kwargs):
        with pytest.raises(ValueError):
            EmbedMode(**kwargs)

    def test_width(self):
        assert EmbedMode("cae", v=3, m=4).width == 5
        assert EmbedMode("me", v=3, m=4, u=1).width == 4


class TestTraining:
    def test_ce_one_cluster(self):
        emb = make("ce", k=1)
        out = emb.embed_train(np.array([[1, 2, 3]]), T.Rng(0), 0.9).data
        assert_allclose(out, np.broadcast_to(emb.params["clusters"].data[0], out.shape))

    def test_ce_one_hot_selects_row(self):
        emb = make("ce", k=4)
        out = emb.embed_train(np.array([1, 2]), OneHotNoise([2, 3]), 0.9).data
        assert_allclose(out, emb.params["clusters"].data[[2, 3]], atol=1e-6)

    def test_cc_sums_codebooks(self):
        emb = make("cc", books=2, codes=3)
        out = emb.embed_train(np.array([4]), OneHotNoise([1, 2]), 0.9).data
        cb = emb.params["codebooks"].data.reshape(2, 3, -1)
        assert_allclose(out[0], cb[0, 1] + cb[1, 2], atol=1e-6)

    def test_cae_appends_scalar(self):
        emb = make("cae", k=3)
        out = emb.embed_train(np.array([5]), OneHotNoise([0]), 0.9).data
        assert out.shape == (1, 4)
        assert_allclose(out[0, :3], emb.params["clusters"].data[0], atol=1e-6)
        assert out[0, 3] == emb.params["scalars"].data[4, 0]

    def test_me_unique_rows(self):
        emb = make("me", k=2, u=2)
        out = emb.embed_train(np.array([2, 3]), T.Rng(0), 0.9).data
        assert_allclose(out, emb.params["unique"].data)

    def test_pad_is_zero(self):
        for kind in E.MODES:
            emb = make(kind, u=2 if kind == "me" else 0)
            out = emb.embed_train(np.array([[3, 0, 0]]), T.Rng(0), 0.9).data
            assert_array_equal(out[0, 1:], 0.0)

    def test_fresh_noise_per_occurrence(self):
        emb = make("ce", k=4)
        out = emb.embed_train(np.array([3, 3]), T.Rng(1), 0.9).data
        assert not np.allclose(out[0], out[1])

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            make("se").embed_train(np.array([8]), T.Rng(0), 0.9)

    def test_init_distributions(self):
        emb = make("ce", v=500, m=8, k=50)
        logits = emb.params["logits"].data
        assert logits.shape == (500, 50)
        assert abs(logits.std() - E.LOGIT_STD) < 0.005
        assert np.abs(emb.params["clusters"].data).max() <= E.INIT_RANGE


class TestEvaluation:
    def set_logits(self, emb, a):
        emb.params["logits"].data[...] = a

    def test_hard_assignments(self):
        emb = make("ce", v=3, k=2)
        self.set_logits(emb, [[1, 0], [0, 1], [2, 0]])
        assert_array_equal(emb.hard_assignments(), [0, 1, 0])
        self.set_logits(emb, np.zeros((3, 2)))
        assert_array_equal(emb.hard_assignments(), [0, 0, 0])

    def test_argmax_and_tie(self):
        emb = make("ce", v=2, k=3)
        self.set_logits(emb, [[0.2, 0.9, 0.1], [0.5, 0.5, 0.0]])
        w = emb.params["clusters"].data
        assert_array_equal(emb.embed_eval(np.array([1, 2])), w[[1, 0]])

    def test_se_has_no_clusters(self):
        with pytest.raises(ValueError):
            make("se").hard_assignments()

    def test_me_unique_ignore_logits(self):
        emb = make("me", v=6, k=2, u=2)
        assert emb.hard_assignments().shape == (4,)
        assert_array_equal(emb.embed_eval(np.array([2, 3])), emb.params["unique"].data)

    def test_cc_shape(self):
        emb = make("cc", v=5, books=3, codes=4)
        assert emb.hard_assignments().shape == (3, 5)

    def test_exactly_k_distinct_vectors(self):
        emb = make("ce", v=200, k=5)
        self.set_logits(emb, np.eye(5)[np.arange(200) % 5])
        table = emb.eval_table()[1:]
        assert len(np.unique(table, axis=0)) == 5

    def test_pointer_table_reproduces_eval(self):
        emb = make("ce", v=30, k=6, seed=3)
        ptr = emb.hard_assignments()
        w = emb.params["clusters"].data
        ids = np.arange(1, 31)
        assert_array_equal(emb.embed_eval(ids), w[ptr])

    def test_eval_table_pad_row(self):
        for kind in E.MODES:
            table = make(kind, u=2 if kind == "me" else 0).eval_table()
            assert table.shape[0] == 8
            assert_array_equal(table[0], 0.0)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-10, 10), st.floats(0.1, 3.0), st.sampled_from([np.exp, np.cbrt, np.arctan]))
    def test_argmax_invariance(self, shift, scale, fn):
        with T.precision(np.float64):
            emb = make("ce", seed=2)
        base = emb.embed_eval(np.arange(1, 8)).copy()
        a = emb.params["logits"].data
        a[...] = fn(scale * a) + shift
        assert_array_equal(emb.embed_eval(np.arange(1, 8)), base)

    def test_soft_path_is_deterministic(self):
        emb = make("cae")
        ids = np.array([[1, 2, 3]])
        assert_array_equal(emb.embed_soft(ids, 0.9), emb.embed_soft(ids, 0.9))
