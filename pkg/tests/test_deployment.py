import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_array_equal

from clusteremb import data as D
from clusteremb import deployment as Dep
from clusteremb import tensor as T
from clusteremb.embedders import EmbedMode, Embedder
from clusteremb.sequence import TextClassifier


def py_pack(values, bits):
    """Reference packer: one integer accumulator, LSB-first."""
    acc = 0
    for i, v in enumerate(values):
        acc |= int(v) << (i * bits)
    n = (len(values) * bits + 7) // 8
    return acc.to_bytes(n, "little")


def toy_model(kind="ce", v_words=6, k=3, u=0, books=1, codes=2, encoder="lstm", seed=0, m=3, H=4):
    words = [f"w{i}" for i in range(v_words)]
    vocab = D.Vocab(words, list(range(v_words, 0, -1)))
    mode = EmbedMode(kind, v=v_words + 1, m=m, k=k, u=u, books=books, codes=codes)
    model = TextClassifier.init(Embedder.init(mode, T.Rng(seed)), 2, H, encoder, T.Rng(seed + 1))
    return model, vocab


class TestSizes:
    def test_reference_rows(self):
        rows = {"se": (8, 1, 0, 0.137), "ce": (5, 50, 0, 0.046), "cae": (5, 50, 0, 0.058),
                "me": (5, 50, 300, 0.051)}
        for kind, (m, k, u, mb) in rows.items():
            o = Dep.other_params(m + (kind == "cae"), 50, 2)
            report = Dep.model_size_bits(kind, 3000, m, k, u, o)
            assert abs(report.mb_binary - mb) <= 0.001, kind

    def test_ce_embedding_bits(self):
        r = Dep.model_size_bits("ce", 3000, 5, 50)
        assert r.embedding_bits == 26_000 and r.embedding_bits // 8 == 3250

    def test_formula_components(self):
        o = Dep.other_params(5, 50, 2)
        assert o == 4 * (50 * 55 + 50) + 50 * 2 + 2
        r = Dep.model_size_bits("me", 3000, 5, 50, 300, o)
        assert r.pointer_bits == 2700 * 6
        assert r.embedding_float_bits == 32 * (300 * 5 + 50 * 5)
        assert r.total_bits == r.embedding_bits + r.other_bits == r.embedding_bits + 32 * o

    def test_cc(self):
        r = Dep.model_size_bits("cc", 100, 4, books=3, codes=8)
        assert r.pointer_bits == 100 * 3 * 3 and r.embedding_float_bits == 32 * 96

    def test_mb_conventions(self):
        r = Dep.SizeReport(0, 8 * 2 ** 20, 0)
        assert r.mb_binary == 1.0 and r.mb_decimal == 2 ** 20 / 10 ** 6

    def test_rnn_other_params(self):
        assert Dep.other_params(2, 2, 4, "rnn") == 2 * 4 + 2 + 2 * 4 + 4


class TestBitPacking:
    def test_known_byte(self):
        assert Dep.pack_bits(np.array([1, 0, 1, 1]), 1) == bytes([0b00001101])
        assert py_pack([1, 0, 1, 1], 1) == bytes([0b00001101])

    def test_zero_bits(self):
        assert Dep.pack_bits(np.zeros(100, dtype=int), 0) == b""
        assert_array_equal(Dep.unpack_bits(b"", 5, 0), np.zeros(5))

    def test_overflow(self):
        with pytest.raises(ValueError):
            Dep.pack_bits(np.array([4]), 2)

    @settings(max_examples=150, deadline=None)
    @given(st.integers(1, 12).flatmap(
        lambda b: st.tuples(st.just(b), st.lists(st.integers(0, 2 ** b - 1), max_size=60))))
    def test_matches_reference_and_roundtrips(self, case):
        bits, values = case
        buf = Dep.pack_bits(np.array(values, dtype=np.int64), bits)
        assert buf == py_pack(values, bits)
        assert len(buf) == Dep.packed_length(len(values), bits)
        assert_array_equal(Dep.unpack_bits(buf, len(values), bits), values)

    def test_truncated(self):
        with pytest.raises(Dep.FormatError):
            Dep.unpack_bits(b"\x00", 9, 1)


class TestFinalize:
    def test_ce_toy(self):
        model, vocab = toy_model("ce", v_words=2, k=2)
        cm = Dep.finalize(model, vocab)
        assert cm.pointers.shape == (3,)
        assert cm.matrix.shape == (2, 3)
        assert not hasattr(cm, "logits")

    def test_me_layout(self):
        model, vocab = toy_model("me", v_words=8, k=3, u=3)
        cm = Dep.finalize(model, vocab)
        assert cm.unique.shape == (3, 3) and cm.pointers.size == 9 - 3
        assert_array_equal(cm.unique_ids, [2, 3, 4])

    @pytest.mark.parametrize("kind, kw", [("se", {}), ("ce", {}), ("cae", {}), ("me", {"u": 2}),
                                          ("cc", {"books": 2, "codes": 4})])
    def test_table_matches_embed_eval(self, kind, kw):
        model, vocab = toy_model(kind, **kw)
        cm = Dep.finalize(model, vocab)
        ids = np.arange(0, 8)
        assert_array_equal(cm.eval_table()[ids], model.embedder.embed_eval(ids))

    def test_vocab_mismatch(self):
        model, _ = toy_model("ce")
        with pytest.raises(ValueError):
            Dep.finalize(model, D.Vocab(["a"], [1]))


class TestSerialization:
    def roundtrip(self, cm):
        buf = Dep.serialize(cm)
        back = Dep.deserialize(buf)
        assert Dep.serialize(back) == buf
        return back, buf

    @pytest.mark.parametrize("kind, kw", [("se", {}), ("ce", {"k": 1}), ("ce", {"k": 5}),
                                          ("cae", {}), ("me", {"u": 2}),
                                          ("cc", {"books": 3, "codes": 5}),
                                          ("ce", {"encoder": "rnn"})])
    def test_roundtrip(self, kind, kw):
        model, vocab = toy_model(kind, **kw)
        cm = Dep.finalize(model, vocab, "simple", 400)
        back, _ = self.roundtrip(cm)
        assert back == cm
        assert back.tokenizer == "simple" and back.max_len == 400 and back.words == cm.words

    def test_deterministic(self):
        model, vocab = toy_model("cae")
        assert Dep.serialize(Dep.finalize(model, vocab)) == Dep.serialize(Dep.finalize(model, vocab))

    def test_pointer_section_size(self):
        model, vocab = toy_model("ce", v_words=20, k=5)
        cm = Dep.finalize(model, vocab)
        header = 4 + 3 + 4 * len(Dep.HEADER_FIELDS)
        buf = Dep.serialize(cm)
        start = header + Dep.packed_length(21, 3)
        assert_array_equal(np.frombuffer(buf[start:start + 4 * cm.matrix.size], "<f4"),
                           cm.matrix.reshape(-1))

    def test_corruption(self):
        model, vocab = toy_model("ce")
        buf = bytearray(Dep.serialize(Dep.finalize(model, vocab)))
        buf[40] ^= 0xFF
        with pytest.raises(Dep.FormatError, match="checksum"):
            Dep.deserialize(bytes(buf))

    def test_truncation(self):
        model, vocab = toy_model("ce")
        buf = Dep.serialize(Dep.finalize(model, vocab))
        for cut in (3, 20, len(buf) - 1):
            with pytest.raises(Dep.FormatError):
                Dep.deserialize(buf[:cut])

    def test_version(self):
        model, vocab = toy_model("ce")
        buf = bytearray(Dep.serialize(Dep.finalize(model, vocab)))
        struct.pack_into("<H", buf, 4, 99)
        with pytest.raises(Dep.FormatError, match="version"):
            Dep.deserialize(bytes(buf))

    def test_bad_magic(self):
        with pytest.raises(Dep.FormatError):
            Dep.deserialize(b"XXXX" + b"\x00" * 80)

    def test_file_roundtrip(self, tmp_path):
        model, vocab = toy_model("me", u=2)
        cm = Dep.finalize(model, vocab)
        n = Dep.save_compact(tmp_path / "m.clem", cm)
        assert n == (tmp_path / "m.clem").stat().st_size
        assert Dep.load_compact(tmp_path / "m.clem") == cm
        assert Dep.disk_overhead_bytes(cm) > 0


class TestInference:
    @pytest.mark.parametrize("kind, kw", [("se", {}), ("ce", {}), ("cae", {}), ("me", {"u": 2}),
                                          ("cc", {"books": 2, "codes": 3})])
    def test_matches_pre_finalization(self, kind, kw):
        model, vocab = toy_model(kind, seed=5, **kw)
        cm = Dep.deserialize(Dep.serialize(Dep.finalize(model, vocab)))
        rng = np.random.default_rng(0)
        seqs = [rng.integers(1, 8, size=n) for n in rng.integers(1, 10, size=30)]
        ref = model.logits_eval(D.pad_batch(seqs))
        assert_array_equal(Dep.infer_ids(cm, seqs, batch_size=30), ref)

    def test_text_inference(self):
        model, vocab = toy_model("ce", seed=2)
        cm = Dep.finalize(model, vocab)
        label, probs = Dep.infer(cm, "w0 w3 unknownword")
        ids = np.array([vocab.encode(["w0", "w3", "unknownword"])])
        assert label == int(np.argmax(model.logits_eval(ids)))
        assert abs(probs.sum() - 1) < 1e-12

    def test_empty_text(self):
        model, vocab = toy_model("ce")
        cm = Dep.finalize(model, vocab)
        label, probs = Dep.infer(cm, "")
        ref = model.logits_eval(np.array([[D.UNK]]))
        assert label == int(np.argmax(ref)) and probs.shape == (2,)
