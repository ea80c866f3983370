"""LSTM and simple-RNN encoders, the softmax head, and the full classifier."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .data import PAD
from .embedders import INIT_RANGE, Embedder
from .tensor import Rng, Tensor

DEFAULT_HIDDEN = 50
EVAL_BATCH = 64
FORGET_BIAS = 1.0


def _uniform(rng: Rng, *shape) -> Tensor:
    return Tensor.param(rng.uniform(shape, -INIT_RANGE, INIT_RANGE))


class LSTMEncoder:
    """Single-layer unidirectional LSTM.

    ``U1`` (4H, d) acts on the input, ``U2`` (4H, H) on the previous hidden
    state; gate blocks are ordered input, forget, output, candidate.
    """

    kind = "lstm"

    def __init__(self, params: dict[str, Tensor]):
        self.params = params
        self.hidden = params["U2"].shape[1]
        self.input_width = params["U1"].shape[1]
        H = self.hidden
        if params["U1"].shape[0] != 4 * H or params["U2"].shape != (4 * H, H) \
                or params["b"].shape != (4 * H,):
            raise T.DimensionError("inconsistent LSTM parameter shapes")

    @classmethod
    def init(cls, d: int, H: int, rng: Rng) -> "LSTMEncoder":
        b = np.zeros(4 * H)
        b[H:2 * H] = FORGET_BIAS
        return cls({"U1": _uniform(rng, 4 * H, d), "U2": _uniform(rng, 4 * H, H),
                    "b": Tensor.param(b)})

    @staticmethod
    def param_count(d: int, H: int) -> int:
        return 4 * (H * (d + H) + H)

    def _cell(self, pre: Tensor, h: Tensor, c: Tensor, keep=None):
        H = self.hidden
        z = T.add(pre, T.affine(h, self.params["U2"]))
        gates = T.sigmoid(T.take(z, (Ellipsis, slice(0, 3 * H))))
        i = T.take(gates, (Ellipsis, slice(0, H)))
        f = T.take(gates, (Ellipsis, slice(H, 2 * H)))
        o = T.take(gates, (Ellipsis, slice(2 * H, 3 * H)))
        g = T.tanh(T.take(z, (Ellipsis, slice(3 * H, 4 * H))))
        c_new = T.add(T.mul(f, c), T.mul(i, g))
        h_new = T.mul(o, T.tanh(c_new))
        if keep is not None:
            h_new = T.where(keep, h_new, h)
            c_new = T.where(keep, c_new, c)
        return h_new, c_new

    def step(self, x: Tensor, h: Tensor, c: Tensor, keep=None):
        """One cell application; rows where ``keep`` is false pass (h, c) through."""
        pre = T.affine(x, self.params["U1"], self.params["b"])
        return self._cell(pre, h, c, keep)

    def encode(self, emb: Tensor, ids: np.ndarray) -> Tensor:
        """Final hidden state after the last non-PAD token of each row."""
        B, L = ids.shape
        if L == 0:
            raise ValueError("cannot encode an empty sequence")
        H = self.hidden
        pre = T.affine(emb, self.params["U1"], self.params["b"])
        zeros = Tensor(np.zeros((B, H), dtype=emb.dtype))
        h, c = zeros, zeros
        keep = (ids != PAD)[..., None]
        for t in range(L):
            k = keep[:, t] if not keep[:, t].all() else None
            h, c = self._cell(T.take(pre, (slice(None), t)), h, c, k)
        return h


class RNNEncoder:
    """Elman RNN ``h' = tanh(Wx x + Wh h + b)``; ``[Wx Wh]`` is the H x (d + H) weight."""

    kind = "rnn"

    def __init__(self, params: dict[str, Tensor]):
        self.params = params
        self.hidden = params["Wh"].shape[0]
        self.input_width = params["Wx"].shape[1]
        H = self.hidden
        if params["Wx"].shape[0] != H or params["Wh"].shape != (H, H) or params["b"].shape != (H,):
            raise T.DimensionError("inconsistent RNN parameter shapes")

    @classmethod
    def init(cls, d: int, H: int, rng: Rng) -> "RNNEncoder":
        return cls({"Wx": _uniform(rng, H, d), "Wh": _uniform(rng, H, H),
                    "b": Tensor.param(np.zeros(H))})

    @staticmethod
    def param_count(d: int, H: int) -> int:
        return H * (d + H) + H

    def step(self, x: Tensor, h: Tensor, keep=None) -> Tensor:
        pre = T.affine(x, self.params["Wx"], self.params["b"])
        return self._cell(pre, h, keep)

    def _cell(self, pre, h, keep=None):
        h_new = T.tanh(T.add(pre, T.affine(h, self.params["Wh"])))
        if keep is not None:
            h_new = T.where(keep, h_new, h)
        return h_new

    def encode(self, emb: Tensor, ids: np.ndarray) -> Tensor:
        B, L = ids.shape
        if L == 0:
            raise ValueError("cannot encode an empty sequence")
        pre = T.affine(emb, self.params["Wx"], self.params["b"])
        h = Tensor(np.zeros((B, self.hidden), dtype=emb.dtype))
        keep = (ids != PAD)[..., None]
        for t in range(L):
            k = keep[:, t] if not keep[:, t].all() else None
            h = self._cell(T.take(pre, (slice(None), t)), h, k)
        return h


ENCODERS = {"lstm": LSTMEncoder, "rnn": RNNEncoder}


def lstm_step(x, h, c, encoder: LSTMEncoder, keep=None):
    return encoder.step(x, h, c, keep)


def rnn_step(x, h, encoder: RNNEncoder, keep=None):
    return encoder.step(x, h, keep)


class ClassifierHead:
    def __init__(self, params: dict[str, Tensor]):
        self.params = params
        self.num_classes, self.hidden = params["W"].shape

    @classmethod
    def init(cls, H: int, C: int, rng: Rng) -> "ClassifierHead":
        return cls({"W": _uniform(rng, C, H), "b": Tensor.param(np.zeros(C))})

    @staticmethod
    def param_count(H: int, C: int) -> int:
        return H * C + C

    def __call__(self, h: Tensor) -> Tensor:
        return T.affine(h, self.params["W"], self.params["b"])


class TextClassifier:
    """Embedder, recurrent encoder and softmax head."""

    def __init__(self, embedder: Embedder, encoder, head: ClassifierHead):
        if encoder.input_width != embedder.mode.width:
            raise T.DimensionError("encoder input width does not match embedding width")
        if head.hidden != encoder.hidden:
            raise T.DimensionError("head width does not match encoder hidden size")
        self.embedder = embedder
        self.encoder = encoder
        self.head = head

    @classmethod
    def init(cls, embedder: Embedder, num_classes: int, hidden: int = DEFAULT_HIDDEN,
             encoder: str = "lstm", rng: Rng | None = None) -> "TextClassifier":
        rng = rng or Rng(0)
        enc = ENCODERS[encoder].init(embedder.mode.width, hidden, rng)
        return cls(embedder, enc, ClassifierHead.init(hidden, num_classes, rng))

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, part in (("emb", self.embedder), ("enc", self.encoder), ("head", self.head)):
            for name in sorted(part.params):
                out[f"{prefix}.{name}"] = part.params[name]
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def other_param_count(self) -> int:
        """Encoder plus head parameters (the size formula's ``o``)."""
        d, H, C = self.embedder.mode.width, self.encoder.hidden, self.num_classes
        return type(self.encoder).param_count(d, H) + ClassifierHead.param_count(H, C)

    def logits_train(self, ids: np.ndarray, rng, tau: float) -> Tensor:
        emb = self.embedder.embed_train(ids, rng, tau)
        return self.head(self.encoder.encode(emb, ids))

    def loss(self, ids: np.ndarray, labels: np.ndarray, rng, tau: float) -> Tensor:
        return T.softmax_cross_entropy(self.logits_train(ids, rng, tau), labels)

    def logits_eval(self, ids: np.ndarray, table: np.ndarray | None = None) -> np.ndarray:
        """Hard-clustering logits; never touches an RNG."""
        if table is None:
            table = self.embedder.eval_table()
        return logits_from_table(table, ids, self.encoder, self.head)

    def logits_soft(self, ids: np.ndarray, tau: float) -> np.ndarray:
        with T.no_grad():
            emb = Tensor(self.embedder.embed_soft(ids, tau))
            return self.head(self.encoder.encode(emb, ids)).data


def logits_from_table(table: np.ndarray, ids: np.ndarray, encoder, head) -> np.ndarray:
    """Evaluation forward pass from a per-id embedding table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("word id out of range")
    with T.no_grad():
        emb = Tensor(table[ids], dtype=table.dtype)
        return head(encoder.encode(emb, ids)).data


def predict_logits(logits: np.ndarray) -> np.ndarray:
    return np.argmax(logits, axis=-1)
