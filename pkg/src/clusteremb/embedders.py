"""Word-embedding parameterizations: SE, CE, CAE, ME and CC.

Embedding rows cover the ``v`` non-PAD ids (UNK plus the corpus words);
id ``i`` uses row ``i - 1``. PAD embeds to a frozen zero vector.

Training draws a Gumbel-Softmax sample per token occurrence and mixes
cluster rows with the soft weights. Evaluation replaces the sample with
``one_hot(argmax)``; ties go to the lowest cluster index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import PAD
from .tensor import Rng, Tensor

MODES = ("se", "ce", "cae", "me", "cc")

INIT_RANGE = 0.08
LOGIT_STD = 0.1


@dataclass(frozen=True)
class EmbedMode:
    """Mode tag plus the size parameters that fully determine parameter shapes.

    ``v`` counts embedded word types; for a trained model this is the
    vocabulary size plus one for UNK.
    """

    kind: str
    v: int
    m: int
    k: int = 1
    u: int = 0
    books: int = 1
    codes: int = 2

    def __post_init__(self):
        if self.kind not in MODES:
            raise ValueError(f"unknown mode {self.kind!r}; expected one of {MODES}")
        if self.m < 1 or self.v < 1:
            raise ValueError("v and m must be >= 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0 <= self.u <= self.v:
            raise ValueError(f"u must be in [0, v], got u={self.u}, v={self.v}")
        if self.kind == "cc" and (self.books < 1 or self.codes < 1):
            raise ValueError("cc needs books >= 1 and codes >= 1")

    @property
    def width(self) -> int:
        return self.m + 1 if self.kind == "cae" else self.m

    @property
    def clustered(self) -> bool:
        return self.kind != "se"


def pointer_bits(k: int) -> int:
    """``ceil(log2 k)``, computed on integers."""
    return (k - 1).bit_length() if k > 1 else 0


def param_counts(mode: EmbedMode) -> tuple[int, int, int]:
    """Deployed (32-bit embedding params, pointer entries, bits per pointer)."""
    v, m, k, u = mode.v, mode.m, mode.k, mode.u
    b = pointer_bits(k)
    if mode.kind == "se":
        return v * m, 0, 0
    if mode.kind == "ce":
        return k * m, v, b
    if mode.kind == "cae":
        return k * m + v, v, b
    if mode.kind == "me":
        return u * m + k * m, v - u, b
    return mode.books * mode.codes * m, v * mode.books, pointer_bits(mode.codes)


def training_param_count(mode: EmbedMode) -> int:
    """Parameters learned during training (logits included)."""
    v, m, k, u = mode.v, mode.m, mode.k, mode.u
    if mode.kind == "se":
        return v * m
    if mode.kind == "ce":
        return v * k + k * m
    if mode.kind == "cae":
        return v * k + k * m + v
    if mode.kind == "me":
        return (v - u) * k + k * m + u * m
    return mode.books * (v * mode.codes + mode.codes * mode.m)


def gumbel_softmax(logits: Tensor, noise: np.ndarray, tau: float) -> Tensor:
    """``softmax((a + g) / tau)`` over the last axis, differentiable in ``a``."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = T.add(logits, T.Tensor(noise, dtype=logits.dtype))
    return T.softmax(T.scale(z, 1.0 / tau))


def argmax_lowest(a: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ``np.argmax`` already returns the first maximum."""
    return np.argmax(a, axis=-1)


class Embedder:
    """Parameters and lookup for one :class:`EmbedMode`.

    ``params`` maps names to tensors: ``table`` (SE), ``logits`` and
    ``clusters`` (CE/CAE/ME), ``scalars`` (CAE), ``unique`` (ME),
    ``logits`` of shape (rows, books, codes) and ``codebooks`` (CC).
    ``unique_ids`` lists the word ids with their own rows (ME).
    """

    def __init__(self, mode: EmbedMode, params: dict[str, Tensor], unique_ids=None):
        self.mode = mode
        self.params = params
        n_ids = mode.v + 1
        if mode.kind == "me":
            if unique_ids is None:
                unique_ids = np.arange(2, 2 + mode.u)
            self.unique_ids = np.asarray(unique_ids, dtype=np.int64)
            if len(self.unique_ids) != mode.u:
                raise ValueError("unique_ids length must equal u")
            self.unique_row = np.full(n_ids, -1, dtype=np.int64)
            self.unique_row[self.unique_ids] = np.arange(mode.u)
            clustered = np.flatnonzero(self.unique_row[1:] < 0) + 1
            self.cluster_row = np.full(n_ids, -1, dtype=np.int64)
            self.cluster_row[clustered] = np.arange(len(clustered))
        else:
            self.unique_ids = np.zeros(0, dtype=np.int64)
            self.unique_row = None
            self.cluster_row = np.arange(-1, n_ids - 1, dtype=np.int64)
        self._check_shapes()

    @classmethod
    def init(cls, mode: EmbedMode, rng: Rng, unique_ids=None) -> "Embedder":
        rows = mode.v
        m, k = mode.m, mode.k

        def uni(*shape):
            return T.Tensor.param(rng.uniform(shape, -INIT_RANGE, INIT_RANGE))

        def logit(*shape):
            return T.Tensor.param(rng.normal(shape, LOGIT_STD))

        if mode.kind == "se":
            params = {"table": uni(rows, m)}
        elif mode.kind == "ce":
            params = {"logits": logit(rows, k), "clusters": uni(k, m)}
        elif mode.kind == "cae":
            params = {"logits": logit(rows, k), "clusters": uni(k, m), "scalars": uni(rows, 1)}
        elif mode.kind == "me":
            params = {"logits": logit(rows - mode.u, k), "clusters": uni(k, m),
                      "unique": uni(mode.u, m)}
        else:
            params = {"logits": logit(rows, mode.books, mode.codes),
                      "codebooks": uni(mode.books * mode.codes, m)}
        return cls(mode, params, unique_ids)

    def _check_shapes(self):
        md, p = self.mode, self.params
        rows, m, k = md.v, md.m, md.k
        want = {
            "se": {"table": (rows, m)},
            "ce": {"logits": (rows, k), "clusters": (k, m)},
            "cae": {"logits": (rows, k), "clusters": (k, m), "scalars": (rows, 1)},
            "me": {"logits": (rows - md.u, k), "clusters": (k, m), "unique": (md.u, m)},
            "cc": {"logits": (rows, md.books, md.codes), "codebooks": (md.books * md.codes, m)},
        }[md.kind]
        for name, shape in want.items():
            if name not in p or p[name].shape != shape:
                got = p[name].shape if name in p else None
                raise T.DimensionError(f"{md.kind}: parameter {name} should be {shape}, got {got}")

    def parameters(self) -> list[Tensor]:
        return [self.params[n] for n in sorted(self.params)]

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def _check_ids(self, ids: np.ndarray):
        if ids.size and (ids.min() < 0 or ids.max() > self.mode.v):
            raise IndexError(f"word id out of range [0, {self.mode.v}]")

    # ----------------------------------------------------------- training

    def embed_train(self, ids, rng, tau: float) -> Tensor:
        """Soft embeddings (..., width) with fresh Gumbel noise per occurrence.

        ``rng`` needs a ``gumbel(shape)`` method (:class:`Rng` or
        :class:`~clusteremb.tensor.ReplayRng`).
        """
        ids = np.asarray(ids, dtype=np.int64)
        self._check_ids(ids)
        keep = (ids != PAD)[..., None]
        kind = self.mode.kind
        p = self.params
        if kind == "se":
            out = T.gather(p["table"], np.maximum(ids - 1, 0))
        elif kind == "cc":
            rows = T.gather(p["logits"], np.maximum(ids - 1, 0))
            t = gumbel_softmax(rows, rng.gumbel(rows.shape), tau)
            flat = T.reshape(t, ids.shape + (self.mode.books * self.mode.codes,))
            out = T.matmul(flat, p["codebooks"])
        else:
            crow = np.maximum(self.cluster_row[ids], 0)
            rows = T.gather(p["logits"], crow)
            t = gumbel_softmax(rows, rng.gumbel(rows.shape), tau)
            out = T.matmul(t, p["clusters"])
            if kind == "cae":
                out = T.concat([out, T.gather(p["scalars"], np.maximum(ids - 1, 0))], axis=-1)
            elif kind == "me":
                is_unique = self.unique_row[ids] >= 0
                uniq = T.gather(p["unique"], np.maximum(self.unique_row[ids], 0))
                out = T.where(is_unique[..., None], uniq, out)
        return T.where(keep, out, T.Tensor(np.zeros((), dtype=out.dtype)))

    def embed_soft(self, ids, tau: float) -> np.ndarray:
        """Noise-free relaxed embeddings ``W^T softmax(a / tau)``; diagnostics only."""
        ids = np.asarray(ids, dtype=np.int64)

        class _Zero:
            @staticmethod
            def gumbel(shape):
                return np.zeros(shape)

        with T.no_grad():
            return self.embed_train(ids, _Zero(), tau).data

    # --------------------------------------------------------- evaluation

    def hard_assignments(self) -> np.ndarray:
        """Pointer table: one cluster index per clustered row.

        CE/CAE: length ``v`` in id order. ME: the ``v - u`` clustered ids in
        id order. CC: shape (books, v), book-major.
        """
        kind = self.mode.kind
        if kind == "se":
            raise ValueError("SE has no clusters")
        a = self.params["logits"].data
        if kind == "cc":
            return argmax_lowest(a).T.copy()
        return argmax_lowest(a)

    def eval_table(self) -> np.ndarray:
        """Per-id evaluation embeddings, shape (v + 1, width); row 0 is PAD."""
        return eval_table_from_parts(self.mode, self._eval_parts(), self.unique_ids)

    def _eval_parts(self) -> dict[str, np.ndarray]:
        p = {n: t.data for n, t in self.params.items()}
        if self.mode.kind != "se":
            p["pointers"] = self.hard_assignments()
            p.pop("logits")
        return p

    def embed_eval(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        self._check_ids(ids)
        return self.eval_table()[ids]


def eval_table_from_parts(mode: EmbedMode, parts: dict[str, np.ndarray],
                          unique_ids: np.ndarray | None = None) -> np.ndarray:
    """Build the per-id embedding table from pointers and matrices.

    Shared by trained embedders and deserialized compact models so both
    produce bit-identical embeddings.
    """
    kind = mode.kind
    rows = mode.v
    if kind == "se":
        body = parts["table"]
    elif kind == "cc":
        cb = parts["codebooks"].reshape(mode.books, mode.codes, mode.m)
        ptr = np.asarray(parts["pointers"]).reshape(mode.books, rows)
        body = np.zeros((rows, mode.m), dtype=cb.dtype)
        for b in range(mode.books):
            body = body + cb[b][ptr[b]]
    else:
        clusters = parts["clusters"]
        ptr = np.asarray(parts["pointers"], dtype=np.int64)
        if kind == "me":
            body = np.empty((rows, mode.m), dtype=clusters.dtype)
            unique_ids = np.asarray(unique_ids, dtype=np.int64)
            is_unique = np.zeros(rows + 1, dtype=bool)
            is_unique[unique_ids] = True
            clustered = np.flatnonzero(~is_unique[1:]) + 1
            body[unique_ids - 1] = parts["unique"]
            body[clustered - 1] = clusters[ptr]
        else:
            body = clusters[ptr]
            if kind == "cae":
                body = np.concatenate([body, parts["scalars"]], axis=1)
    pad = np.zeros((1, body.shape[1]), dtype=body.dtype)
    return np.concatenate([pad, body], axis=0)


def size_check(mode: EmbedMode) -> bool:
    """Whether soft clustering alone saves parameters: ``vk + km < vm``."""
    return mode.v * mode.k + mode.k * mode.m < mode.v * mode.m
