"""Compact deployed models: finalization, size accounting, binary format, inference.

Binary layout (all integers little-endian)::

    magic      b"CLEM"
    version    u16
    mode       u8      0=SE 1=CE 2=CAE 3=ME 4=CC
    header     12 x u32: v m k u H C books codes encoder tokenizer max_len n_words
    pointers   packed, ceil(n * b / 8) bytes, b = ceil(log2 k) (codes for CC)
    matrix     f32: SE table (v, m) | cluster matrix (k, m) | CC codebooks (books*codes, m)
    extras     CAE scalars (v) f32 | ME unique ids (u) u32 then unique matrix (u, m) f32
    encoder    LSTM U1 (4H, d), U2 (4H, H), b (4H) | RNN Wx (H, d), Wh (H, H), b (H)
    head       W (C, H), b (C)
    vocab      n_words x (u32 byte length, UTF-8 bytes), id order starting at id 2
    crc32      u32 over every preceding byte

Pointer entry ``i`` occupies stream bits ``[i*b, (i+1)*b)``, least
significant bit first; stream bit ``j`` is bit ``j % 8`` of byte ``j // 8``.
``max_len`` 0 means no cap. ``v`` counts embedded rows (UNK plus corpus words).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import data as D
from .embedders import EmbedMode, Embedder, eval_table_from_parts, param_counts, pointer_bits
from .sequence import ENCODERS, EVAL_BATCH, ClassifierHead, TextClassifier, logits_from_table
from .tensor import Tensor, log_softmax_np

MAGIC = b"CLEM"
FORMAT_VERSION = 1
MODE_CODES = {"se": 0, "ce": 1, "cae": 2, "me": 3, "cc": 4}
ENCODER_CODES = {"lstm": 0, "rnn": 1}
TOKENIZER_CODES = {"regex": 0, "simple": 1}
HEADER_FIELDS = ("v", "m", "k", "u", "H", "C", "books", "codes", "encoder", "tokenizer",
                 "max_len", "n_words")

MB_BINARY = 2 ** 20
MB_DECIMAL = 10 ** 6


class FormatError(ValueError):
    """Corrupt, truncated or incompatible compact-model bytes."""


# --------------------------------------------------------------- size math


@dataclass(frozen=True)
class SizeReport:
    pointer_bits: int
    embedding_float_bits: int
    other_bits: int

    @property
    def embedding_bits(self) -> int:
        return self.pointer_bits + self.embedding_float_bits

    @property
    def total_bits(self) -> int:
        return self.embedding_bits + self.other_bits

    @property
    def mb_binary(self) -> float:
        return self.total_bits / 8 / MB_BINARY

    @property
    def mb_decimal(self) -> float:
        return self.total_bits / 8 / MB_DECIMAL

    @property
    def embedding_mb_binary(self) -> float:
        return self.embedding_bits / 8 / MB_BINARY

    @property
    def embedding_mb_decimal(self) -> float:
        return self.embedding_bits / 8 / MB_DECIMAL

    def lines(self) -> list[str]:
        return [
            f"pointer_bits\t{self.pointer_bits}",
            f"embedding_float_bits\t{self.embedding_float_bits}",
            f"embedding_bits\t{self.embedding_bits}",
            f"other_bits\t{self.other_bits}",
            f"total_bits\t{self.total_bits}",
            f"embedding_mb_2^20\t{self.embedding_mb_binary:.3f}",
            f"embedding_mb_10^6\t{self.embedding_mb_decimal:.3f}",
            f"total_mb_2^20\t{self.mb_binary:.3f}",
            f"total_mb_10^6\t{self.mb_decimal:.3f}",
        ]


def other_params(d: int, H: int, C: int, encoder: str = "lstm") -> int:
    """Encoder + softmax-head parameter count."""
    return ENCODERS[encoder].param_count(d, H) + ClassifierHead.param_count(H, C)


def model_size_bits(mode: str, v: int, m: int, k: int = 1, u: int = 0, o: int = 0,
                    books: int = 1, codes: int = 2) -> SizeReport:
    """``pointers * ceil(log2 k) + 32 * (embedding floats + o)``."""
    em = EmbedMode(mode, v=v, m=m, k=k, u=u, books=books, codes=codes)
    floats, entries, bits = param_counts(em)
    return SizeReport(entries * bits, 32 * floats, 32 * o)


# ------------------------------------------------------------ compact model


@dataclass
class CompactModel:
    mode: EmbedMode
    hidden: int
    num_classes: int
    encoder: str
    tokenizer: str
    max_len: int | None
    pointers: np.ndarray
    matrix: np.ndarray
    enc_params: dict[str, np.ndarray]
    head_params: dict[str, np.ndarray]
    words: list[str]
    scalars: np.ndarray | None = None
    unique: np.ndarray | None = None
    unique_ids: np.ndarray | None = None
    _table: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)
    _vocab: D.Vocab | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        md = self.mode
        if md.kind != "se":
            limit = md.codes if md.kind == "cc" else md.k
            if self.pointers.size and int(self.pointers.max()) >= limit:
                raise FormatError(f"pointer entry >= {limit}")
            _, entries, _ = param_counts(md)
            if self.pointers.size != entries:
                raise FormatError(f"expected {entries} pointers, got {self.pointers.size}")
        if len(self.words) + 1 != md.v:
            raise FormatError(f"vocabulary of {len(self.words)} words does not match v={md.v}")

    def __eq__(self, other):
        if not isinstance(other, CompactModel):
            return NotImplemented
        return serialize(self) == serialize(other)

    @property
    def width(self) -> int:
        return self.mode.width

    def vocab(self) -> D.Vocab:
        if self._vocab is None:
            self._vocab = D.Vocab(list(self.words), [0] * len(self.words))
        return self._vocab

    def eval_table(self) -> np.ndarray:
        if self._table is None:
            parts = {"pointers": self.pointers}
            kind = self.mode.kind
            if kind == "se":
                parts["table"] = self.matrix
            elif kind == "cc":
                parts["codebooks"] = self.matrix
            else:
                parts["clusters"] = self.matrix
            if kind == "cae":
                parts["scalars"] = self.scalars.reshape(-1, 1)
            if kind == "me":
                parts["unique"] = self.unique
            self._table = eval_table_from_parts(self.mode, parts, self.unique_ids)
        return self._table

    def encoder_module(self):
        return ENCODERS[self.encoder]({n: Tensor(a, dtype=a.dtype) for n, a in self.enc_params.items()})

    def head_module(self) -> ClassifierHead:
        return ClassifierHead({n: Tensor(a, dtype=a.dtype) for n, a in self.head_params.items()})

    def other_param_count(self) -> int:
        return sum(a.size for a in self.enc_params.values()) + sum(
            a.size for a in self.head_params.values())

    def size_report(self) -> SizeReport:
        md = self.mode
        return model_size_bits(md.kind, md.v, md.m, md.k, md.u, self.other_param_count(),
                               md.books, md.codes)

    def encode_text(self, text: str) -> list[int]:
        toks = D.tokenize(text, self.tokenizer)
        return self.vocab().encode(toks, self.max_len)


def finalize(model: TextClassifier, vocab: D.Vocab, tokenizer: str = "regex",
             max_len: int | None = None) -> CompactModel:
    """Replace cluster logits by argmax pointers; everything else is copied as float32."""
    emb: Embedder = model.embedder
    md = emb.mode
    if len(vocab.words) + 1 != md.v:
        raise ValueError("vocabulary does not match the embedder")
    f32 = lambda t: np.ascontiguousarray(t.data, dtype=np.float32)
    p = emb.params
    kind = md.kind
    pointers = np.zeros(0, dtype=np.int64)
    if kind != "se":
        pointers = np.asarray(emb.hard_assignments(), dtype=np.int64).reshape(-1)
    matrix = f32(p["table"] if kind == "se" else p["codebooks"] if kind == "cc" else p["clusters"])
    enc_name = model.encoder.kind
    return CompactModel(
        mode=md, hidden=model.encoder.hidden, num_classes=model.num_classes, encoder=enc_name,
        tokenizer=tokenizer, max_len=max_len, pointers=pointers, matrix=matrix,
        enc_params={n: f32(t) for n, t in model.encoder.params.items()},
        head_params={n: f32(t) for n, t in model.head.params.items()},
        words=list(vocab.words),
        scalars=f32(p["scalars"]).reshape(-1) if kind == "cae" else None,
        unique=f32(p["unique"]) if kind == "me" else None,
        unique_ids=emb.unique_ids.copy() if kind == "me" else None,
    )


# ------------------------------------------------------------ bit packing


def pack_bits(values: np.ndarray, bits: int) -> bytes:
    """Pack non-negative ints ``< 2**bits`` LSB-first into little-endian bytes."""
    values = np.asarray(values, dtype=np.uint64).reshape(-1)
    if bits == 0 or values.size == 0:
        return b""
    if values.size and int(values.max()) >> bits:
        raise ValueError(f"value does not fit in {bits} bits")
    shifts = np.arange(bits, dtype=np.uint64)
    stream = ((values[:, None] >> shifts) & np.uint64(1)).astype(np.uint8).reshape(-1)
    return np.packbits(stream, bitorder="little").tobytes()


def unpack_bits(buf: bytes, count: int, bits: int) -> np.ndarray:
    if bits == 0:
        return np.zeros(count, dtype=np.int64)
    need = packed_length(count, bits)
    if len(buf) < need:
        raise FormatError("truncated pointer section")
    stream = np.unpackbits(np.frombuffer(buf[:need], dtype=np.uint8), bitorder="little")
    stream = stream[:count * bits].reshape(count, bits).astype(np.int64)
    return stream @ (np.int64(1) << np.arange(bits, dtype=np.int64))


def packed_length(count: int, bits: int) -> int:
    return (count * bits + 7) // 8


# ----------------------------------------------------------- serialization


def _f32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _encoder_names(encoder: str) -> tuple[str, ...]:
    return ("U1", "U2", "b") if encoder == "lstm" else ("Wx", "Wh", "b")


def _encoder_shapes(encoder: str, d: int, H: int) -> dict[str, tuple[int, ...]]:
    if encoder == "lstm":
        return {"U1": (4 * H, d), "U2": (4 * H, H), "b": (4 * H,)}
    return {"Wx": (H, d), "Wh": (H, H), "b": (H,)}


def serialize(cm: CompactModel) -> bytes:
    md = cm.mode
    out = bytearray()
    out += MAGIC
    out += struct.pack("<HB", FORMAT_VERSION, MODE_CODES[md.kind])
    header = [md.v, md.m, md.k, md.u, cm.hidden, cm.num_classes, md.books, md.codes,
              ENCODER_CODES[cm.encoder], TOKENIZER_CODES[cm.tokenizer], cm.max_len or 0,
              len(cm.words)]
    out += struct.pack(f"<{len(header)}I", *header)
    _, _, bits = param_counts(md)
    out += pack_bits(cm.pointers, bits)
    out += _f32(cm.matrix)
    if md.kind == "cae":
        out += _f32(cm.scalars)
    if md.kind == "me":
        out += np.asarray(cm.unique_ids, dtype="<u4").tobytes()
        out += _f32(cm.unique)
    for name in _encoder_names(cm.encoder):
        out += _f32(cm.enc_params[name])
    out += _f32(cm.head_params["W"]) + _f32(cm.head_params["b"])
    for w in cm.words:
        raw = w.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
    out += struct.pack("<I", zlib.crc32(out) & 0xFFFFFFFF)
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated buffer")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)


def deserialize(buf: bytes) -> CompactModel:
    if len(buf) < len(MAGIC) + 3 + 4:
        raise FormatError("truncated buffer")
    if buf[:4] != MAGIC:
        raise FormatError("bad magic bytes")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    r = _Reader(body)
    r.take(4)
    version, mode_code = r.unpack("<HB")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError("checksum mismatch")
    kinds = {c: k for k, c in MODE_CODES.items()}
    if mode_code not in kinds:
        raise FormatError(f"unknown mode code {mode_code}")
    h = dict(zip(HEADER_FIELDS, r.unpack(f"<{len(HEADER_FIELDS)}I")))
    kind = kinds[mode_code]
    encoder = {c: k for k, c in ENCODER_CODES.items()}.get(h["encoder"])
    tokenizer = {c: k for k, c in TOKENIZER_CODES.items()}.get(h["tokenizer"])
    if encoder is None or tokenizer is None:
        raise FormatError("unknown encoder or tokenizer code")
    try:
        md = EmbedMode(kind, v=h["v"], m=h["m"], k=h["k"], u=h["u"], books=h["books"],
                       codes=h["codes"])
    except ValueError as exc:
        raise FormatError(f"invalid header: {exc}") from None
    _, entries, bits = param_counts(md)
    pointers = unpack_bits(r.take(packed_length(entries, bits)), entries, bits)
    rows = {"se": md.v, "cc": md.books * md.codes}.get(kind, md.k)
    matrix = r.floats((rows, md.m))
    scalars = r.floats((md.v,)) if kind == "cae" else None
    unique_ids = unique = None
    if kind == "me":
        unique_ids = np.frombuffer(r.take(4 * md.u), dtype="<u4").astype(np.int64)
        unique = r.floats((md.u, md.m))
    H, C = h["H"], h["C"]
    enc = {n: r.floats(s) for n, s in _encoder_shapes(encoder, md.width, H).items()}
    head = {"W": r.floats((C, H)), "b": r.floats((C,))}
    words = []
    for _ in range(h["n_words"]):
        (n,) = r.unpack("<I")
        words.append(r.take(n).decode("utf-8"))
    if r.pos != len(body):
        raise FormatError(f"{len(body) - r.pos} trailing bytes before checksum")
    return CompactModel(md, H, C, encoder, tokenizer, h["max_len"] or None, pointers, matrix,
                        enc, head, words, scalars, unique, unique_ids)


def save_compact(path, cm: CompactModel) -> int:
    buf = serialize(cm)
    with open(path, "wb") as fh:
        fh.write(buf)
    return len(buf)


def load_compact(path) -> CompactModel:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def disk_overhead_bytes(cm: CompactModel) -> int:
    """On-disk bytes beyond the parameter accounting (header, vocab, CRC, padding)."""
    return len(serialize(cm)) - (cm.size_report().total_bits + 7) // 8


# --------------------------------------------------------------- inference


def infer_ids(cm: CompactModel, sequences: Sequence[Sequence[int]],
              batch_size: int = EVAL_BATCH) -> np.ndarray:
    """Logits for encoded sequences, batched in order like :func:`trainer.evaluate`."""
    table = cm.eval_table()
    enc, head = cm.encoder_module(), cm.head_module()
    out = []
    for lo in range(0, len(sequences), batch_size):
        ids = D.pad_batch(sequences[lo:lo + batch_size])
        out.append(logits_from_table(table, ids, enc, head))
    return np.concatenate(out) if out else np.zeros((0, cm.num_classes), dtype=np.float32)


def infer_batch(cm: CompactModel, texts: Sequence[str],
                batch_size: int = EVAL_BATCH) -> tuple[np.ndarray, np.ndarray]:
    """(labels, class probabilities) for each text; empty text becomes ``[UNK]``."""
    seqs = [cm.encode_text(t) for t in texts]
    logits = infer_ids(cm, seqs, batch_size)
    probs = np.exp(log_softmax_np(logits.astype(np.float64)))
    return np.argmax(logits, axis=-1), probs


def infer(cm: CompactModel, text: str) -> tuple[int, np.ndarray]:
    labels, probs = infer_batch(cm, [text])
    return int(labels[0]), probs[0]
