"""Post-hoc analyses: cluster dumps, RNN hidden-state export, area ratio, curve data."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import data as D
from .deployment import CompactModel
from .sequence import EVAL_BATCH, TextClassifier
from .tensor import Tensor, no_grad

CURVE_COLUMNS = ["dataset", "mode", "size_mb", "accuracy"]


@dataclass
class ClusterReport:
    clusters: dict[int, list[str]]
    k: int

    @property
    def sizes(self) -> dict[int, int]:
        return {j: len(ws) for j, ws in self.clusters.items()}

    def preview(self, top_n: int = 10) -> dict[int, list[str]]:
        return {j: ws[:top_n] for j, ws in self.clusters.items()}

    def lines(self, top_n: int = 10) -> list[str]:
        return [f"{j}\t{len(ws)}\t{' '.join(ws[:top_n])}" for j, ws in sorted(self.clusters.items())]


def _clustered_ids_and_pointers(model, book: int) -> tuple[np.ndarray, np.ndarray, int]:
    if isinstance(model, CompactModel):
        md = model.mode
        pointers = model.pointers
        unique_ids = model.unique_ids
    else:
        md = model.embedder.mode
        pointers = model.embedder.hard_assignments().reshape(-1)
        unique_ids = model.embedder.unique_ids
    if md.kind == "se":
        raise ValueError("SE models have no clusters")
    ids = np.arange(1, md.v + 1)
    if md.kind == "me":
        ids = ids[~np.isin(ids, unique_ids)]
    if md.kind == "cc":
        if not 0 <= book < md.books:
            raise ValueError(f"book {book} out of range")
        pointers = np.asarray(pointers).reshape(md.books, md.v)[book]
        return ids, pointers, md.codes
    return ids, np.asarray(pointers), md.k


def dump_clusters(model, vocab: D.Vocab, book: int = 0) -> ClusterReport:
    """Group clustered words by pointer; members by descending training frequency.

    Words without a recorded frequency (UNK, or a compact model's vocab)
    fall back to id order, which is already frequency order.
    """
    ids, pointers, k = _clustered_ids_and_pointers(model, book)
    groups: dict[int, list[int]] = defaultdict(list)
    for i, p in zip(ids.tolist(), pointers.tolist()):
        groups[int(p)].append(i)
    clusters = {}
    for j in sorted(groups):
        members = sorted(groups[j], key=lambda i: (-vocab.frequency(i), i))
        clusters[j] = [vocab.word_of(i) for i in members]
    return ClusterReport(clusters, k)


# ---------------------------------------------------------------- hidden states


@dataclass
class HiddenStatePlotData:
    points: np.ndarray
    labels: np.ndarray

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        x, y = self.points[:, 0], self.points[:, 1]
        return float(x.min()), float(x.max()), float(y.min()), float(y.max())


def export_hidden_states(model, ds: D.EncodedDataset,
                         batch_size: int = EVAL_BATCH) -> HiddenStatePlotData:
    """Final evaluation-time hidden state of every example (H must be 2)."""
    if isinstance(model, CompactModel):
        table, enc = model.eval_table(), model.encoder_module()
    else:
        table, enc = model.embedder.eval_table(), model.encoder
    if enc.hidden != 2:
        raise ValueError(f"hidden-state export needs H=2, model has H={enc.hidden}")
    out = []
    with no_grad():
        for lo in range(0, len(ds), batch_size):
            ids, _ = ds.batch(range(lo, min(lo + batch_size, len(ds))))
            out.append(enc.encode(Tensor(table[ids], dtype=table.dtype), ids).data)
    pts = np.concatenate(out) if out else np.zeros((0, 2), dtype=np.float32)
    return HiddenStatePlotData(pts, np.asarray(ds.labels))


def write_points(path, data: HiddenStatePlotData):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "label"])
        for (x, y), lab in zip(data.points.tolist(), data.labels.tolist()):
            w.writerow([repr(float(x)), repr(float(y)), int(lab)])


def read_points(path) -> HiddenStatePlotData:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    pts = np.array([[float(r["x"]), float(r["y"])] for r in rows]).reshape(-1, 2)
    labels = np.array([int(r["label"]) for r in rows], dtype=np.int64)
    return HiddenStatePlotData(pts, labels)


@dataclass(frozen=True)
class AreaRatio:
    grid: int
    occupied: int

    @property
    def ratio(self) -> float:
        return self.occupied / (self.grid * self.grid)


def occupied_cells(points, grid: int = 100) -> set[tuple[int, int]]:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    cells = np.floor((pts + 1.0) / 2.0 * grid).astype(np.int64)
    cells = np.clip(cells, 0, grid - 1)  # upper boundary belongs to the last cell
    return set(map(tuple, cells.tolist()))


def area_ratio(points, grid: int = 100) -> AreaRatio:
    """Fraction of a ``grid x grid`` partition of [-1, 1]^2 holding at least one point."""
    pts = np.asarray(points).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("area_ratio needs at least one point")
    if grid < 1:
        raise ValueError("grid must be >= 1")
    return AreaRatio(grid, len(occupied_cells(pts, grid)))


# ----------------------------------------------------------------------- curves


def _as_row(rec) -> dict:
    return rec.row() if hasattr(rec, "row") else dict(rec)


def emit_curves(records: Iterable, accuracy: str = "dev_acc") -> list[dict]:
    """Plot-ready (dataset, mode, size_mb, accuracy) rows, sorted by size within mode."""
    rows = []
    for rec in records:
        r = _as_row(rec)
        if r.get(accuracy) in (None, ""):
            continue
        rows.append({"dataset": r.get("dataset", ""), "mode": r["mode"],
                     "size_mb": f"{float(r['size_mb']):.3f}",
                     "accuracy": f"{float(r[accuracy]):.4f}",
                     "_bits": int(r["size_bits"])})
    rows.sort(key=lambda r: (r["dataset"], r["mode"], r["_bits"], r["accuracy"]))
    for r in rows:
        del r["_bits"]
    return rows


def write_curves(path, rows: Sequence[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
