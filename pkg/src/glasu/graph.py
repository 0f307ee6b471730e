"""Graph storage, GCN normalization, dataset files and vertical partitioning."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DataError
from .linalg import Matrix, RngState, as_matrix

log = logging.getLogger(__name__)

EDGE_FILE = "edges.txt"
FEATURE_FILE = "features.csv"
LABEL_FILE = "labels.csv"
MASK_FILE = "masks.txt"


@dataclass(frozen=True)
class Graph:
    """Undirected simple graph; ``edges`` holds unique pairs with ``u < v``."""

    num_nodes: int
    edges: np.ndarray

    @classmethod
    def from_pairs(cls, num_nodes: int, pairs: Iterable[Sequence[int]]) -> "Graph":
        arr = np.asarray(list(pairs) if not isinstance(pairs, np.ndarray) else pairs, dtype=np.int64)
        arr = arr.reshape(-1, 2)
        if arr.size and (arr.min() < 0 or arr.max() >= num_nodes):
            raise ConfigError(f"edge endpoint outside [0, {num_nodes})")
        arr = arr[arr[:, 0] != arr[:, 1]]
        arr = np.sort(arr, axis=1)
        arr = np.unique(arr, axis=0) if arr.size else np.empty((0, 2), dtype=np.int64)
        return cls(num_nodes, arr)

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    def neighbor_lists(self) -> "Neighbors":
        """Sorted open neighborhoods in CSR form (no self entries)."""
        u, v = self.edges[:, 0], self.edges[:, 1]
        rows = np.concatenate([u, v])
        cols = np.concatenate([v, u])
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
        indptr = np.zeros(self.num_nodes + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        return Neighbors(np.cumsum(indptr), cols)


@dataclass(frozen=True)
class Neighbors:
    indptr: np.ndarray
    indices: np.ndarray

    def of(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def degree(self, i: int) -> int:
        return int(self.indptr[i + 1] - self.indptr[i])


@dataclass(frozen=True)
class Dataset:
    graph: Graph
    features: Matrix
    labels: np.ndarray
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    num_classes: int

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @property
    def num_features(self) -> int:
        return int(self.features.shape[1])


@dataclass(frozen=True)
class ClientShard:
    graph: Graph
    features: Matrix
    col_offset: int

    @property
    def width(self) -> int:
        return int(self.features.shape[1])


@dataclass(frozen=True)
class PartitionedDataset:
    shards: tuple[ClientShard, ...]
    labels: np.ndarray
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    num_classes: int

    @property
    def M(self) -> int:
        return len(self.shards)

    @property
    def num_nodes(self) -> int:
        return self.shards[0].graph.num_nodes

    def client(self, m: int) -> "PartitionedDataset":
        """Single-client view of shard ``m`` (used for standalone training)."""
        return PartitionedDataset((self.shards[m],), self.labels, self.train,
                                  self.val, self.test, self.num_classes)

    def with_full_edges(self, graph: Graph) -> "PartitionedDataset":
        shards = tuple(ClientShard(graph, s.features, s.col_offset) for s in self.shards)
        return PartitionedDataset(shards, self.labels, self.train, self.val,
                                  self.test, self.num_classes)


@dataclass(frozen=True)
class NormalizedAdj:
    """Symmetrically normalized ``A + I`` in CSR layout."""

    csr: sp.csr_matrix
    row_sums: np.ndarray
    row_nnz: np.ndarray

    @property
    def num_nodes(self) -> int:
        return int(self.csr.shape[0])

    def toarray(self) -> Matrix:
        return self.csr.toarray()


def normalize_adjacency(g: Graph) -> NormalizedAdj:
    n = g.num_nodes
    u, v = g.edges[:, 0], g.edges[:, 1]
    deg = np.ones(n, dtype=np.float64)
    np.add.at(deg, u, 1.0)
    np.add.at(deg, v, 1.0)
    dinv = 1.0 / np.sqrt(deg)
    nodes = np.arange(n)
    rows = np.concatenate([nodes, u, v])
    cols = np.concatenate([nodes, v, u])
    vals = dinv[rows] * dinv[cols]
    csr = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    csr.sort_indices()
    # one entry per (row, col) pair, so no duplicate summation took place
    row_sums = np.asarray(csr.sum(axis=1)).reshape(-1)
    return NormalizedAdj(csr, row_sums, np.diff(csr.indptr))


def bipartite_adjacency(adj: NormalizedAdj, s_out: Sequence[int], s_in: Sequence[int]) -> Matrix:
    """Dense ``|s_out| x |s_in|`` block of ``adj``, row-mass corrected.

    Rows that lost neighbors to sampling are rescaled by
    ``full_row_sum / retained_sum``. Rows that keep their entire neighborhood,
    and rows where only the self entry survived, are returned as is.
    """
    s_out = np.asarray(s_out, dtype=np.int64)
    s_in = np.asarray(s_in, dtype=np.int64)
    n = adj.num_nodes
    for name, s in (("s_out", s_out), ("s_in", s_in)):
        if s.size and (s.min() < 0 or s.max() >= n):
            raise ConfigError(f"{name} index outside [0, {n})")
    block = adj.csr[s_out][:, s_in]
    dense = block.toarray()
    if not s_out.size or not s_in.size:
        return dense.reshape(len(s_out), len(s_in))
    kept = np.diff(block.indptr)
    retained = dense.sum(axis=1)
    if (retained <= 0).any():
        k = int(np.flatnonzero(retained <= 0)[0])
        raise ConfigError(f"node {int(s_out[k])} has no retained neighbors in the in-set")
    full = adj.row_nnz[s_out]
    rescale = (kept < full) & (kept > 1)
    if rescale.any():
        factor = adj.row_sums[s_out[rescale]] / retained[rescale]
        dense[rescale] *= factor[:, None]
    return dense


def feature_widths(d: int, M: int) -> list[int]:
    if M < 1:
        raise ConfigError("M must be at least 1")
    if d < M:
        raise ConfigError(f"cannot split {d} feature columns across {M} clients")
    base, extra = divmod(d, M)
    return [base + (1 if m < extra else 0) for m in range(M)]


def partition_dataset(ds: Dataset, M: int, edge_keep_prob: float, seed: int) -> PartitionedDataset:
    if not 0.0 < edge_keep_prob <= 1.0:
        raise ConfigError(f"edge_keep_prob must lie in (0, 1], got {edge_keep_prob}")
    widths = feature_widths(ds.num_features, M)
    root = RngState(seed).child("partition")
    shards = []
    offset = 0
    for m, w in enumerate(widths):
        draws = root.child(m).generator().random(ds.graph.num_edges)
        kept = ds.graph.edges[draws < edge_keep_prob]
        shards.append(ClientShard(Graph(ds.num_nodes, kept),
                                  np.ascontiguousarray(ds.features[:, offset:offset + w]),
                                  offset))
        offset += w
    return PartitionedDataset(tuple(shards), ds.labels, ds.train, ds.val, ds.test, ds.num_classes)


# -- files ------------------------------------------------------------------

def _parse_ids(text: str, path: Path, lineno: int) -> list[int]:
    try:
        return [int(tok) for tok in text.split()]
    except ValueError:
        raise DataError(f"{path}:{lineno}: expected integer ids, got {text.strip()!r}") from None


def load_dataset(path, num_classes: int | None = None) -> Dataset:
    """Read a dataset directory (``edges.txt``, ``features.csv``, ``labels.csv``, ``masks.txt``)."""
    root = Path(path)
    for name in (EDGE_FILE, FEATURE_FILE, LABEL_FILE, MASK_FILE):
        if not (root / name).is_file():
            raise DataError(f"missing dataset file {root / name}")

    rows = []
    width = None
    fpath = root / FEATURE_FILE
    with open(fpath, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = [float(tok) for tok in line.split(",")]
            except ValueError:
                raise DataError(f"{fpath}:{lineno}: malformed feature row") from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataError(f"{fpath}:{lineno}: expected {width} columns, got {len(row)}")
            rows.append(row)
    if not rows:
        raise DataError(f"{fpath}: no feature rows")
    features = as_matrix(rows)
    if not np.isfinite(features).all():
        raise DataError(f"{fpath}: non-finite feature values")
    n = features.shape[0]

    labels = []
    lpath = root / LABEL_FILE
    with open(lpath, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                labels.append(int(line.strip()))
            except ValueError:
                raise DataError(f"{lpath}:{lineno}: malformed label {line.strip()!r}") from None
    if len(labels) != n:
        raise DataError(f"{lpath}: {len(labels)} labels for {n} feature rows")
    y = np.asarray(labels, dtype=np.int64)
    if y.min() < 0:
        raise DataError(f"{lpath}:{int(np.argmin(y)) + 1}: negative label")
    if num_classes is None:
        num_classes = int(y.max()) + 1
    elif y.max() >= num_classes:
        raise DataError(f"{lpath}:{int(np.argmax(y)) + 1}: label {int(y.max())} "
                        f"out of range for {num_classes} classes")

    pairs = []
    epath = root / EDGE_FILE
    with open(epath, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            ids = _parse_ids(line, epath, lineno)
            if len(ids) != 2:
                raise DataError(f"{epath}:{lineno}: expected 'u v', got {line.strip()!r}")
            if min(ids) < 0 or max(ids) >= n:
                raise DataError(f"{epath}:{lineno}: node id outside [0, {n})")
            pairs.append(ids)
    graph = Graph.from_pairs(n, pairs)

    masks: dict[str, np.ndarray] = {}
    mpath = root / MASK_FILE
    with open(mpath, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            key, sep, rest = line.partition(":")
            key = key.strip()
            if not sep or key not in ("train", "val", "test"):
                raise DataError(f"{mpath}:{lineno}: expected 'train:', 'val:' or 'test:'")
            ids = np.unique(np.asarray(_parse_ids(rest, mpath, lineno), dtype=np.int64))
            if ids.size and (ids.min() < 0 or ids.max() >= n):
                raise DataError(f"{mpath}:{lineno}: node id outside [0, {n})")
            masks[key] = ids
    for key in ("train", "val", "test"):
        masks.setdefault(key, np.empty(0, dtype=np.int64))
    if (np.intersect1d(masks["train"], masks["val"]).size
            or np.intersect1d(masks["train"], masks["test"]).size
            or np.intersect1d(masks["val"], masks["test"]).size):
        raise DataError(f"{mpath}: train/val/test masks overlap")
    return Dataset(graph, features, y, masks["train"], masks["val"], masks["test"], num_classes)


def save_dataset(ds: Dataset, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / EDGE_FILE, "w", encoding="utf-8") as fh:
        for u, v in ds.graph.edges:
            fh.write(f"{u} {v}\n")
    with open(root / FEATURE_FILE, "w", encoding="utf-8") as fh:
        for row in ds.features:
            # repr() of a Python float round-trips exactly
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    with open(root / LABEL_FILE, "w", encoding="utf-8") as fh:
        fh.writelines(f"{int(y)}\n" for y in ds.labels)
    with open(root / MASK_FILE, "w", encoding="utf-8") as fh:
        for key, ids in (("train", ds.train), ("val", ds.val), ("test", ds.test)):
            fh.write(f"{key}: " + " ".join(str(int(i)) for i in ids) + "\n")
    return root


def row_normalize(features: Matrix) -> Matrix:
    sums = features.sum(axis=1, keepdims=True)
    sums[sums == 0] = 1.0
    return features / sums
