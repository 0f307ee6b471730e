"""Convert the public Planetoid citation files into the dataset directory layout.

Expects the raw ``ind.<name>.{x,y,tx,ty,allx,ally,graph,test.index}`` files
and reproduces the standard split: the first ``20 * classes`` nodes train,
the next 500 validate, and the listed test indices test.
"""
from __future__ import annotations

import pickle
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from ..errors import DataError
from ..graph import Dataset, Graph, row_normalize, save_dataset

PARTS = ("x", "y", "tx", "ty", "allx", "ally", "graph")


def _load_part(root: Path, name: str, part: str):
    path = root / f"ind.{name}.{part}"
    try:
        with open(path, "rb") as fh:
            return pickle.load(fh, encoding="latin1")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    except (pickle.UnpicklingError, EOFError) as exc:
        raise DataError(f"{path}: not a valid pickle ({exc})") from None


def _dense(m) -> np.ndarray:
    return m.toarray() if sp.issparse(m) else np.asarray(m)


def convert_planetoid(raw_dir, name: str, out=None, normalize: bool = True) -> Dataset:
    root = Path(raw_dir)
    x, y, tx, ty, allx, ally, graph = (_load_part(root, name, p) for p in PARTS)
    index_path = root / f"ind.{name}.test.index"
    try:
        test_idx = np.array([int(line) for line in index_path.read_text().split()], dtype=np.int64)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {index_path}: {exc}") from None
    test_sorted = np.sort(test_idx)

    allx, tx = _dense(allx), _dense(tx)
    ally, ty = np.asarray(ally), np.asarray(ty)
    span = test_sorted[-1] - test_sorted[0] + 1
    if span != tx.shape[0]:
        # citeseer lists isolated test nodes that have no features; pad them with zeros
        tx_full = np.zeros((span, tx.shape[1]))
        tx_full[test_sorted - test_sorted[0]] = tx
        ty_full = np.zeros((span, ty.shape[1]))
        ty_full[test_sorted - test_sorted[0]] = ty
        tx, ty = tx_full, ty_full
    features = np.vstack([allx, tx])
    onehot = np.vstack([ally, ty])
    # test rows are stored in sorted order; move them to their listed positions
    features[test_idx] = features[test_sorted]
    onehot[test_idx] = onehot[test_sorted]
    labels = onehot.argmax(axis=1).astype(np.int64)
    n = features.shape[0]

    pairs = [(u, v) for u, nbrs in graph.items() for v in nbrs if u < n and v < n]
    g = Graph.from_pairs(n, pairs)
    num_classes = onehot.shape[1]
    train = np.arange(np.asarray(_dense(y)).shape[0], dtype=np.int64)
    val = np.arange(train.size, min(train.size + 500, n), dtype=np.int64)
    val = np.setdiff1d(val, test_idx)
    ds = Dataset(g, row_normalize(features) if normalize else features, labels,
                 train, val, np.sort(test_idx), num_classes)
    if out is not None:
        save_dataset(ds, out)
    return ds
