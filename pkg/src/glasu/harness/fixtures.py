"""Synthetic stochastic-block-model datasets for desk-scale runs."""
from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from ..graph import Dataset, Graph, save_dataset
from ..linalg import RngState

NOISE_STD = 0.1


def make_sbm_fixture(blocks: int = 2, nodes_per_block: int = 20, p_in: float = 0.5,
                     p_out: float = 0.05, d: int = 2, seed: int = 0, out=None) -> Dataset:
    """Block-structured graph; label = block id.

    The first ``blocks`` feature columns are one-hot block indicators, any
    further columns are pure noise, and every entry gets N(0, 0.1) noise.
    Split feature-wise, no single client sees every indicator. Nodes are split
    60/20/20 into train/val/test at random.
    """
    if blocks < 2 or nodes_per_block < 1:
        raise ConfigError("need at least two blocks of at least one node")
    if not 0.0 <= p_out < p_in <= 1.0:
        raise ConfigError(f"need 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if d < blocks:
        raise ConfigError(f"feature dimension {d} cannot hold {blocks} block indicators")
    root = RngState(seed).child("sbm")
    n = blocks * nodes_per_block
    labels = np.repeat(np.arange(blocks), nodes_per_block)

    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = root.child("edges").generator().random(iu.size) < prob
    graph = Graph(n, np.stack([iu[keep], ju[keep]], axis=1).astype(np.int64))

    features = np.zeros((n, d))
    features[np.arange(n), labels] = 1.0
    features += root.child("features").generator().normal(0.0, NOISE_STD, size=(n, d))

    perm = root.child("masks").generator().permutation(n)
    n_train, n_val = int(round(0.6 * n)), int(round(0.2 * n))
    train = np.sort(perm[:n_train])
    val = np.sort(perm[n_train:n_train + n_val])
    test = np.sort(perm[n_train + n_val:])
    ds = Dataset(graph, features, labels, train, val, test, blocks)
    if out is not None:
        save_dataset(ds, out)
    return ds


def expected_edge_count(blocks: int, nodes_per_block: int, p_in: float, p_out: float) -> tuple[float, float]:
    """Mean and standard deviation of the number of edges."""
    within = blocks * nodes_per_block * (nodes_per_block - 1) / 2
    across = nodes_per_block ** 2 * blocks * (blocks - 1) / 2
    mean = within * p_in + across * p_out
    var = within * p_in * (1 - p_in) + across * p_out * (1 - p_out)
    return mean, float(np.sqrt(var))
