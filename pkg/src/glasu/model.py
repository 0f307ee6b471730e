"""Client-side GNN layers with hand-written backward passes."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from .errors import ConfigError, DataError
from .linalg import Matrix, RngState, check_finite, glorot_init, matmul


@dataclass(frozen=True)
class Gcn:
    name = "gcn"


@dataclass(frozen=True)
class Gcnii:
    """Initial residual (``alpha``) plus identity mapping with strength
    ``beta_l = log(lam / (l + 1) + 1)`` for 0-based layer ``l``."""

    alpha: float = 0.1
    lam: float = 0.5
    name = "gcnii"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"GCNII alpha must lie in (0, 1), got {self.alpha}")
        if self.lam <= 0:
            raise ConfigError(f"GCNII lambda must be positive, got {self.lam}")

    def beta(self, layer: int) -> float:
        return math.log(self.lam / (layer + 1) + 1.0)


LayerKind = Union[Gcn, Gcnii]


def relu(z: Matrix) -> Matrix:
    # np.where keeps +0.0 for non-positive inputs (np.maximum can return -0.0)
    return np.where(z > 0, z, 0.0)


@dataclass
class TapeEntry:
    h_in: Matrix
    a_bip: Matrix
    w: Matrix
    z: Matrix
    kind: LayerKind
    ah: Matrix
    support: Matrix | None = None
    mix: Matrix | None = None
    beta: float = 1.0


def _check_layer_shapes(h_in, a_bip, w):
    if a_bip.shape[1] != h_in.shape[0]:
        raise ConfigError(f"adjacency {a_bip.shape} does not match input rows {h_in.shape[0]}")
    if h_in.shape[1] != w.shape[0]:
        raise ConfigError(f"input width {h_in.shape[1]} does not match weight {w.shape}")


def layer_forward(h_in: Matrix, a_bip: Matrix, w: Matrix, kind: LayerKind, layer: int,
                  h0_slice: Matrix | None = None, *, beta: float | None = None
                  ) -> tuple[Matrix, TapeEntry]:
    """One graph convolution on a sampled bipartite block.

    ``beta`` overrides the GCNII identity-mapping strength (ignored for GCN).
    """
    _check_layer_shapes(h_in, a_bip, w)
    ah = matmul(a_bip, h_in)
    if isinstance(kind, Gcn):
        z = matmul(ah, w)
        return relu(z), TapeEntry(h_in, a_bip, w, z, kind, ah)
    if h0_slice is None or h0_slice.shape != ah.shape:
        raise ConfigError(f"GCNII needs an initial-residual slice of shape {ah.shape}")
    if w.shape[0] != w.shape[1]:
        raise ConfigError(f"GCNII weights must be square, got {w.shape}")
    b = kind.beta(layer) if beta is None else beta
    support = (1.0 - kind.alpha) * ah + kind.alpha * h0_slice
    mix = (1.0 - b) * np.eye(w.shape[0]) + b * w
    z = matmul(support, mix)
    return relu(z), TapeEntry(h_in, a_bip, w, z, kind, ah, support, mix, b)


def layer_backward(grad_h_out: Matrix, entry: TapeEntry) -> tuple[Matrix, Matrix, Matrix | None]:
    """Cotangents ``(d h_in, d w, d h0_slice)``; the last is ``None`` for GCN."""
    gz = np.where(entry.z > 0, grad_h_out, 0.0)
    if isinstance(entry.kind, Gcn):
        grad_w = matmul(entry.ah.T, gz)
        grad_ah = matmul(gz, entry.w.T)
        return matmul(entry.a_bip.T, grad_ah), grad_w, None
    grad_w = entry.beta * matmul(entry.support.T, gz)
    grad_support = matmul(gz, entry.mix.T)
    grad_h_in = (1.0 - entry.kind.alpha) * matmul(entry.a_bip.T, grad_support)
    return grad_h_in, grad_w, entry.kind.alpha * grad_support


def classify(h_L: Matrix, w_L: Matrix) -> Matrix:
    return matmul(h_L, w_L)


def loss_and_grad(logits: Matrix, labels: Sequence[int]) -> tuple[float, Matrix]:
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ConfigError(f"{labels.size} labels for {n} logit rows")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ConfigError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    denom = expd.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    log_prob = shifted[rows, labels] - np.log(denom[:, 0])
    loss = float(-log_prob.sum() / n)
    grad = expd / denom
    grad[rows, labels] -= 1.0
    return loss, grad / n


def finite_diff_grad(f: Callable[[], float], params: Sequence[Matrix], step: float = 1e-5) -> list[Matrix]:
    """Central differences of ``f`` with respect to each entry of ``params``.

    The arrays in ``params`` are perturbed in place and restored.
    """
    if step <= 0:
        raise ConfigError("finite-difference step must be positive")
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f()
            flat[i] = orig - step
            down = f()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
        grads.append(g)
    return grads


@dataclass
class ClientModel:
    """Parameters held by one client.

    ``input_proj`` exists for GCNII only; ``classifier`` is absent on clients
    that hold no labels.
    """

    weights: list[Matrix]
    kind: LayerKind = field(default_factory=Gcn)
    classifier: Matrix | None = None
    input_proj: Matrix | None = None

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list[Matrix]:
        out = []
        if self.input_proj is not None:
            out.append(self.input_proj)
        out.extend(self.weights)
        if self.classifier is not None:
            out.append(self.classifier)
        return out

    def copy(self) -> "ClientModel":
        return ClientModel([w.copy() for w in self.weights], self.kind,
                           None if self.classifier is None else self.classifier.copy(),
                           None if self.input_proj is None else self.input_proj.copy())

    def apply_step(self, grads: Sequence[Matrix], eta: float) -> None:
        """Plain SGD; ``grads`` aligned with :meth:`params`."""
        params = self.params()
        if len(grads) != len(params):
            raise ConfigError("gradient list does not match parameter list")
        updated = [check_finite(p - eta * g, "updated weights") for p, g in zip(params, grads)]
        it = iter(updated)
        if self.input_proj is not None:
            self.input_proj = next(it)
        self.weights = [next(it) for _ in self.weights]
        if self.classifier is not None:
            self.classifier = next(it)


def layer_widths(in_dim: int, hidden: int, agg_width: int, agg_layers: Sequence[int],
                 num_layers: int, kind: LayerKind) -> list[tuple[int, int]]:
    """(rows, cols) of every layer weight given where aggregation happens."""
    if isinstance(kind, Gcnii):
        if agg_width != hidden:
            raise ConfigError("GCNII needs aggregation that preserves the hidden width (averaging)")
        return [(hidden, hidden)] * num_layers
    shapes = []
    width = in_dim
    for l in range(num_layers):
        shapes.append((width, hidden))
        width = agg_width if l in agg_layers else hidden
    return shapes


def init_client_model(in_dim: int, hidden: int, agg_width: int, agg_layers: Sequence[int],
                      num_layers: int, num_classes: int, kind: LayerKind, rng: RngState,
                      with_classifier: bool = True) -> ClientModel:
    shapes = layer_widths(in_dim, hidden, agg_width, agg_layers, num_layers, kind)
    weights = [glorot_init(r, c, rng.child("layer").child(l)) for l, (r, c) in enumerate(shapes)]
    top_width = agg_width if (num_layers - 1) in agg_layers else hidden
    classifier = (glorot_init(top_width, num_classes, rng.child("classifier"))
                  if with_classifier else None)
    proj = glorot_init(in_dim, hidden, rng.child("input")) if isinstance(kind, Gcnii) else None
    return ClientModel(weights, kind, classifier, proj)


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"GLSW"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sBBI")
_MAT_HEAD = struct.Struct("<II")
_HAS_PROJ, _HAS_CLS = 1, 2


def encode_checkpoint(model: ClientModel) -> bytes:
    flags = (_HAS_PROJ if model.input_proj is not None else 0) | (
        _HAS_CLS if model.classifier is not None else 0)
    out = [_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, flags, model.num_layers)]
    for m in model.params():
        out.append(_MAT_HEAD.pack(*m.shape))
        out.append(np.ascontiguousarray(m, dtype="<f8").tobytes())
    return b"".join(out)


def decode_checkpoint(data: bytes, kind: LayerKind) -> ClientModel:
    if len(data) < _CKPT_HEAD.size:
        raise DataError("checkpoint truncated in header")
    magic, version, flags, num_layers = _CKPT_HEAD.unpack_from(data, 0)
    if magic != CKPT_MAGIC:
        raise DataError(f"bad checkpoint magic {magic!r}, expected {CKPT_MAGIC!r}")
    if version != CKPT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    count = num_layers + bool(flags & _HAS_PROJ) + bool(flags & _HAS_CLS)
    offset = _CKPT_HEAD.size
    mats = []
    for _ in range(count):
        if offset + _MAT_HEAD.size > len(data):
            raise DataError(f"checkpoint truncated at offset {offset}")
        rows, cols = _MAT_HEAD.unpack_from(data, offset)
        offset += _MAT_HEAD.size
        nbytes = rows * cols * 8
        if offset + nbytes > len(data):
            raise DataError(f"checkpoint truncated at offset {offset}")
        mats.append(np.frombuffer(data, dtype="<f8", count=rows * cols, offset=offset)
                    .astype(np.float64).reshape(rows, cols))
        offset += nbytes
    if offset != len(data):
        raise DataError(f"{len(data) - offset} trailing bytes in checkpoint")
    proj = mats.pop(0) if flags & _HAS_PROJ else None
    cls = mats.pop() if flags & _HAS_CLS else None
    return ClientModel(mats, kind, cls, proj)


def save_checkpoint(model: ClientModel, path) -> None:
    Path(path).write_bytes(encode_checkpoint(model))


def load_checkpoint(path, kind: LayerKind) -> ClientModel:
    return decode_checkpoint(Path(path).read_bytes(), kind)
