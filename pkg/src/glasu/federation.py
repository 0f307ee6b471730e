"""Split-model training: server aggregation, joint inference, stale local updates.

Each client runs the same generator-based forward pass. At an aggregation
layer the generator yields its partial output ``H_m^+`` and is resumed with
whatever should stand in for the aggregated representation: the server's
value during joint inference, or a local composition of the cached
"all but m" part during the stale local iterations.
"""
from __future__ import annotations

import logging
import threading
import warnings
from dataclasses import dataclass, field
from typing import Callable, Generator, Sequence, Union

import numpy as np

from .errors import ConfigError, GlasuError, ProtocolError
from .graph import PartitionedDataset, bipartite_adjacency, normalize_adjacency
from .linalg import Matrix, RngState, gather_rows, matmul, two_sum
from .model import (ClientModel, Gcn, Gcnii, LayerKind, TapeEntry, classify, init_client_model,
                    layer_backward, layer_forward, loss_and_grad, relu)
from .sampling import (LabelMode, LayerPlan, LocalSampler, SampleSchedule, SamplerConfig,
                       batch_stream, client_stream, draw_batch, full_schedule, union_sets)
from . import transport as tp

log = logging.getLogger(__name__)


# -- aggregation -------------------------------------------------------------

@dataclass(frozen=True)
class Average:
    name = "average"


@dataclass(frozen=True)
class Concat:
    widths: tuple[int, ...]
    name = "concat"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths or min(self.widths) < 1:
            raise ConfigError(f"concat block widths must be positive, got {self.widths}")

    def block(self, m: int) -> slice:
        start = sum(self.widths[:m])
        return slice(start, start + self.widths[m])


AggKind = Union[Average, Concat]


def make_agg(name: str, M: int, hidden: int) -> AggKind:
    if name == "average":
        return Average()
    if name == "concat":
        return Concat((hidden,) * M)
    raise ConfigError(f"unknown aggregation {name!r} (expected 'average' or 'concat')")


def agg_width(agg: AggKind, hidden: int) -> int:
    return sum(agg.widths) if isinstance(agg, Concat) else hidden


def client_hidden(agg: AggKind, hidden: int, m: int) -> int:
    return agg.widths[m] if isinstance(agg, Concat) else hidden


def _check_parts(parts: Sequence[Matrix], agg: AggKind) -> None:
    if not parts:
        raise ConfigError("nothing to aggregate")
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ConfigError(f"aggregated parts disagree on row count: {sorted(rows)}")
    cols = [p.shape[1] for p in parts]
    if isinstance(agg, Average) and len(set(cols)) != 1:
        raise ConfigError(f"averaging needs equal widths, got {cols}")
    if isinstance(agg, Concat) and tuple(cols) != agg.widths:
        raise ConfigError(f"concat parts have widths {cols}, expected {agg.widths}")


def aggregate(parts: Sequence[Matrix], agg: AggKind) -> Matrix:
    _check_parts(parts, agg)
    if isinstance(agg, Concat):
        return np.hstack(parts)
    # fixed left-to-right order keeps the result independent of scheduling
    acc = np.array(parts[0], dtype=np.float64, copy=True)
    for p in parts[1:]:
        acc += p
    return acc / len(parts)


@dataclass(frozen=True)
class StaleBlock:
    """The "all but m" part of an averaged representation.

    Kept as an unevaluated sum ``hi + lo`` so that composing it with the same
    contribution gives back the aggregate exactly.
    """

    hi: Matrix
    lo: Matrix

    @property
    def shape(self):
        return self.hi.shape

    def __array__(self, dtype=None, copy=None):
        return self.hi if dtype is None else self.hi.astype(dtype)


def _own_share(h_plus: Matrix, M: int) -> Matrix:
    return h_plus / M


def extract(h_agg: Matrix, h_plus: Matrix, agg: AggKind, M: int, m: int) -> Union[StaleBlock, Matrix]:
    if isinstance(agg, Concat):
        block = agg.block(m)
        if h_agg.shape[1] != sum(agg.widths) or h_plus.shape != (h_agg.shape[0], agg.widths[m]):
            raise ConfigError(f"concat extract shape mismatch: {h_agg.shape} vs {h_plus.shape}")
        return np.hstack([h_agg[:, :block.start], h_agg[:, block.stop:]])
    if h_agg.shape != h_plus.shape:
        raise ConfigError(f"extract shape mismatch: {h_agg.shape} vs {h_plus.shape}")
    hi, lo = two_sum(h_agg, -_own_share(h_plus, M))
    return StaleBlock(hi, lo)


def local_compose(h_minus: Union[StaleBlock, Matrix], h_plus: Matrix, agg: AggKind, M: int, m: int) -> Matrix:
    if isinstance(agg, Concat):
        block = agg.block(m)
        h_minus = np.asarray(h_minus)
        if h_plus.shape != (h_minus.shape[0], agg.widths[m]) or \
                h_minus.shape[1] != sum(agg.widths) - agg.widths[m]:
            raise ConfigError(f"concat compose shape mismatch: {h_minus.shape} vs {h_plus.shape}")
        return np.hstack([h_minus[:, :block.start], h_plus, h_minus[:, block.start:]])
    if not isinstance(h_minus, StaleBlock):
        h_minus = StaleBlock(np.asarray(h_minus, dtype=np.float64), np.zeros(np.shape(h_minus)))
    if h_minus.shape != h_plus.shape:
        raise ConfigError(f"compose shape mismatch: {h_minus.shape} vs {h_plus.shape}")
    s, r = two_sum(h_minus.hi, _own_share(h_plus, M))
    return s + (r + h_minus.lo)


def own_gradient(grad_agg: Matrix, agg: AggKind, M: int, m: int) -> Matrix:
    """Cotangent of client ``m``'s partial output given the aggregate's."""
    if isinstance(agg, Concat):
        return grad_agg[:, agg.block(m)]
    return grad_agg / M


def server_backward_route(grad_agg: Matrix, agg: AggKind, M: int) -> list[Matrix]:
    return [own_gradient(grad_agg, agg, M, m) for m in range(M)]


# -- configuration and history -----------------------------------------------

@dataclass(frozen=True)
class RoundConfig:
    T: int
    Q: int
    eta: float
    label_mode: LabelMode = LabelMode.ALL_CLIENTS

    def __post_init__(self):
        object.__setattr__(self, "label_mode", LabelMode(self.label_mode))
        if self.T < 0 or self.Q < 1:
            raise ConfigError(f"need T >= 0 and Q >= 1, got T={self.T}, Q={self.Q}")
        if not self.eta >= 0:
            raise ConfigError(f"eta must be non-negative, got {self.eta}")


@dataclass(frozen=True)
class ModelConfig:
    kind: LayerKind = field(default_factory=Gcn)
    hidden_dim: int = 16


@dataclass
class TrainHistory:
    losses: list[tuple[int, int, int, float]] = field(default_factory=list)
    accuracy: list[tuple[int, float]] = field(default_factory=list)
    ledger: tp.CommLedger | None = None
    traces: list | None = None

    def loss_matrix(self, client: int) -> np.ndarray:
        rows = [(t, q, loss) for t, q, c, loss in self.losses if c == client]
        T = 1 + max((r[0] for r in rows), default=-1)
        Q = 1 + max((r[1] for r in rows), default=-1)
        out = np.full((T, Q), np.nan)
        for t, q, loss in rows:
            out[t, q] = loss
        return out

    def mean_round_loss(self) -> np.ndarray:
        by_t: dict[int, list[float]] = {}
        for t, _, _, loss in self.losses:
            by_t.setdefault(t, []).append(loss)
        return np.array([np.mean(by_t[t]) for t in sorted(by_t)])

    def write_csv(self, loss_path, acc_path) -> None:
        with open(loss_path, "w") as fh:
            fh.write("t,q,client,loss\n")
            for t, q, c, loss in self.losses:
                fh.write(f"{t},{q},{c},{loss!r}\n")
        with open(acc_path, "w") as fh:
            fh.write("t,accuracy\n")
            for t, acc in self.accuracy:
                fh.write(f"{t},{acc!r}\n")

    def __eq__(self, other):
        if not isinstance(other, TrainHistory):
            return NotImplemented
        # repr round-trips floats, so this is a bitwise comparison
        return (repr(self.losses) == repr(other.losses)
                and repr(self.accuracy) == repr(other.accuracy))


# -- one client's computation ------------------------------------------------

Forward = Generator[tuple[int, Matrix], Matrix, "ForwardTape"]


@dataclass
class ForwardTape:
    entries: list[TapeEntry]
    embed_pre: list[tuple[np.ndarray, Matrix]]  # (rows, X[rows] W_in) per GCNII embedding
    top: Matrix


class ClientWorker:
    """Local state and arithmetic of client ``m``; transport-agnostic."""

    def __init__(self, m: int, part: PartitionedDataset, plan: LayerPlan, agg: AggKind,
                 model: ClientModel, label_mode: LabelMode = LabelMode.ALL_CLIENTS):
        self.m = m
        self.M = part.M
        self.shard = part.shards[m]
        self.labels = part.labels
        self.train_nodes = part.train
        self.plan = plan
        self.agg = agg
        self.model = model
        self.label_mode = LabelMode(label_mode)
        self.holds_labels = self.label_mode is LabelMode.ALL_CLIENTS or m == 0
        if self.holds_labels and model.classifier is None:
            raise ConfigError(f"client {m} holds labels but has no classifier")
        if isinstance(model.kind, Gcnii) and not isinstance(agg, Average):
            raise ConfigError("GCNII clients need averaging aggregation")
        self.adj = normalize_adjacency(self.shard.graph)
        self.neighbors = self.shard.graph.neighbor_lists()
        self.losses: list[tuple[int, int, int, float]] = []
        self.trace: list[tuple[int, int, Matrix]] | None = None

    def blocks(self, sets: Sequence[np.ndarray]) -> list[Matrix]:
        return [bipartite_adjacency(self.adj, sets[l + 1], sets[l]) for l in range(self.plan.num_layers)]

    def _embed(self, rows: np.ndarray, pre_log: list) -> Matrix:
        x = gather_rows(self.shard.features, rows)
        if self.model.input_proj is None:
            return x
        pre = matmul(x, self.model.input_proj)
        pre_log.append((rows, pre))
        return relu(pre)

    def forward(self, sets: Sequence[np.ndarray], blocks: Sequence[Matrix]) -> Forward:
        """Yields ``(layer, H_m^+)`` at aggregation layers; expects the value to continue with."""
        model = self.model
        pre_log: list = []
        entries = []
        h = self._embed(sets[0], pre_log)
        for l in range(self.plan.num_layers):
            h0 = self._embed(sets[l + 1], pre_log) if isinstance(model.kind, Gcnii) else None
            h_plus, entry = layer_forward(h, blocks[l], model.weights[l], model.kind, l, h0)
            entries.append(entry)
            h = (yield l, h_plus) if self.plan.aggregates(l) else h_plus
        return ForwardTape(entries, pre_log, h)

    def objective(self, top: Matrix, batch: np.ndarray, cotangent: Matrix | None
                  ) -> tuple[float, Matrix, Matrix | None]:
        """(loss, d loss / d top representation, d loss / d classifier)."""
        if self.holds_labels:
            logits = classify(top, self.model.classifier)
            loss, g = loss_and_grad(logits, self.labels[batch])
            return loss, matmul(g, self.model.classifier.T), matmul(top.T, g)
        if cotangent is None or cotangent.shape != top.shape:
            raise ProtocolError(f"client {self.m} has no usable cotangent for its top layer")
        # surrogate whose gradient is the received cotangent
        return float(np.sum(cotangent * top)), cotangent, None

    def backward(self, tape: ForwardTape, grad_top: Matrix, grad_cls: Matrix | None) -> list[Matrix]:
        model = self.model
        g = grad_top
        grad_w: list[Matrix] = [None] * self.plan.num_layers
        h0_grads: list[Matrix] = []
        for l in reversed(range(self.plan.num_layers)):
            if self.plan.aggregates(l):
                g = own_gradient(g, self.agg, self.M, self.m)
            g, grad_w[l], g0 = layer_backward(g, tape.entries[l])
            if g0 is not None:
                h0_grads.append(g0)
        grads = []
        if model.input_proj is not None:
            # embeddings were logged bottom-up: level 0 first, then each layer's residual slice
            pending = [g] + h0_grads[::-1]
            gp = np.zeros_like(model.input_proj)
            for (rows, pre), ge in zip(tape.embed_pre, pending):
                gp += matmul(gather_rows(self.shard.features, rows).T, np.where(pre > 0, ge, 0.0))
            grads.append(gp)
        grads.extend(grad_w)
        if model.classifier is not None:
            grads.append(grad_cls if grad_cls is not None else np.zeros_like(model.classifier))
        return grads

    def local_loss_and_grads(self, sets, blocks, stale: dict, cotangent: Matrix | None
                             ) -> tuple[float, list[Matrix], Matrix]:
        tape = _drive(self.forward(sets, blocks),
                      lambda l, h_plus: local_compose(_lookup(stale, l, self.m), h_plus,
                                                      self.agg, self.M, self.m))
        loss, g_top, g_cls = self.objective(tape.top, sets[-1], cotangent)
        return loss, self.backward(tape, g_top, g_cls), tape.top

    def local_update(self, sets, blocks, stale: dict, cotangent: Matrix | None, eta: float,
                     t: int = 0, q: int = 0) -> float:
        loss, grads, top = self.local_loss_and_grads(sets, blocks, stale, cotangent)
        if self.trace is not None:
            self.trace.append((t, q, top))
        self.model.apply_step(grads, eta)
        if self.holds_labels:
            self.losses.append((t, q, self.m, loss))
        return loss

    def holder_cotangent(self, top: Matrix, batch: np.ndarray) -> Matrix:
        _, g_top, _ = self.objective(top, batch, None)
        return g_top


def _lookup(stale: dict, l: int, m: int):
    try:
        return stale[l]
    except KeyError:
        raise ConfigError(f"client {m} has no cached aggregate for layer {l}") from None


def _drive(gen: Forward, respond: Callable[[int, Matrix], Matrix]) -> ForwardTape:
    try:
        l, h_plus = next(gen)
        while True:
            l, h_plus = gen.send(respond(l, h_plus))
    except StopIteration as stop:
        return stop.value


# -- in-memory joint inference -----------------------------------------------

@dataclass
class InferenceResult:
    caches: list[dict[int, Union[StaleBlock, Matrix]]]
    tops: list[Matrix]
    cotangent: Matrix | None = None


def joint_inference(workers: Sequence[ClientWorker], schedule: SampleSchedule,
                    blocks: Sequence[Sequence[Matrix]] | None = None,
                    keep_cache: bool = True, with_cotangent: bool = True) -> InferenceResult:
    """Lock-step split forward pass with the server's role played inline."""
    M = len(workers)
    agg = workers[0].agg
    if blocks is None:
        blocks = [w.blocks(schedule.client(m)) for m, w in enumerate(workers)]
    gens = [w.forward(schedule.client(m), blocks[m]) for m, w in enumerate(workers)]
    caches: list[dict] = [{} for _ in workers]
    tops: list = [None] * M
    pending = [next(g) for g in gens]
    while pending[0] is not None:
        layers = {p[0] for p in pending}
        if len(layers) != 1:
            raise ProtocolError(f"clients reached different aggregation layers {sorted(layers)}")
        (l,) = layers
        parts = [p[1] for p in pending]
        _check_shared(parts, f"layer {l}")
        try:
            h = aggregate(parts, agg)
        except ConfigError as exc:
            raise ProtocolError(f"layer {l}: {exc}") from None
        for m, g in enumerate(gens):
            if keep_cache:
                caches[m][l] = extract(h, parts[m], agg, M, m)
            try:
                pending[m] = g.send(h)
            except StopIteration as stop:
                tops[m] = stop.value.top
                pending[m] = None
        if any(p is None for p in pending) and not all(p is None for p in pending):
            raise ProtocolError("clients disagree on the number of aggregation layers")
    result = InferenceResult(caches, tops)
    if with_cotangent and workers[0].label_mode is LabelMode.SINGLE_HOLDER:
        result.cotangent = workers[0].holder_cotangent(tops[0], schedule.batch)
    return result


# -- protocol endpoints --------------------------------------------------------

def round_stream(root: RngState, t: int) -> RngState:
    return root.child("round").child(t)


def init_stream(root: RngState, m: int) -> RngState:
    return root.child("init").child(m)


def _expect(msg, cls, what: str):
    if not isinstance(msg, cls):
        raise ProtocolError(f"expected {cls.__name__} ({what}), got {msg.variant}")
    return msg


def _check_shared(parts: Sequence[np.ndarray], what: str) -> None:
    for m, p in enumerate(parts[1:], start=1):
        if p.shape[0] != parts[0].shape[0]:
            raise ProtocolError(f"{what}: client {m} sent {p.shape[0]} rows, client 0 sent {parts[0].shape[0]}")


class Server:
    """Coordinates rounds over a :class:`transport.ServerLink`."""

    def __init__(self, link: tp.ServerLink, plan: LayerPlan, agg: AggKind, root: RngState,
                 train_nodes: np.ndarray, sampler: SamplerConfig, label_mode: LabelMode):
        self.link = link
        self.plan = plan
        self.agg = agg
        self.root = root
        self.train_nodes = train_nodes
        self.sampler = sampler
        self.label_mode = LabelMode(label_mode)

    def _gather(self, cls, what: str) -> list:
        return [_expect(self.link.recv(m), cls, what) for m in range(self.link.M)]

    def run_round(self, t: int) -> None:
        link = self.link
        link.round = t
        link.broadcast(tp.Control(tp.ControlKind.BEGIN, t))
        if self.label_mode is LabelMode.SINGLE_HOLDER:
            batch = _expect(link.recv(0), tp.IndexUpload, "mini-batch from the label holder").ids
        else:
            batch = draw_batch(self.train_nodes, self.sampler.batch_size,
                               batch_stream(round_stream(self.root, t)).generator())
        link.broadcast(tp.SampleBroadcast(batch))
        for level in self.plan.union_levels:
            ups = self._gather(tp.IndexUpload, f"index set at level {level}")
            link.broadcast(tp.IndexUnionBroadcast(union_sets([u.ids for u in ups])))
        for l in self.plan.agg_layers:
            ups = self._gather(tp.ReprUpload, f"representation of layer {l}")
            for m, u in enumerate(ups):
                if u.layer != l:
                    raise ProtocolError(f"client {m} uploaded layer {u.layer}, expected {l}")
            parts = [u.matrix for u in ups]
            _check_shared(parts, f"layer {l}")
            try:
                h = aggregate(parts, self.agg)
            except ConfigError as exc:
                raise ProtocolError(f"layer {l}: {exc}") from None
            link.broadcast(tp.ReprBroadcast(l, h))
        if self.label_mode is LabelMode.SINGLE_HOLDER:
            cot = _expect(link.recv(0), tp.CotangentUpload, "cotangent from the label holder")
            link.broadcast(tp.CotangentBroadcast(cot.matrix))
        for m in range(link.M):
            done = _expect(link.recv(m), tp.Control, "end of round")
            if done.kind is not tp.ControlKind.END or done.value != t:
                raise ProtocolError(f"client {m} sent {done.kind.name} {done.value}, expected END {t}")

    def shutdown(self) -> None:
        self.link.broadcast(tp.Control(tp.ControlKind.SHUTDOWN, 0))


class ClientEndpoint:
    """Drives a :class:`ClientWorker` from messages received over a link."""

    def __init__(self, worker: ClientWorker, link: tp.ClientLink, root: RngState,
                 sampler: SamplerConfig, cfg: RoundConfig):
        self.worker = worker
        self.link = link
        self.root = root
        self.sampler = sampler
        self.cfg = cfg

    def _recv(self, cls, what: str):
        return _expect(self.link.recv(), cls, what)

    def serve(self) -> None:
        while True:
            ctl = self._recv(tp.Control, "round control")
            if ctl.kind is tp.ControlKind.SHUTDOWN:
                return
            if ctl.kind is not tp.ControlKind.BEGIN:
                raise ProtocolError(f"unexpected control {ctl.kind.name}")
            self.run_round(ctl.value)

    def run_round(self, t: int) -> None:
        w, link, plan = self.worker, self.link, self.worker.plan
        rr = round_stream(self.root, t)
        single = w.label_mode is LabelMode.SINGLE_HOLDER
        if single and w.m == 0:
            link.send(tp.IndexUpload(draw_batch(w.train_nodes, self.sampler.batch_size,
                                                batch_stream(rr).generator())))
        batch = self._recv(tp.SampleBroadcast, "mini-batch").ids
        sampler = LocalSampler(w.neighbors, plan.num_layers, self.sampler.fanout,
                               client_stream(rr, w.m).generator())
        sampler.start(batch)
        for level in plan.union_levels:
            link.send(tp.IndexUpload(sampler.descend(level)))
            sampler.overwrite(self._recv(tp.IndexUnionBroadcast, f"union at level {level}").ids)
        sampler.descend(0)
        sets = sampler.result()
        blocks = w.blocks(sets)

        cache: dict = {}

        def exchange(l: int, h_plus: Matrix) -> Matrix:
            link.send(tp.ReprUpload(l, h_plus))
            msg = self._recv(tp.ReprBroadcast, f"aggregate of layer {l}")
            if msg.layer != l:
                raise ProtocolError(f"received aggregate of layer {msg.layer}, expected {l}")
            cache[l] = extract(msg.matrix, h_plus, w.agg, w.M, w.m)
            return msg.matrix

        tape = _drive(w.forward(sets, blocks), exchange)
        if w.trace is not None:
            w.trace.append((t, -1, tape.top))
        cotangent = None
        if single:
            if w.m == 0:
                link.send(tp.CotangentUpload(w.holder_cotangent(tape.top, sets[-1])))
            cotangent = self._recv(tp.CotangentBroadcast, "cotangent").matrix
        for q in range(self.cfg.Q):
            w.local_update(sets, blocks, cache, cotangent, self.cfg.eta, t, q)
        link.send(tp.Control(tp.ControlKind.END, t))


# -- training and evaluation -------------------------------------------------

def init_models(part: PartitionedDataset, plan: LayerPlan, agg: AggKind, model: ModelConfig,
                seed: int, label_mode: LabelMode) -> list[ClientModel]:
    label_mode = LabelMode(label_mode)
    root = RngState(seed)
    width = agg_width(agg, model.hidden_dim)
    out = []
    for m, shard in enumerate(part.shards):
        holds = label_mode is LabelMode.ALL_CLIENTS or m == 0
        out.append(init_client_model(shard.width, client_hidden(agg, model.hidden_dim, m), width,
                                     plan.agg_layers, plan.num_layers, part.num_classes,
                                     model.kind, init_stream(root, m), with_classifier=holds))
    return out


def check_setup(part: PartitionedDataset, plan: LayerPlan, agg: AggKind, model: ModelConfig,
                label_mode: LabelMode) -> None:
    plan.check_label_mode(label_mode)
    if isinstance(agg, Concat) and len(agg.widths) != part.M:
        raise ConfigError(f"concat has {len(agg.widths)} blocks for {part.M} clients")
    if isinstance(model.kind, Gcnii) and not isinstance(agg, Average):
        raise ConfigError("the GCNII backbone is supported with averaging aggregation only")
    if model.hidden_dim < 1:
        raise ConfigError("hidden_dim must be positive")


def _connect(transport: str, M: int, host: str, port: int):
    if transport == "inproc":
        return tp.inproc_pair(M)
    if transport == "tcp":
        server = tp.TcpServerLink(M, host, port)
        addr = server.address
        clients: list = [None] * M
        errors: list = []

        def dial(m):
            try:
                clients[m] = tp.TcpClientLink(m, *addr)
            except GlasuError as exc:
                errors.append(exc)

        dialers = [threading.Thread(target=dial, args=(m,)) for m in range(M)]
        for d in dialers:
            d.start()
        try:
            server.accept()
        finally:
            for d in dialers:
                d.join()
        if errors:
            server.close()
            raise errors[0]
        return server, clients
    raise ConfigError(f"unknown transport {transport!r} (expected 'inproc' or 'tcp')")


def train(part: PartitionedDataset, plan: LayerPlan, cfg: RoundConfig, sampler: SamplerConfig,
          agg: AggKind, seed: int, *, model: ModelConfig = ModelConfig(), transport: str = "inproc",
          host: str = "127.0.0.1", port: int = 0, eval_nodes: np.ndarray | None = None,
          eval_every: int = 0, models: list[ClientModel] | None = None,
          trace: bool = False) -> tuple[list[ClientModel], TrainHistory]:
    """Run ``cfg.T`` rounds with one thread per client and the server on the caller's thread.

    ``eval_every > 0`` records accuracy on ``eval_nodes`` after every that many
    rounds (and after the last one). ``trace`` keeps every client's top-layer
    forward output, keyed ``(t, q)`` with ``q = -1`` for joint inference.
    """
    check_setup(part, plan, agg, model, cfg.label_mode)
    if models is None:
        models = init_models(part, plan, agg, model, seed, cfg.label_mode)
    workers = [ClientWorker(m, part, plan, agg, models[m], cfg.label_mode) for m in range(part.M)]
    if trace:
        for w in workers:
            w.trace = []
    root = RngState(seed)
    server_link, client_links = _connect(transport, part.M, host, port)
    history = TrainHistory(ledger=server_link.ledger)
    server = Server(server_link, plan, agg, root, part.train, sampler, cfg.label_mode)
    failures: list[BaseException] = []

    def run_client(ep: ClientEndpoint):
        try:
            ep.serve()
        except BaseException as exc:  # surfaced on the server thread below
            failures.append(exc)
        finally:
            ep.link.close()

    threads = [threading.Thread(target=run_client, name=f"client-{m}",
                                args=(ClientEndpoint(workers[m], client_links[m], root, sampler, cfg),),
                                daemon=True) for m in range(part.M)]
    for th in threads:
        th.start()
    try:
        for t in range(cfg.T):
            server.run_round(t)
            # every client is parked waiting for the next BEGIN here
            if eval_every and eval_nodes is not None and ((t + 1) % eval_every == 0 or t == cfg.T - 1):
                history.accuracy.append((t, evaluate([w.model for w in workers], part, plan, agg,
                                                     eval_nodes, cfg.label_mode)))
        server.shutdown()
    except GlasuError as exc:
        server_link.close()
        for th in threads:
            th.join(timeout=5)
        raise (failures[0] if failures else exc)
    for th in threads:
        th.join()
    server_link.close()
    if failures:
        raise failures[0]
    history.losses = sorted(x for w in workers for x in w.losses)
    if trace:
        history.traces = [w.trace for w in workers]
    return [w.model for w in workers], history


def evaluate(models: Sequence[ClientModel], part: PartitionedDataset, plan: LayerPlan, agg: AggKind,
             nodes: np.ndarray, label_mode: LabelMode = LabelMode.ALL_CLIENTS,
             chunk: int = 512) -> float:
    """Accuracy of full-neighborhood joint inference on ``nodes``."""
    nodes = np.unique(np.asarray(nodes, dtype=np.int64))
    if nodes.size == 0:
        warnings.warn("evaluating on an empty node set; reporting accuracy 1.0", RuntimeWarning)
        return 1.0
    label_mode = LabelMode(label_mode)
    workers = [ClientWorker(m, part, plan, agg, models[m], label_mode) for m in range(part.M)]
    neighbors = [w.neighbors for w in workers]
    correct = 0
    for start in range(0, nodes.size, chunk):
        batch = nodes[start:start + chunk]
        sched = full_schedule(neighbors, plan, batch)
        res = joint_inference(workers, sched, keep_cache=False, with_cotangent=False)
        if label_mode is LabelMode.SINGLE_HOLDER:
            logits = classify(res.tops[0], models[0].classifier)
        else:
            logits = classify(res.tops[0], models[0].classifier)
            for m in range(1, len(models)):
                logits = logits + classify(res.tops[m], models[m].classifier)
            logits = logits / len(models)
        correct += int((logits.argmax(axis=1) == part.labels[batch]).sum())
    return correct / nodes.size
