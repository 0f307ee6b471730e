"""Layer-wise neighbor sampling with cross-client index synchronization.

Node sets are indexed by *level*: level ``L`` holds the mini-batch, level
``l`` the inputs of GNN layer ``l``. An aggregation at layer ``l`` combines
the clients' layer outputs, whose rows live at level ``l + 1``, so every such
level must carry the same index set on every client. The batch level is shared
by construction; every other synchronized level costs one union round.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .graph import Neighbors, PartitionedDataset
from .linalg import RngState


class LabelMode(str, enum.Enum):
    ALL_CLIENTS = "all"
    SINGLE_HOLDER = "single"


@dataclass(frozen=True)
class LayerPlan:
    num_layers: int
    agg_layers: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "agg_layers", tuple(int(l) for l in self.agg_layers))
        L, agg = self.num_layers, self.agg_layers
        if L < 1:
            raise ConfigError("a plan needs at least one layer")
        if not agg:
            raise ConfigError("agg_layers must be non-empty")
        if any(b <= a for a, b in zip(agg, agg[1:])):
            raise ConfigError(f"agg_layers must be strictly increasing, got {agg}")
        if agg[0] < 0 or agg[-1] >= L:
            raise ConfigError(f"agg_layers must lie in [0, {L}), got {agg}")

    @classmethod
    def uniform(cls, num_layers: int, K: int) -> "LayerPlan":
        """``K`` aggregation layers spread evenly, always including the last."""
        if not 1 <= K <= num_layers:
            raise ConfigError(f"K must lie in [1, {num_layers}], got {K}")
        step = num_layers / K
        return cls(num_layers, tuple(round(num_layers - 1 - i * step) for i in reversed(range(K))))

    @property
    def K(self) -> int:
        return len(self.agg_layers)

    def aggregates(self, layer: int) -> bool:
        return layer in self.agg_layers

    @property
    def union_levels(self) -> tuple[int, ...]:
        """Levels that need a union round, top-down (the batch level excluded)."""
        return tuple(sorted((l + 1 for l in self.agg_layers if l + 1 < self.num_layers), reverse=True))

    @property
    def shared_levels(self) -> tuple[int, ...]:
        return tuple(sorted({l + 1 for l in self.agg_layers} | {self.num_layers}))

    def check_label_mode(self, mode: LabelMode) -> None:
        if LabelMode(mode) is LabelMode.SINGLE_HOLDER and not self.aggregates(self.num_layers - 1):
            raise ConfigError("single-holder mode requires aggregation at the last layer")


@dataclass(frozen=True)
class SamplerConfig:
    batch_size: int
    fanout: int

    def __post_init__(self):
        if self.batch_size < 1 or self.fanout < 1:
            raise ConfigError("batch_size and fanout must be positive")


@dataclass(frozen=True)
class SampleSchedule:
    """``sets[m][level]``: sorted node ids of client ``m`` at ``level``."""

    sets: tuple[tuple[np.ndarray, ...], ...]

    @property
    def M(self) -> int:
        return len(self.sets)

    @property
    def num_layers(self) -> int:
        return len(self.sets[0]) - 1

    def client(self, m: int) -> tuple[np.ndarray, ...]:
        return self.sets[m]

    @property
    def batch(self) -> np.ndarray:
        return self.sets[0][-1]


def batch_stream(round_rng: RngState) -> RngState:
    return round_rng.child("batch")


def client_stream(round_rng: RngState, m: int) -> RngState:
    return round_rng.child("client").child(m)


def draw_batch(train_nodes: np.ndarray, size: int, gen: np.random.Generator) -> np.ndarray:
    train_nodes = np.asarray(train_nodes, dtype=np.int64)
    if train_nodes.size == 0:
        raise ConfigError("training mask is empty")
    if train_nodes.size <= size:
        return np.sort(train_nodes)
    return np.sort(gen.choice(train_nodes, size=size, replace=False))


def expand(neighbors: Neighbors, nodes: np.ndarray, fanout: int | None,
           gen: np.random.Generator | None) -> np.ndarray:
    """Closed sampled neighborhood of ``nodes``: each node plus up to ``fanout``
    of its neighbors drawn without replacement (``fanout=None`` takes all)."""
    picked = [np.asarray(nodes, dtype=np.int64)]
    for i in nodes:
        nbrs = neighbors.of(int(i))
        if fanout is None or nbrs.size <= fanout:
            picked.append(nbrs)
        else:
            picked.append(gen.choice(nbrs, size=fanout, replace=False))
    return np.unique(np.concatenate(picked))


def union_sets(parts: Sequence[np.ndarray]) -> np.ndarray:
    return np.unique(np.concatenate([np.asarray(p, dtype=np.int64) for p in parts]))


class LocalSampler:
    """One client's top-down walk over the levels of a round."""

    def __init__(self, neighbors: Neighbors, num_layers: int, fanout: int | None,
                 gen: np.random.Generator | None):
        self.neighbors = neighbors
        self.fanout = fanout
        self.gen = gen
        self.sets: list[np.ndarray | None] = [None] * (num_layers + 1)
        self.level = num_layers

    def start(self, batch: np.ndarray) -> None:
        self.sets[self.level] = np.asarray(batch, dtype=np.int64)

    def descend(self, level: int) -> np.ndarray:
        for l in range(self.level - 1, level - 1, -1):
            self.sets[l] = expand(self.neighbors, self.sets[l + 1], self.fanout, self.gen)
        self.level = level
        return self.sets[level]

    def overwrite(self, shared: np.ndarray) -> None:
        self.sets[self.level] = np.asarray(shared, dtype=np.int64)

    def result(self) -> tuple[np.ndarray, ...]:
        return tuple(self.sets)


def plan_schedule(samplers: Sequence[LocalSampler], plan: LayerPlan, batch: np.ndarray) -> SampleSchedule:
    """Run the sampling protocol in memory, with the union step inlined."""
    for s in samplers:
        s.start(batch)
    for level in plan.union_levels:
        shared = union_sets([s.descend(level) for s in samplers])
        for s in samplers:
            s.overwrite(shared)
    for s in samplers:
        s.descend(0)
    return SampleSchedule(tuple(s.result() for s in samplers))


def sample_round(part: PartitionedDataset, plan: LayerPlan, cfg: SamplerConfig,
                 rng: RngState, label_mode: LabelMode = LabelMode.ALL_CLIENTS) -> SampleSchedule:
    """Sampled node sets for one round.

    ``rng`` is the round's stream. The batch comes from its ``batch`` child no
    matter who draws it (server, or client 0 in single-holder mode), so both
    label modes see the same schedule for the same seed.
    """
    plan.check_label_mode(label_mode)
    batch = draw_batch(part.train, cfg.batch_size, batch_stream(rng).generator())
    samplers = [LocalSampler(shard.graph.neighbor_lists(), plan.num_layers, cfg.fanout,
                             client_stream(rng, m).generator())
                for m, shard in enumerate(part.shards)]
    return plan_schedule(samplers, plan, batch)


def full_schedule(neighbors: Sequence[Neighbors], plan: LayerPlan, nodes: np.ndarray) -> SampleSchedule:
    """Unsampled schedule (entire neighborhoods), used for evaluation."""
    samplers = [LocalSampler(nb, plan.num_layers, None, None) for nb in neighbors]
    return plan_schedule(samplers, plan, np.sort(np.asarray(nodes, dtype=np.int64)))


def count_sync_messages(plan: LayerPlan, M: int) -> int:
    """Batch broadcast plus ``M`` uploads and one broadcast per union round."""
    return 1 + len(plan.union_levels) * (M + 1)
