"""Training regimes and the end-to-end experiment runner."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from ..federation import TrainHistory, evaluate, train
from ..graph import Dataset, PartitionedDataset, load_dataset, partition_dataset
from ..model import save_checkpoint
from ..reference import CentralizedTrainer
from ..theory import c0, max_step_size
from ..transport import CommLedger
from .config import ExperimentConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Glasu:
    K: int
    Q: int


@dataclass(frozen=True)
class Centralized:
    pass


@dataclass(frozen=True)
class Standalone:
    pass


@dataclass(frozen=True)
class SimCentralized:
    pass


def preset_of(cfg: ExperimentConfig):
    if cfg.preset == "centralized":
        return Centralized()
    if cfg.preset == "standalone":
        return Standalone()
    if cfg.preset == "simcentralized":
        return SimCentralized()
    return Glasu(cfg.plan().K, cfg.Q)


def apply_preset(preset, base: ExperimentConfig) -> ExperimentConfig:
    """Concrete configuration for a regime. Edge policy is applied in :func:`build_partition`."""
    L = base.layers
    every_layer = list(range(L))
    if isinstance(preset, Centralized):
        return dataclasses.replace(base, preset="centralized", M=1, agg_layers=every_layer, K=None,
                                   edge_keep_prob=1.0, label_mode="all")
    if isinstance(preset, Standalone):
        return dataclasses.replace(base, preset="standalone", label_mode="all")
    if isinstance(preset, SimCentralized):
        if base.Q != 1 and base.preset == "simcentralized":
            raise ConfigError("simulated centralized training uses Q=1")
        return dataclasses.replace(base, preset="simcentralized", agg_layers=every_layer, K=None, Q=1)
    if isinstance(preset, Glasu):
        if base.agg_layers is not None and len(base.agg_layers) != preset.K:
            raise ConfigError(f"preset K={preset.K} conflicts with agg_layers={base.agg_layers}")
        return dataclasses.replace(base, preset="glasu", K=preset.K, Q=preset.Q)
    raise ConfigError(f"unknown preset {preset!r}")


def build_partition(cfg: ExperimentConfig, ds: Dataset) -> PartitionedDataset:
    part = partition_dataset(ds, cfg.M, cfg.edge_keep_prob, cfg.seed)
    if cfg.preset in ("centralized", "simcentralized"):
        part = part.with_full_edges(ds.graph)
    return part


@dataclass
class ExperimentReport:
    config: dict
    train_accuracy: float
    val_accuracy: float
    test_accuracy: float
    per_client_test_accuracy: list = field(default_factory=list)
    ledger: dict = field(default_factory=dict)
    final_loss: float | None = None
    loss_csv: str | None = None
    accuracy_csv: str | None = None
    warnings: list = field(default_factory=list)
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _step_warnings(cfg: ExperimentConfig) -> list[str]:
    if cfg.constants is None:
        return []
    limit = max_step_size(c0(cfg.smoothness()), cfg.Q, cfg.M)
    if cfg.eta > limit:
        msg = f"eta={cfg.eta:g} exceeds the theoretical maximum step size {limit:g}"
        warnings.warn(msg, RuntimeWarning)
        return [msg]
    return []


def _run_single_party(cfg, part, seeds_from) -> tuple[list, TrainHistory, list[CentralizedTrainer]]:
    trainers = []
    history = TrainHistory(ledger=CommLedger())
    shards = [part] if cfg.preset == "centralized" else [part.client(m) for m in range(part.M)]
    for m, view in enumerate(shards):
        tr = CentralizedTrainer(view, cfg.plan(), cfg.model(), seeds_from)
        h = tr.train(cfg.round_config(), cfg.sampler())
        history.losses.extend((t, q, m, loss) for t, q, _, loss in h.losses)
        trainers.append(tr)
    history.losses.sort()
    return [tr.model for tr in trainers], history, trainers


def run_experiment(cfg: ExperimentConfig, out_dir=None, ds: Dataset | None = None) -> ExperimentReport:
    if cfg.seed is None:
        raise ConfigError("a seed is required")
    cfg = apply_preset(preset_of(cfg), cfg).validate()
    if ds is None:
        ds = load_dataset(cfg.dataset_path)
    part = build_partition(cfg, ds)
    notes = _step_warnings(cfg)
    start = time.perf_counter()
    per_client: list[float] = []
    if cfg.preset in ("centralized", "standalone"):
        models, history, trainers = _run_single_party(cfg, part, cfg.seed)
        accs = {name: [tr.accuracy(nodes) for tr in trainers]
                for name, nodes in (("train", ds.train), ("val", ds.val), ("test", ds.test))}
        per_client = accs["test"] if cfg.preset == "standalone" else []
        train_acc, val_acc, test_acc = (float(np.mean(accs[k])) for k in ("train", "val", "test"))
    else:
        plan, agg = cfg.plan(), cfg.agg()
        models, history = train(part, plan, cfg.round_config(), cfg.sampler(), agg, cfg.seed,
                                model=cfg.model(), transport=cfg.transport, port=cfg.port,
                                eval_nodes=ds.val, eval_every=cfg.eval_every)
        mode = cfg.round_config().label_mode
        train_acc, val_acc, test_acc = (evaluate(models, part, plan, agg, nodes, mode)
                                        for nodes in (ds.train, ds.val, ds.test))
    wall = time.perf_counter() - start
    report = ExperimentReport(cfg.to_dict(), train_acc, val_acc, test_acc, per_client,
                              history.ledger.summary() if history.ledger else {},
                              history.losses[-1][3] if history.losses else None,
                              warnings=notes, wall_time=wall)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.loss_csv = str(out / "loss.csv")
        report.accuracy_csv = str(out / "accuracy.csv")
        history.write_csv(report.loss_csv, report.accuracy_csv)
        for m, model in enumerate(models):
            save_checkpoint(model, out / f"client{m}.glsw")
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    log.info("test accuracy %.4f after %d rounds (%.1fs)", test_acc, cfg.T, wall)
    return report
