"""Shared builders for federation-level tests."""
import numpy as np

from conftest import tiny_dataset
from glasu.federation import (Average, ClientWorker, Concat, ModelConfig, init_models,
                              joint_inference, round_stream)
from glasu.graph import partition_dataset
from glasu.linalg import RngState
from glasu.model import finite_diff_grad
from glasu.sampling import LabelMode, LayerPlan, SamplerConfig, sample_round

HIDDEN = 3


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


def stale_gradient_errors(kind, agg_name: str, mode: LabelMode, agg_layers=(0, 1), seed: int = 0,
                          warmup_eta: float = 0.05) -> list[float]:
    """Relative error between analytic local gradients and central differences.

    Runs joint inference on the five-node fixture, takes one local step so
    the cached aggregates are genuinely stale, then checks every client's
    gradient of its local objective with the cache (and cotangent) held fixed.
    """
    ds = tiny_dataset(d=4, seed=seed)
    part = partition_dataset(ds, 2, 0.8, seed)
    plan = LayerPlan(2, agg_layers)
    agg = Average() if agg_name == "average" else Concat((HIDDEN, HIDDEN))
    models = init_models(part, plan, agg, ModelConfig(kind, HIDDEN), seed, mode)
    workers = [ClientWorker(m, part, plan, agg, models[m], mode) for m in range(2)]
    sched = sample_round(part, plan, SamplerConfig(3, 2), round_stream(RngState(seed), 0), mode)
    blocks = [w.blocks(sched.client(m)) for m, w in enumerate(workers)]
    res = joint_inference(workers, sched, blocks)
    for m, w in enumerate(workers):
        w.local_update(sched.client(m), blocks[m], res.caches[m], res.cotangent, warmup_eta)
    errors = []
    for m, w in enumerate(workers):
        args = (sched.client(m), blocks[m], res.caches[m], res.cotangent)
        _, grads, _ = w.local_loss_and_grads(*args)
        fd = finite_diff_grad(lambda: w.local_loss_and_grads(*args)[0], w.model.params(), 1e-5)
        errors.extend(rel_err(g, f) for g, f in zip(grads, fd))
    return errors
