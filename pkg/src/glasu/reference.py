"""Single-party trainer with no protocol machinery.

Used for the centralized and standalone regimes and as the oracle that a
one-client federated run must reproduce bit for bit. It consumes the same
random streams as :func:`federation.train`.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .federation import ModelConfig, RoundConfig, TrainHistory, init_stream, round_stream
from .graph import PartitionedDataset, bipartite_adjacency, normalize_adjacency
from .linalg import RngState, gather_rows, matmul
from .model import ClientModel, Gcnii, classify, init_client_model, layer_backward, layer_forward, loss_and_grad, relu
from .sampling import LayerPlan, SamplerConfig, full_schedule, sample_round


class CentralizedTrainer:
    def __init__(self, part: PartitionedDataset, plan: LayerPlan, model_cfg: ModelConfig, seed: int):
        if part.M != 1:
            raise ConfigError(f"the centralized trainer needs exactly one shard, got {part.M}")
        self.part = part
        self.plan = plan
        self.shard = part.shards[0]
        self.adj = normalize_adjacency(self.shard.graph)
        self.root = RngState(seed)
        self.model = init_client_model(self.shard.width, model_cfg.hidden_dim, model_cfg.hidden_dim,
                                       plan.agg_layers, plan.num_layers, part.num_classes,
                                       model_cfg.kind, init_stream(self.root, 0))

    def _embed(self, rows):
        x = gather_rows(self.shard.features, rows)
        if self.model.input_proj is None:
            return x, None
        pre = matmul(x, self.model.input_proj)
        return relu(pre), pre

    def logits(self, sets) -> tuple[np.ndarray, list, list, np.ndarray]:
        blocks = [bipartite_adjacency(self.adj, sets[l + 1], sets[l]) for l in range(self.plan.num_layers)]
        embeds = []
        h, pre = self._embed(sets[0])
        embeds.append((sets[0], pre))
        tape = []
        for l in range(self.plan.num_layers):
            h0 = None
            if isinstance(self.model.kind, Gcnii):
                h0, pre = self._embed(sets[l + 1])
                embeds.append((sets[l + 1], pre))
            h, entry = layer_forward(h, blocks[l], self.model.weights[l], self.model.kind, l, h0)
            tape.append(entry)
        return classify(h, self.model.classifier), tape, embeds, h

    def step(self, sets, eta: float) -> float:
        logits, tape, embeds, top = self.logits(sets)
        loss, g_logits = loss_and_grad(logits, self.part.labels[sets[-1]])
        g_cls = matmul(top.T, g_logits)
        g = matmul(g_logits, self.model.classifier.T)
        grad_w = [None] * len(tape)
        residual = []
        for l in reversed(range(len(tape))):
            g, grad_w[l], g0 = layer_backward(g, tape[l])
            if g0 is not None:
                residual.append(g0)
        grads = []
        if self.model.input_proj is not None:
            gp = np.zeros_like(self.model.input_proj)
            for (rows, pre), ge in zip(embeds, [g] + residual[::-1]):
                gp += matmul(gather_rows(self.shard.features, rows).T, np.where(pre > 0, ge, 0.0))
            grads.append(gp)
        grads += grad_w
        grads.append(g_cls)
        self.model.apply_step(grads, eta)
        return loss

    def train(self, cfg: RoundConfig, sampler: SamplerConfig) -> TrainHistory:
        history = TrainHistory()
        for t in range(cfg.T):
            sets = sample_round(self.part, self.plan, sampler, round_stream(self.root, t)).client(0)
            for q in range(cfg.Q):
                history.losses.append((t, q, 0, self.step(sets, cfg.eta)))
        return history

    def accuracy(self, nodes) -> float:
        nodes = np.unique(np.asarray(nodes, dtype=np.int64))
        if nodes.size == 0:
            return 1.0
        sets = full_schedule([self.shard.graph.neighbor_lists()], self.plan, nodes).client(0)
        logits = self.logits(sets)[0]
        return float((logits.argmax(axis=1) == self.part.labels[nodes]).mean())


def train_centralized(part: PartitionedDataset, plan: LayerPlan, cfg: RoundConfig, sampler: SamplerConfig,
                      seed: int, model: ModelConfig = ModelConfig()) -> tuple[ClientModel, TrainHistory]:
    trainer = CentralizedTrainer(part, plan, model, seed)
    history = trainer.train(cfg, sampler)
    return trainer.model, history
