"""Vertical federated GNN training with lazy aggregation and stale updates."""
from .errors import ConfigError, DataError, GlasuError, NumericalError, ProtocolError
from .federation import (Average, Concat, ModelConfig, RoundConfig, TrainHistory, aggregate,
                         evaluate, extract, local_compose, server_backward_route, train)
from .graph import Dataset, Graph, PartitionedDataset, load_dataset, partition_dataset
from .sampling import LabelMode, LayerPlan, SamplerConfig
from .model import Gcn, Gcnii

__all__ = ["ConfigError", "DataError", "GlasuError", "NumericalError", "ProtocolError",
           "Average", "Concat", "ModelConfig", "RoundConfig", "TrainHistory", "aggregate",
           "evaluate", "extract", "local_compose", "server_backward_route", "train",
           "Dataset", "Graph", "PartitionedDataset", "load_dataset", "partition_dataset",
           "LabelMode", "LayerPlan", "SamplerConfig", "Gcn", "Gcnii"]
