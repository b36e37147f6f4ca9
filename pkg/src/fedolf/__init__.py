"""Federated learning with ordered layer freezing, frozen-stack sparsification and cost models."""

from .costmodel import CostLedger, EnergyParams, flops_estimate, theoretical_memory
from .data import DatasetShard, PartitionedDataset, make_federated, synth_blobs
from .diagnostics import epsilon_bounds, linear_cka
from .federation import FedConfig, RoundHistory, aggregate_layerwise, run_federated
from .nn import ArchitectureSpec, Model, build_model
from .toa import ToaConfig, sparsify_frozen_stack

__version__ = "0.1.0"

__all__ = [
    "ArchitectureSpec", "CostLedger", "DatasetShard", "EnergyParams", "FedConfig", "Model",
    "PartitionedDataset", "RoundHistory", "ToaConfig", "aggregate_layerwise", "build_model",
    "epsilon_bounds", "flops_estimate", "linear_cka", "make_federated", "run_federated",
    "sparsify_frozen_stack", "synth_blobs", "theoretical_memory",
]
