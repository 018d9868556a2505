"""Hamiltonian bracket graph networks for mesh-based surrogate modelling."""
from .graph import Graph, GraphError, extract_subgraph, graph_hash, load_graph, save_graph
from .data import Dataset, NormStats, Sample, compute_stats, load_dataset, write_dataset
from .attention import AttentionParams, edge_metric, node_metric
from .dynamics import FlowConfig, LatentState, energy, integrate, vector_field
from .nnet import ModelConfig, ModelParams, Surrogate, TrainConfig, fit, init_params

__version__ = "0.1.0"
