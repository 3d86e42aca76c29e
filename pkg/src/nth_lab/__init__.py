"""Finite-width ResNet tangent kernels, gradient flow and their width limits."""

from .model import Dataset, NetworkConfig, Params, forward, init_params, make_dataset, network_output

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "NetworkConfig",
    "Params",
    "forward",
    "init_params",
    "make_dataset",
    "network_output",
]
