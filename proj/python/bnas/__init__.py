"""Super-network conversion, training and NSGA-II subnetwork search."""

from ._core import (
    Dataset,
    Error,
    Model,
    SubnetworkConfig,
    SuperNetwork,
    convert,
    crowding_distance,
    dominates,
    fast_non_dominated_sort,
    load_model,
    make_synthetic_dataset,
    make_zoo_model,
    run_cli,
    zoo_names,
)

__all__ = [
    "Dataset",
    "Error",
    "Model",
    "SubnetworkConfig",
    "SuperNetwork",
    "convert",
    "crowding_distance",
    "dominates",
    "fast_non_dominated_sort",
    "load_model",
    "make_synthetic_dataset",
    "make_zoo_model",
    "run_cli",
    "zoo_names",
]
