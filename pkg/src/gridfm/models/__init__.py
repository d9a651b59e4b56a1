"""Heterogeneous message-passing surrogates."""

from .config import (
    ATTENTION_TYPES,
    BUS_REGRESSION,
    CONDITIONING,
    GRAPH_CLASSIFICATION,
    MPNN_TYPES,
    ConfigError,
    HeadSpec,
    ModelConfig,
)
from .layers import BatchIndex, combine
from .model import (
    MissingHeadError,
    Model,
    Outputs,
    apply_conditioning,
    count_parameters,
    decode_bus_head,
    decode_graph_head,
    encode_node_types,
    hetero_layer_forward,
)

__all__ = [
    "ATTENTION_TYPES",
    "BUS_REGRESSION",
    "CONDITIONING",
    "GRAPH_CLASSIFICATION",
    "MPNN_TYPES",
    "BatchIndex",
    "ConfigError",
    "HeadSpec",
    "MissingHeadError",
    "Model",
    "ModelConfig",
    "Outputs",
    "apply_conditioning",
    "combine",
    "count_parameters",
    "decode_bus_head",
    "decode_graph_head",
    "encode_node_types",
    "hetero_layer_forward",
]
