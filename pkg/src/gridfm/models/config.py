from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

MPNN_TYPES = ("sage", "gat", "rgat", "hgt", "heat", "pna")
ATTENTION_TYPES = ("gat", "rgat", "hgt", "heat")
CONDITIONING = ("none", "film", "node_concat", "pooled_fusion")
HIDDEN_BOUNDS = (32, 256)
LAYER_BOUNDS = (2, 6)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HeadSpec:
    target: str = "bus"  # bus | graph
    out_dim: int = 2
    task: str = "regression"  # regression | binary-classification

    @property
    def name(self) -> str:
        return f"head_{self.target}"


BUS_REGRESSION = HeadSpec("bus", 2, "regression")
GRAPH_CLASSIFICATION = HeadSpec("graph", 1, "binary-classification")


@dataclass(frozen=True)
class ModelConfig:
    mpnn_type: str = "sage"
    hidden_dim: int = 64
    num_conv_layers: int = 3
    num_heads: int = 4
    conditioning: str = "none"
    context_dim: int = 0
    heads: tuple[HeadSpec, ...] = field(default=(BUS_REGRESSION,))
    seed: int = 0

    def validate(self, hpo_bounds: bool = False) -> "ModelConfig":
        if self.mpnn_type not in MPNN_TYPES:
            raise ConfigError(f"unknown mpnn_type {self.mpnn_type!r}")
        if self.conditioning not in CONDITIONING:
            raise ConfigError(f"unknown conditioning {self.conditioning!r}")
        if self.conditioning != "none" and self.context_dim <= 0:
            raise ConfigError(f"conditioning {self.conditioning!r} needs a non-empty context")
        if self.hidden_dim < 1 or self.num_conv_layers < 1:
            raise ConfigError("hidden_dim and num_conv_layers must be positive")
        if hpo_bounds:
            if not HIDDEN_BOUNDS[0] <= self.hidden_dim <= HIDDEN_BOUNDS[1]:
                raise ConfigError(f"hidden_dim {self.hidden_dim} outside {HIDDEN_BOUNDS}")
            if not LAYER_BOUNDS[0] <= self.num_conv_layers <= LAYER_BOUNDS[1]:
                raise ConfigError(f"num_conv_layers {self.num_conv_layers} outside {LAYER_BOUNDS}")
        if self.mpnn_type in ATTENTION_TYPES and self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        names = [h.name for h in self.heads]
        if len(set(names)) != len(names):
            raise ConfigError("at most one head per target")
        for h in self.heads:
            if h.target not in ("bus", "graph") or h.task not in ("regression", "binary-classification"):
                raise ConfigError(f"invalid head {h}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["heads"] = [asdict(h) for h in self.heads]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["heads"] = tuple(HeadSpec(**h) for h in d.get("heads", [asdict(BUS_REGRESSION)]))
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)
