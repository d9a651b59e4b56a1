"""The heterogeneous surrogate: encoders, message passing, conditioning, heads."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from ..autodiff import ops
from ..autodiff.tensor import Tensor
from ..graph import NODE_DIMS, NODE_TYPES, RELATIONS, GraphBatch, HeteroGraph, NodeType, batch_graphs, has_attrs, EDGE_DIMS
from .config import ConfigError, HeadSpec, ModelConfig
from .layers import LAYER_TYPES, SLOPE, BatchIndex

_BUS = NodeType.bus


class MissingHeadError(LookupError):
    pass


def init_array(name: str, shape: tuple[int, ...], kind: str, seed: int) -> np.ndarray:
    """Deterministic initial value of one named parameter."""
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "identity":
        return np.eye(shape[0], shape[1])
    if kind == "normal":
        return rng.normal(0.0, 0.1, size=shape)
    if kind == "blockdiag":
        return np.eye(shape[0], shape[1]) + rng.uniform(-0.1, 0.1, size=shape)
    fan_in, fan_out = (shape[0], 1) if len(shape) == 1 else shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class Outputs:
    bus: Tensor | None
    graph: Tensor | None
    hidden: dict


class Model:
    """Parameter registry plus forward pass.

    ``params`` maps stable dotted names to Tensors; the registry is complete
    after construction.  ``buffers`` hold non-trained statistics (input
    standardization, PNA degree scale) that are set once from training data.
    """

    def __init__(self, config: ModelConfig, materialize: bool = True):
        self.config = config.validate()
        self.materialize = materialize
        self.params: dict[str, Tensor] = {}
        self.shapes: dict[str, tuple[int, ...]] = {}
        self._init_kind: dict[str, str] = {}
        self.frozen: set[str] = set()
        self.buffers: dict[str, np.ndarray] = {}
        self._build()

    # registry -----------------------------------------------------------

    def add_param(self, name: str, shape, kind: str = "xavier") -> None:
        if name in self.params:
            raise ConfigError(f"duplicate parameter {name}")
        shape = tuple(int(s) for s in shape)
        self.shapes[name] = shape
        self._init_kind[name] = kind
        data = init_array(name, shape, kind, self.config.seed) if self.materialize else np.zeros((0,) * len(shape))
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    def reinitialize(self, names: Iterable[str] | None = None, seed: int | None = None) -> None:
        if seed is not None and seed != self.config.seed:
            self.config = replace(self.config, seed=seed)
        for n in self.params if names is None else names:
            p = self.params[n]
            p.data = init_array(n, p.shape, self._init_kind[n], self.config.seed)

    def trainable_names(self) -> list[str]:
        return [n for n in self.params if n not in self.frozen]

    def num_parameters(self, trainable_only: bool = False) -> int:
        names = self.trainable_names() if trainable_only else self.params
        return int(sum(int(np.prod(self.shapes[n])) for n in names))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            extra = sorted(set(state) - set(self.params))
            raise KeyError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for n, v in state.items():
            if n in self.params:
                if self.params[n].shape != np.shape(v):
                    raise ValueError(f"{n}: shape {np.shape(v)} ≠ {self.params[n].shape}")
                self.params[n].data = np.array(v, dtype=np.float64)

    def copy(self) -> "Model":
        m = Model(self.config)
        m.load_state_dict(self.state_dict())
        m.frozen = set(self.frozen)
        m.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return m

    # construction -------------------------------------------------------

    def _build(self) -> None:
        c, H = self.config, self.config.hidden_dim
        for t in NODE_TYPES:
            self.add_param(f"enc.{t.name}.W", (NODE_DIMS[t], H))
            self.add_param(f"enc.{t.name}.b", (H,), "zeros")
            self.buffers[f"norm.{t.name}.mean"] = np.zeros(NODE_DIMS[t])
            self.buffers[f"norm.{t.name}.std"] = np.ones(NODE_DIMS[t])
        for r in RELATIONS:
            if has_attrs(r):
                self.buffers[f"norm.{r.key}.mean"] = np.zeros(EDGE_DIMS[r])
                self.buffers[f"norm.{r.key}.std"] = np.ones(EDGE_DIMS[r])
            self.buffers[f"pna_delta.{r.key}"] = np.ones(1)
        if c.context_dim:
            self.buffers["norm.context.mean"] = np.zeros(c.context_dim)
            self.buffers["norm.context.std"] = np.ones(c.context_dim)

        cd = c.context_dim
        if c.conditioning == "film":
            for t in NODE_TYPES:
                for part in ("gamma", "beta"):
                    self.add_param(f"cond.{t.name}.W_{part}", (cd, H), "zeros")
                    self.add_param(f"cond.{t.name}.b_{part}", (H,), "zeros")
        elif c.conditioning == "node_concat":
            for t in NODE_TYPES:
                self.add_param(f"cond.{t.name}.W", (H + cd, H))
                self.add_param(f"cond.{t.name}.b", (H,), "zeros")
        elif c.conditioning == "pooled_fusion":
            self.add_param("cond.W", (H + cd, H))
            self.add_param("cond.b", (H,), "zeros")

        self.layers = [LAYER_TYPES[c.mpnn_type](self, k) for k in range(c.num_conv_layers)]
        for spec in c.heads:
            self._add_head(spec)
        self.buffers["target.mean"] = np.zeros(2)
        self.buffers["target.std"] = np.ones(2)

    def _add_head(self, spec: HeadSpec) -> None:
        H = self.config.hidden_dim
        self.add_param(f"{spec.name}.W1", (H, H))
        self.add_param(f"{spec.name}.b1", (H,), "zeros")
        self.add_param(f"{spec.name}.W2", (H, spec.out_dim))
        self.add_param(f"{spec.name}.b2", (spec.out_dim,), "zeros")

    def head_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("head_")]

    def layer_names(self, k: int) -> list[str]:
        return [n for n in self.params if n.startswith(f"layer_{k}.")]

    def set_heads(self, heads: Sequence[HeadSpec]) -> None:
        """Drop every head and register fresh ones (never restored from cache)."""
        for n in self.head_names():
            del self.params[n]
            del self.shapes[n]
            del self._init_kind[n]
            self.frozen.discard(n)
        self.config = replace(self.config, heads=tuple(heads)).validate()
        for spec in self.config.heads:
            self._add_head(spec)

    # statistics ---------------------------------------------------------

    def fit_statistics(self, graphs: Sequence[HeteroGraph], targets: bool = False) -> None:
        """Standardization and PNA degree buffers from training graphs."""
        if not graphs:
            return
        for t in NODE_TYPES:
            x = np.concatenate([g.node_features[t] for g in graphs], axis=0).astype(np.float64)
            self._set_norm(f"norm.{t.name}", x)
        for r in RELATIONS:
            if has_attrs(r):
                x = np.concatenate([g.relations[r].edge_attr for g in graphs], axis=0).astype(np.float64)
                self._set_norm(f"norm.{r.key}", x)
            logs = []
            for g in graphs:
                st = g.relations[r]
                dst = st.dst.astype(np.int64)
                if r.src == r.dst:
                    dst = np.concatenate([dst, st.src.astype(np.int64)])
                deg = np.bincount(dst, minlength=g.num_nodes(r.dst))
                logs.append(np.log(deg[deg > 0] + 1.0))
            logs = np.concatenate(logs)
            self.buffers[f"pna_delta.{r.key}"] = np.array([logs.mean() if logs.size else 1.0])
        if self.config.context_dim:
            self._set_norm("norm.context", np.stack([g.context for g in graphs]).astype(np.float64))
        if targets:
            ys = [g.bus_target for g in graphs if g.bus_target is not None]
            if ys:
                y = np.concatenate(ys, axis=0)
                self.buffers["target.mean"] = y.mean(axis=0)
                sd = y.std(axis=0)
                self.buffers["target.std"] = np.where(sd > 1e-12, sd, 1.0)

    def _set_norm(self, key: str, x: np.ndarray) -> None:
        if x.shape[0] == 0:
            return
        self.buffers[f"{key}.mean"] = x.mean(axis=0)
        sd = x.std(axis=0)
        self.buffers[f"{key}.std"] = np.where(sd > 1e-12, sd, 1.0)

    def pna_delta(self, relation) -> float:
        return float(self.buffers[f"pna_delta.{relation.key}"][0])

    # forward ------------------------------------------------------------

    def index(self, batch: GraphBatch | HeteroGraph | BatchIndex) -> BatchIndex:
        if isinstance(batch, BatchIndex):
            return batch
        if isinstance(batch, HeteroGraph):
            batch = batch_graphs([batch])
        scale = {
            r.key: (self.buffers[f"norm.{r.key}.mean"], self.buffers[f"norm.{r.key}.std"])
            for r in RELATIONS
            if has_attrs(r)
        }
        return BatchIndex.build(batch, scale)

    def forward(self, batch, activation: bool = True, residual: bool = True) -> Outputs:
        index = self.index(batch)
        h = encode_node_types(index, self)
        h = apply_conditioning(h, index, self)
        for layer in self.layers:
            h = hetero_layer_forward(h, index, layer, activation=activation, residual=residual)
        bus = graph = None
        names = {s.target for s in self.config.heads}
        if "bus" in names:
            bus = decode_bus_head(h, self)
        if "graph" in names:
            graph = decode_graph_head(h, index, self)
        return Outputs(bus, graph, h)

    __call__ = forward


def encode_node_types(index: BatchIndex, model: Model) -> dict[NodeType, Tensor]:
    g = index.batch.graph
    out = {}
    for t in NODE_TYPES:
        x = g.node_features[t]
        if x.ndim != 2 or x.shape[1] != NODE_DIMS[t]:
            raise ValueError(f"{t.name} features {x.shape} do not match width {NODE_DIMS[t]}")
        z = (x.astype(np.float64) - model.buffers[f"norm.{t.name}.mean"]) / model.buffers[f"norm.{t.name}.std"]
        out[t] = ops.leaky_relu(ops.linear(z, model.params[f"enc.{t.name}.W"], model.params[f"enc.{t.name}.b"]), SLOPE)
    return out


def _context(index: BatchIndex, model: Model) -> np.ndarray:
    ctx = index.batch.context.astype(np.float64)
    if ctx.shape[1] != model.config.context_dim:
        raise ValueError(f"context width {ctx.shape[1]} ≠ configured {model.config.context_dim}")
    return (ctx - model.buffers["norm.context.mean"]) / model.buffers["norm.context.std"]


def apply_conditioning(h: dict, index: BatchIndex, model: Model) -> dict:
    mode = model.config.conditioning
    if mode == "none":
        return h
    if index.batch.context.shape[1] == 0:
        raise ValueError(f"conditioning {mode!r} requires a non-empty context")
    ctx = _context(index, model)
    P = model.params
    out = {}
    if mode == "film":
        for t in NODE_TYPES:
            gamma = ops.add(ops.linear(ctx, P[f"cond.{t.name}.W_gamma"], P[f"cond.{t.name}.b_gamma"]), 1.0)
            beta = ops.linear(ctx, P[f"cond.{t.name}.W_beta"], P[f"cond.{t.name}.b_beta"])
            m = index.membership[t]
            out[t] = ops.add(ops.mul(ops.gather(gamma, m), h[t]), ops.gather(beta, m))
        return out
    if mode == "node_concat":
        for t in NODE_TYPES:
            per_node = ctx[index.membership[t]]
            out[t] = ops.linear(ops.concat([h[t], per_node], axis=1), P[f"cond.{t.name}.W"], P[f"cond.{t.name}.b"])
        return out
    # pooled_fusion
    pooled = ops.segment_reduce(h[_BUS], index.membership[_BUS], index.num_graphs, "mean")
    fused = ops.leaky_relu(ops.linear(ops.concat([pooled, ctx], axis=1), P["cond.W"], P["cond.b"]), SLOPE)
    return {t: ops.add(h[t], ops.gather(fused, index.membership[t])) for t in NODE_TYPES}


def hetero_layer_forward(h: dict, index: BatchIndex, layer, activation: bool = True, residual: bool = True) -> dict:
    for t in NODE_TYPES:
        if h[t].shape != (index.num_nodes[t], layer.H):
            raise ValueError(f"{t.name} hidden {h[t].shape} ≠ ({index.num_nodes[t]}, {layer.H})")
    return layer.forward(h, index, activation=activation, residual=residual)


def _mlp(x, model: Model, name: str) -> Tensor:
    P = model.params
    z = ops.leaky_relu(ops.linear(x, P[f"{name}.W1"], P[f"{name}.b1"]), SLOPE)
    return ops.linear(z, P[f"{name}.W2"], P[f"{name}.b2"])


def decode_bus_head(h: dict, model: Model) -> Tensor:
    if "head_bus.W1" not in model.params:
        raise MissingHeadError("model has no bus head")
    y = _mlp(h[_BUS], model, "head_bus")
    return ops.add(ops.mul(y, model.buffers["target.std"]), model.buffers["target.mean"])


def decode_graph_head(h: dict, index: BatchIndex, model: Model) -> Tensor:
    if "head_graph.W1" not in model.params:
        raise MissingHeadError("model has no graph head")
    pooled = ops.segment_reduce(h[_BUS], index.membership[_BUS], index.num_graphs, "mean")
    return _mlp(pooled, model, "head_graph")


def count_parameters(config: ModelConfig) -> int:
    """Total parameter count, computed from shapes without allocating."""
    return Model(config, materialize=False).num_parameters()
