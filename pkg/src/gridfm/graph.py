"""Heterogeneous OPF graph model: node/relation types, validation, batching."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Mapping, NamedTuple, Sequence

import numpy as np


class NodeType(IntEnum):
    bus = 0
    generator = 1
    load = 2
    shunt = 3


NODE_TYPES = tuple(NodeType)
NODE_DIMS = {NodeType.bus: 4, NodeType.generator: 11, NodeType.load: 2, NodeType.shunt: 2}


class Relation(NamedTuple):
    src: NodeType
    name: str
    dst: NodeType

    @property
    def key(self) -> str:
        return f"{self.src.name}__{self.name}__{self.dst.name}"


_B, _G, _L, _S = NodeType.bus, NodeType.generator, NodeType.load, NodeType.shunt
AC_LINE = Relation(_B, "ac_line", _B)
TRANSFORMER = Relation(_B, "transformer", _B)
RELATIONS = (
    AC_LINE,
    TRANSFORMER,
    Relation(_G, "generator_link", _B),
    Relation(_B, "generator_link", _G),
    Relation(_L, "load_link", _B),
    Relation(_B, "load_link", _L),
    Relation(_S, "shunt_link", _B),
    Relation(_B, "shunt_link", _S),
)
EDGE_DIMS = {AC_LINE: 9, TRANSFORMER: 11}
# device -> bus link relation for each device type, and its mirror
LINKS = {
    _G: (RELATIONS[2], RELATIONS[3]),
    _L: (RELATIONS[4], RELATIONS[5]),
    _S: (RELATIONS[6], RELATIONS[7]),
}


def has_attrs(rel: Relation) -> bool:
    return rel in EDGE_DIMS


@dataclass(frozen=True, eq=False)
class RelationStore:
    relation: Relation
    src: np.ndarray  # uint32
    dst: np.ndarray  # uint32
    edge_attr: np.ndarray | None = None  # float32 [m, attr_dim] or None

    @property
    def num_edges(self) -> int:
        return int(self.src.shape[0])


@dataclass(frozen=True, eq=False)
class HeteroGraph:
    node_features: Mapping[NodeType, np.ndarray]
    relations: Mapping[Relation, RelationStore]
    context: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float32))
    bus_target: np.ndarray | None = None  # float64 [n_bus, 2] = (va rad, vm p.u.)
    graph_label: int | None = None

    def num_nodes(self, t: NodeType) -> int:
        return int(self.node_features[t].shape[0])

    def edges(self, rel: Relation) -> RelationStore:
        return self.relations[rel]


def make_graph(
    node_features: Mapping[NodeType, np.ndarray],
    edges: Mapping[Relation, tuple],
    context=None,
    bus_target=None,
    graph_label=None,
) -> HeteroGraph:
    """Build a HeteroGraph with canonical dtypes; missing types/relations are empty."""
    feats = {}
    for t in NODE_TYPES:
        x = node_features.get(t)
        feats[t] = np.zeros((0, NODE_DIMS[t]), np.float32) if x is None else np.asarray(x, np.float32)
    rels = {}
    for r in RELATIONS:
        spec = edges.get(r)
        if spec is None:
            src = dst = np.zeros(0, np.uint32)
            attr = np.zeros((0, EDGE_DIMS[r]), np.float32) if has_attrs(r) else None
        else:
            src = np.asarray(spec[0], np.uint32)
            dst = np.asarray(spec[1], np.uint32)
            attr = spec[2] if len(spec) > 2 else None
            if attr is not None:
                attr = np.asarray(attr, np.float32)
            elif has_attrs(r):
                attr = np.zeros((src.shape[0], EDGE_DIMS[r]), np.float32)
        rels[r] = RelationStore(r, src, dst, attr)
    ctx = np.zeros(0, np.float32) if context is None else np.asarray(context, np.float32).reshape(-1)
    tgt = None if bus_target is None else np.asarray(bus_target, np.float64)
    label = None if graph_label is None else int(graph_label)
    return HeteroGraph(feats, rels, ctx, tgt, label)


@dataclass(frozen=True)
class Violation:
    kind: str
    where: str
    index: int | None
    message: str

    def __str__(self) -> str:
        return self.message


def validate_graph(g: HeteroGraph) -> list[Violation]:
    """Return every schema violation in ``g``; empty list means valid."""
    out: list[Violation] = []

    def bad(kind, where, index, message):
        out.append(Violation(kind, where, index, message))

    counts = {}
    for t in NODE_TYPES:
        x = g.node_features.get(t)
        if x is None:
            bad("missing", t.name, None, f"missing {t.name} features")
            counts[t] = 0
            continue
        counts[t] = x.shape[0] if x.ndim >= 1 else 0
        if x.ndim != 2:
            bad("shape", t.name, None, f"{t.name} features must be 2-D, got {x.ndim}-D")
            continue
        if x.shape[1] != NODE_DIMS[t]:
            bad("dim", t.name, None, f"{t.name} dim {x.shape[1]} ≠ {NODE_DIMS[t]}")
        if x.dtype != np.float32:
            bad("dtype", t.name, None, f"{t.name} features dtype {x.dtype} ≠ float32")
        if not np.all(np.isfinite(x)):
            bad("nonfinite", t.name, None, f"{t.name} features contain non-finite values")

    for r in RELATIONS:
        st = g.relations.get(r)
        if st is None:
            bad("missing", r.key, None, f"missing relation {r.key}")
            continue
        if st.src.shape != st.dst.shape or st.src.ndim != 1:
            bad("shape", r.key, None, f"{r.key} src/dst shapes {st.src.shape}/{st.dst.shape} differ")
            continue
        for side, idx, t in (("src", st.src, r.src), ("dst", st.dst, r.dst)):
            if idx.size and int(idx.max()) >= counts[t]:
                i = int(np.argmax(idx >= counts[t]))
                bad("range", r.key, i, f"{r.key} edge {i} {side} {int(idx[i])} out of range for {t.name}")
        if has_attrs(r):
            a = st.edge_attr
            if a is None:
                bad("attr", r.key, None, f"{r.key} requires edge attributes")
            elif a.ndim != 2 or a.shape != (st.num_edges, EDGE_DIMS[r]):
                bad("dim", r.key, None, f"{r.key} attr shape {a.shape} ≠ ({st.num_edges}, {EDGE_DIMS[r]})")
            elif a.dtype != np.float32:
                bad("dtype", r.key, None, f"{r.key} attr dtype {a.dtype} ≠ float32")
        elif st.edge_attr is not None:
            bad("attr", r.key, None, f"{r.key} must not carry edge attributes")

    for t, (to_bus, from_bus) in LINKS.items():
        a, b = g.relations.get(to_bus), g.relations.get(from_bus)
        if a is None or b is None:
            continue
        if not (np.array_equal(a.src, b.dst) and np.array_equal(a.dst, b.src)):
            bad("mirror", to_bus.name, None, f"{to_bus.name} edges are not mirrored")
        linked = np.zeros(counts[t], dtype=bool)
        linked[a.src[a.src < counts[t]]] = True
        for i in np.flatnonzero(~linked):
            bad("orphan", t.name, int(i), f"orphan {t.name} node {int(i)}")

    if g.context.ndim != 1:
        bad("shape", "context", None, "context must be a vector")
    if g.bus_target is not None:
        if g.bus_target.shape != (counts[NodeType.bus], 2):
            bad("target", "bus", None, f"bus_target shape {g.bus_target.shape} ≠ ({counts[NodeType.bus]}, 2)")
    if g.graph_label is not None and g.graph_label not in (0, 1):
        bad("label", "graph", None, f"graph_label {g.graph_label} not in {{0, 1}}")
    return out


class GraphDimensionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GraphBatch:
    graph: HeteroGraph
    num_graphs: int
    node_offsets: Mapping[NodeType, np.ndarray]  # [G+1] cumulative counts
    edge_offsets: Mapping[Relation, np.ndarray]  # [G+1]
    membership: Mapping[NodeType, np.ndarray]  # graph index for every node
    context: np.ndarray  # [G, c] float32
    labels: np.ndarray | None  # [G] or None
    has_target: bool


def batch_graphs(gs: Sequence[HeteroGraph]) -> GraphBatch:
    """Disjoint union of ``gs`` with per-type index offsets."""
    if not gs:
        raise ValueError("cannot batch zero graphs")
    ctx_dim = gs[0].context.shape[0]
    for k, g in enumerate(gs):
        for t in NODE_TYPES:
            if g.node_features[t].ndim != 2 or g.node_features[t].shape[1] != NODE_DIMS[t]:
                raise GraphDimensionError(f"graph {k}: {t.name} width {g.node_features[t].shape} ≠ {NODE_DIMS[t]}")
        if g.context.shape[0] != ctx_dim:
            raise GraphDimensionError(f"graph {k}: context dim {g.context.shape[0]} ≠ {ctx_dim}")

    n = len(gs)
    node_off, member, feats = {}, {}, {}
    for t in NODE_TYPES:
        sizes = np.array([g.node_features[t].shape[0] for g in gs], dtype=np.int64)
        node_off[t] = np.concatenate([[0], np.cumsum(sizes)])
        member[t] = np.repeat(np.arange(n, dtype=np.int64), sizes)
        feats[t] = np.concatenate([g.node_features[t] for g in gs], axis=0) if n > 1 else gs[0].node_features[t]

    rels, edge_off = {}, {}
    for r in RELATIONS:
        stores = [g.relations[r] for g in gs]
        sizes = np.array([s.num_edges for s in stores], dtype=np.int64)
        edge_off[r] = np.concatenate([[0], np.cumsum(sizes)])
        if n == 1:
            rels[r] = stores[0]
            continue
        so = np.repeat(node_off[r.src][:-1], sizes).astype(np.uint32)
        do = np.repeat(node_off[r.dst][:-1], sizes).astype(np.uint32)
        src = np.concatenate([s.src for s in stores]) + so
        dst = np.concatenate([s.dst for s in stores]) + do
        attr = np.concatenate([s.edge_attr for s in stores], axis=0) if has_attrs(r) else None
        rels[r] = RelationStore(r, src, dst, attr)

    has_target = all(g.bus_target is not None for g in gs)
    target = None
    if has_target:
        target = np.concatenate([g.bus_target for g in gs], axis=0) if n > 1 else gs[0].bus_target
    labels = None
    if all(g.graph_label is not None for g in gs):
        labels = np.array([g.graph_label for g in gs], dtype=np.float64)
    context = np.stack([g.context for g in gs]).astype(np.float32) if ctx_dim else np.zeros((n, 0), np.float32)
    merged = HeteroGraph(feats, rels, np.zeros(0, np.float32), target, None)
    return GraphBatch(merged, n, node_off, edge_off, member, context, labels, has_target)


def unbatch_graphs(b: GraphBatch) -> list[HeteroGraph]:
    out = []
    g = b.graph
    for k in range(b.num_graphs):
        feats = {t: g.node_features[t][b.node_offsets[t][k] : b.node_offsets[t][k + 1]] for t in NODE_TYPES}
        rels = {}
        for r in RELATIONS:
            lo, hi = b.edge_offsets[r][k], b.edge_offsets[r][k + 1]
            st = g.relations[r]
            src = (st.src[lo:hi] - np.uint32(b.node_offsets[r.src][k])).astype(np.uint32)
            dst = (st.dst[lo:hi] - np.uint32(b.node_offsets[r.dst][k])).astype(np.uint32)
            attr = st.edge_attr[lo:hi] if st.edge_attr is not None else None
            rels[r] = RelationStore(r, src, dst, attr)
        tgt = None
        if g.bus_target is not None:
            bo = b.node_offsets[NodeType.bus]
            tgt = g.bus_target[bo[k] : bo[k + 1]]
        label = None if b.labels is None else int(b.labels[k])
        out.append(HeteroGraph(feats, rels, b.context[k].copy(), tgt, label))
    return out


class InvalidPermutationError(ValueError):
    pass


def invert_permutation(p: np.ndarray) -> np.ndarray:
    inv = np.empty_like(p)
    inv[p] = np.arange(p.shape[0], dtype=p.dtype)
    return inv


def permute_nodes(g: HeteroGraph, perms: Mapping[NodeType, np.ndarray]) -> HeteroGraph:
    """Relabel nodes: old node ``i`` of type t moves to position ``perms[t][i]``.

    Types missing from ``perms`` keep their order.  Edge order is unchanged;
    only endpoints are relabeled.
    """
    full = {}
    for t in NODE_TYPES:
        n = g.num_nodes(t)
        p = perms.get(t)
        if p is None:
            full[t] = np.arange(n, dtype=np.int64)
            continue
        p = np.asarray(p, dtype=np.int64)
        if p.shape != (n,) or not np.array_equal(np.sort(p), np.arange(n)):
            raise InvalidPermutationError(f"{t.name} permutation is not a bijection on {n} nodes")
        full[t] = p

    feats = {}
    for t in NODE_TYPES:
        x = g.node_features[t]
        y = np.empty_like(x)
        y[full[t]] = x
        feats[t] = y
    rels = {}
    for r, st in g.relations.items():
        src = full[r.src][st.src.astype(np.int64)].astype(np.uint32)
        dst = full[r.dst][st.dst.astype(np.int64)].astype(np.uint32)
        rels[r] = RelationStore(r, src, dst, st.edge_attr)
    tgt = None
    if g.bus_target is not None:
        tgt = np.empty_like(g.bus_target)
        tgt[full[NodeType.bus]] = g.bus_target
    return HeteroGraph(feats, rels, g.context, tgt, g.graph_label)


def _same(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


def graphs_equal(a: HeteroGraph, b: HeteroGraph) -> bool:
    """Bitwise equality of two graphs, dtypes included."""
    if a.graph_label != b.graph_label:
        return False
    if not (_same(a.context, b.context) and _same(a.bus_target, b.bus_target)):
        return False
    for t in NODE_TYPES:
        if not _same(a.node_features[t], b.node_features[t]):
            return False
    for r in RELATIONS:
        x, y = a.relations[r], b.relations[r]
        if not (_same(x.src, y.src) and _same(x.dst, y.dst) and _same(x.edge_attr, y.edge_attr)):
            return False
    return True
