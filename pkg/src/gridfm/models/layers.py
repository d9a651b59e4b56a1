"""Relation-specific message-passing layers.

Each layer owns its parameters under a ``layer_{k}.`` prefix and maps the
per-type hidden states to per-relation outputs; :func:`combine` merges the
outputs arriving at each destination type.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..autodiff import ops
from ..autodiff.tensor import Tensor
from ..graph import NODE_TYPES, RELATIONS, GraphBatch, NodeType, Relation, has_attrs, EDGE_DIMS

SLOPE = 0.2


@dataclass
class EdgeIndex:
    """int64 endpoints of one relation inside a batch.

    Bus-to-bus relations are symmetrized: every physical branch is used in
    both orientations with the same attributes.
    """

    relation: Relation
    src: np.ndarray
    dst: np.ndarray
    attr: np.ndarray | None  # float64, already standardized
    num_src: int
    num_dst: int
    degree: np.ndarray  # in-degree of every destination node

    @property
    def num_edges(self) -> int:
        return int(self.src.shape[0])

    @property
    def receives(self) -> np.ndarray:
        return self.degree > 0


@dataclass
class BatchIndex:
    batch: GraphBatch
    edges: dict[Relation, EdgeIndex]
    num_nodes: dict[NodeType, int]
    membership: dict[NodeType, np.ndarray]
    num_graphs: int

    @classmethod
    def build(cls, batch: GraphBatch, attr_scale: dict | None = None) -> "BatchIndex":
        g = batch.graph
        num_nodes = {t: g.num_nodes(t) for t in NODE_TYPES}
        edges = {}
        for r in RELATIONS:
            st = g.relations[r]
            src = st.src.astype(np.int64)
            dst = st.dst.astype(np.int64)
            attr = None
            if has_attrs(r):
                attr = st.edge_attr.astype(np.float64)
                if attr_scale and r.key in attr_scale:
                    mu, sd = attr_scale[r.key]
                    attr = (attr - mu) / sd
            if r.src == r.dst:
                src, dst = np.concatenate([src, dst]), np.concatenate([dst, src])
                if attr is not None:
                    attr = np.concatenate([attr, attr], axis=0)
            deg = np.bincount(dst, minlength=num_nodes[r.dst])
            edges[r] = EdgeIndex(r, src, dst, attr, num_nodes[r.src], num_nodes[r.dst], deg)
        return cls(batch, edges, num_nodes, dict(batch.membership), batch.num_graphs)

    def active(self) -> list[EdgeIndex]:
        return [e for e in self.edges.values() if e.num_edges > 0]


def head_matrix(hidden: int, heads: int) -> np.ndarray:
    """[hidden, heads] 0/1 matrix summing each head's block of columns."""
    dk = hidden // heads
    m = np.zeros((hidden, heads))
    m[np.arange(hidden), np.arange(hidden) // dk] = 1.0
    return m


def combine(outputs: dict[Relation, Tensor], index: BatchIndex, hidden: dict[NodeType, Tensor]) -> dict[NodeType, Tensor]:
    """Mean over the relations that delivered messages to each node.

    Nodes that received nothing get a zero update.
    """
    out = {}
    for t in NODE_TYPES:
        terms, count = [], np.zeros(index.num_nodes[t])
        for r, y in outputs.items():
            if r.dst != t:
                continue
            mask = index.edges[r].receives.astype(np.float64)
            terms.append(ops.mul(y, mask[:, None]))
            count += mask
        if not terms:
            out[t] = None
            continue
        total = terms[0]
        for y in terms[1:]:
            total = ops.add(total, y)
        out[t] = ops.mul(total, (1.0 / np.maximum(count, 1.0))[:, None])
    return out


class Layer:
    """Base: parameter registration helpers and the residual update."""

    uses_edge_attr = True

    def __init__(self, model, k: int):
        self.model = model
        self.k = k
        self.prefix = f"layer_{k}"
        self.H = model.config.hidden_dim
        self.heads = model.config.num_heads
        self.build()

    def p(self, name: str) -> Tensor:
        return self.model.params[f"{self.prefix}.{name}"]

    def add(self, name: str, shape, init: str = "xavier") -> None:
        self.model.add_param(f"{self.prefix}.{name}", shape, init)

    def build(self) -> None:
        raise NotImplementedError

    def relation_output(self, e: EdgeIndex, h: dict[NodeType, Tensor]) -> Tensor:
        raise NotImplementedError

    def forward(self, h: dict[NodeType, Tensor], index: BatchIndex, activation=True, residual=True):
        outputs = {e.relation: self.relation_output(e, h) for e in index.active()}
        comb = combine(outputs, index, h)
        new = {}
        for t in NODE_TYPES:
            x = h[t]
            c = comb[t]
            y = x if c is None else (ops.add(x, c) if residual else c)
            if c is None and not residual:
                y = ops.mul(x, 0.0)
            new[t] = ops.leaky_relu(y, SLOPE) if activation else y
        return new


class SageLayer(Layer):
    uses_edge_attr = False

    def build(self):
        H = self.H
        for r in RELATIONS:
            self.add(f"{r.key}.W_src", (H, H))
            self.add(f"{r.key}.b", (H,), "zeros")
            self.add(f"{r.key}.W_self", (H, H))

    def relation_output(self, e, h):
        key = e.relation.key
        agg = ops.segment_reduce(ops.gather(h[e.relation.src], e.src), e.dst, e.num_dst, "mean")
        return ops.add(ops.linear(agg, self.p(f"{key}.W_src"), self.p(f"{key}.b")), ops.matmul(h[e.relation.dst], self.p(f"{key}.W_self")))


class _AttentionLayer(Layer):
    def attend(self, scores: Tensor, values: Tensor, e: EdgeIndex) -> Tensor:
        """Per-destination softmax over [m, heads] scores; weighted sum of values."""
        alpha = ops.segment_softmax(scores, e.dst, e.num_dst)
        expand = head_matrix(self.H, self.heads).T
        return ops.segment_reduce(ops.mul(ops.matmul(alpha, expand), values), e.dst, e.num_dst, "sum")

    def attention_weights(self, e: EdgeIndex, h) -> np.ndarray:
        """Attention weights of one relation (for inspection and tests)."""
        return ops.segment_softmax(self.scores(e, h), e.dst, e.num_dst).data


class GATv2Layer(_AttentionLayer):
    def build(self):
        H = self.H
        for r in RELATIONS:
            self.add(f"{r.key}.W_src", (H, H))
            self.add(f"{r.key}.W_dst", (H, H))
            if has_attrs(r):
                self.add(f"{r.key}.W_edge", (EDGE_DIMS[r], H))
            self.add(f"{r.key}.att", (H,), "att")
            self.add(f"{r.key}.b", (H,), "zeros")

    def _parts(self, e, h):
        key = e.relation.key
        xs = ops.gather(ops.matmul(h[e.relation.src], self.p(f"{key}.W_src")), e.src)
        z = ops.add(xs, ops.gather(ops.matmul(h[e.relation.dst], self.p(f"{key}.W_dst")), e.dst))
        if e.attr is not None:
            z = ops.add(z, ops.matmul(e.attr, self.p(f"{key}.W_edge")))
        z = ops.leaky_relu(z, SLOPE)
        scores = ops.matmul(ops.mul(z, self.p(f"{key}.att")), head_matrix(self.H, self.heads))
        return scores, xs

    def scores(self, e, h):
        return self._parts(e, h)[0]

    def relation_output(self, e, h):
        scores, xs = self._parts(e, h)
        return ops.add(self.attend(scores, xs, e), self.p(f"{e.relation.key}.b"))


class GATLayer(_AttentionLayer):
    def build(self):
        H = self.H
        for r in RELATIONS:
            self.add(f"{r.key}.W", (H, H))
            self.add(f"{r.key}.att_src", (H,), "att")
            self.add(f"{r.key}.att_dst", (H,), "att")
            if has_attrs(r):
                self.add(f"{r.key}.W_edge", (EDGE_DIMS[r], H))
                self.add(f"{r.key}.att_edge", (H,), "att")
            self.add(f"{r.key}.b", (H,), "zeros")

    def _parts(self, e, h):
        key = e.relation.key
        W = self.p(f"{key}.W")
        B = head_matrix(self.H, self.heads)
        xs = ops.matmul(h[e.relation.src], W)
        xd = ops.matmul(h[e.relation.dst], W)
        a_s = ops.matmul(ops.mul(xs, self.p(f"{key}.att_src")), B)
        a_d = ops.matmul(ops.mul(xd, self.p(f"{key}.att_dst")), B)
        s = ops.add(ops.gather(a_s, e.src), ops.gather(a_d, e.dst))
        if e.attr is not None:
            xe = ops.matmul(e.attr, self.p(f"{key}.W_edge"))
            s = ops.add(s, ops.matmul(ops.mul(xe, self.p(f"{key}.att_edge")), B))
        return ops.leaky_relu(s, SLOPE), ops.gather(xs, e.src)

    def scores(self, e, h):
        return self._parts(e, h)[0]

    def relation_output(self, e, h):
        scores, xs = self._parts(e, h)
        return ops.add(self.attend(scores, xs, e), self.p(f"{e.relation.key}.b"))


class HGTLayer(_AttentionLayer):
    uses_edge_attr = False

    def build(self):
        H = self.H
        for t in NODE_TYPES:
            for name in ("Q", "K", "V"):
                self.add(f"{t.name}.{name}", (H, H))
                self.add(f"{t.name}.{name}_b", (H,), "zeros")
        for r in RELATIONS:
            self.add(f"{r.key}.W_att", (H, H), "blockdiag")

    def _qkv(self, e, h):
        src, dst = e.relation.src.name, e.relation.dst.name
        q = ops.linear(h[e.relation.dst], self.p(f"{dst}.Q"), self.p(f"{dst}.Q_b"))
        k = ops.linear(h[e.relation.src], self.p(f"{src}.K"), self.p(f"{src}.K_b"))
        v = ops.linear(h[e.relation.src], self.p(f"{src}.V"), self.p(f"{src}.V_b"))
        B = head_matrix(self.H, self.heads)
        mask = B @ B.T
        k_rel = ops.matmul(k, ops.mul(self.p(f"{e.relation.key}.W_att"), mask))
        dk = self.H // self.heads
        s = ops.matmul(ops.mul(ops.gather(q, e.dst), ops.gather(k_rel, e.src)), B / math.sqrt(dk))
        return s, ops.gather(v, e.src)

    def scores(self, e, h):
        return self._qkv(e, h)[0]

    def relation_output(self, e, h):
        scores, v = self._qkv(e, h)
        return self.attend(scores, v, e)


class HEATLayer(_AttentionLayer):
    """Shared projections; node-type and edge-type embeddings carry the typing."""

    def build(self):
        H = self.H
        de = self.de = max(4, H // 8)
        self.add("type_emb", (len(NODE_TYPES), de), "normal")
        self.add("rel_emb", (len(RELATIONS), de), "normal")
        for r in RELATIONS:
            if has_attrs(r):
                self.add(f"{r.key}.W_attr", (EDGE_DIMS[r], de))
        self.add("W_q", (H + de, H))
        self.add("W_k", (H + de, H))
        self.add("W_e", (2 * de, H))
        self.add("att", (H,), "att")
        self.add("W_v", (H + 3 * de, H))
        self.add("b", (H,), "zeros")

    def _augment(self, x: Tensor, t: NodeType) -> Tensor:
        emb = ops.gather(self.p("type_emb"), np.full(x.shape[0], int(t)))
        return ops.concat([x, emb], axis=1)

    def _parts(self, e, h):
        r = e.relation
        m = e.num_edges
        hs = self._augment(h[r.src], r.src)
        hd = self._augment(h[r.dst], r.dst)
        rel = ops.gather(self.p("rel_emb"), np.full(m, RELATIONS.index(r)))
        if e.attr is not None:
            proj = ops.matmul(e.attr, self.p(f"{r.key}.W_attr"))
        else:
            proj = np.zeros((m, self.de))
        ef = ops.concat([rel, proj], axis=1)
        hs_e = ops.gather(hs, e.src)
        z = ops.add(ops.gather(ops.matmul(hd, self.p("W_q")), e.dst), ops.gather(ops.matmul(hs, self.p("W_k")), e.src))
        z = ops.leaky_relu(ops.add(z, ops.matmul(ef, self.p("W_e"))), SLOPE)
        scores = ops.matmul(ops.mul(z, self.p("att")), head_matrix(self.H, self.heads))
        msg = ops.matmul(ops.concat([hs_e, ef], axis=1), self.p("W_v"))
        return scores, msg

    def scores(self, e, h):
        return self._parts(e, h)[0]

    def relation_output(self, e, h):
        scores, msg = self._parts(e, h)
        return ops.add(self.attend(scores, msg, e), self.p("b"))


class PNALayer(Layer):
    """Bipartite PNA: {mean, max, min, std} x {identity, amplify, attenuate}."""

    AGGREGATORS = ("mean", "max", "min", "std")

    def build(self):
        H = self.H
        for r in RELATIONS:
            self.add(f"{r.key}.W_pre", (H, H))
            self.add(f"{r.key}.b_pre", (H,), "zeros")
            self.add(f"{r.key}.W_post", (12 * H, H))
            self.add(f"{r.key}.b_post", (H,), "zeros")

    def relation_output(self, e, h):
        key = e.relation.key
        x = ops.gather(ops.linear(h[e.relation.src], self.p(f"{key}.W_pre"), self.p(f"{key}.b_pre")), e.src)
        aggs = [ops.segment_reduce(x, e.dst, e.num_dst, mode) for mode in self.AGGREGATORS]
        delta = self.model.pna_delta(e.relation)
        logd = np.log(e.degree + 1.0)
        amp = (logd / delta)[:, None]
        with np.errstate(divide="ignore"):
            att = np.where(logd > 0, delta / np.where(logd > 0, logd, 1.0), 0.0)[:, None]
        parts = aggs + [ops.mul(a, amp) for a in aggs] + [ops.mul(a, att) for a in aggs]
        return ops.linear(ops.concat(parts, axis=1), self.p(f"{key}.W_post"), self.p(f"{key}.b_post"))


LAYER_TYPES = {
    "sage": SageLayer,
    "gat": GATv2Layer,
    "rgat": GATLayer,
    "hgt": HGTLayer,
    "heat": HEATLayer,
    "pna": PNALayer,
}
