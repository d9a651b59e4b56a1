import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridfm.graph import (
    AC_LINE,
    LINKS,
    NODE_DIMS,
    NODE_TYPES,
    RELATIONS,
    GraphDimensionError,
    InvalidPermutationError,
    NodeType,
    batch_graphs,
    graphs_equal,
    invert_permutation,
    make_graph,
    permute_nodes,
    unbatch_graphs,
    validate_graph,
)
from gridfm.ingest import build_hetero_graph
from helpers import four_bus_case, random_graphs


def test_canonical_dtypes():
    g = build_hetero_graph(four_bus_case())
    for t in NODE_TYPES:
        assert g.node_features[t].dtype == np.float32
        assert g.node_features[t].shape[1] == NODE_DIMS[t]
    for r in RELATIONS:
        assert g.relations[r].src.dtype == np.uint32
    assert validate_graph(g) == []


@settings(max_examples=60, deadline=None)
@given(random_graphs())
def test_random_graphs_validate(g):
    assert validate_graph(g) == []


def test_orphan_device_reported():
    g = make_graph({NodeType.bus: np.zeros((2, 4)), NodeType.load: np.zeros((1, 2))}, {})
    kinds = [v.kind for v in validate_graph(g)]
    assert "orphan" in kinds


def test_unmirrored_link_reported():
    to_bus, from_bus = LINKS[NodeType.load]
    g = make_graph(
        {NodeType.bus: np.zeros((2, 4)), NodeType.load: np.zeros((1, 2))},
        {to_bus: ([0], [0]), from_bus: ([1], [0])},
    )
    assert any(v.kind == "mirror" for v in validate_graph(g))


def test_out_of_range_edge_reported():
    g = make_graph({NodeType.bus: np.zeros((2, 4))}, {AC_LINE: ([0], [5])})
    v = [x for x in validate_graph(g) if x.kind == "range"]
    assert v and v[0].index == 0


def test_wrong_width_reported():
    g = make_graph({NodeType.bus: np.zeros((2, 4))}, {})
    bad = dict(g.node_features)
    bad[NodeType.bus] = np.zeros((2, 3), np.float32)
    g2 = type(g)(bad, g.relations, g.context)
    assert any(v.kind == "dim" for v in validate_graph(g2))


@settings(max_examples=40, deadline=None)
@given(st.lists(random_graphs(), min_size=1, max_size=4))
def test_batch_unbatch_round_trip(gs):
    ctx = gs[0].context.shape[0]
    gs = [g for g in gs if g.context.shape[0] == ctx]
    b = batch_graphs(gs)
    back = unbatch_graphs(b)
    assert len(back) == len(gs)
    for a, c in zip(gs, back):
        # targets and labels only survive batching when every member has them
        if b.has_target and b.labels is not None:
            assert graphs_equal(a, c)
        for t in NODE_TYPES:
            assert np.array_equal(a.node_features[t], c.node_features[t])
        for r in RELATIONS:
            assert np.array_equal(a.relations[r].src, c.relations[r].src)
            assert np.array_equal(a.relations[r].dst, c.relations[r].dst)


def test_batch_offsets():
    g = build_hetero_graph(four_bus_case())
    b = batch_graphs([g, g, g])
    assert b.num_graphs == 3
    assert list(b.node_offsets[NodeType.bus]) == [0, 4, 8, 12]
    assert b.membership[NodeType.load].tolist() == [0, 0, 1, 1, 2, 2]
    src = b.graph.relations[AC_LINE].src
    assert src.max() < 12 and src[-1] >= 8


def test_batch_rejects_mismatched_context():
    a = make_graph({NodeType.bus: np.zeros((1, 4))}, {}, context=[1.0])
    c = make_graph({NodeType.bus: np.zeros((1, 4))}, {}, context=[1.0, 2.0])
    with pytest.raises(GraphDimensionError):
        batch_graphs([a, c])


def test_batch_rejects_empty():
    with pytest.raises(ValueError):
        batch_graphs([])


@settings(max_examples=40, deadline=None)
@given(random_graphs(), st.integers(0, 2**31 - 1))
def test_permutation_inverse(g, seed):
    rng = np.random.default_rng(seed)
    perms = {t: rng.permutation(g.num_nodes(t)) for t in NODE_TYPES}
    p = permute_nodes(g, perms)
    assert validate_graph(p) == []
    back = permute_nodes(p, {t: invert_permutation(q) for t, q in perms.items()})
    assert graphs_equal(g, back)


def test_rejects_non_bijection():
    g = build_hetero_graph(four_bus_case())
    with pytest.raises(InvalidPermutationError):
        permute_nodes(g, {NodeType.bus: np.array([0, 0, 1, 2])})
