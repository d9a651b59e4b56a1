import json
import re
from importlib import resources

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridfm.graph import AC_LINE, LINKS, RELATIONS, TRANSFORMER, NodeType, validate_graph
from gridfm.ingest import (
    BUNDLED_CASES,
    CaseSemanticError,
    CaseSyntaxError,
    RecordSchemaError,
    build_hetero_graph,
    case_to_json_record,
    load_case,
    parse_matpower_case,
    parse_opf_json_record,
)
from gridfm.powerflow import solve_power_flow
from helpers import four_bus_case, two_bus_case

TINY = """
function mpc = tiny
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1	0	135	1	1.1	0.9;
	2	1	50	10	0	0	1	1	0	135	1	1.1	0.9;  % a load bus
];
mpc.gen = [
	1	0	0	300	-300	1	100	1	250	10;
];
mpc.branch = [
	1	2	0.01	0.1	0.02	100	100	100	0	0	1	-360	360;
];
mpc.gencost = [
	2	0	0	3	0.01	40	0;
];
"""


def _matrix_rows(text, name):
    block = re.search(rf"mpc\.{name}\s*=\s*\[(.*?)\]", text, re.S).group(1)
    rows = []
    for line in block.splitlines():
        line = line.split("%")[0].strip().rstrip(";")
        if line:
            rows.append([float(v) for v in line.split()])
    return rows


@pytest.mark.parametrize("name", BUNDLED_CASES)
def test_bundled_counts_match_file(name):
    text = resources.files("gridfm.data").joinpath(f"{name}.m").read_text()
    bus, gen, br = (_matrix_rows(text, k) for k in ("bus", "gen", "branch"))
    case = load_case(name)
    assert len(case.buses) == len(bus)
    assert len(case.generators) == len(gen)
    assert len(case.branches) == len(br)
    assert len(case.loads) == sum(1 for r in bus if r[2] != 0 or r[3] != 0)
    assert len(case.shunts) == sum(1 for r in bus if r[4] != 0 or r[5] != 0)
    assert sum(b.is_transformer for b in case.branches) == sum(1 for r in br if r[8] != 0 or r[9] != 0)


def test_tiny_case_fields():
    c = parse_matpower_case(TINY, "tiny")
    assert c.base_mva == 100
    assert [b.id for b in c.buses] == [1, 2]
    assert c.loads[0].pd == 50 and c.loads[0].qd == 10
    assert c.generators[0].cost == (0.01, 40.0, 0.0)
    assert not c.branches[0].is_transformer


def test_transformer_classification_boundary():
    t = TINY.replace("100	100	100	0	0	1", "100	100	100	1.0	0	1")
    assert parse_matpower_case(t).branches[0].is_transformer
    s = TINY.replace("100	100	100	0	0	1", "100	100	100	0	2.5	1")
    assert parse_matpower_case(s).branches[0].is_transformer


def test_missing_bracket_reports_line():
    broken = TINY.replace("	1	0	0	300	-300	1	100	1	250	10;\n];", "	1	0	0	300	-300	1	100	1	250	10;\n")
    with pytest.raises(CaseSyntaxError) as e:
        parse_matpower_case(broken)
    assert e.value.line > 0


def test_ragged_row_reports_line():
    broken = TINY.replace("2	1	50	10	0	0	1	1	0	135	1	1.1	0.9;", "2	1	50	10	0	0	1	1	0	135	1	1.1;")
    with pytest.raises(CaseSyntaxError) as e:
        parse_matpower_case(broken)
    assert e.value.line == 6


def test_two_reference_buses_rejected():
    with pytest.raises(CaseSemanticError):
        parse_matpower_case(TINY.replace("2	1	50", "2	3	50"))


def test_unknown_generator_bus_rejected():
    with pytest.raises(CaseSemanticError):
        parse_matpower_case(TINY.replace("	1	0	0	300", "	7	0	0	300"))


def test_feature_layout():
    c = four_bus_case()
    g = build_hetero_graph(c)
    bus = g.node_features[NodeType.bus]
    assert np.allclose(bus[0], [138.0, 3, 0.94, 1.06])
    gen = g.node_features[NodeType.generator]
    assert np.allclose(gen[1], [10 / 100, 80 / 100, -30 / 100, 60 / 100, 30 / 100, 5 / 100, 1.01, 1, 0.03, 25.0, 1.0])
    assert np.allclose(g.node_features[NodeType.load], [[0.45, 0.12], [0.25, 0.08]])
    assert np.allclose(g.node_features[NodeType.shunt], [[0.0, 0.05]])
    line = g.relations[AC_LINE].edge_attr[0]
    assert np.allclose(line, [np.deg2rad(-30), np.deg2rad(30), 0.01, 0.01, 0.01, 0.08, 1.2, 1.2, 1.2], atol=1e-7)
    tr = g.relations[TRANSFORMER].edge_attr[0]
    assert np.allclose(tr, [-2 * np.pi, 2 * np.pi, 0.0, 0.12, 0.6, 0.6, 0.6, 0.98, np.deg2rad(1.5), 0, 0], atol=1e-6)


@pytest.mark.parametrize("name", ["case14", "case30"])
def test_schema_dimensions(name):
    g = build_hetero_graph(load_case(name))
    assert {t: g.node_features[t].shape[1] for t in NodeType} == {
        NodeType.bus: 4, NodeType.generator: 11, NodeType.load: 2, NodeType.shunt: 2
    }
    assert set(g.relations) == set(RELATIONS) and len(RELATIONS) == 8
    assert g.relations[AC_LINE].edge_attr.shape[1] == 9
    assert g.relations[TRANSFORMER].edge_attr.shape[1] == 11
    for to_bus, from_bus in LINKS.values():
        a, b = g.relations[to_bus], g.relations[from_bus]
        assert np.array_equal(a.src, b.dst) and np.array_equal(a.dst, b.src)
        assert a.edge_attr is None and b.edge_attr is None
    assert validate_graph(g) == []


def test_out_of_service_branch_dropped():
    from dataclasses import replace

    c = four_bus_case()
    c = replace(c, branches=(replace(c.branches[0], status=0),) + c.branches[1:])
    g = build_hetero_graph(c)
    assert g.relations[AC_LINE].num_edges == 2


def test_solution_becomes_target():
    c = two_bus_case()
    s = solve_power_flow(c)
    g = build_hetero_graph(c, s)
    assert g.bus_target.dtype == np.float64
    assert np.array_equal(g.bus_target[:, 0], s.va) and np.array_equal(g.bus_target[:, 1], s.vm)


def test_json_round_trip():
    c = four_bus_case()
    s = solve_power_flow(c)
    text = case_to_json_record(c, s, {"source": "unit"})
    c2, s2, meta = parse_opf_json_record(text)
    assert c2 == c
    assert np.array_equal(s2.va, s.va) and np.array_equal(s2.vm, s.vm)
    assert meta == {"source": "unit"}


def test_json_graph_matches_matpower_graph():
    c = load_case("case14")
    c2, _, _ = parse_opf_json_record(case_to_json_record(c))
    from gridfm.graph import graphs_equal

    assert graphs_equal(build_hetero_graph(c), build_hetero_graph(c2))


@pytest.mark.parametrize(
    "mutate, key",
    [
        (lambda d: d.pop("base_mva"), "base_mva"),
        (lambda d: d["buses"][0].pop("vmax"), "vmax"),
        (lambda d: d["buses"][0].__setitem__("bus_type", "slack"), "bus_type"),
        (lambda d: d["branches"][0].__setitem__("status", 0.5), "status"),
        (lambda d: d["generators"][0].__setitem__("cost", [1, 2]), "cost"),
        (lambda d: d.__setitem__("solution", {"va": [0.0], "vm": [1.0]}), "solution"),
    ],
)
def test_json_schema_errors_name_the_key(mutate, key):
    d = json.loads(case_to_json_record(two_bus_case()))
    mutate(d)
    with pytest.raises(RecordSchemaError) as e:
        parse_opf_json_record(json.dumps(d))
    assert e.value.key == key


def test_json_rejects_garbage():
    with pytest.raises(RecordSchemaError):
        parse_opf_json_record("{not json")


@settings(max_examples=30, deadline=None)
@given(st.floats(1, 200), st.floats(-50, 50), st.floats(0.0, 0.05), st.floats(0.02, 0.5))
def test_json_round_trip_property(pd, qd, r, x):
    c = two_bus_case(pd=pd, qd=qd, r=r, x=x)
    c2, _, _ = parse_opf_json_record(case_to_json_record(c))
    assert c2 == c
