"""Small fixtures shared by the test modules."""

from __future__ import annotations

import math

import numpy as np
from hypothesis import strategies as st

from gridfm.autodiff import ops
from gridfm.autodiff.tensor import Tape
from gridfm.graph import EDGE_DIMS, LINKS, NODE_DIMS, RELATIONS, NodeType, make_graph
from gridfm.ingest import Branch, Bus, Generator, GridCase, Load, Shunt


def two_bus_case(pd=50.0, qd=0.0, r=0.0, x=0.1, vmax=1.1) -> GridCase:
    return GridCase(
        base_mva=100.0,
        buses=(Bus(1, 3, 138.0, 0.9, 1.1), Bus(2, 1, 138.0, 0.9, vmax)),
        generators=(Generator(1, 0.0, 0.0, 300.0, -300.0, 1.0, 100.0, 1, 200.0, 0.0, (0.01, 10.0, 0.0)),),
        loads=(Load(2, pd, qd),),
        branches=(Branch(1, 2, r, x, 0.0, rate_a=100.0),),
        name="two_bus",
    )


def four_bus_case() -> GridCase:
    """Ring of four buses with one transformer, two generators, a shunt."""
    return GridCase(
        base_mva=100.0,
        buses=(
            Bus(1, 3, 138.0, 0.94, 1.06),
            Bus(2, 2, 138.0, 0.94, 1.06),
            Bus(3, 1, 69.0, 0.94, 1.06),
            Bus(4, 1, 69.0, 0.95, 1.05),
        ),
        generators=(
            Generator(1, 40.0, 0.0, 100.0, -50.0, 1.02, 100.0, 1, 150.0, 0.0, (0.02, 20.0, 0.0)),
            Generator(2, 30.0, 5.0, 60.0, -30.0, 1.01, 100.0, 1, 80.0, 10.0, (0.03, 25.0, 1.0)),
        ),
        loads=(Load(3, 45.0, 12.0), Load(4, 25.0, 8.0)),
        shunts=(Shunt(4, 0.0, 5.0),),
        branches=(
            Branch(1, 2, 0.01, 0.08, 0.02, 120.0, 120.0, 120.0, angmin=-30.0, angmax=30.0),
            Branch(2, 3, 0.02, 0.10, 0.03, 90.0, 90.0, 90.0),
            Branch(1, 4, 0.015, 0.09, 0.025, 100.0, 100.0, 100.0),
            Branch(3, 4, 0.0, 0.12, 0.0, 60.0, 60.0, 60.0, tap=0.98, shift=1.5),
        ),
        name="four_bus",
    )


def directional_check(loss_fn, params, rng, h=1e-5, floor=1e-8):
    """Relative errors of the tape gradient against central differences.

    One random direction per parameter tensor, plus one joint direction.
    """
    with Tape() as tape:
        out = loss_fn()
    grads = tape.gradient(out, params)
    errors = []
    dirs = []
    for k, p in enumerate(params):
        v = [np.zeros_like(q.data) for q in params]
        v[k] = rng.standard_normal(p.shape)
        dirs.append(v)
    dirs.append([rng.standard_normal(q.shape) for q in params])
    for v in dirs:
        analytic = sum(float(np.sum(g * d)) for g, d in zip(grads, v))
        base = [q.data.copy() for q in params]
        for q, b, d in zip(params, base, v):
            q.data = b + h * d
        fp = loss_fn().item()
        for q, b, d in zip(params, base, v):
            q.data = b - h * d
        fm = loss_fn().item()
        for q, b in zip(params, base):
            q.data = b
        numeric = (fp - fm) / (2 * h)
        errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor))
    return errors


def model_loss(model, batch):
    out = model(batch)
    terms = []
    if out.bus is not None:
        terms.append(ops.mse(out.bus, batch.graph.bus_target))
    if out.graph is not None:
        terms.append(ops.bce_with_logits(out.graph, batch.labels[:, None]))
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return total


@st.composite
def random_graphs(draw):
    seed = draw(st.integers(0, 2**31 - 1))
    rng = np.random.default_rng(seed)
    nb = draw(st.integers(1, 7))
    counts = {NodeType.bus: nb}
    feats = {NodeType.bus: rng.standard_normal((nb, 4))}
    edges = {}
    for t in (NodeType.generator, NodeType.load, NodeType.shunt):
        n = draw(st.integers(0, 4))
        counts[t] = n
        feats[t] = rng.standard_normal((n, NODE_DIMS[t]))
        bus = rng.integers(0, nb, n)
        to_bus, from_bus = LINKS[t]
        edges[to_bus] = (np.arange(n), bus)
        edges[from_bus] = (bus, np.arange(n))
    for r in (RELATIONS[0], RELATIONS[1]):
        m = draw(st.integers(0, 6))
        edges[r] = (rng.integers(0, nb, m), rng.integers(0, nb, m), rng.standard_normal((m, EDGE_DIMS[r])))
    target = rng.standard_normal((nb, 2)) if draw(st.booleans()) else None
    label = draw(st.sampled_from([None, 0, 1]))
    ctx = rng.standard_normal(draw(st.integers(0, 3)))
    return make_graph(feats, edges, context=ctx, bus_target=target, graph_label=label)


PLANTED_HIDDEN = 96
PLANTED_BASIN = (64, 160)


def planted_objective(config) -> float:
    """Synthetic loss surface with its optimum at hidden 96, 3 layers, lr 1e-3."""
    h = (config.hidden_dim - PLANTED_HIDDEN) / 64.0
    layers = (config.num_conv_layers - 3) / 4.0
    lr = (np.log10(config.learning_rate) + 3.0) / 3.0
    return float(h * h + 0.3 * layers * layers + 0.3 * lr * lr)


def planted_trial(config, campaign, deadline):
    f = planted_objective(config)
    for epoch in range(1, campaign.epochs + 1):
        yield f + 0.1 / epoch


def ybus_reference(case):
    """Textbook pi-model admittance matrix, built independently of the solver."""
    n = len(case.buses)
    idx = {b.id: i for i, b in enumerate(case.buses)}
    Y = np.zeros((n, n), complex)
    for br in case.branches:
        if not br.status:
            continue
        i, j = idx[br.from_bus], idx[br.to_bus]
        y = 1 / complex(br.r, br.x)
        a = (br.tap or 1.0) * complex(math.cos(math.radians(br.shift)), math.sin(math.radians(br.shift)))
        Y[i, i] += (y + 1j * br.b / 2) / abs(a) ** 2
        Y[j, j] += y + 1j * br.b / 2
        Y[i, j] -= y / a.conjugate()
        Y[j, i] -= y / a
    for s in case.shunts:
        Y[idx[s.bus_id], idx[s.bus_id]] += complex(s.gs, s.bs) / case.base_mva
    return Y


def balance_residual(case, va, vm):
    """Largest P (non-slack) / Q (PQ) imbalance in p.u. against the specified injections."""
    idx = {b.id: i for i, b in enumerate(case.buses)}
    v = vm * np.exp(1j * va)
    s = v * np.conj(ybus_reference(case) @ v)
    spec = np.zeros(len(case.buses), complex)
    holds_v = np.zeros(len(case.buses), bool)
    for g in case.generators:
        if g.status:
            spec[idx[g.bus_id]] += complex(g.pg, g.qg) / case.base_mva
            holds_v[idx[g.bus_id]] |= case.buses[idx[g.bus_id]].bus_type in (2, 3)
    for d in case.loads:
        spec[idx[d.bus_id]] -= complex(d.pd, d.qd) / case.base_mva
    ref = case.ref_bus
    p_rows = [i for i in range(len(case.buses)) if i != ref]
    q_rows = [i for i in p_rows if not holds_v[i]]
    return max(np.abs((s - spec).real[p_rows]).max(), np.abs((s - spec).imag[q_rows]).max(initial=0.0))


def regenerated_case(case, g, index, seed, sigma, outage=False, max_attempts=10):
    """Rebuild the perturbed case behind synthesized sample ``index``.

    Replays the seeded draws and keeps the attempt whose loads match ``g``.
    """
    from gridfm.powerflow import _perturb, apply_line_outage, outage_candidates

    loads = g.node_features[NodeType.load]
    cands = outage_candidates(case) if outage else None
    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, index, attempt])
        c = case
        if outage:
            c = apply_line_outage(c, int(cands[rng.integers(len(cands))]))
        c = _perturb(c, rng, sigma)
        mine = (np.array([[d.pd, d.qd] for d in c.loads]) / c.base_mva).astype(np.float32)
        if np.array_equal(mine, loads):
            return c
    raise AssertionError(f"sample {index} does not match any seeded draw")
