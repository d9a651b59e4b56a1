"""AC power flow oracle and downstream dataset synthesis.

Newton-Raphson in polar form on the pi-model bus admittance matrix, with
fixed generator dispatch (the reference bus absorbs the slack), plus the
feasibility checker and the load-scaling / line-outage perturbations used to
build the feasibility-classification and N-1 regression sets.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from .graph import HeteroGraph, NodeType
from .ingest import GridCase, build_hetero_graph, check_case

log = logging.getLogger(__name__)

TOL = 1e-8
MAX_ITER = 50
FEAS_EPS = 1e-4


class PowerFlowError(RuntimeError):
    pass


class NonConvergenceError(PowerFlowError):
    pass


class SingularJacobianError(PowerFlowError):
    pass


class DisconnectionError(ValueError):
    pass


class GenerationExhaustedError(RuntimeError):
    pass


@dataclass
class BusState:
    va: np.ndarray  # rad
    vm: np.ndarray  # p.u.
    iterations: int = 0

    @property
    def voltage(self) -> np.ndarray:
        return self.vm * np.exp(1j * self.va)


@dataclass
class Violation:
    kind: str  # voltage | angle | thermal | balance
    element: int
    magnitude: float


@dataclass
class FeasibilityReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return not self.violations


# ---------------------------------------------------------------- network

@dataclass(frozen=True)
class _Network:
    ybus: np.ndarray
    yf: np.ndarray  # from-end branch admittance rows [nbr, nbus]
    yt: np.ndarray
    f: np.ndarray
    t: np.ndarray
    branches: np.ndarray  # indices into case.branches (in service only)
    sbus: np.ndarray  # specified injection, p.u.
    ref: int
    pv: np.ndarray
    pq: np.ndarray
    v0: np.ndarray  # voltage magnitude setpoints / flat start


def branch_admittances(case: GridCase, k: int):
    """(Yff, Yft, Ytf, Ytt) of branch k in per-unit."""
    br = case.branches[k]
    ys = 1.0 / complex(br.r, br.x)
    tap = br.ratio * np.exp(1j * np.deg2rad(br.shift))
    ytt = ys + 0.5j * br.b
    yff = ytt / (tap * np.conj(tap))
    yft = -ys / np.conj(tap)
    ytf = -ys / tap
    return yff, yft, ytf, ytt


def _network(case: GridCase) -> _Network:
    n = len(case.buses)
    idx = case.bus_index()
    on = np.array(case.in_service_branches(), dtype=np.int64)
    f = np.array([idx[case.branches[k].from_bus] for k in on], dtype=np.int64)
    t = np.array([idx[case.branches[k].to_bus] for k in on], dtype=np.int64)
    ybus = np.zeros((n, n), dtype=np.complex128)
    yf = np.zeros((len(on), n), dtype=np.complex128)
    yt = np.zeros((len(on), n), dtype=np.complex128)
    for row, k in enumerate(on):
        yff, yft, ytf, ytt = branch_admittances(case, int(k))
        i, j = f[row], t[row]
        ybus[i, i] += yff
        ybus[i, j] += yft
        ybus[j, i] += ytf
        ybus[j, j] += ytt
        yf[row, i], yf[row, j] = yff, yft
        yt[row, i], yt[row, j] = ytf, ytt
    for s in case.shunts:
        i = idx[s.bus_id]
        ybus[i, i] += complex(s.gs, s.bs) / case.base_mva

    sbus = np.zeros(n, dtype=np.complex128)
    v0 = np.ones(n)
    has_gen = np.zeros(n, dtype=bool)
    for g in case.generators:
        if g.status:
            i = idx[g.bus_id]
            sbus[i] += complex(g.pg, g.qg) / case.base_mva
            has_gen[i] = True
            v0[i] = g.vg
    for d in case.loads:
        sbus[idx[d.bus_id]] -= complex(d.pd, d.qd) / case.base_mva
    types = np.array([b.bus_type for b in case.buses])
    ref = case.ref_bus
    if not has_gen[ref]:
        raise PowerFlowError("reference bus has no in-service generator")
    pv = np.flatnonzero((types == 2) & has_gen)
    pq = np.flatnonzero(~((types == 2) & has_gen) & (np.arange(n) != ref))
    # PQ buses do not hold a voltage setpoint
    v0[pq] = 1.0
    return _Network(ybus, yf, yt, f, t, on, sbus, ref, pv, pq, v0)


def power_injection(case: GridCase, state: BusState) -> np.ndarray:
    """Complex power injected into the network at each bus, p.u."""
    net = _network(case)
    v = state.voltage
    return v * np.conj(net.ybus @ v)


def power_mismatch(case: GridCase, state: BusState) -> np.ndarray:
    """Mismatches of the specified quantities: P at PV/PQ buses, Q at PQ buses."""
    net = _network(case)
    v = state.voltage
    mis = v * np.conj(net.ybus @ v) - net.sbus
    pvpq = np.r_[net.pv, net.pq]
    return np.r_[mis[pvpq].real, mis[net.pq].imag]


def solve_power_flow(
    case: GridCase, init: BusState | None = None, tol: float = TOL, max_iter: int = MAX_ITER
) -> BusState:
    """Newton-Raphson power flow; converged when max |mismatch| < tol (p.u.)."""
    check_case(case)
    net = _network(case)
    n = len(case.buses)
    if init is None:
        va = np.zeros(n)
        vm = net.v0.copy()
    else:
        va = np.array(init.va, dtype=np.float64)
        vm = np.array(init.vm, dtype=np.float64)
        vm[net.pv] = net.v0[net.pv]
        vm[net.ref] = net.v0[net.ref]
        va[net.ref] = 0.0
    pvpq = np.r_[net.pv, net.pq]
    npvpq, npq = len(pvpq), len(net.pq)
    ybus = net.ybus

    for it in range(max_iter + 1):
        v = vm * np.exp(1j * va)
        ibus = ybus @ v
        mis = v * np.conj(ibus) - net.sbus
        F = np.r_[mis[pvpq].real, mis[net.pq].imag]
        if not np.all(np.isfinite(F)):
            raise NonConvergenceError(f"mismatch diverged at iteration {it}")
        if F.size == 0 or np.max(np.abs(F)) < tol:
            va = va - va[net.ref]
            return BusState(va, vm, it)
        if it == max_iter:
            break
        vnorm = v / vm
        diag_v = np.diag(v)
        ds_dvm = diag_v @ np.conj(ybus * vnorm[None, :]) + np.diag(np.conj(ibus) * vnorm)
        ds_dva = 1j * diag_v @ np.conj(np.diag(ibus) - ybus * v[None, :])
        J = np.block(
            [
                [ds_dva[np.ix_(pvpq, pvpq)].real, ds_dvm[np.ix_(pvpq, net.pq)].real],
                [ds_dva[np.ix_(net.pq, pvpq)].imag, ds_dvm[np.ix_(net.pq, net.pq)].imag],
            ]
        )
        if np.linalg.cond(J) > 1e14:
            raise SingularJacobianError(f"Jacobian is singular at iteration {it} (islanded network?)")
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError as e:
            raise SingularJacobianError(str(e)) from None
        va[pvpq] += dx[:npvpq]
        vm[net.pq] += dx[npvpq : npvpq + npq]
        if np.any(vm <= 0):
            raise NonConvergenceError(f"non-positive voltage magnitude at iteration {it}")
    raise NonConvergenceError(f"no convergence after {max_iter} iterations (max mismatch {np.max(np.abs(F)):.3e})")


def branch_flows(case: GridCase, state: BusState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(branch indices, S_from, S_to) in MVA for in-service branches."""
    net = _network(case)
    v = state.voltage
    sf = v[net.f] * np.conj(net.yf @ v) * case.base_mva
    st = v[net.t] * np.conj(net.yt @ v) * case.base_mva
    return net.branches, sf, st


def check_feasibility(case: GridCase, state: BusState, eps: float = FEAS_EPS) -> FeasibilityReport:
    """Operational-limit audit of a solved state.

    Angle limits with angmin == angmax == 0, or beyond +-360 degrees, and
    rate_a == 0 are treated as unconstrained (MATPOWER convention).
    """
    rep = FeasibilityReport()
    for i, b in enumerate(case.buses):
        vm = state.vm[i]
        hi, lo = b.vmax + eps * abs(b.vmax), b.vmin - eps * abs(b.vmin)
        if vm > hi or vm < lo:
            rep.violations.append(Violation("voltage", i, float(vm - b.vmax if vm > hi else b.vmin - vm)))

    idx = case.bus_index()
    ks, sf, st = branch_flows(case, state)
    for row, k in enumerate(ks):
        br = case.branches[k]
        f, t = idx[br.from_bus], idx[br.to_bus]
        if not (br.angmin == 0 and br.angmax == 0):
            d = np.rad2deg(state.va[f] - state.va[t])
            if br.angmax < 360 and d > br.angmax + eps * abs(br.angmax):
                rep.violations.append(Violation("angle", int(k), float(d - br.angmax)))
            elif br.angmin > -360 and d < br.angmin - eps * abs(br.angmin):
                rep.violations.append(Violation("angle", int(k), float(br.angmin - d)))
        if br.rate_a > 0:
            s = max(abs(sf[row]), abs(st[row]))
            if s > br.rate_a * (1 + eps):
                rep.violations.append(Violation("thermal", int(k), float(s - br.rate_a)))

    # implied generation at buses holding a voltage setpoint
    net = _network(case)
    sinj = power_injection(case, state) * case.base_mva
    load = np.zeros(len(case.buses), dtype=np.complex128)
    for d in case.loads:
        load[idx[d.bus_id]] += complex(d.pd, d.qd)
    for i in np.r_[net.ref, net.pv]:
        gens = [g for g in case.generators if g.status and idx[g.bus_id] == i]
        sgen = sinj[i] + load[i]
        qmin, qmax = sum(g.qmin for g in gens), sum(g.qmax for g in gens)
        tol_q = eps * max(abs(qmin), abs(qmax), 1.0)
        if sgen.imag > qmax + tol_q or sgen.imag < qmin - tol_q:
            rep.violations.append(
                Violation("balance", int(i), float(sgen.imag - qmax if sgen.imag > qmax else qmin - sgen.imag))
            )
        if i == net.ref:
            pmin, pmax = sum(g.pmin for g in gens), sum(g.pmax for g in gens)
            tol_p = eps * max(abs(pmin), abs(pmax), 1.0)
            if sgen.real > pmax + tol_p or sgen.real < pmin - tol_p:
                rep.violations.append(
                    Violation("balance", int(i), float(sgen.real - pmax if sgen.real > pmax else pmin - sgen.real))
                )
    return rep


# ---------------------------------------------------------------- perturbations

def scale_loads(case: GridCase, factor: float) -> GridCase:
    if not factor > 0:
        raise ValueError(f"load scale factor must be positive, got {factor}")
    loads = tuple(replace(d, pd=d.pd * factor, qd=d.qd * factor) for d in case.loads)
    return replace(case, loads=loads)


def _components(n: int, edges: list[tuple[int, int]]) -> np.ndarray:
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
    return np.array([find(i) for i in range(n)])


def is_connected(case: GridCase) -> bool:
    idx = case.bus_index()
    edges = [(idx[br.from_bus], idx[br.to_bus]) for br in case.branches if br.status]
    return len(set(_components(len(case.buses), edges).tolist())) == 1


def apply_line_outage(case: GridCase, branch_id: int) -> GridCase:
    """Take branch ``branch_id`` out of service; refuse if that islands a bus."""
    if not 0 <= branch_id < len(case.branches):
        raise IndexError(f"branch {branch_id} does not exist")
    branches = list(case.branches)
    branches[branch_id] = replace(branches[branch_id], status=0)
    out = replace(case, branches=tuple(branches))
    if not is_connected(out):
        raise DisconnectionError(f"removing branch {branch_id} disconnects the network")
    return out


def outage_candidates(case: GridCase) -> list[int]:
    """In-service branches whose removal keeps the network connected."""
    out = []
    for k in case.in_service_branches():
        try:
            apply_line_outage(case, k)
        except DisconnectionError:
            continue
        out.append(k)
    return out


# ---------------------------------------------------------------- synthesis

def _perturb(case: GridCase, rng: np.random.Generator, sigma: float) -> GridCase:
    if sigma == 0 or not case.loads:
        return case
    k = rng.uniform(1.0 - sigma, 1.0 + sigma, size=len(case.loads))
    loads = tuple(replace(d, pd=d.pd * k[i], qd=d.qd * k[i]) for i, d in enumerate(case.loads))
    return replace(case, loads=loads)


def _draw(case, index, seed, sigma, outage, max_attempts):
    """One labeled sample; returns (graph, attempts used) or (None, attempts)."""
    candidates = outage_candidates(case) if outage else None
    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, index, attempt])
        c = case
        if outage:
            c = apply_line_outage(c, int(candidates[rng.integers(len(candidates))]))
        c = _perturb(c, rng, sigma)
        try:
            state = solve_power_flow(c)
        except PowerFlowError:
            continue
        return build_hetero_graph(c, state), attempt + 1
    return None, max_attempts


def synthesize_samples(
    case: GridCase,
    n: int,
    load_sigma: float = 0.1,
    seed: int = 0,
    outage: bool = False,
    max_attempts: int = 10,
    workers: int = 1,
) -> Iterator[HeteroGraph]:
    """Yield ``n`` labeled graphs from independent load perturbations of ``case``.

    Each load's (pd, qd) is scaled by one factor ~ U(1 - sigma, 1 + sigma).
    With ``outage`` each sample also drops one random non-bridge branch.
    Sample ``i`` depends only on (seed, i), so output is identical for any
    ``workers``.  Raises GenerationExhaustedError once more than 90% of the
    draws so far failed to converge.
    """
    draws = fails = 0

    def account(result):
        nonlocal draws, fails
        g, used = result
        draws += used
        fails += used - (g is not None)
        if draws >= 10 and fails > 0.9 * draws:
            raise GenerationExhaustedError(f"{fails} of {draws} draws failed to converge")
        if g is None:
            raise GenerationExhaustedError(f"sample exhausted {max_attempts} attempts")
        return g

    if workers <= 1:
        for i in range(n):
            yield account(_draw(case, i, seed, load_sigma, outage, max_attempts))
        return
    with ThreadPoolExecutor(workers) as pool:
        chunk = 64
        for lo in range(0, n, chunk):
            futs = [pool.submit(_draw, case, i, seed, load_sigma, outage, max_attempts) for i in range(lo, min(n, lo + chunk))]
            for fut in futs:
                yield account(fut.result())


def feasibility_samples(
    case: GridCase, n: int, load_sigma: float = 0.1, seed: int = 0, factor: float = 6.0
) -> list[HeteroGraph]:
    """Balanced feasibility set: n//2 solved draws labeled 1, the rest labeled 0.

    Infeasible members come from further draws whose loads are scaled by
    ``factor`` (no voltage targets).  Labels come from construction, not from
    solver certification.
    """
    n_pos = n // 2
    base = list(synthesize_samples(case, n, load_sigma, seed))
    out = []
    for i, g in enumerate(base):
        if i < n_pos:
            out.append(HeteroGraph(g.node_features, g.relations, g.context, g.bus_target, 1))
        else:
            feats = dict(g.node_features)
            feats[NodeType.load] = (feats[NodeType.load].astype(np.float64) * factor).astype(np.float32)
            out.append(HeteroGraph(feats, g.relations, g.context, None, 0))
    order = np.random.default_rng([seed, 7]).permutation(n)
    return [out[i] for i in order]
