"""Grid case parsing (MATPOWER ``.m`` and OPF-JSON) and graph construction.

Feature layouts written by :func:`build_hetero_graph` (power quantities in
per-unit on ``base_mva``, angles in radians):

    bus          [base_kv, bus_type, vmin, vmax]
    generator    [pmin, pmax, qmin, qmax, pg, qg, vg, status, c2, c1, c0]
    load         [pd, qd]
    shunt        [gs, bs]
    ac_line      [angmin, angmax, b_fr, b_to, r, x, rate_a, rate_b, rate_c]
    transformer  [angmin, angmax, r, x, rate_a, rate_b, rate_c, tap, shift, b_fr, b_to]
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .graph import AC_LINE, LINKS, TRANSFORMER, HeteroGraph, NodeType, make_graph

BUNDLED_CASES = ("case14", "case30", "case118")


@dataclass(frozen=True)
class Bus:
    id: int
    bus_type: int
    base_kv: float
    vmin: float
    vmax: float


@dataclass(frozen=True)
class Generator:
    bus_id: int
    pg: float
    qg: float
    qmax: float
    qmin: float
    vg: float
    mbase: float
    status: int
    pmax: float
    pmin: float
    cost: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class Load:
    bus_id: int
    pd: float
    qd: float


@dataclass(frozen=True)
class Shunt:
    bus_id: int
    gs: float
    bs: float


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float
    rate_a: float = 0.0
    rate_b: float = 0.0
    rate_c: float = 0.0
    tap: float = 0.0
    shift: float = 0.0
    status: int = 1
    angmin: float = -360.0
    angmax: float = 360.0

    @property
    def is_transformer(self) -> bool:
        return self.tap != 0.0 or self.shift != 0.0

    @property
    def ratio(self) -> float:
        return self.tap if self.tap != 0.0 else 1.0


@dataclass(frozen=True)
class GridCase:
    base_mva: float
    buses: tuple[Bus, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...] = ()
    shunts: tuple[Shunt, ...] = ()
    branches: tuple[Branch, ...] = ()
    name: str = ""

    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def ref_bus(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.bus_type == 3)

    def in_service_branches(self) -> list[int]:
        return [k for k, br in enumerate(self.branches) if br.status]


class CaseSyntaxError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class CaseSemanticError(ValueError):
    pass


class RecordSchemaError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def check_case(case: GridCase) -> None:
    """Raise :class:`CaseSemanticError` if ``case`` breaks a GridCase invariant."""
    refs = [b.id for b in case.buses if b.bus_type == 3]
    if len(refs) != 1:
        raise CaseSemanticError(f"expected exactly one reference bus, found {len(refs)}")
    ids = {b.id for b in case.buses}
    if len(ids) != len(case.buses):
        raise CaseSemanticError("duplicate bus ids")
    for b in case.buses:
        if b.vmin > b.vmax:
            raise CaseSemanticError(f"bus {b.id}: vmin {b.vmin} > vmax {b.vmax}")
    for k, g in enumerate(case.generators):
        if g.bus_id not in ids:
            raise CaseSemanticError(f"generator {k} references unknown bus {g.bus_id}")
        if g.pmin > g.pmax:
            raise CaseSemanticError(f"generator {k}: pmin {g.pmin} > pmax {g.pmax}")
    for what, items in (("load", case.loads), ("shunt", case.shunts)):
        for k, d in enumerate(items):
            if d.bus_id not in ids:
                raise CaseSemanticError(f"{what} {k} references unknown bus {d.bus_id}")
    for k, br in enumerate(case.branches):
        if br.from_bus not in ids or br.to_bus not in ids:
            raise CaseSemanticError(f"branch {k} references unknown bus")


# ---------------------------------------------------------------- MATPOWER

_ASSIGN = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")


def _strip_comment(line: str) -> str:
    # MATPOWER numeric rows never contain quotes, so '%' always starts a comment here
    i = line.find("%")
    return line if i < 0 else line[:i]


def _parse_matrices(text: str) -> tuple[dict[str, float], dict[str, tuple[int, list[list[float]]]]]:
    scalars: dict[str, float] = {}
    matrices: dict[str, tuple[int, list[list[float]]]] = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = _strip_comment(lines[i])
        m = _ASSIGN.match(line)
        if not m:
            i += 1
            continue
        name, rhs = m.group(1), m.group(2).strip()
        if rhs.startswith("{"):
            # cell arrays (bus_name etc.) are skipped up to their closing brace
            while "}" not in _strip_comment(lines[i]):
                i += 1
                if i >= len(lines):
                    raise CaseSyntaxError(i, f"unterminated cell array mpc.{name}")
            i += 1
            continue
        if not rhs.startswith("["):
            val = rhs.rstrip(";").strip()
            try:
                scalars[name] = float(val)
            except ValueError:
                pass  # version strings and the like
            i += 1
            continue
        start = i + 1
        rows: list[list[float]] = []
        body = rhs[1:]
        closed = False
        lineno = i + 1
        while True:
            if "]" in body:
                body, closed = body[: body.index("]")], True
            for chunk in body.split(";"):
                toks = chunk.replace(",", " ").split()
                if not toks:
                    continue
                try:
                    rows.append([float(t) for t in toks])
                except ValueError:
                    raise CaseSyntaxError(lineno, f"non-numeric entry in mpc.{name}: {chunk.strip()!r}") from None
                if len(rows[-1]) != len(rows[0]):
                    raise CaseSyntaxError(
                        lineno, f"mpc.{name} row has {len(rows[-1])} columns, expected {len(rows[0])}"
                    )
            if closed:
                break
            i += 1
            if i >= len(lines):
                raise CaseSyntaxError(lineno, f"missing closing bracket for mpc.{name} (opened at line {start})")
            body = _strip_comment(lines[i])
            lineno = i + 1
            if _ASSIGN.match(body):
                raise CaseSyntaxError(lineno, f"missing closing bracket for mpc.{name} (opened at line {start})")
        matrices[name] = (start, rows)
        i += 1
    return scalars, matrices


def _require(matrices, name: str, min_cols: int) -> list[list[float]]:
    if name not in matrices:
        raise CaseSemanticError(f"missing mpc.{name}")
    line, rows = matrices[name]
    if rows and len(rows[0]) < min_cols:
        raise CaseSyntaxError(line, f"mpc.{name} needs at least {min_cols} columns, has {len(rows[0])}")
    return rows


def _costs(rows: list[list[float]], line: int) -> list[tuple[float, float, float]]:
    out = []
    for k, row in enumerate(rows):
        if int(row[0]) != 2:
            raise CaseSemanticError(f"gencost row {k}: only polynomial cost model 2 is supported")
        n = int(row[3])
        coeffs = row[4 : 4 + n]
        if len(coeffs) != n:
            raise CaseSyntaxError(line, f"gencost row {k} declares {n} coefficients, has {len(coeffs)}")
        if n > 3:
            raise CaseSemanticError(f"gencost row {k}: polynomial of degree {n - 1} not supported")
        padded = [0.0] * (3 - n) + list(coeffs)
        out.append((padded[0], padded[1], padded[2]))
    return out


def parse_matpower_case(text: str, name: str = "") -> GridCase:
    """Parse the body of a MATPOWER case file."""
    scalars, matrices = _parse_matrices(text)
    if "baseMVA" not in scalars:
        raise CaseSemanticError("missing mpc.baseMVA")
    bus_rows = _require(matrices, "bus", 13)
    gen_rows = _require(matrices, "gen", 10)
    br_rows = _require(matrices, "branch", 11)

    buses, loads, shunts = [], [], []
    for r in bus_rows:
        bid = int(r[0])
        buses.append(Bus(bid, int(r[1]), r[9], r[12], r[11]))
        if r[2] != 0 or r[3] != 0:
            loads.append(Load(bid, r[2], r[3]))
        if r[4] != 0 or r[5] != 0:
            shunts.append(Shunt(bid, r[4], r[5]))

    costs = [(0.0, 0.0, 0.0)] * len(gen_rows)
    if "gencost" in matrices:
        line, cost_rows = matrices["gencost"]
        if len(cost_rows) != len(gen_rows):
            raise CaseSemanticError(f"gencost has {len(cost_rows)} rows but gen has {len(gen_rows)}")
        costs = _costs(cost_rows, line)
    gens = [
        Generator(int(r[0]), r[1], r[2], r[3], r[4], r[5], r[6], int(r[7] > 0), r[8], r[9], costs[k])
        for k, r in enumerate(gen_rows)
    ]
    branches = []
    for r in br_rows:
        angmin = r[11] if len(r) > 11 else -360.0
        angmax = r[12] if len(r) > 12 else 360.0
        branches.append(
            Branch(int(r[0]), int(r[1]), r[2], r[3], r[4], r[5], r[6], r[7], r[8], r[9], int(r[10] > 0), angmin, angmax)
        )
    case = GridCase(scalars["baseMVA"], tuple(buses), tuple(gens), tuple(loads), tuple(shunts), tuple(branches), name)
    check_case(case)
    return case


def load_case(name_or_path: str | Path) -> GridCase:
    """Load a bundled case by name (``case14``) or a ``.m``/``.json`` file by path."""
    s = str(name_or_path)
    if s in BUNDLED_CASES:
        text = resources.files("gridfm.data").joinpath(f"{s}.m").read_text()
        return parse_matpower_case(text, name=s)
    p = Path(s)
    if not p.exists() and p.suffix == ".m" and p.stem in BUNDLED_CASES:
        return load_case(p.stem)
    if p.suffix == ".json":
        return parse_opf_json_record(p.read_text())[0]
    return parse_matpower_case(p.read_text(), name=p.stem)


# ---------------------------------------------------------------- graphs

def _angle_rad(deg: float) -> float:
    return deg * math.pi / 180.0


def build_hetero_graph(case: GridCase, solution=None, context=None, graph_label=None) -> HeteroGraph:
    """Heterogeneous graph of ``case``; ``solution`` (BusState or (va, vm)) sets targets."""
    check_case(case)
    base = case.base_mva
    index = case.bus_index()
    bus_x = np.array([[b.base_kv, b.bus_type, b.vmin, b.vmax] for b in case.buses], dtype=np.float64)
    gen_x = np.array(
        [
            [g.pmin / base, g.pmax / base, g.qmin / base, g.qmax / base, g.pg / base, g.qg / base,
             g.vg, g.status, g.cost[0], g.cost[1], g.cost[2]]
            for g in case.generators
        ],
        dtype=np.float64,
    ).reshape(-1, 11)
    load_x = np.array([[d.pd / base, d.qd / base] for d in case.loads], dtype=np.float64).reshape(-1, 2)
    shunt_x = np.array([[s.gs / base, s.bs / base] for s in case.shunts], dtype=np.float64).reshape(-1, 2)

    lines, trafos = [], []
    for br in case.branches:
        if not br.status:
            continue
        f, t = index[br.from_bus], index[br.to_bus]
        amin, amax = _angle_rad(br.angmin), _angle_rad(br.angmax)
        ra, rb, rc = br.rate_a / base, br.rate_b / base, br.rate_c / base
        half = br.b / 2.0
        if br.is_transformer:
            trafos.append((f, t, [amin, amax, br.r, br.x, ra, rb, rc, br.ratio, _angle_rad(br.shift), half, half]))
        else:
            lines.append((f, t, [amin, amax, half, half, br.r, br.x, ra, rb, rc]))

    def rel(items, width):
        src = np.array([e[0] for e in items], dtype=np.uint32)
        dst = np.array([e[1] for e in items], dtype=np.uint32)
        attr = np.array([e[2] for e in items], dtype=np.float64).reshape(-1, width)
        return src, dst, attr

    edges = {AC_LINE: rel(lines, 9), TRANSFORMER: rel(trafos, 11)}
    for t, devices in ((NodeType.generator, case.generators), (NodeType.load, case.loads), (NodeType.shunt, case.shunts)):
        dev = np.arange(len(devices), dtype=np.uint32)
        bus = np.array([index[d.bus_id] for d in devices], dtype=np.uint32)
        to_bus, from_bus = LINKS[t]
        edges[to_bus] = (dev, bus)
        edges[from_bus] = (bus, dev)

    target = None
    if solution is not None:
        va, vm = (solution.va, solution.vm) if hasattr(solution, "va") else solution
        target = np.column_stack([np.asarray(va, np.float64), np.asarray(vm, np.float64)])
    feats = {NodeType.bus: bus_x, NodeType.generator: gen_x, NodeType.load: load_x, NodeType.shunt: shunt_x}
    return make_graph(feats, edges, context=context, bus_target=target, graph_label=graph_label)


# ---------------------------------------------------------------- OPF-JSON

_FIELDS = {
    "buses": (Bus, [("id", int), ("bus_type", int), ("base_kv", float), ("vmin", float), ("vmax", float)]),
    "generators": (
        Generator,
        [("bus_id", int), ("pg", float), ("qg", float), ("qmax", float), ("qmin", float), ("vg", float),
         ("mbase", float), ("status", int), ("pmax", float), ("pmin", float)],
    ),
    "loads": (Load, [("bus_id", int), ("pd", float), ("qd", float)]),
    "shunts": (Shunt, [("bus_id", int), ("gs", float), ("bs", float)]),
    "branches": (
        Branch,
        [("from_bus", int), ("to_bus", int), ("r", float), ("x", float), ("b", float), ("rate_a", float),
         ("rate_b", float), ("rate_c", float), ("tap", float), ("shift", float), ("status", int),
         ("angmin", float), ("angmax", float)],
    ),
}
_OPTIONAL_ARRAYS = ("loads", "shunts")


def _number(obj: dict, key: str, kind, path: str):
    if key not in obj:
        raise RecordSchemaError(key, f"missing at {path}")
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise RecordSchemaError(key, f"expected a number at {path}, got {type(v).__name__}")
    if kind is int:
        if float(v) != int(v):
            raise RecordSchemaError(key, f"expected an integer at {path}, got {v}")
        return int(v)
    return float(v)


def _vector(obj: dict, key: str, path: str) -> np.ndarray:
    v = obj.get(key)
    if not isinstance(v, list) or any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in v):
        raise RecordSchemaError(key, f"expected a list of numbers at {path}")
    return np.array(v, dtype=np.float64)


def parse_opf_json_record(text: str) -> tuple[GridCase, Any, dict]:
    """Parse one OPF-JSON record into (GridCase, BusState or None, metadata)."""
    from .powerflow import BusState

    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise RecordSchemaError("<root>", f"invalid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise RecordSchemaError("<root>", "record must be a JSON object")
    base = _number(doc, "base_mva", float, "record")
    parts: dict[str, list] = {}
    for key, (cls, fields) in _FIELDS.items():
        arr = doc.get(key)
        if arr is None and key in _OPTIONAL_ARRAYS:
            arr = []
        if not isinstance(arr, list):
            raise RecordSchemaError(key, "expected an array of objects")
        items = []
        for k, obj in enumerate(arr):
            path = f"{key}[{k}]"
            if not isinstance(obj, dict):
                raise RecordSchemaError(key, f"{path} is not an object")
            kw = {name: _number(obj, name, kind, path) for name, kind in fields}
            if cls is Generator:
                cost = obj.get("cost", [0.0, 0.0, 0.0])
                if not isinstance(cost, list) or len(cost) != 3 or any(
                    isinstance(c, bool) or not isinstance(c, (int, float)) for c in cost
                ):
                    raise RecordSchemaError("cost", f"expected [c2, c1, c0] at {path}")
                kw["cost"] = tuple(float(c) for c in cost)
            items.append(cls(**kw))
        parts[key] = items
    case = GridCase(
        base, tuple(parts["buses"]), tuple(parts["generators"]), tuple(parts["loads"]),
        tuple(parts["shunts"]), tuple(parts["branches"]), str(doc.get("name", "")),
    )
    try:
        check_case(case)
    except CaseSemanticError as e:
        raise RecordSchemaError("<case>", str(e)) from None

    state = None
    sol = doc.get("solution")
    if sol is not None:
        if not isinstance(sol, dict):
            raise RecordSchemaError("solution", "expected an object")
        va, vm = _vector(sol, "va", "solution"), _vector(sol, "vm", "solution")
        if va.shape[0] != len(case.buses) or vm.shape[0] != len(case.buses):
            raise RecordSchemaError("solution", f"va/vm must have {len(case.buses)} entries")
        state = BusState(va, vm)
    meta = doc.get("metadata", {})
    if not isinstance(meta, dict):
        raise RecordSchemaError("metadata", "expected an object")
    return case, state, meta


def case_to_json_record(case: GridCase, state=None, metadata: dict | None = None) -> str:
    """Inverse of :func:`parse_opf_json_record`."""
    def dump(items, fields):
        return [{name: getattr(x, name) for name, _ in fields} for x in items]

    doc: dict[str, Any] = {"name": case.name, "base_mva": case.base_mva}
    for key, (_, fields) in _FIELDS.items():
        doc[key] = dump(getattr(case, key), fields)
    for d, g in zip(doc["generators"], case.generators):
        d["cost"] = list(g.cost)
    if state is not None:
        doc["solution"] = {"va": [float(v) for v in state.va], "vm": [float(v) for v in state.vm]}
    doc["metadata"] = metadata or {}
    return json.dumps(doc)


__all__ = [
    "BUNDLED_CASES", "Branch", "Bus", "CaseSemanticError", "CaseSyntaxError", "Generator", "GridCase",
    "Load", "RecordSchemaError", "Shunt", "build_hetero_graph", "case_to_json_record", "check_case",
    "load_case", "parse_matpower_case", "parse_opf_json_record",
]
