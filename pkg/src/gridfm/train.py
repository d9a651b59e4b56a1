"""Losses, the training loop, fine-tuning regimes and evaluation metrics."""

from __future__ import annotations

import csv
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.checkpoint import save_checkpoint
from .autodiff.optim import AdamState, adam_step
from .autodiff.tensor import Tape, Tensor
from .graph import AC_LINE, TRANSFORMER, GraphBatch, HeteroGraph, NodeType, batch_graphs
from .models.config import HeadSpec
from .models.model import Model

REGIMES = ("PRETRAIN", "FT-F", "FT-P", "FT-H", "SCR")
TASKS = ("regression", "classification")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.value = epoch, batch, value


class DeadlineExceeded(TimeoutError):
    def __init__(self, epoch: int):
        super().__init__(f"wall-time budget exhausted during epoch {epoch}")
        self.epoch = epoch


class EmptySplitError(ValueError):
    pass


# losses -----------------------------------------------------------------


def compute_supervised_loss(pred, target) -> Tensor:
    """(1/n_bus) sum_i ||pred_i - target_i||^2."""
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} must both be [n_bus, 2]")
    return ops.mse(pred, target)


@dataclass(frozen=True)
class PenaltyWeights:
    voltage: float = 0.0
    angle: float = 0.0
    thermal: float = 0.0

    def __post_init__(self):
        if min(self.voltage, self.angle, self.thermal) < 0:
            raise ValueError("penalty weights must be non-negative")

    @property
    def active(self) -> bool:
        return bool(self.voltage or self.angle or self.thermal)

    @classmethod
    def from_dict(cls, d: dict | None) -> "PenaltyWeights":
        d = d or {}
        return cls(float(d.get("voltage", 0.0)), float(d.get("angle", 0.0)), float(d.get("thermal", 0.0)))


def _branch_table(g: HeteroGraph):
    """Endpoints and pi-model data of every branch in ``g`` (p.u., radians)."""
    cols = []
    ac = g.relations[AC_LINE]
    if ac.num_edges:
        a = ac.edge_attr.astype(np.float64)
        m = ac.num_edges
        cols.append((ac.src, ac.dst, a[:, 0], a[:, 1], a[:, 4], a[:, 5], a[:, 2], a[:, 3], np.ones(m), np.zeros(m), a[:, 6]))
    tr = g.relations[TRANSFORMER]
    if tr.num_edges:
        a = tr.edge_attr.astype(np.float64)
        cols.append((tr.src, tr.dst, a[:, 0], a[:, 1], a[:, 2], a[:, 3], a[:, 9], a[:, 10], a[:, 7], a[:, 8], a[:, 4]))
    if not cols:
        return None
    f, t, amin, amax, r, x, bfr, bto, tap, shift, rate = (np.concatenate(c) for c in zip(*cols))
    return f.astype(np.int64), t.astype(np.int64), amin, amax, r, x, bfr, bto, tap, shift, rate


def branch_flow_from(pred, g: HeteroGraph):
    """(P_f, Q_f) at the from end of every branch for a predicted state [n_bus, 2]."""
    table = _branch_table(g)
    if table is None:
        return None, None, None
    f, t, amin, amax, r, x, bfr, bto, tap, shift, rate = table
    z2 = r * r + x * x
    gs, bs = r / z2, -x / z2
    va, vm = ops.columns(pred, 0, 1), ops.columns(pred, 1, 2)
    vi, vj = ops.gather(vm, f), ops.gather(vm, t)
    delta = ops.sub(ops.sub(ops.gather(va, f), ops.gather(va, t)), shift[:, None])
    cos, sin = ops.cos(delta), ops.sin(delta)
    vij = ops.mul(ops.mul(vi, vj), (1.0 / tap)[:, None])
    vi2 = ops.mul(ops.square(vi), (1.0 / (tap * tap))[:, None])
    p = ops.sub(ops.mul(vi2, gs[:, None]), ops.mul(vij, ops.add(ops.mul(cos, gs[:, None]), ops.mul(sin, bs[:, None]))))
    q = ops.sub(
        ops.mul(vi2, -(bs + bfr)[:, None]),
        ops.mul(vij, ops.sub(ops.mul(sin, gs[:, None]), ops.mul(cos, bs[:, None]))),
    )
    return p, q, table


def _limited(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Angle limits that actually constrain (0/0 and +-360 deg mean none)."""
    return ~(((lo == 0) & (hi == 0)) | ((lo <= -2 * np.pi + 1e-9) & (hi >= 2 * np.pi - 1e-9)))


def compute_physics_penalty(pred, g: HeteroGraph | GraphBatch, weights: PenaltyWeights) -> Tensor:
    """Squared-hinge penalties on voltage, angle and thermal limits."""
    if isinstance(g, GraphBatch):
        g = g.graph
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    if pred.shape != (g.num_nodes(NodeType.bus), 2):
        raise ValueError(f"prediction {pred.shape} does not match {g.num_nodes(NodeType.bus)} buses")
    total = Tensor(0.0)
    bus = g.node_features[NodeType.bus].astype(np.float64)
    if weights.voltage:
        vm = ops.columns(pred, 1, 2)
        hi = ops.relu(ops.sub(vm, bus[:, 3:4]))
        lo = ops.relu(ops.sub(bus[:, 2:3], vm))
        total = ops.add(total, ops.mul(ops.add(ops.reduce_sum(ops.square(hi)), ops.reduce_sum(ops.square(lo))), weights.voltage))
    if not (weights.angle or weights.thermal):
        return total
    table = _branch_table(g)
    if table is None:
        return total
    f, t, amin, amax, *_rest = table
    rate = table[-1]
    if weights.angle:
        keep = _limited(amin, amax)
        if keep.any():
            va = ops.columns(pred, 0, 1)
            d = ops.sub(ops.gather(va, f[keep]), ops.gather(va, t[keep]))
            over = ops.relu(ops.sub(d, amax[keep][:, None]))
            under = ops.relu(ops.sub(amin[keep][:, None], d))
            term = ops.add(ops.reduce_sum(ops.square(over)), ops.reduce_sum(ops.square(under)))
            total = ops.add(total, ops.mul(term, weights.angle))
    if weights.thermal:
        keep = rate > 0
        if keep.any():
            p, q, _ = branch_flow_from(pred, g)
            s = ops.sqrt(ops.add(ops.square(ops.gather(p, np.flatnonzero(keep))), ops.square(ops.gather(q, np.flatnonzero(keep)))), 1e-12)
            over = ops.relu(ops.sub(s, rate[keep][:, None]))
            total = ops.add(total, ops.mul(ops.reduce_sum(ops.square(over)), weights.thermal))
    return total


# specs and logs -----------------------------------------------------------


@dataclass
class TrainSpec:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    penalty_weights: PenaltyWeights = field(default_factory=PenaltyWeights)
    regime: str = "PRETRAIN"
    datasets: tuple = ()
    task: str = "regression"
    workers: int = 1
    csv_path: str | None = None
    checkpoint_path: str | None = None
    fit_statistics: bool = True
    standardize_targets: bool = False

    def validate(self) -> "TrainSpec":
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ValueError("learning_rate must be finite and non-negative")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.workers < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and workers >= 1 required")
        if self.regime == "PRETRAIN" and len(self.datasets) < 1:
            raise ValueError("PRETRAIN needs at least one dataset")
        if self.regime != "PRETRAIN" and len(self.datasets) != 1:
            raise ValueError(f"{self.regime} takes exactly one dataset")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSpec":
        d = dict(d)
        d["penalty_weights"] = PenaltyWeights.from_dict(d.get("penalty_weights"))
        d["datasets"] = tuple(d.get("datasets", ()))
        return cls(**d)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    metrics: dict
    wall_time: float


class GraphPool:
    """Concatenation of several datasets addressed by a single ordinal space."""

    def __init__(self, datasets: Sequence):
        self.sources = [_resolve(d) for d in datasets]
        self.sizes = [len(s) for s in self.sources]
        self.starts = np.concatenate([[0], np.cumsum(self.sizes, dtype=np.int64)])
        self._cache: dict[int, HeteroGraph] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return int(self.starts[-1])

    def __getitem__(self, i: int) -> HeteroGraph:
        i = int(i)
        g = self._cache.get(i)
        if g is None:
            if not 0 <= i < len(self):
                raise IndexError(f"ordinal {i} out of range [0, {len(self)})")
            k = int(np.searchsorted(self.starts, i, side="right") - 1)
            src = self.sources[k]
            j = i - int(self.starts[k])
            g = src.read(j) if hasattr(src, "read") else src[j]
            with self._lock:
                self._cache[i] = g
        return g

    def get(self, ordinals) -> list[HeteroGraph]:
        return [self[i] for i in ordinals]

    def splits(self):
        """Each dataset's own (train, val, test) split mapped into the pooled ordinals."""
        from .store import split_dataset

        parts = ([], [], [])
        for k, s in enumerate(self.sources):
            fr = getattr(s, "split_fractions", (0.9, 0.05, 0.05))
            seed = getattr(s, "split_seed", 0)
            for bucket, idx in zip(parts, split_dataset(len(s), fr, seed)):
                bucket.append(np.asarray(idx, dtype=np.int64) + self.starts[k])
        return tuple(np.concatenate(p) if p else np.zeros(0, np.int64) for p in parts)


def _resolve(d):
    if isinstance(d, (str, os.PathLike)):
        from .store import open_dataset

        return open_dataset(d)
    return d


# training ---------------------------------------------------------------


def _objective(model: Model, batch: GraphBatch, task: str, weights: PenaltyWeights, bus_total: int, graph_total: int):
    """Batch objective scaled so that parts of a split batch sum to the whole."""
    out = model(batch)
    if task == "regression":
        if out.bus is None:
            raise ValueError("regression training needs a bus head")
        if not batch.has_target:
            raise ValueError("regression batch without bus targets")
        n = out.bus.shape[0]
        loss = ops.mul(compute_supervised_loss(out.bus, batch.graph.bus_target), n / bus_total)
        if weights.active:
            loss = ops.add(loss, compute_physics_penalty(out.bus, batch, weights))
        return loss
    if out.graph is None:
        raise ValueError("classification training needs a graph head")
    if batch.labels is None:
        raise ValueError("classification batch without graph labels")
    return ops.mul(ops.bce_with_logits(out.graph, batch.labels[:, None]), batch.num_graphs / graph_total)


def _bus_count(graphs) -> int:
    return int(sum(g.num_nodes(NodeType.bus) for g in graphs))


def _grad_step(model, graphs, spec, names, pool_exec):
    """Loss value and gradients for one batch, optionally split across workers."""
    bus_total, graph_total = _bus_count(graphs), len(graphs)
    params = [model.params[n] for n in names]
    parts = [p for p in np.array_split(np.arange(len(graphs)), min(spec.workers, len(graphs))) if len(p)]

    def work(idx):
        batch = batch_graphs([graphs[i] for i in idx])
        with Tape() as tape:
            loss = _objective(model, batch, spec.task, spec.penalty_weights, bus_total, graph_total)
        return loss.item(), tape.gradient(loss, params)

    if pool_exec is None or len(parts) == 1:
        results = [work(p) for p in parts]
    else:
        results = list(pool_exec.map(work, parts))
    value = 0.0
    grads = [np.zeros_like(p.data) for p in params]
    for v, gs in results:  # worker-index order
        value += v
        for acc, g in zip(grads, gs):
            acc += g
    return value, dict(zip(names, grads))


def evaluate_loss(model: Model, graphs: Sequence[HeteroGraph], task: str, batch_size: int = 64) -> float:
    """Supervised validation loss over ``graphs`` (per-bus MSE or mean BCE)."""
    if not graphs:
        raise EmptySplitError("empty evaluation split")
    bus_total, graph_total = _bus_count(graphs), len(graphs)
    total = 0.0
    for lo in range(0, len(graphs), batch_size):
        batch = batch_graphs(list(graphs[lo : lo + batch_size]))
        total += _objective(model, batch, task, PenaltyWeights(), bus_total, graph_total).item()
    return total


def _metric_names(task: str) -> list[str]:
    return ["mse_va", "mse_vm"] if task == "regression" else ["accuracy", "f1", "auc"]


def fit_iter(
    model: Model,
    spec: TrainSpec,
    train: Sequence[int] | None = None,
    val: Sequence[int] | None = None,
    deadline: float | None = None,
    loss_hook: Callable[[int, int, float], float] | None = None,
    pool: GraphPool | None = None,
) -> Iterator[EpochLog]:
    """Train ``model`` in place, yielding one EpochLog per completed epoch.

    Epochs are numbered from 1.  ``deadline`` is a ``time.monotonic()``
    instant checked before every batch.  ``loss_hook`` sees each batch loss
    and may replace it (fault injection).
    """
    spec.validate()
    pool = pool or GraphPool(spec.datasets)
    if train is None or val is None:
        tr, va, _ = pool.splits()
        train = tr if train is None else train
        val = va if val is None else val
    train = np.asarray(train, dtype=np.int64)
    val_graphs = pool.get(val)
    if len(train) == 0:
        raise EmptySplitError("empty training split")
    if spec.regime == "PRETRAIN" and spec.fit_statistics:
        model.fit_statistics(pool.get(train), targets=spec.standardize_targets and spec.task == "regression")

    names = model.trainable_names()
    state = AdamState()
    writer = _CsvLog(spec.csv_path, _metric_names(spec.task)) if spec.csv_path else None
    best = math.inf
    executor = ThreadPoolExecutor(spec.workers) if spec.workers > 1 else None
    try:
        for epoch in range(1, spec.epochs + 1):
            t0 = time.perf_counter()
            order = train[np.random.default_rng([spec.seed, epoch]).permutation(len(train))]
            running, seen = 0.0, 0
            for b, lo in enumerate(range(0, len(order), spec.batch_size)):
                if deadline is not None and time.monotonic() > deadline:
                    raise DeadlineExceeded(epoch)
                graphs = pool.get(order[lo : lo + spec.batch_size])
                value, grads = _grad_step(model, graphs, spec, names, executor)
                if loss_hook is not None:
                    value = loss_hook(epoch, b, value)
                if not math.isfinite(value) or not all(np.isfinite(g).all() for g in grads.values()):
                    raise NonFiniteLossError(epoch, b, value)
                adam_step({n: model.params[n].data for n in names}, grads, state, spec.learning_rate)
                running += value * len(graphs)
                seen += len(graphs)
            val_loss = evaluate_loss(model, val_graphs, spec.task) if val_graphs else math.nan
            metrics = evaluate_metrics(model, val_graphs, spec.task) if val_graphs else {}
            if val_graphs and not math.isfinite(val_loss):
                raise NonFiniteLossError(epoch, -1, val_loss)
            log = EpochLog(epoch, running / seen, val_loss, {k: metrics.get(k, math.nan) for k in _metric_names(spec.task)}, time.perf_counter() - t0)
            if writer:
                writer.append(log)
            if spec.checkpoint_path and val_loss < best:
                save_checkpoint(spec.checkpoint_path, model.state_dict(), state, checkpoint_metadata(model, epoch, val_loss))
            best = min(best, val_loss)
            yield log
    finally:
        if executor:
            executor.shutdown()


def fit(model: Model, spec: TrainSpec, train=None, val=None, **kw) -> tuple[Model, list[EpochLog], float]:
    logs = list(fit_iter(model, spec, train, val, **kw))
    best = min((l.val_loss for l in logs), default=math.nan)
    return model, logs, best


def checkpoint_metadata(model: Model, epoch: int | None = None, val_loss: float | None = None) -> dict:
    return {
        "config": model.config.to_dict(),
        "frozen": sorted(model.frozen),
        "buffers": {k: v.tolist() for k, v in model.buffers.items()},
        "epoch": epoch,
        "val_loss": val_loss,
    }


def model_from_checkpoint(path) -> Model:
    from .autodiff.checkpoint import load_checkpoint
    from .models.config import ModelConfig

    params, _, meta = load_checkpoint(path)
    m = Model(ModelConfig.from_dict(meta["config"]))
    m.load_state_dict(params)
    m.frozen = set(meta.get("frozen", []))
    m.buffers = {k: np.array(v, dtype=np.float64) for k, v in meta["buffers"].items()}
    return m


class _CsvLog:
    def __init__(self, path: str, metric_names: list[str]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.columns = ["epoch", "train_loss", "val_loss", *metric_names, "wall_time"]
        with open(self.path, "w", newline="") as f:
            csv.writer(f).writerow(self.columns)

    def append(self, log: EpochLog) -> None:
        row = [log.epoch, repr(log.train_loss), repr(log.val_loss), *(repr(log.metrics[k]) for k in self.columns[3:-1]), f"{log.wall_time:.6f}"]
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow(row)
            f.flush()
            os.fsync(f.fileno())


def read_epoch_csv(path) -> list[EpochLog]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    out = []
    for r in rows:
        metrics = {k: float(v) for k, v in r.items() if k not in ("epoch", "train_loss", "val_loss", "wall_time")}
        out.append(EpochLog(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]), metrics, float(r["wall_time"])))
    return out


# fine-tuning ------------------------------------------------------------


def configure_finetune(model: Model, regime: str, seed: int | None = None) -> Model:
    """Copy of ``model`` with the frozen set of ``regime``."""
    m = model.copy()
    m.frozen = set()
    if regime in ("FT-F", "PRETRAIN"):
        return m
    if regime == "FT-P":
        keep = set(m.head_names()) | set(m.layer_names(m.config.num_conv_layers - 1))
        m.frozen = {n for n in m.params if n not in keep}
    elif regime == "FT-H":
        keep = set(m.head_names())
        m.frozen = {n for n in m.params if n not in keep}
    elif regime == "SCR":
        m.reinitialize(seed=m.config.seed if seed is None else seed)
    else:
        raise ValueError(f"unknown regime {regime!r}")
    return m


def swap_head(model: Model, new_heads: HeadSpec | Sequence[HeadSpec]) -> Model:
    m = model.copy()
    m.set_heads([new_heads] if isinstance(new_heads, HeadSpec) else list(new_heads))
    return m


# metrics ----------------------------------------------------------------


def roc_auc(scores, labels) -> float:
    """Mann-Whitney rank statistic; ties count one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return math.nan
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def classification_metrics(logits, labels) -> dict:
    z = np.asarray(logits, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    prob = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    pred = prob >= 0.5
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return {"accuracy": float(np.mean(pred == y)), "f1": float(f1), "auc": roc_auc(z, y)}


def predict(model: Model, graphs: Sequence[HeteroGraph], batch_size: int = 64):
    bus, logits = [], []
    for lo in range(0, len(graphs), batch_size):
        out = model(batch_graphs(list(graphs[lo : lo + batch_size])))
        if out.bus is not None:
            bus.append(out.bus.data)
        if out.graph is not None:
            logits.append(out.graph.data[:, 0])
    return (np.concatenate(bus) if bus else None, np.concatenate(logits) if logits else None)


def evaluate_metrics(model: Model, graphs: Sequence[HeteroGraph], task: str) -> dict:
    if not graphs:
        raise EmptySplitError("empty evaluation split")
    bus, logits = predict(model, graphs)
    if task == "regression":
        if bus is None:
            raise ValueError("regression metrics need a bus head")
        y = np.concatenate([g.bus_target for g in graphs])
        err = (bus - y) ** 2
        va, vm = float(err[:, 0].mean()), float(err[:, 1].mean())
        return {"mse_va": va, "mse_vm": vm, "mse": va + vm}
    if task == "classification":
        if logits is None:
            raise ValueError("classification metrics need a graph head")
        labels = np.array([g.graph_label for g in graphs], dtype=np.float64)
        out = classification_metrics(logits, labels)
        z = logits
        out["bce"] = float(np.mean(np.maximum(z, 0) - z * labels + np.log1p(np.exp(-np.abs(z)))))
        return out
    raise ValueError(f"unknown task {task!r}")
