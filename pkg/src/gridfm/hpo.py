"""Architecture-fixed hyperparameter campaigns.

A campaign samples configurations with a UCB acquisition over a k-nearest
neighbour surrogate, runs trials in a bounded thread pool, and appends every
finished trial to a CSV file as soon as it is known.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
import traceback
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .models.config import ATTENTION_TYPES, HIDDEN_BOUNDS, LAYER_BOUNDS, MPNN_TYPES, ModelConfig
from .models.model import count_parameters

log = logging.getLogger(__name__)

LR_BOUNDS = (1e-5, 1e-2)
STATUSES = ("DONE", "FAILED", "TIMEOUT")
CSV_COLUMNS = (
    "trial_id",
    "mpnn_type",
    "hidden_dim",
    "num_conv_layers",
    "learning_rate",
    "status",
    "objective",
    "epochs_completed",
    "wall_time_s",
    "num_params",
    "failure_reason",
)


@dataclass(frozen=True)
class SearchSpace:
    mpnn_type: str = "sage"
    hidden_dim: tuple[int, int] = HIDDEN_BOUNDS
    num_conv_layers: tuple[int, int] = LAYER_BOUNDS
    learning_rate: tuple[float, float] = LR_BOUNDS
    num_heads: int = 4

    def __post_init__(self):
        if self.mpnn_type not in MPNN_TYPES:
            raise ValueError(f"unknown mpnn_type {self.mpnn_type!r}")
        if not (self.hidden_dim[0] <= self.hidden_dim[1] and self.num_conv_layers[0] <= self.num_conv_layers[1]):
            raise ValueError("empty integer range")
        if not 0 < self.learning_rate[0] <= self.learning_rate[1]:
            raise ValueError("learning-rate bounds must be positive and ordered")

    @property
    def hidden_step(self) -> int:
        return self.num_heads if self.mpnn_type in ATTENTION_TYPES else 1

    def hidden_values(self) -> np.ndarray:
        lo, hi = self.hidden_dim
        step = self.hidden_step
        return np.arange(-(-lo // step) * step, hi + 1, step)

    def contains(self, c: "TrialConfig") -> bool:
        return (
            c.mpnn_type == self.mpnn_type
            and self.hidden_dim[0] <= c.hidden_dim <= self.hidden_dim[1]
            and c.hidden_dim % self.hidden_step == 0
            and self.num_conv_layers[0] <= c.num_conv_layers <= self.num_conv_layers[1]
            and self.learning_rate[0] <= c.learning_rate <= self.learning_rate[1]
        )

    def uniform(self, rng: np.random.Generator) -> "TrialConfig":
        lo, hi = np.log(self.learning_rate)
        return TrialConfig(
            self.mpnn_type,
            int(rng.choice(self.hidden_values())),
            int(rng.integers(self.num_conv_layers[0], self.num_conv_layers[1] + 1)),
            float(np.clip(np.exp(rng.uniform(lo, hi)), *self.learning_rate)),
        )

    def to_unit(self, c: "TrialConfig") -> np.ndarray:
        h0, h1 = self.hidden_dim
        l0, l1 = self.num_conv_layers
        r0, r1 = np.log(self.learning_rate)
        return np.array([
            (c.hidden_dim - h0) / max(h1 - h0, 1),
            (c.num_conv_layers - l0) / max(l1 - l0, 1),
            (np.log(c.learning_rate) - r0) / max(r1 - r0, 1e-12),
        ])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        d = dict(d)
        for k in ("hidden_dim", "num_conv_layers", "learning_rate"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class TrialConfig:
    mpnn_type: str
    hidden_dim: int
    num_conv_layers: int
    learning_rate: float

    def model_config(self, **kw) -> ModelConfig:
        return ModelConfig(self.mpnn_type, self.hidden_dim, self.num_conv_layers, **kw)


@dataclass
class TrialRecord:
    trial_id: int
    config: TrialConfig
    status: str
    objective: float | None
    epochs_completed: int
    wall_time: float
    num_params: int
    failure_reason: str = ""
    val_losses: list = field(default_factory=list, compare=False)

    @property
    def valid(self) -> bool:
        return self.status == "DONE" and self.objective is not None

    def to_row(self) -> list[str]:
        c = self.config
        return [
            str(self.trial_id), c.mpnn_type, str(c.hidden_dim), str(c.num_conv_layers), repr(c.learning_rate),
            self.status, "" if self.objective is None else repr(self.objective), str(self.epochs_completed),
            repr(self.wall_time), str(self.num_params), self.failure_reason,
        ]


class MalformedRow(ValueError):
    pass


def record_from_row(row: dict) -> TrialRecord:
    try:
        cfg = TrialConfig(row["mpnn_type"], int(row["hidden_dim"]), int(row["num_conv_layers"]), float(row["learning_rate"]))
        status = row["status"]
        if status not in STATUSES:
            raise MalformedRow(f"unknown status {status!r}")
        obj = float(row["objective"]) if row["objective"] not in ("", None) else None
        epochs = int(row["epochs_completed"])
        rec = TrialRecord(int(row["trial_id"]), cfg, status, obj, epochs, float(row["wall_time_s"]),
                          int(row["num_params"]), row.get("failure_reason") or "")
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, MalformedRow):
            raise
        raise MalformedRow(str(e)) from e
    if (rec.objective is not None) != (rec.epochs_completed >= 1):
        raise MalformedRow("objective must be present exactly when an epoch completed")
    if rec.status == "DONE" and rec.objective is None:
        raise MalformedRow("DONE without an objective")
    if rec.objective is not None and not math.isfinite(rec.objective):
        raise MalformedRow("non-finite objective")
    return rec


def warm_start_from_csv(path, report: list | None = None) -> list[TrialRecord]:
    """Records from a results CSV; malformed rows are skipped and reported."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        out = []
        for lineno, row in enumerate(reader, start=2):
            try:
                out.append(record_from_row(row))
            except MalformedRow as e:
                msg = f"line {lineno}: {e}"
                log.warning("skipping malformed row, %s", msg)
                if report is not None:
                    report.append(msg)
    return out


class ResultsCsv:
    """Append-only results file; each row is flushed and fsynced."""

    def __init__(self, path, resume: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not (resume and self.path.exists()):
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(CSV_COLUMNS)

    def append(self, rec: TrialRecord) -> None:
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow(rec.to_row())
            f.flush()
            os.fsync(f.fileno())


# acquisition ------------------------------------------------------------


def _observations(history: Sequence[TrialRecord], space: SearchSpace):
    seen = [r for r in history if r.config.mpnn_type == space.mpnn_type]
    finite = [r.objective for r in seen if r.status != "FAILED" and r.objective is not None and math.isfinite(r.objective)]
    worst = max(finite) if finite else 1.0
    xs, ys = [], []
    for r in seen:
        if r.status == "FAILED":
            y = 2.0 * worst if worst > 0 else worst - 1.0
        elif r.objective is None or not math.isfinite(r.objective):
            continue
        else:
            y = r.objective
        xs.append(space.to_unit(r.config))
        ys.append(y)
    return np.array(xs).reshape(-1, 3), np.array(ys)


def knn_surrogate(X: np.ndarray, y: np.ndarray, Q: np.ndarray, k: int = 5):
    """Distance-weighted kNN mean and spread at query points ``Q``.

    The spread is the weighted neighbour standard deviation plus a term that
    grows with distance to the neighbours, so unexplored regions stay
    attractive even when nearby observations agree.
    """
    k = min(k, len(y))
    d = np.sqrt(((Q[:, None, :] - X[None, :, :]) ** 2).sum(-1))
    nn = np.argsort(d, axis=1, kind="stable")[:, :k]
    dn = np.take_along_axis(d, nn, axis=1)
    w = 1.0 / (dn + 1e-6)
    w /= w.sum(axis=1, keepdims=True)
    yn = y[nn]
    mu = (w * yn).sum(axis=1)
    spread = np.sqrt((w * (yn - mu[:, None]) ** 2).sum(axis=1))
    scale = y.std() if len(y) > 1 else 1.0
    sigma = spread + 0.5 * scale * dn.mean(axis=1)
    return mu, sigma


def sample_config(
    history: Sequence[TrialRecord],
    space: SearchSpace,
    rng: np.random.Generator,
    warmup: int = 8,
    k: int = 5,
    candidates: int = 256,
    kappa: float = 1.96,
) -> TrialConfig:
    X, y = _observations(history, space)
    if len(history) < warmup or len(y) == 0:
        return space.uniform(rng)
    # objectives enter as normalized ranks so one huge loss cannot flatten the rest
    y = np.argsort(np.argsort(y, kind="stable"), kind="stable") / max(len(y) - 1, 1)
    cand = [space.uniform(rng) for _ in range(candidates)]
    Q = np.stack([space.to_unit(c) for c in cand])
    mu, sigma = knn_surrogate(X, y, Q, k)
    ucb = -mu + kappa * sigma
    return cand[int(np.argmax(ucb))]


# trials -----------------------------------------------------------------

# trial_fn(config, campaign, deadline) yields one validation loss per epoch
TrialFn = Callable[[TrialConfig, "CampaignSpec", float], Iterable[float]]


@dataclass
class CampaignSpec:
    space: SearchSpace = field(default_factory=SearchSpace)
    max_trials: int = 24
    max_concurrent: int = 4
    epochs: int = 10
    time_budget_s: float = 900.0
    dataset: str | None = None
    seed: int = 0
    results_path: str = "results.csv"
    batch_size: int = 32
    warmup: int = 8
    kappa: float = 1.96
    failure_rate: float = 0.0

    def validate(self) -> "CampaignSpec":
        if self.max_concurrent < 1 or self.max_trials < 0:
            raise ValueError("max_concurrent >= 1 and max_trials >= 0 required")
        if self.epochs < 1 or not self.time_budget_s > 0:
            raise ValueError("budgets must be positive")
        if not 0 <= self.failure_rate <= 1:
            raise ValueError("failure_rate must lie in [0, 1]")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["space"] = self.space.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignSpec":
        d = dict(d)
        d["space"] = SearchSpace.from_dict(d.get("space", {}))
        return cls(**d).validate()

    @classmethod
    def from_json(cls, path) -> "CampaignSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


class InjectedFailure(RuntimeError):
    pass


def chaos_plan(config: TrialConfig, rate: float, seed: int, epochs: int) -> tuple[bool, int, str]:
    """(fails, epoch, kind) of the injected fault for ``config``; pure in its inputs."""
    key = [seed, config.hidden_dim, config.num_conv_layers, int(config.learning_rate * 1e12) % (2**32)]
    rng = np.random.default_rng(key)
    fail = bool(rng.random() < rate)
    at = int(rng.integers(1, epochs + 1))
    kind = "raise" if rng.random() < 0.5 else "nan"
    return fail, at, kind


def chaos(trial_fn: TrialFn, rate: float, seed: int = 0) -> TrialFn:
    """Wrap ``trial_fn`` so a ``rate`` fraction of trials fail at a random epoch.

    A failing trial either raises before the chosen epoch's validation
    ("raise") or reports a non-finite loss for it ("nan").
    """

    def wrapped(config: TrialConfig, campaign: CampaignSpec, deadline: float):
        fail, at, kind = chaos_plan(config, rate, seed, campaign.epochs)
        for epoch, loss in enumerate(trial_fn(config, campaign, deadline), start=1):
            if fail and epoch == at:
                if kind == "raise":
                    raise InjectedFailure(f"injected failure in epoch {epoch}")
                loss = math.nan
            yield loss

    return wrapped


def train_trial(config: TrialConfig, campaign: CampaignSpec, deadline: float) -> Iterator[float]:
    """Default trial: train on the campaign dataset, yield validation losses."""
    from .models.model import Model
    from .train import TrainSpec, fit_iter

    if campaign.dataset is None:
        raise ValueError("campaign has no dataset")
    model = Model(config.model_config(seed=campaign.seed))
    spec = TrainSpec(campaign.epochs, campaign.batch_size, config.learning_rate, campaign.seed, datasets=(campaign.dataset,))
    for epoch_log in fit_iter(model, spec, deadline=deadline):
        yield epoch_log.val_loss


def run_trial(config: TrialConfig, campaign: CampaignSpec, trial_id: int = 0, trial_fn: TrialFn | None = None) -> TrialRecord:
    """Run one trial; every failure is mapped into the record's status."""
    from .train import DeadlineExceeded, NonFiniteLossError

    trial_fn = trial_fn or train_trial
    t0 = time.monotonic()
    deadline = t0 + campaign.time_budget_s
    losses: list[float] = []
    status, reason = "DONE", ""
    try:
        num_params = count_parameters(config.model_config())
    except Exception as e:  # invalid config is a trial failure too
        num_params = 0
        status, reason = "FAILED", f"{type(e).__name__}: {e}"
    if status == "DONE":
        try:
            for loss in trial_fn(config, campaign, deadline):
                loss = float(loss)
                if not math.isfinite(loss):
                    raise NonFiniteLossError(len(losses) + 1, -1, loss)
                losses.append(loss)
                if len(losses) >= campaign.epochs:
                    break
                if time.monotonic() > deadline:
                    raise DeadlineExceeded(len(losses) + 1)
            if len(losses) < campaign.epochs:
                raise RuntimeError(f"trial stopped after {len(losses)} of {campaign.epochs} epochs")
        except DeadlineExceeded as e:
            status, reason = "TIMEOUT", str(e)
        except Exception as e:
            status, reason = "FAILED", f"{type(e).__name__}: {e}"
            log.debug("trial %d failed\n%s", trial_id, traceback.format_exc())
    objective = min(losses) if losses else None
    return TrialRecord(trial_id, config, status, objective, len(losses), time.monotonic() - t0, num_params,
                       reason.replace("\n", " "), losses)


def run_campaign(
    spec: CampaignSpec,
    trial_fn: TrialFn | None = None,
    history: Sequence[TrialRecord] = (),
    resume: bool = False,
) -> list[TrialRecord]:
    """Dispatch ``spec.max_trials`` trials, at most ``max_concurrent`` at once.

    ``history`` (e.g. from warm_start_from_csv) seeds the optimizer.  Rows
    are appended to ``results_path`` in completion order.
    """
    spec.validate()
    fn = trial_fn or train_trial
    if spec.failure_rate:
        fn = chaos(fn, spec.failure_rate, spec.seed)
    rng = np.random.default_rng(spec.seed)
    out = ResultsCsv(spec.results_path, resume=resume)
    known = list(history)
    records: list[TrialRecord] = []
    first_id = max((r.trial_id for r in known), default=-1) + 1
    dispatched = 0
    pool = ThreadPoolExecutor(spec.max_concurrent, thread_name_prefix="trial")
    running: dict[Future, int] = {}
    try:
        while dispatched < spec.max_trials or running:
            while dispatched < spec.max_trials and len(running) < spec.max_concurrent:
                cfg = sample_config(known + records, spec.space, rng, spec.warmup, kappa=spec.kappa)
                tid = first_id + dispatched
                running[pool.submit(run_trial, cfg, spec, tid, fn)] = tid
                dispatched += 1
            done, _ = wait(list(running), return_when=FIRST_COMPLETED)
            for fut in sorted(done, key=lambda f: running[f]):
                running.pop(fut)
                rec = fut.result()
                records.append(rec)
                out.append(rec)
    finally:
        pool.shutdown(wait=True, cancel_futures=True)
    return records


def best_record(records: Sequence[TrialRecord]) -> TrialRecord | None:
    done = [r for r in records if r.valid]
    return min(done, key=lambda r: (r.objective, r.trial_id)) if done else None


def run_campaigns(spec: CampaignSpec, mpnn_types: Sequence[str] = MPNN_TYPES, trial_fn: TrialFn | None = None) -> dict:
    """One campaign per architecture, each writing ``<stem>_<type>.csv``."""
    base = Path(spec.results_path)
    out = {}
    for t in mpnn_types:
        sub = replace(spec, space=replace(spec.space, mpnn_type=t), results_path=str(base.with_name(f"{base.stem}_{t}{base.suffix}")))
        out[t] = run_campaign(sub, trial_fn)
    return out
