"""Command-line entry point: ``gridfm <subcommand> ...``.

Exit status is 0 on success, 1 on a usage error and 2 on a runtime error.
The environment variable GRIDFM_SEED, when set, overrides every seed read
from flags or config files.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

log = logging.getLogger("gridfm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _seed(value: int) -> int:
    env = os.environ.get("GRIDFM_SEED")
    return int(env) if env not in (None, "") else int(value)


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text())


# subcommands ------------------------------------------------------------


def cmd_ingest(a) -> int:
    from .ingest import build_hetero_graph, load_case, parse_opf_json_record
    from .powerflow import solve_power_flow
    from .store import write_shards

    def graphs():
        for p in a.inputs:
            path = Path(p)
            if path.suffix == ".jsonl":
                for line in path.read_text().splitlines():
                    if line.strip():
                        case, state, _ = parse_opf_json_record(line)
                        yield build_hetero_graph(case, state)
            elif path.suffix == ".json":
                case, state, _ = parse_opf_json_record(path.read_text())
                yield build_hetero_graph(case, state)
            else:
                case = load_case(p)
                yield build_hetero_graph(case, solve_power_flow(case) if a.solve else None)

    s = write_shards(graphs(), a.out, a.target_shard_bytes, split_seed=_seed(a.seed))
    print(f"wrote {s.num_graphs} graphs in {s.num_shards} shards to {a.out}")
    return 0


def cmd_generate(a) -> int:
    from .ingest import load_case
    from .powerflow import feasibility_samples, synthesize_samples
    from .store import write_shards

    case = load_case(a.case)
    seed = _seed(a.seed)
    meta = {"case": case.name or str(a.case), "n": a.n, "sigma": a.sigma, "seed": seed}
    if a.scale_loads is not None:
        graphs = feasibility_samples(case, a.n, a.sigma, seed, factor=a.scale_loads)
        meta.update(task="classification", factor=a.scale_loads)
    else:
        graphs = synthesize_samples(case, a.n, a.sigma, seed, outage=a.line_outage, workers=a.workers)
        meta.update(task="regression", line_outage=bool(a.line_outage))
    s = write_shards(graphs, a.out, a.target_shard_bytes, split_seed=seed, metadata=meta)
    print(f"wrote {s.num_graphs} graphs in {s.num_shards} shards to {a.out}")
    return 0


def _train_spec(d: dict, seed_override=True):
    from .train import TrainSpec

    spec = TrainSpec.from_dict(d)
    return replace(spec, seed=_seed(spec.seed)) if seed_override else spec


def cmd_train(a) -> int:
    from .models import Model, ModelConfig
    from .train import fit

    cfg = _read_json(a.config)
    mc = ModelConfig.from_dict(cfg.get("model", {}))
    mc = replace(mc, seed=_seed(mc.seed))
    spec = _train_spec(cfg.get("train", {}))
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = replace(spec, csv_path=str(out / "epochs.csv"), checkpoint_path=str(out / "best.ckpt"))
    _, logs, best = fit(Model(mc), spec)
    for l in logs:
        print(f"epoch {l.epoch:3d}  train {l.train_loss:.6e}  val {l.val_loss:.6e}")
    print(f"best validation loss {best:.6e}; checkpoint {spec.checkpoint_path}")
    return 0


def cmd_hpo(a) -> int:
    from .hpo import CampaignSpec, best_record, run_campaign, warm_start_from_csv

    d = _read_json(a.config)
    types = d.pop("mpnn_types", None)
    spec = CampaignSpec.from_dict(d)
    spec = replace(spec, seed=_seed(spec.seed))
    if a.results:
        spec = replace(spec, results_path=a.results)
    history = warm_start_from_csv(a.warm_start) if a.warm_start else []
    specs = [spec]
    if types:
        base = Path(spec.results_path)
        specs = [replace(spec, space=replace(spec.space, mpnn_type=t), results_path=str(base.with_name(f"{base.stem}_{t}{base.suffix}"))) for t in types]
    for s in specs:
        recs = run_campaign(s, history=history)
        b = best_record(recs)
        valid = sum(r.valid for r in recs)
        print(f"{s.space.mpnn_type}: {valid}/{len(recs)} valid trials -> {s.results_path}")
        if b:
            print(f"  best objective {b.objective:.6e} with {b.config}")
    return 0


def cmd_finetune(a) -> int:
    from .models.config import BUS_REGRESSION, GRAPH_CLASSIFICATION
    from .store import open_dataset
    from .train import TrainSpec, configure_finetune, evaluate_metrics, fit, model_from_checkpoint, swap_head
    import numpy as np

    regime = a.regime.upper()
    model = model_from_checkpoint(a.checkpoint)
    task = a.task
    if a.swap_head:
        model = swap_head(model, GRAPH_CLASSIFICATION if a.swap_head == "graph" else BUS_REGRESSION)
    seed = _seed(a.seed)
    model = configure_finetune(model, regime, seed)
    ds = open_dataset(a.data)
    n = len(ds)
    perm = np.random.default_rng(seed).permutation(n)
    n_hold = max(1, int(round(0.2 * n)))
    n_test = int(round(a.test_fraction * n))
    test, val, train = perm[:n_test], perm[n_test : n_test + n_hold], perm[n_test + n_hold :]
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = TrainSpec(a.epochs, a.batch_size, a.lr, seed, regime=regime, datasets=(ds,), task=task,
                     csv_path=str(out / f"{regime.lower()}_epochs.csv"), checkpoint_path=str(out / f"{regime.lower()}.ckpt"))
    _, logs, best = fit(model, spec, train, val)
    print(f"{regime}: best validation loss {best:.6e} after {len(logs)} epochs")
    if len(test):
        metrics = evaluate_metrics(model, ds.read_many(test), task)
        print("test " + "  ".join(f"{k} {v:.6g}" for k, v in metrics.items()))
    return 0


def cmd_report(a) -> int:
    from .report import emit_report

    rep = emit_report(a.results or (), a.out, a.logs or ())
    for row in rep.summary:
        extra = "" if not row["valid"] else f"  best {row['best']:.4g}  q1 {row['q1']:.4g}  median {row['median']:.4g}  q3 {row['q3']:.4g}"
        print(f"{row['mpnn_type']:>6} {row['label']:>7}{extra}")
    for name, p in rep.files.items():
        print(f"{name}: {p}")
    for msg in rep.problems:
        print(f"warning: {msg}", file=sys.stderr)
    return 0


def cmd_validate(a) -> int:
    from .graph import validate_graph
    from .store import open_dataset

    ds = open_dataset(a.data, verify=True)
    bad = 0
    for i in range(len(ds)):
        problems = validate_graph(ds.read(i))
        for p in problems:
            print(f"graph {i}: {p}")
        bad += bool(problems)
    print(f"{len(ds)} graphs in {ds.num_shards} shards, checksums ok, {bad} invalid")
    return 0 if bad == 0 else 2


# parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gridfm", description="Heterogeneous GNN surrogates for AC power flow.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("ingest", help="case files or OPF-JSON records -> shards")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--solve", action="store_true", help="attach a power-flow solution to .m cases")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--target-shard-bytes", type=int, default=64 << 20)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("generate", help="synthesize labeled samples -> shards")
    s.add_argument("--case", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--sigma", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--scale-loads", type=float, default=None, metavar="FACTOR", help="balanced feasibility set")
    s.add_argument("--line-outage", action="store_true", help="one random non-bridge outage per sample")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--target-shard-bytes", type=int, default=64 << 20)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("train", help="fit a model from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default="run")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("hpo", help="run a hyperparameter campaign")
    s.add_argument("--config", required=True)
    s.add_argument("--results", default=None)
    s.add_argument("--warm-start", default=None)
    s.set_defaults(func=cmd_hpo)

    s = sub.add_parser("finetune", help="fine-tune a checkpoint on a downstream set")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--regime", required=True, type=str.lower, choices=["ft-f", "ft-p", "ft-h", "scr"])
    s.add_argument("--task", choices=["regression", "classification"], default="regression")
    s.add_argument("--swap-head", choices=["bus", "graph"], default=None)
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--test-fraction", type=float, default=0.0)
    s.add_argument("--out", default="finetune")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("report", help="summaries and SVG figures")
    s.add_argument("--results", nargs="*")
    s.add_argument("--logs", nargs="*")
    s.add_argument("--out", default="report")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("validate", help="audit a shard set")
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    if a.command is None:
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return a.func(a)
    except Exception as e:
        log.debug("command failed", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
