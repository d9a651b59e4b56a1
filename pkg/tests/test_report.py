import csv
import xml.dom.minidom

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridfm.hpo import CampaignSpec, SearchSpace, run_campaign
from gridfm.report import ReportInputError, box_stats, emit_report, load_results, summarize
from helpers import planted_trial


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=80))
def test_box_stats_against_numpy(vals):
    s = box_stats(vals)
    v = np.asarray(vals)
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])
    assert (s.q1, s.median, s.q3) == pytest.approx((q1, med, q3))
    lo, hi = q1 - 1.5 * (q3 - q1), q3 + 1.5 * (q3 - q1)
    inside = [x for x in vals if lo <= x <= hi]
    assert s.whisker_lo == min(inside) and s.whisker_hi == max(inside)
    assert len(s.outliers) == len(vals) - len(inside)
    assert s.best == min(vals) and s.count == len(vals)


def test_box_stats_empty():
    with pytest.raises(ValueError):
        box_stats([])


@pytest.fixture(scope="module")
def results(tmp_path_factory):
    d = tmp_path_factory.mktemp("campaign")
    paths = []
    for kind in ("sage", "gat"):
        spec = CampaignSpec(SearchSpace(kind), max_trials=10, max_concurrent=2, epochs=3, failure_rate=0.3,
                            results_path=str(d / f"r_{kind}.csv"), seed=2)
        run_campaign(spec, planted_trial)
        paths.append(spec.results_path)
    return paths


def test_emit_report_files(tmp_path, results):
    log = tmp_path / "run.csv"
    log.write_text("epoch,train_loss,val_loss,mse_va,mse_vm,wall_time\n1,1.0,0.5,0.2,0.3,0.1\n2,0.5,0.25,0.1,0.15,0.1\n")
    rep = emit_report(results, tmp_path / "out", [log])
    assert set(rep.files) == {"summary", "loss_vs_params", "box", "scatter", "curves"}
    for key in ("box", "scatter", "curves"):
        xml.dom.minidom.parse(str(rep.files[key]))  # well-formed
    rows = list(csv.DictReader(open(rep.files["summary"])))
    assert [r["mpnn_type"] for r in rows] == ["gat", "sage"]
    for r in rows:
        valid, dispatched = map(int, r["label"].split("/"))
        assert dispatched == 10 and valid == int(r["valid"])


def test_summary_counts_only_done(results):
    recs, problems = load_results(results)
    assert not problems
    for row in summarize(recs):
        mine = [r for r in recs if r.config.mpnn_type == row["mpnn_type"]]
        done = [r.objective for r in mine if r.status == "DONE"]
        assert row["valid"] == len(done) and row["best"] == min(done)


def test_unparseable_results_rejected(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("trial_id,mpnn_type\nx,y\n")
    with pytest.raises(ReportInputError):
        emit_report([bad], tmp_path / "out")


def test_missing_file_is_a_problem(tmp_path, results):
    rep = emit_report([*results, tmp_path / "nope.csv"], tmp_path / "out")
    assert any("nope.csv" in p for p in rep.problems)
