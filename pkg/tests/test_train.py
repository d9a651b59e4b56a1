import math
import time

import numpy as np
import pytest

from gridfm.autodiff import load_checkpoint
from gridfm.graph import NodeType, batch_graphs
from gridfm.ingest import build_hetero_graph
from gridfm.models import BUS_REGRESSION, GRAPH_CLASSIFICATION, Model, ModelConfig
from gridfm.powerflow import branch_flows, feasibility_samples, solve_power_flow
from gridfm.train import (
    DeadlineExceeded,
    EmptySplitError,
    NonFiniteLossError,
    PenaltyWeights,
    TrainSpec,
    branch_flow_from,
    classification_metrics,
    compute_physics_penalty,
    compute_supervised_loss,
    configure_finetune,
    evaluate_loss,
    evaluate_metrics,
    fit,
    model_from_checkpoint,
    read_epoch_csv,
    roc_auc,
    swap_head,
)
from helpers import four_bus_case


def mse_double_loop(pred, target):
    total = 0.0
    for i in range(len(pred)):
        for j in range(2):
            total += (pred[i][j] - target[i][j]) ** 2
    return total / len(pred)


def test_supervised_loss_matches_double_loop():
    rng = np.random.default_rng(0)
    p, t = rng.standard_normal((37, 2)), rng.standard_normal((37, 2))
    assert abs(compute_supervised_loss(p, t).item() - mse_double_loop(p, t)) < 1e-13


def test_supervised_loss_shape_check():
    with pytest.raises(ValueError):
        compute_supervised_loss(np.zeros((3, 2)), np.zeros((3, 3)))


def test_evaluate_loss_is_per_bus_average(samples14):
    m = Model(ModelConfig("sage", 8, 2))
    gs = samples14[:10]
    pred = np.concatenate([m(g).bus.data for g in gs])
    y = np.concatenate([g.bus_target for g in gs])
    assert abs(evaluate_loss(m, gs, "regression", batch_size=3) - mse_double_loop(pred, y)) < 1e-12


def test_penalties_vanish_inside_limits_and_grow_outside():
    c = four_bus_case()
    s = solve_power_flow(c)
    g = build_hetero_graph(c, s)
    w = PenaltyWeights(1.0, 1.0, 1.0)
    pred = np.stack([s.va, s.vm], axis=1)
    assert compute_physics_penalty(pred, g, w).item() == 0.0
    high = pred.copy()
    high[2, 1] = 1.16  # vmax 1.06
    v = compute_physics_penalty(high, g, PenaltyWeights(voltage=1.0)).item()
    assert v == pytest.approx((1.16 - np.float32(1.06)) ** 2, rel=1e-6)
    wide = pred.copy()
    wide[1, 0] = math.radians(45)  # branch 1-2 limited to +-30 deg
    assert compute_physics_penalty(wide, g, PenaltyWeights(angle=1.0)).item() > 0
    hot = pred.copy()
    hot[3, 0] = -0.8
    assert compute_physics_penalty(hot, g, PenaltyWeights(thermal=1.0)).item() > 0


def test_negative_penalty_weight_rejected():
    with pytest.raises(ValueError):
        PenaltyWeights(voltage=-1.0)


def test_branch_flow_matches_solver(case14):
    s = solve_power_flow(case14)
    g = build_hetero_graph(case14, s)
    p, q, _ = branch_flow_from(np.stack([s.va, s.vm], axis=1), g)
    ks, sf, _ = branch_flows(case14, s)
    lines = [r for r, k in enumerate(ks) if not case14.branches[k].is_transformer]
    trafos = [r for r, k in enumerate(ks) if case14.branches[k].is_transformer]
    expect = sf[lines + trafos] / case14.base_mva
    assert np.allclose(p.data[:, 0], expect.real, atol=2e-5)
    assert np.allclose(q.data[:, 0], expect.imag, atol=2e-5)


def _pretrained():
    return Model(ModelConfig("sage", 8, 3, heads=(BUS_REGRESSION,), seed=1))


def test_regime_frozen_sets():
    m = _pretrained()
    heads = set(m.head_names())
    last = set(m.layer_names(2))
    assert configure_finetune(m, "FT-F").frozen == set()
    assert set(m.params) - configure_finetune(m, "FT-H").frozen == heads
    assert set(m.params) - configure_finetune(m, "FT-P").frozen == heads | last
    assert len(last) > 0
    with pytest.raises(ValueError):
        configure_finetune(m, "FT-X")


def test_scratch_reinitializes_deterministically():
    m = _pretrained()
    for p in m.params.values():
        p.data = p.data + 1.0
    a, b = configure_finetune(m, "SCR", seed=4), configure_finetune(m, "SCR", seed=4)
    fresh = Model(ModelConfig("sage", 8, 3, seed=4))
    for n in m.params:
        assert np.array_equal(a.params[n].data, b.params[n].data)
        assert np.array_equal(a.params[n].data, fresh.params[n].data)


def test_configure_finetune_copies():
    m = _pretrained()
    ft = configure_finetune(m, "FT-F")
    ft.params["enc.bus.W"].data += 1
    assert not np.array_equal(ft.params["enc.bus.W"].data, m.params["enc.bus.W"].data)


def test_swap_head_keeps_backbone():
    m = _pretrained()
    s = swap_head(m, GRAPH_CLASSIFICATION)
    assert "head_graph.W1" in s.params and "head_bus.W1" not in s.params
    assert "head_bus.W1" in m.params
    for n in m.params:
        if not n.startswith("head_"):
            assert np.array_equal(s.params[n].data, m.params[n].data)


def test_roc_auc_brute_force():
    rng = np.random.default_rng(2)
    s = np.round(rng.standard_normal(200), 1)  # plenty of ties
    y = rng.random(200) < 0.4
    pos, neg = s[y], s[~y]
    brute = np.mean([(a > b) + 0.5 * (a == b) for a in pos for b in neg])
    assert abs(roc_auc(s, y) - brute) < 1e-12


def test_degenerate_all_positive_predictor():
    y = np.array([1, 0] * 50)
    m = classification_metrics(np.full(100, 3.0), y)
    assert m["accuracy"] == 0.5 and m["f1"] == pytest.approx(2 / 3) and m["auc"] == 0.5


def test_roc_auc_single_class_is_nan():
    assert math.isnan(roc_auc([0.1, 0.2], [1, 1]))


def test_classification_metrics_from_model(case14):
    gs = feasibility_samples(case14, 8, 0.1, seed=2)
    m = Model(ModelConfig("sage", 8, 2, heads=(GRAPH_CLASSIFICATION,)))
    met = evaluate_metrics(m, gs, "classification")
    assert set(met) == {"accuracy", "f1", "auc", "bce"}
    assert 0 <= met["accuracy"] <= 1 and met["bce"] > 0


def _spec(samples, **kw):
    base = dict(epochs=2, batch_size=8, learning_rate=1e-3, seed=0, datasets=(samples,))
    base.update(kw)
    return TrainSpec(**base)


def test_fit_writes_csv_and_checkpoint(tmp_path, samples14):
    csv_path, ckpt = tmp_path / "log.csv", tmp_path / "best.ckpt"
    m = Model(ModelConfig("sage", 8, 2))
    _, logs, best = fit(m, _spec(samples14, csv_path=str(csv_path), checkpoint_path=str(ckpt)))
    back = read_epoch_csv(csv_path)
    assert [l.epoch for l in back] == [1, 2]
    assert back[1].val_loss == logs[1].val_loss and set(back[0].metrics) == {"mse_va", "mse_vm"}
    _, _, meta = load_checkpoint(ckpt)
    assert meta["val_loss"] == best and meta["epoch"] == min(logs, key=lambda l: l.val_loss).epoch
    assert best == min(l.val_loss for l in logs)


def test_checkpoint_restores_exact_model(tmp_path, samples14):
    m = Model(ModelConfig("gat", 8, 2, num_heads=2))
    fit(m, _spec(samples14, epochs=1, checkpoint_path=str(tmp_path / "c.ckpt")))
    r = model_from_checkpoint(tmp_path / "c.ckpt")
    assert all(np.array_equal(r.params[n].data, m.params[n].data) for n in m.params)
    assert all(np.array_equal(r.buffers[k], m.buffers[k]) for k in m.buffers)
    b = batch_graphs(samples14[:3])
    assert np.array_equal(r(b).bus.data, m(b).bus.data)


def test_fit_is_deterministic_and_worker_independent(samples14):
    runs = []
    for workers in (1, 1, 3):
        m = Model(ModelConfig("sage", 8, 2))
        _, logs, _ = fit(m, _spec(samples14, workers=workers))
        runs.append([l.val_loss for l in logs])
    assert runs[0] == runs[1]
    assert np.allclose(runs[0], runs[2], rtol=1e-12)


def test_frozen_parameters_do_not_move(samples14):
    m = configure_finetune(Model(ModelConfig("sage", 8, 2)), "FT-H")
    before = m.state_dict()
    fit(m, _spec(samples14, epochs=1, regime="FT-H"), train=np.arange(16), val=np.arange(16, 20))
    after = m.state_dict()
    for n in m.params:
        assert np.array_equal(before[n], after[n]) == (n not in m.head_names())


def test_nonfinite_loss_raises(samples14):
    m = Model(ModelConfig("sage", 8, 2))
    hook = lambda epoch, b, v: math.nan if (epoch, b) == (1, 2) else v
    with pytest.raises(NonFiniteLossError) as e:
        fit(m, _spec(samples14), loss_hook=hook)
    assert (e.value.epoch, e.value.batch) == (1, 2)


def test_deadline(samples14):
    m = Model(ModelConfig("sage", 8, 2))
    with pytest.raises(DeadlineExceeded):
        fit(m, _spec(samples14), deadline=time.monotonic() - 1)


def test_empty_split(samples14):
    with pytest.raises(EmptySplitError):
        fit(Model(ModelConfig("sage", 8, 2)), _spec(samples14), train=[], val=[0])


@pytest.mark.parametrize("kw", [{"learning_rate": -1.0}, {"regime": "X"}, {"task": "ranking"}, {"batch_size": 0}, {"datasets": ()}])
def test_spec_validation(kw, samples14):
    with pytest.raises(ValueError):
        _spec(samples14, **kw).validate()


def test_spec_from_dict():
    s = TrainSpec.from_dict({"epochs": 3, "penalty_weights": {"voltage": 2.0}, "datasets": ["a"]})
    assert s.penalty_weights.voltage == 2.0 and s.datasets == ("a",)


def test_classification_training_lowers_bce(case14):
    gs = feasibility_samples(case14, 16, 0.1, seed=3)
    m = Model(ModelConfig("sage", 8, 2, heads=(GRAPH_CLASSIFICATION,)))
    _, logs, _ = fit(m, TrainSpec(epochs=5, batch_size=4, learning_rate=1e-2, datasets=(gs,), task="classification"),
                     train=np.arange(16), val=np.arange(16))
    assert logs[-1].val_loss < logs[0].val_loss
    assert set(logs[0].metrics) == {"accuracy", "f1", "auc"}


def test_bus_count_uses_bus_nodes(samples14):
    assert samples14[0].num_nodes(NodeType.bus) == 14
