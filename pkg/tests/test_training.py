import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from taillight import autodiff as ad
from taillight.autodiff import Tensor
from taillight.checkpoint import load_checkpoint
from taillight.model import STAGE_GROUPS, forward, init_params
from taillight.temporal import predict
from taillight.training import StageOrderError, batch_objective, bootstrapped_batch_loss, chunk_loss, clip_grad_norm, \
    label_bootstrap_loss, prepare_split, sgd_step, stage_path, stage_start, topk_count, train_progressive, \
    train_stage

F64 = np.float64


def neg_log_softmax(z, y):
    m = max(z)
    return -(z[y] - m - math.log(sum(math.exp(v - m) for v in z)))


def sort_and_average(losses, ratio):
    k = math.ceil(round(ratio * len(losses), 9))
    return np.mean(np.sort(np.asarray(losses))[::-1][:k])


def test_chunk_loss_examples():
    assert abs(float(chunk_loss(Tensor(np.zeros(8)), 3).data) - math.log(8)) < 1e-12
    logits = np.zeros(8)
    logits[5] = 1e4
    assert float(chunk_loss(Tensor(logits), 5).data) < 1e-12
    rng = np.random.default_rng(0)
    z = rng.normal(size=(20, 8)) * 4
    y = rng.integers(0, 8, size=20)
    got = chunk_loss(Tensor(z, dtype=F64), y).data
    np.testing.assert_allclose(got, [neg_log_softmax(list(z[i]), y[i]) for i in range(20)], atol=1e-10, rtol=0)


def test_bootstrapped_examples():
    losses = np.arange(1.0, 11.0)
    assert float(bootstrapped_batch_loss(losses, 0.3).data) == 9.0
    assert float(bootstrapped_batch_loss(losses, 1.0).data) == losses.mean()
    with pytest.raises(ValueError):
        bootstrapped_batch_loss(np.array([]), 0.3)
    assert topk_count(0.3, 10) == 3 and topk_count(0.3, 32) == 10 and topk_count(0.3, 1) == 1


def test_bootstrapped_matches_sort_and_average_exactly():
    rng = np.random.default_rng(1)
    for _ in range(500):
        losses = rng.exponential(size=int(rng.integers(1, 65)))
        ratio = float(rng.choice([0.1, 0.3, 0.5, 0.75, 1.0, rng.uniform(0.01, 1)]))
        assert float(bootstrapped_batch_loss(losses, ratio).data) == sort_and_average(losses, ratio)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 50, allow_nan=False), min_size=1, max_size=64), st.floats(0.01, 1.0))
def test_bootstrapped_dominates_mean(losses, ratio):
    assert float(bootstrapped_batch_loss(np.array(losses), ratio).data) >= np.mean(losses) - 1e-12


def test_label_bootstrap_modes():
    rng = np.random.default_rng(2)
    z, y = Tensor(rng.normal(size=(6, 8))), rng.integers(0, 8, size=6)
    ce = chunk_loss(z, y).data
    np.testing.assert_allclose(label_bootstrap_loss(z, y, 0.0, hard=False).data, ce, atol=1e-12)
    np.testing.assert_allclose(label_bootstrap_loss(z, y, 0.0, hard=True).data, ce, atol=1e-12)
    hard = label_bootstrap_loss(z, y, 0.3, hard=True).data
    logp = z.data - np.log(np.exp(z.data).sum(axis=1, keepdims=True))
    expect = -(0.7 * logp[np.arange(6), y] + 0.3 * logp.max(axis=1))
    np.testing.assert_allclose(hard, expect, atol=1e-12)
    for mode in ("topk", "soft", "hard"):
        obj, per = batch_objective(z, y, mode, 0.3)
        assert obj.shape == () and per.shape == (6,)


def test_sgd_examples():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    g = {"w": np.array([0.5, 0.25])}
    new, v = sgd_step(p, g, lr=0.1, momentum=0.0, velocity={})
    np.testing.assert_allclose(new["w"].data, [0.95, -2.025])
    same, _ = sgd_step(p, g, lr=0.0, momentum=0.9, velocity={})
    np.testing.assert_array_equal(same["w"].data, p["w"].data)
    # two steps, constant gradient, momentum 0.9, lr 1: total update g * (1 + 1.9)
    p1, v1 = sgd_step(p, g, 1.0, 0.9, {})
    p2, v2 = sgd_step(p1, g, 1.0, 0.9, v1)
    np.testing.assert_allclose(p["w"].data - p2["w"].data, g["w"] * 2.9, rtol=1e-15)
    np.testing.assert_allclose(v2["w"], g["w"] * 1.9)


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    c = clip_grad_norm(g, 1.0)
    np.testing.assert_allclose(np.hypot(c["a"], c["b"]), 1.0)
    np.testing.assert_allclose(c["a"] / c["b"], 0.75)
    assert clip_grad_norm(g, 10.0) is g


def test_stage_bypass_semantics(tiny_cfg):
    params = init_params(tiny_cfg.model, 0, F64)
    x = np.random.default_rng(3).uniform(size=(2, 5, 3, 32, 32))
    r1 = forward(params, tiny_cfg.model, x, stage=1)
    g = tiny_cfg.model.backbone.grid_side
    np.testing.assert_array_equal(r1.alpha, np.full((2, 5, g, g), 1 / g**2))
    np.testing.assert_array_equal(r1.beta, np.broadcast_to(np.eye(5), (2, 5, 5)))
    direct = predict(r1.hidden[:, -1], r1.cells[:, -1], params).data
    np.testing.assert_allclose(r1.logits.data[:, -1], direct, atol=1e-14)
    r2 = forward(params, tiny_cfg.model, x, stage=2)
    np.testing.assert_array_equal(r2.hidden.data, r1.hidden.data)
    assert not np.allclose(r2.beta, r1.beta)


@pytest.mark.parametrize("stage", [1, 2, 3])
def test_gradient_reaches_only_enabled_groups(tiny_cfg, stage):
    params = init_params(tiny_cfg.model, 0, F64)
    x = np.random.default_rng(4).uniform(size=(2, 4, 3, 32, 32))
    with ad.Tape():
        loss = ad.mean(chunk_loss(forward(params, tiny_cfg.model, x, stage).logits[:, -1], np.array([0, 7])))
        grads = ad.backward(loss, params)
    for name, grad in grads.items():
        enabled = name.split(".")[0] in STAGE_GROUPS[stage]
        if not enabled:
            assert not grad.any(), name
    for group in STAGE_GROUPS[stage]:
        assert any(grads[n].any() for n in grads if n.startswith(group + ".")), group


def test_per_chunk_independence(tiny_cfg):
    params = init_params(tiny_cfg.model, 1, F64)
    x = np.random.default_rng(5).uniform(size=(3, 4, 3, 32, 32))
    y = np.array([1, 2, 3])
    full = chunk_loss(forward(params, tiny_cfg.model, x, 3).logits[:, -1], y).data
    for i in range(3):
        alone = chunk_loss(forward(params, tiny_cfg.model, x[i:i + 1], 3).logits[:, -1], y[i:i + 1]).data
        np.testing.assert_allclose(alone[0], full[i], rtol=1e-12)


def test_stage_start_contract(tiny_cfg, small_dataset, tmp_path):
    cfg = tiny_cfg.replace(epochs="1,1,1", eval_each_epoch="false")
    seqs = prepare_split(small_dataset, "train", cfg)
    ck1 = train_stage(cfg, 1, seqs)
    params2, _ = stage_start(cfg, 2, ck1)
    for name, arr in ck1.params.items():
        if not name.startswith("temporal."):
            assert params2[name].data.tobytes() == arr.tobytes(), name
    assert any(params2[n].data.tobytes() != ck1.params[n].tobytes() for n in params2 if n.startswith("temporal."))
    with pytest.raises(StageOrderError):
        stage_start(cfg, 2, None)
    with pytest.raises(StageOrderError):
        stage_start(cfg, 3, ck1)


def test_epoch0_loss_deterministic(tiny_cfg, small_dataset):
    cfg = tiny_cfg.replace(eval_each_epoch="false")
    seqs = prepare_split(small_dataset, "train", cfg)
    from taillight.training import MetricsLog
    logs = [MetricsLog(), MetricsLog()]
    for log in logs:
        train_stage(cfg, 1, seqs, metrics=log, epochs=1)
    assert logs[0].losses(1) == logs[1].losses(1)


def test_progressive_writes_checkpoints_and_metrics(tiny_cfg, small_dataset, tmp_path):
    cfg = tiny_cfg.replace(epochs="1,1,1")
    ckpt, metrics = train_progressive(cfg, small_dataset, tmp_path)
    assert ckpt.stage == 3
    for s in (1, 2, 3):
        assert load_checkpoint(stage_path(tmp_path, s)).stage == s
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "stage,epoch,split,loss,accuracy"
    assert len(lines) == 1 + 6
    s2 = load_checkpoint(stage_path(tmp_path, 2))
    with pytest.raises(StageOrderError):
        train_progressive(cfg, small_dataset, tmp_path / "empty", stages=(3,))
    with pytest.raises(StageOrderError):
        train_progressive(cfg, small_dataset, tmp_path, stages=(1, 3))
    assert s2.momentum and set(s2.momentum) == set(s2.params)
