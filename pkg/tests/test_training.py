import math

import numpy as np
import pytest

from potlift.checkpoint import module_hash, pot_encoder_hash
from potlift.errors import ConfigError, EmptyDataset, NonPositiveSigma, ShapeMismatch
from potlift.model import ModelConfig, build_models, pot_forward, ugrn_forward, uncertainty
from potlift.numerics import Rng, Tape, Tensor, sum as tsum
from potlift.training import (
    OptimizerState,
    TrainConfig,
    adam_step,
    lr_at,
    max_norm_,
    sigma_loss,
    stage1_loss,
    stage2_loss,
    train_stage1,
    train_stage2,
    ug_sample,
)

from _oracles import loop_sigma, loop_stage1, loop_stage2


def data(n=16, j=5, seed=0):
    r = Rng(seed)
    return r.uniform((n, j, 2)) * 2 - 1, r.normal((n, j, 3)) * 200.0


# ----------------------------------------------------------------- losses


def test_stage1_loss_examples():
    y = np.random.default_rng(0).standard_normal((17, 3))
    assert stage1_loss(y, y).data == 0.0
    assert stage1_loss(np.array([[3.0, 0, 0]]), np.zeros((1, 3))).item() == 9.0
    yt = np.random.default_rng(1).standard_normal((17, 3))
    assert abs(stage1_loss(yt, y).item() - loop_stage1(yt, y)) <= 1e-12


def test_sigma_loss_examples():
    y = np.random.default_rng(2).standard_normal((6, 3))
    v = sigma_loss(y, y, np.ones((6, 3))).item()
    assert abs(v - math.log(3)) <= 1e-15
    small = sigma_loss(y, y, np.full((6, 3), 0.5)).item()
    big = sigma_loss(y, y, np.full((6, 3), 2.0)).item()
    assert small < v < big
    yt, sig = np.array([[1.0, -2, 0.5], [0, 0, 3]]), np.array([[0.5, 1, 2], [1, 0.25, 4]])
    assert abs(sigma_loss(yt, np.zeros((2, 3)), sig).item() - loop_sigma(yt, np.zeros((2, 3)), sig)) <= 1e-12


def test_sigma_loss_detaches_residual():
    yt = Tensor(np.ones((2, 3)), requires_grad=True)
    sig = Tensor(np.ones((2, 3)), requires_grad=True)
    with Tape() as tape:
        loss = sigma_loss(yt, np.zeros((2, 3)), sig)
    grads = tape.backward(loss)
    assert yt not in grads and sig in grads


def test_stage2_loss_examples():
    g = np.random.default_rng(3)
    y = g.standard_normal((5, 3))
    yh = g.standard_normal((5, 3))
    assert stage2_loss(yh, y, yh, np.ones((5, 3)), 0.0).item() == stage1_loss(yh, y).item()
    v = stage2_loss(y, y, y, np.ones((5, 3)), 0.01).item()
    assert abs(v - 0.01 * math.log(3)) <= 1e-15


def test_loss_errors():
    with pytest.raises(ShapeMismatch):
        stage1_loss(np.zeros((3, 3)), np.zeros((4, 3)))
    with pytest.raises(NonPositiveSigma):
        sigma_loss(np.zeros((2, 3)), np.zeros((2, 3)), np.array([[1, 1, 1], [1, 0, 1.0]]))


@pytest.mark.parametrize("seed", range(10))
def test_losses_match_loop_oracles(seed):
    g = np.random.default_rng(100 + seed)
    b, j = int(g.integers(1, 4)), int(g.integers(1, 18))
    yt, y, yh = (g.standard_normal((b, j, 3)) for _ in range(3))
    sig = g.uniform(0.05, 3.0, (b, j, 3))
    lam = float(g.uniform(0, 1))
    assert abs(stage1_loss(yt, y).item() - loop_stage1(yt, y)) <= 1e-12
    assert abs(sigma_loss(yt, y, sig).item() - loop_sigma(yt, y, sig)) <= 1e-12
    assert abs(stage2_loss(yh, y, yt, sig, lam).item() - loop_stage2(yh, y, yt, sig, lam)) <= 1e-12


# ----------------------------------------------------------------- sampling


def test_ug_sample_eval_identity():
    yt = Tensor(np.random.default_rng(4).standard_normal((5, 3)))
    assert ug_sample(yt, np.ones((5, 3)), None, False) is yt


def test_ug_sample_zero_sigma_limit():
    yt = np.random.default_rng(5).standard_normal((5, 3))
    out = ug_sample(yt, np.zeros((5, 3)), Rng(0), True).data
    assert np.max(np.abs(out - yt)) < 1e-3


def test_ug_sample_moments():
    n = 100_000
    mu = np.array([0.5, -1.0, 2.0])
    sd = np.array([0.1, 1.0, 3.0])
    draws = ug_sample(np.broadcast_to(mu, (n, 3)), np.broadcast_to(sd, (n, 3)), Rng(21), True).data
    assert np.all(np.abs(draws.mean(0) - mu) <= 4 * sd / math.sqrt(n))
    assert np.all(np.abs(draws.std(0) / sd - 1) <= 0.02)


def test_ug_sample_gradient_flows_through_product():
    yt = Tensor(np.zeros((2, 3)), requires_grad=True)
    sig = Tensor(np.full((2, 3), 0.7), requires_grad=True)
    eps = Rng(3).normal((2, 3))
    with Tape() as tape:
        loss = tsum(ug_sample(yt, sig, Rng(3), True))
    g = tape.backward(loss)
    np.testing.assert_array_equal(g[yt], np.ones((2, 3)))
    np.testing.assert_allclose(g[sig], eps, rtol=1e-15)


def test_ug_sample_rejects_negative():
    with pytest.raises(NonPositiveSigma):
        ug_sample(np.zeros((1, 3)), -np.ones((1, 3)), Rng(0), True)


# ---------------------------------------------------------------- schedule


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 0.001
    assert lr_at(4, cfg) == 0.001 * 0.96
    assert lr_at(24, cfg) == 0.001 * 0.96**6
    values = [lr_at(e, cfg) for e in range(101)]
    for e in range(1, 101):
        assert (values[e] != values[e - 1]) == (e % 4 == 0)


# --------------------------------------------------------------- optimizer


def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([[0.3, -0.2]]), requires_grad=True, name="w")
    st = OptimizerState.create([("x.bias", p)])
    adam_step([p], [np.zeros((1, 2))], st, 1e-3)
    np.testing.assert_array_equal(p.data, [[0.3, -0.2]])


def test_adam_single_scalar_step_by_hand():
    p = Tensor(np.array([0.5]), requires_grad=True, name="b")
    st = OptimizerState.create([("b", p)])
    g = 0.2
    adam_step([p], [np.array([g])], st, 0.01)
    m = 0.1 * g
    v = 0.001 * g * g
    mhat, vhat = m / 0.1, v / 0.001
    assert p.data[0] == 0.5 - 0.01 * mhat / (math.sqrt(vhat) + 1e-8)
    # second step with a different gradient
    g2 = -0.1
    adam_step([p], [np.array([g2])], st, 0.01)
    m2, v2 = 0.9 * m + 0.1 * g2, 0.999 * v + 0.001 * g2 * g2
    expect = 0.5 - 0.01 * mhat / (math.sqrt(vhat) + 1e-8)
    expect -= 0.01 * (m2 / (1 - 0.81)) / (math.sqrt(v2 / (1 - 0.999**2)) + 1e-8)
    assert abs(p.data[0] - expect) <= 1e-15


def test_max_norm_projection():
    w = np.array([[2.0, 0.0], [0.3, 0.4], [0.0, -6.0]])
    max_norm_(w, 1.0)
    np.testing.assert_allclose(np.linalg.norm(w, axis=1), [1.0, 0.5, 1.0], atol=1e-9)
    np.testing.assert_array_equal(w[1], [0.3, 0.4])


def test_adam_applies_max_norm_to_weight_rows_only():
    w = Tensor(np.array([[2.0, 0.0]]), requires_grad=True, name="weight")
    e = Tensor(np.array([[2.0, 0.0]]), requires_grad=True, name="keypoint_embed")
    st = OptimizerState.create([("fc.weight", w), ("keypoint_embed", e)])
    adam_step([w, e], [np.zeros((1, 2)), np.zeros((1, 2))], st, 1e-3)
    assert abs(np.linalg.norm(w.data) - 1.0) <= 1e-9
    np.testing.assert_array_equal(e.data, [[2.0, 0.0]])


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(2), requires_grad=True, name="b")
    st = OptimizerState.create([("b", p)])
    with pytest.raises(ShapeMismatch):
        adam_step([p], [np.zeros(3)], st, 1e-3)


# ----------------------------------------------------------------- stages


def test_stage1_determinism_and_isolation():
    x, y = data()
    cfg = TrainConfig(batch_size=4, max_steps_per_stage=10, seed=1)
    runs = []
    for _ in range(2):
        pot, ugrn = build_models(ModelConfig.tiny(), 1)
        before = module_hash(ugrn)
        runs.append(train_stage1(pot, x, y, cfg).losses)
        assert module_hash(ugrn) == before
    assert len(runs[0]) == 10
    assert runs[0] == runs[1]


def test_stage2_freezes_pot_and_skips_its_gradients():
    x, y = data(seed=1)
    pot, ugrn = build_models(ModelConfig.tiny(), 2)
    cfg = TrainConfig(batch_size=8, max_steps_per_stage=6)
    train_stage1(pot, x, y, cfg)
    enc = pot_encoder_hash(pot)
    head = module_hash(pot.uncertainty_head)
    ug = module_hash(ugrn)
    train_stage2(pot, ugrn, x, y, cfg)
    assert pot_encoder_hash(pot) == enc
    assert module_hash(pot.uncertainty_head) != head
    assert module_hash(ugrn) != ug
    # requires_grad flags restored
    assert all(p.requires_grad for p in pot.parameters())


def test_stage2_gradient_map_has_no_pot_encoder_keys():
    x, y = data(seed=2)
    pot, ugrn = build_models(ModelConfig.tiny(), 3)
    enc = {id(p) for _, p in pot.encoder_parameters()}
    for _, p in pot.encoder_parameters():
        p.requires_grad = False
    with Tape() as tape:
        z, yt = pot_forward(pot, x, None, False)
        sig = uncertainty(pot, z)
        yb = ug_sample(yt, sig, Rng(0), True)
        loss = stage2_loss(ugrn_forward(ugrn, x, yb, sig, Rng(0), True), y / 200, yt, sig)
    grads = tape.backward(loss)
    for _, p in pot.encoder_parameters():
        p.requires_grad = True
    assert grads and not any(id(t) in enc for t in grads)


def test_stage1_loss_decreases_over_epochs():
    x, y = data(n=32, seed=3)
    pot, _ = build_models(ModelConfig.tiny(dropout=0.0), 4)
    res = train_stage1(pot, x, y, TrainConfig(batch_size=8, epochs_per_stage=25))
    per_epoch = {}
    for r in res.rows:
        per_epoch.setdefault(r.epoch, []).append(r.loss)
    assert res.epochs_done == 25
    assert np.mean(per_epoch[24]) < np.mean(per_epoch[0])


def test_empty_dataset():
    pot, ugrn = build_models(ModelConfig.tiny(), 0)
    with pytest.raises(EmptyDataset):
        train_stage1(pot, np.zeros((0, 5, 2)), np.zeros((0, 5, 3)), TrainConfig())
    with pytest.raises(EmptyDataset):
        train_stage2(pot, ugrn, np.zeros((0, 5, 2)), np.zeros((0, 5, 3)), TrainConfig())


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"lr": 1})
    cfg = TrainConfig(batch_size=8, lam=0.5)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_log_row_csv_format():
    x, y = data(n=8)
    pot, _ = build_models(ModelConfig.tiny(), 0)
    rows = []
    train_stage1(pot, x, y, TrainConfig(batch_size=4, max_steps_per_stage=3), on_row=rows.append)
    fields = rows[0].csv().split(",")
    assert len(fields) == 6 and fields[2] == "1"
    assert [r.step for r in rows] == [1, 2, 3]
