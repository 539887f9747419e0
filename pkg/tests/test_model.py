import numpy as np
import pytest

from potlift.errors import ConfigError, NonPositiveSigma, ShapeMismatch
from potlift.model import (
    ModelConfig,
    PotModel,
    UgrnModel,
    build_models,
    embed,
    infer,
    param_count,
    pot_forward,
    ugrn_forward,
    uncertainty,
    with_overrides,
)
from potlift.numerics import Rng, Tape, Tensor, exp, mul
from potlift.training import sigma_loss, stage1_loss

from _oracles import fd_grad, np_pot, np_ugrn, rel_err


@pytest.fixture(scope="module")
def tiny():
    return build_models(ModelConfig.tiny(), seed=3)


def test_default_shapes():
    pot, _ = build_models(ModelConfig(), seed=0)
    x = Rng(1).uniform((17, 2)) * 2 - 1
    z, y = pot_forward(pot, x)
    assert z.shape == (17, 96) and y.shape == (17, 3)


def test_eval_determinism_and_infer_composition(tiny):
    pot, ugrn = tiny
    x = Rng(2).normal((4, 5, 2))
    a = pot_forward(pot, x, Rng(0), False)[1].data
    b = pot_forward(pot, x, Rng(1), False)[1].data
    np.testing.assert_array_equal(a, b)
    yt, sig, yh = infer(pot, ugrn, x)
    np.testing.assert_array_equal(yt, a)
    yt2, sig2, yh2 = infer(pot, ugrn, x)
    np.testing.assert_array_equal(yh, yh2)
    np.testing.assert_array_equal(sig, sig2)
    assert np.all(sig > 0)


def test_embed_additive_structure(tiny):
    pot, _ = tiny
    pot2 = PotModel(pot.cfg, pot.skeleton, Rng(3))
    pot2.input_proj.weight.data[...] = 0.0
    pot2.input_proj.bias.data[...] = 0.0
    x = Rng(4).normal((5, 2))
    z0 = pot2._embed(Tensor(x)).data
    np.testing.assert_array_equal(z0, pot2.keypoint_embed.data + pot2.group_embed.data[pot2.groups])
    # joints 1 and 3 hang one hop off the root, so they share a group addend
    assert pot2.groups[1] == pot2.groups[3]
    g = pot2.group_embed.data[pot2.groups[1]]
    np.testing.assert_allclose(z0[1] - pot2.keypoint_embed.data[1], g, rtol=0, atol=1e-16)
    np.testing.assert_allclose(z0[3] - pot2.keypoint_embed.data[3], g, rtol=0, atol=1e-16)


def test_embed_shape_mismatch(tiny):
    pot, _ = tiny
    with pytest.raises(ShapeMismatch):
        embed(Tensor(np.zeros((4, 2))), pot.input_proj, pot.keypoint_embed, pot.group_embed, pot.groups)


def test_group_embedding_gradient(tiny):
    pot, _ = tiny
    x = Rng(5).normal((3, 5, 2))
    y = Rng(6).normal((3, 5, 3))

    def loss():
        return stage1_loss(pot_forward(pot, x)[1], y)

    with Tape() as tape:
        out = loss()
    g = tape.backward(out)
    assert rel_err(g[pot.group_embed], fd_grad(loss, pot.group_embed), 1e-6) <= 1e-5


def test_uncertainty_head():
    pot, _ = build_models(ModelConfig.tiny(), seed=0)
    z = Tensor(Rng(7).normal((5, 8)))
    for p in pot.uncertainty_head.parameters():
        p.data[...] = 0.0
    np.testing.assert_array_equal(uncertainty(pot, z).data, np.ones((5, 3)))
    pot, _ = build_models(ModelConfig.tiny(), seed=0)
    sig = uncertainty(pot, Tensor(Rng(8).normal((10, 5, 8)) * 5)).data
    assert np.all(np.isfinite(sig)) and np.all(sig > 0)


def test_sigma_loss_gradient_wrt_log_variance():
    rng = Rng(9)
    s = Tensor(rng.normal((4, 3)), requires_grad=True)
    yt, y = rng.normal((4, 3)), rng.normal((4, 3))

    def loss():
        return sigma_loss(yt, y, exp(mul(s, 0.5)))

    with Tape() as tape:
        out = loss()
    g = tape.backward(out)[s]
    # closed form: d/ds [r^2 e^-s + log sum e^s] per coordinate, averaged over joints
    r2 = (yt - y) ** 2
    e = np.exp(s.data)
    closed = (-r2 / e + e / e.sum(-1, keepdims=True)) / 4
    np.testing.assert_allclose(g, closed, rtol=1e-12)
    assert rel_err(g, fd_grad(loss, s)) <= 1e-6


def test_ugrn_shape_and_errors(tiny):
    pot, ugrn = tiny
    x = Rng(10).normal((5, 2))
    yb = Rng(11).normal((5, 3))
    out = ugrn_forward(ugrn, x, yb, np.full((5, 3), 0.5))
    assert out.shape == (5, 3)
    with pytest.raises(NonPositiveSigma):
        ugrn_forward(ugrn, x, yb, np.zeros((5, 3)))
    with pytest.raises(ShapeMismatch):
        ugrn_forward(ugrn, x, yb[:4], np.ones((4, 3)))


def test_ugrn_unit_sigma_sum_reduces_to_mhsa():
    cfg = ModelConfig.tiny()
    ug = UgrnModel(cfg, rng=Rng(12))
    mh = UgrnModel(with_overrides(cfg, ugrn_attention="mhsa"), rng=Rng(12))
    x, yb = Rng(13).normal((2, 5, 2)), Rng(14).normal((2, 5, 3))
    sigma = np.full((2, 5, 3), 1.0 / 3.0)
    a = ugrn_forward(ug, x, yb, sigma).data
    b = ugrn_forward(mh, x, yb, sigma).data
    assert np.max(np.abs(a - b)) <= 1e-12


def test_tiny_models_match_straight_line_oracle(tiny):
    pot, ugrn = tiny
    cfg = pot.cfg
    x = Rng(15).normal((5, 2))
    P = {n: p.data for n, p in pot.named_parameters()}
    z_ref, y_ref, s_ref = np_pot(x, P, cfg, pot.groups, pot.dist)
    z, y = pot_forward(pot, x)
    np.testing.assert_allclose(z.data, z_ref, atol=1e-12)
    np.testing.assert_allclose(y.data, y_ref, atol=1e-12)
    np.testing.assert_allclose(uncertainty(pot, z).data, s_ref, atol=1e-12)
    U = {n: p.data for n, p in ugrn.named_parameters()}
    yb = Rng(16).normal((5, 3))
    np.testing.assert_allclose(
        ugrn_forward(ugrn, x, yb, s_ref).data, np_ugrn(x, yb, s_ref, U, cfg, ugrn.groups, ugrn.dist), atol=1e-12
    )


def test_param_counts_full_scale():
    full = param_count(*build_models(ModelConfig.our_l(), 0))["total"]
    small = param_count(*build_models(ModelConfig.our_s(), 0))["total"]
    assert abs(full - 0.98e6) <= 0.10 * 0.98e6
    assert 0.88e6 <= full <= 1.08e6
    assert abs(small - 0.25e6) <= 0.15 * 0.25e6


def test_param_count_head_closed_form(tiny):
    pot, _ = tiny
    c = pot.cfg.dim
    counts = param_count(pot)
    # LayerNorm (2C) plus the C -> 3 linear (3C + 3)
    assert counts["pot.head"] == 2 * c + 3 * c + 3
    assert pot.head.fc.num_parameters() == 3 * c + 3
    assert counts["total"] == pot.num_parameters()


def test_batch_invariance(tiny):
    pot, ugrn = tiny
    x = Rng(17).normal((6, 5, 2))
    batched = infer(pot, ugrn, x)
    for i in range(6):
        single = infer(pot, ugrn, x[i])
        for a, b in zip(single, batched):
            np.testing.assert_allclose(a, b[i], rtol=0, atol=1e-13)


def test_no_dead_submodules_in_stage1():
    cfg = ModelConfig.tiny(dropout=0.25)
    pot, ugrn = build_models(cfg, 0)
    x, y = Rng(18).normal((8, 5, 2)), Rng(19).normal((8, 5, 3))
    with Tape() as tape:
        loss = stage1_loss(pot_forward(pot, x, Rng(0), True)[1], y)
    grads = tape.backward(loss)
    for name, p in pot.named_parameters():
        g = grads.get(p)
        if name.startswith("uncertainty_head."):
            assert g is None
        elif name.endswith("bias_net.fc2.bias"):
            # a per-head constant added to every logit cancels in softmax
            assert g is None or np.max(np.abs(g)) < 1e-12
        else:
            assert g is not None and np.any(g != 0), name
    for p in ugrn.parameters():
        assert p not in grads


def test_config_validation_and_round_trip():
    with pytest.raises(ConfigError):
        ModelConfig(dim=10, heads=3).validate()
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"dim": 8, "bogus": 1})
    cfg = ModelConfig.desk()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.digest() == ModelConfig.desk().digest() != ModelConfig.tiny().digest()


def test_build_models_is_seeded():
    a, _ = build_models(ModelConfig.tiny(), 5)
    b, _ = build_models(ModelConfig.tiny(), 5)
    c, _ = build_models(ModelConfig.tiny(), 6)
    for (n, p), (_, q), (_, r) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)
    assert any(not np.array_equal(p.data, r.data) for p, r in zip(a.parameters(), c.parameters()))


def test_init_scheme():
    pot, _ = build_models(ModelConfig.desk(), 0)
    w = pot.layers[0].attn.q.weight.data
    bound = np.sqrt(6.0 / (w.shape[0] + w.shape[1]))
    assert np.all(np.abs(w) <= bound) and np.abs(w).max() > 0.9 * bound
    assert np.all(pot.layers[0].attn.q.bias.data == 0)
    assert abs(pot.keypoint_embed.data.std() - 0.02) < 0.004
