import numpy as np
import pytest

from pslab.core import Tensor, TensorError, gradient_check
from pslab.losses import bce, pyramid_depth_loss, pyramid_mask_loss
from pslab.labels import decompose_depth_pyramid, decompose_mask_pyramid
from pslab.networks import (
    ConfigError,
    DepthNet,
    DepthNetConfig,
    MaskNet,
    MaskNetConfig,
    SppNet,
    backbone_forward,
    classify,
    depth_pyramid_tensors,
    depth_score,
    init_mask_params,
    pyramid_mask_head,
    spp_head,
)


@pytest.fixture(scope="module")
def x64():
    return Tensor(np.random.default_rng(0).random((3, 64, 64)))


def test_backbone_shape(x64):
    net = MaskNet(MaskNetConfig(), seed=1)
    assert backbone_forward(net.params, x64, net.config).shape == (64, 8, 8)


def test_backbone_zero_input_zero_bias_gives_zero():
    cfg = MaskNetConfig()
    params = init_mask_params(cfg, 3)
    for name, p in params.items():
        if name.endswith(".bias"):
            p.data[:] = 0
    out = backbone_forward(params, Tensor(np.zeros((3, 64, 64))), cfg)
    assert not out.data.any()


def test_backbone_deterministic(x64):
    a = MaskNet(MaskNetConfig(), seed=5)
    b = MaskNet(MaskNetConfig(), seed=5)
    assert backbone_forward(a.params, x64, a.config).data.tobytes() == \
        backbone_forward(b.params, x64, b.config).data.tobytes()


def test_backbone_rejects_wrong_shape():
    net = MaskNet(MaskNetConfig(), seed=0)
    with pytest.raises(TensorError):
        net.forward(Tensor(np.zeros((3, 32, 32))))
    with pytest.raises(TensorError):
        net.forward(Tensor(np.zeros((1, 64, 64))))


def test_head_shape_chain(x64):
    net = MaskNet(MaskNetConfig(), seed=2)
    masks, score = net.forward(x64)
    assert {s: m.shape for s, m in masks.items()} == {8: (8, 8), 4: (4, 4), 2: (2, 2), 1: (1, 1)}
    assert sum(m.size for m in masks.values()) == 85
    assert net.params["classifier.weight"].shape == (1, 85)
    assert score.shape == ()
    for m in masks.values():
        assert ((m.data > 0) & (m.data < 1)).all()
    assert 0 < score.item() < 1


def test_zero_heads_give_half(x64):
    net = MaskNet(MaskNetConfig(), seed=2)
    for s in (8, 4, 2, 1):
        net.params[f"head{s}.weight"].data[:] = 0
        net.params[f"head{s}.bias"].data[:] = 0
    masks, _ = net.forward(x64)
    assert all((m.data == 0.5).all() for m in masks.values())
    net.params["classifier.weight"].data[:] = 0
    net.params["classifier.bias"].data[:] = 0
    assert net.score(x64).item() == 0.5


def test_pooling_commutes_on_constant_features():
    rng = np.random.default_rng(4)
    feats = Tensor(np.broadcast_to(rng.normal(size=(6, 1, 1)), (6, 8, 8)).copy())
    w, b = rng.normal(size=(1, 6, 1, 1)), rng.normal(size=1)
    params = {}
    for s in (8, 1):
        params[f"head{s}.weight"] = Tensor(w)
        params[f"head{s}.bias"] = Tensor(b)
    masks = pyramid_mask_head(params, feats, (8, 1))
    logit = (w[0, :, 0, 0] * feats.data[:, 0, 0]).sum() + b[0]
    expect = 1 / (1 + np.exp(-logit))
    np.testing.assert_allclose(masks[8].data, expect, atol=1e-15)
    assert masks[1].data[0, 0] == pytest.approx(masks[8].data.mean(), abs=1e-15)


def test_classifier_isolating_m1_is_monotone():
    params = {"classifier.weight": Tensor(np.zeros((1, 85))), "classifier.bias": Tensor(np.zeros(1))}
    params["classifier.weight"].data[0, 84] = 3.0
    scores = []
    for v in (0.1, 0.4, 0.7, 0.9):
        masks = {s: Tensor(np.full((s, s), 0.3)) for s in (8, 4, 2)}
        masks[1] = Tensor(np.full((1, 1), v))
        scores.append(classify(params, masks, (8, 4, 2, 1)).item())
    assert scores == sorted(scores) and len(set(scores)) == 4


def test_classify_scale_mismatch():
    params = init_mask_params(MaskNetConfig(), 0)
    with pytest.raises(TensorError):
        classify(params, {8: Tensor(np.zeros((8, 8)))}, (8, 4, 2, 1))


def test_spp_dimensions_and_constant_features():
    net = SppNet(MaskNetConfig(), seed=0)
    assert net.params["spp_classifier.weight"].shape == (1, 64 * 85)
    net.params["spp_classifier.weight"].data[:] = 0
    net.params["spp_classifier.bias"].data[:] = 0
    feats = Tensor(np.full((64, 8, 8), 0.3))
    assert spp_head(net.params, feats).item() == 0.5
    # constant features: the score depends on the weights only through their sum
    rng = np.random.default_rng(1)
    w = rng.normal(size=(1, 64 * 85)) * 0.01
    net.params["spp_classifier.weight"].data[:] = w
    logit = 0.3 * w.sum()
    assert spp_head(net.params, feats).item() == pytest.approx(1 / (1 + np.exp(-logit)), abs=1e-14)


def test_config_validation():
    with pytest.raises(ConfigError):
        MaskNetConfig(scales=(8, 3))
    with pytest.raises(ConfigError):
        MaskNetConfig(input_side=60)
    with pytest.raises(ConfigError):
        DepthNetConfig(theta=1.2)
    with pytest.raises(ConfigError):
        DepthNetConfig(scales=(16, 32))


def test_depth_shapes_and_range():
    net = DepthNet(DepthNetConfig(channels=(8, 8, 8), head_channels=8), seed=0)
    d = net.forward(Tensor(np.random.default_rng(0).random((3, 64, 64))))
    assert d.shape == (32, 32)
    assert ((d.data > 0) & (d.data < 1)).all()


def test_depth_theta_zero_equals_vanilla_twin():
    x = Tensor(np.random.default_rng(1).random((2, 3, 16, 16)))
    cdc = DepthNet(DepthNetConfig(input_side=16, theta=0.0, scales=(8, 4), channels=(4, 4, 4), head_channels=4), 3)
    van = DepthNet(DepthNetConfig(input_side=16, theta=0.0, scales=(8, 4), channels=(4, 4, 4), head_channels=4,
                                  conv="vanilla"), 3, params=cdc.params)
    assert cdc.forward(x).data.tobytes() == van.forward(x).data.tobytes()


def test_depth_score_cases():
    assert depth_score(np.full((32, 32), 0.5)) == 0.5
    assert depth_score(np.zeros((32, 32))) == 0.0
    d = np.random.default_rng(2).random((32, 32))
    brute = np.mean([d.mean(), np.mean([[d[2 * i:2 * i + 2, 2 * j:2 * j + 2].mean() for j in range(16)]
                                          for i in range(16)])])
    assert depth_score(d) == pytest.approx(brute, abs=1e-15)
    assert depth_score(d) == pytest.approx(d.mean(), abs=1e-15)


def test_depth_pyramid_tensors_match_labels():
    d = np.random.default_rng(3).random((32, 32))
    got = depth_pyramid_tensors(Tensor(d), (32, 16, 4))
    ref = decompose_depth_pyramid(d, (32, 16, 4))
    for s in (32, 16, 4):
        np.testing.assert_allclose(got[s].data, ref[s], atol=1e-15)


def test_batched_forward_matches_single():
    net = MaskNet(MaskNetConfig(input_side=16, feature_channels=4, scales=(2, 1), stage_channels=(4, 4)), 0)
    x = np.random.default_rng(0).random((3, 3, 16, 16))
    masks, scores = net.forward(Tensor(x))
    for i in range(3):
        m1, s1 = net.forward(Tensor(x[i]))
        assert s1.item() == scores.data[i]
        assert np.array_equal(m1[2].data, masks[2].data[i])


def test_mask_network_gradient_check():
    cfg = MaskNetConfig(input_side=16, feature_channels=4, scales=(2, 1), stage_channels=(3, 4))
    net = MaskNet(cfg, seed=7)
    rng = np.random.default_rng(0)
    x = Tensor(rng.random((2, 3, 16, 16)))
    base = rng.integers(0, 2, (2, 2, 2))
    label = decompose_mask_pyramid(base, (2, 1))

    def loss():
        masks, score = net.forward(x)
        return pyramid_mask_loss(masks, label).total + bce(score, np.array([1.0, 0.0]))

    r = gradient_check(loss, list(net.params.values()), max_per_param=6)
    assert r.passed, r.summary()


def test_depth_network_gradient_check():
    cfg = DepthNetConfig(input_side=12, scales=(6, 3), channels=(3, 3, 3), head_channels=3)
    net = DepthNet(cfg, seed=7)
    rng = np.random.default_rng(1)
    x = Tensor(rng.random((3, 12, 12)))
    label = decompose_depth_pyramid(rng.random((6, 6)), (6, 3))

    def loss():
        return pyramid_depth_loss(depth_pyramid_tensors(net.forward(x), cfg.scales), label).total

    r = gradient_check(loss, list(net.params.values()), max_per_param=6)
    assert r.passed, r.summary()
