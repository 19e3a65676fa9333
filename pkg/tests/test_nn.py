import dataclasses

import numpy as np
import pytest

from renet.nn import (
    ModelConfig,
    RegionSpec,
    branch_forward,
    build_model,
    feature_stages,
    forward_features,
    forward_head,
    layer_stack,
    param_count,
)
from renet.tensor import RngStream, ShapeError, Tensor, float64_mode, grad_check, mul

TINY = ModelConfig(input_size=24, channels=(2, 3, 4), fc_width=8, joints=2, regions="four", dropout=0.0)


def small(**kw):
    base = dict(input_size=48, channels=(4, 6, 8), fc_width=16, joints=3, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def test_residual_net_has_eight_convs():
    cfg = ModelConfig()
    convs = [n for s, _ in feature_stages(cfg) for n in s]
    skips = [k for _, k in feature_stages(cfg) if k]
    assert len(convs) == 6 and len(skips) == 2
    shapes = {n: v for n, v in build_model(small(), RngStream(0)).params.items()}
    assert sum(1 for n, v in shapes.items() if n.endswith(".weight") and v.ndim == 4) == 8
    assert shapes["skip2.weight"].shape[2:] == (1, 1)


def test_shallow_net_three_convs_three_pools():
    stack = layer_stack(ModelConfig(architecture="shallow"))
    assert [k for k, *_ in stack] == ["conv", "pool"] * 3


def test_same_seed_same_parameters():
    a = build_model(small(), RngStream(5))
    b = build_model(small(), RngStream(5))
    c = build_model(small(), RngStream(6))
    for n in a.params:
        np.testing.assert_array_equal(a.params[n].data, b.params[n].data)
    assert not np.array_equal(a.params["conv1a.weight"].data, c.params["conv1a.weight"].data)


def test_he_init_statistics():
    m = build_model(small(fc_width=256), RngStream(1))
    w = m.params["branch0.fc2.weight"].data
    assert w.std() == pytest.approx(np.sqrt(2 / 256), rel=0.02)
    assert not m.params["branch0.fc2.bias"].data.any()


def test_out_scale_touches_only_final_layer():
    a = build_model(small(), RngStream(1))
    b = build_model(small(), RngStream(1), out_scale=0.5)
    np.testing.assert_array_equal(b.params["fusion.weight"].data, a.params["fusion.weight"].data * np.float32(0.5))
    np.testing.assert_array_equal(b.params["branch0.fc2.weight"].data, a.params["branch0.fc2.weight"].data)


@pytest.mark.parametrize("arch", ["shallow", "basic", "basic-residual"])
def test_feature_shape_96(arch):
    m = build_model(ModelConfig(architecture=arch, fc_width=8, head="single"), RngStream(0))
    out = forward_features(m, Tensor(np.zeros((2, 1, 96, 96))))
    assert out.shape == (2, 64, 12, 12)
    assert np.isfinite(out.data).all()


def test_wrong_input_shape():
    m = build_model(small(), RngStream(0))
    with pytest.raises(ShapeError):
        forward_features(m, Tensor(np.zeros((1, 1, 40, 40))))
    with pytest.raises(ShapeError):
        forward_head(m, Tensor(np.zeros((1, 8, 5, 5))))


@pytest.mark.parametrize("head", ["single", "region-ensemble", "region-bagging"])
@pytest.mark.parametrize("arch", ["shallow", "basic", "basic-residual"])
def test_output_is_3j(arch, head):
    m = build_model(small(architecture=arch, head=head, regions="nine"), RngStream(0)).eval()
    assert m(Tensor(np.random.default_rng(0).standard_normal((2, 1, 48, 48)))).shape == (2, 9)


def test_fusion_width_nine_regions():
    cfg = ModelConfig()
    from renet.nn import _param_shapes

    shapes = _param_shapes(cfg)
    assert shapes["fusion.weight"] == (48, 9 * 2048)
    assert shapes["branch0.fc1.weight"] == (2048, 6 * 6 * 64)


def test_nine_region_offsets():
    spec = RegionSpec.resolve("nine", 12)
    anchors = [(r, c) for r, c, _, _ in spec]
    assert anchors == [(0, 0), (0, 6), (6, 0), (6, 6), (0, 3), (3, 0), (3, 6), (6, 3), (3, 3)]
    assert all(h == w == 6 for *_, h, w in spec)
    assert RegionSpec.resolve("9x6x6", 12) == spec


def test_scaled_presets():
    small_ = RegionSpec.resolve("9x4x4", 12)
    assert sorted({r for r, *_ in small_}) == [0, 4, 8]
    large = RegionSpec.resolve("9x8x8", 12)
    assert sorted({r for r, *_ in large}) == [0, 2, 4]
    ms = RegionSpec.resolve("multiscale", 12)
    assert [(h, w) for *_, h, w in ms] == [(12, 12), (8, 8), (4, 4)]


def test_region_errors():
    with pytest.raises(ValueError):
        RegionSpec(())
    with pytest.raises(ValueError):
        RegionSpec.resolve("8,8,6,6", 12)
    with pytest.raises(ValueError):
        RegionSpec.resolve("banana", 12)
    with pytest.raises(ValueError):
        build_model(ModelConfig(input_size=48, regions="0,0,12,12"), RngStream(0))


def test_param_count_closed_form():
    cfg = ModelConfig(head="single", regions="full")
    fc = 2304 * 2048 + 2048
    assert fc == 4_720_640
    one = param_count(dataclasses.replace(cfg, head="region-ensemble", regions="0,0,6,6"))
    two = param_count(dataclasses.replace(cfg, head="region-ensemble", regions="0,0,6,6;6,6,6,6"))
    branch = fc + 2048 * 2048 + 2048
    assert two - one == branch + 48 * 2048
    m = build_model(small(), RngStream(0))
    assert param_count(small()) == sum(p.data.size for p in m.parameters())


def test_branch_isolation():
    m = build_model(small(regions="nine"), RngStream(2)).eval()
    feats = Tensor(np.random.default_rng(1).standard_normal((2, 8, 6, 6)))
    full = forward_head(m, feats)
    spec = m.config.region_spec()
    branches = []
    for i, (r, c, h, w) in enumerate(spec):
        sliced = Tensor(feats.data[:, :, r:r + h, c:c + w].copy())
        alone = branch_forward(m, sliced, i, (0, 0, h, w))
        np.testing.assert_array_equal(alone.data, branch_forward(m, feats, i, (r, c, h, w)).data)
        branches.append(alone.data)
    fused = np.concatenate(branches, axis=1) @ m.params["fusion.weight"].data.T + m.params["fusion.bias"].data
    np.testing.assert_allclose(full.data, fused, rtol=1e-5, atol=1e-6)


def test_bagging_identical_branches_equal_single_branch():
    m = build_model(small(head="region-bagging", regions="four"), RngStream(3)).eval()
    for name in list(m.params):
        if name.startswith("branch") and not name.startswith("branch0"):
            src = "branch0" + name[name.index("."):]
            m.params[name].data = m.params[src].data.copy()
    feats = Tensor(np.random.default_rng(4).standard_normal((2, 8, 6, 6)))
    # identical windows too, so each branch sees the same input
    m.config = dataclasses.replace(m.config, regions="0,0,3,3;0,0,3,3;0,0,3,3;0,0,3,3")
    out = forward_head(m, feats).data
    h = branch_forward(m, feats, 0, (0, 0, 3, 3)).data
    single = h @ m.params["branch0.out.weight"].data.T + m.params["branch0.out.bias"].data
    np.testing.assert_allclose(out, single, rtol=1e-6, atol=1e-7)


def test_single_head_equals_full_region_with_identity_fusion():
    cfg_s = small(head="single")
    cfg_r = small(head="region-ensemble", regions="full", fc_width=9)
    cfg_s = dataclasses.replace(cfg_s, fc_width=9)
    s = build_model(cfg_s, RngStream(0)).eval()
    r = build_model(cfg_r, RngStream(9)).eval()
    for n in s.params:
        if n in r.params:
            r.params[n].data = s.params[n].data.copy()
    # fusion = identity into a head whose out layer is folded in: use out as fusion
    r.params["fusion.weight"].data = s.params["out.weight"].data.copy()
    r.params["fusion.bias"].data = s.params["out.bias"].data.copy()
    x = Tensor(np.random.default_rng(0).standard_normal((2, 1, 48, 48)))
    np.testing.assert_array_equal(s(x).data, r(x).data)


def test_eval_is_deterministic_and_batch_invariant():
    m = build_model(small(dropout=0.5), RngStream(0)).eval()
    x = np.random.default_rng(0).standard_normal((3, 1, 48, 48)).astype(np.float32)
    batched = m.predict(x)
    singles = np.concatenate([m.predict(x[i:i + 1]) for i in range(3)])
    np.testing.assert_allclose(batched, singles, rtol=1e-5, atol=1e-6)
    np.testing.assert_array_equal(m.predict(x), batched)


def test_training_dropout_needs_rng():
    m = build_model(small(dropout=0.5), RngStream(0)).train()
    with pytest.raises(ValueError):
        m(Tensor(np.zeros((1, 1, 48, 48))))


def test_tiny_ren_end_to_end_gradient():
    with float64_mode():
        m = build_model(TINY, RngStream(0), dtype=np.float64).train()
        # zero biases put dead-window pre-activations exactly on the relu kink
        for name, p in m.params.items():
            if name.endswith(".bias"):
                p.data = np.random.default_rng(2).normal(0, 0.1, p.shape)
        x = Tensor(np.random.default_rng(0).standard_normal((2, 1, 24, 24)), dtype=np.float64)
        r = Tensor(np.random.default_rng(1).standard_normal((2, 6)), dtype=np.float64)
        # grad_check perturbs the parameter buffers in place, which the model reads
        assert grad_check(lambda *ps: mul(m(x), r).sum(), list(m.params.values()), 1e-6) < 1e-4


def test_config_round_trip():
    cfg = small(head="region-bagging", regions="nine-small")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ModelConfig(architecture="vgg")
    with pytest.raises(ValueError):
        ModelConfig(dropout=1.0)
