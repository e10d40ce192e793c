import numpy as np
import pytest

from crosr.dhrnet import (
    DHRNetConfig,
    DHRNetModel,
    StageSpec,
    build,
    extract_features,
    forward,
)
from crosr.errors import ConfigurationError, FormatError, InputError
from crosr.tensor import Tape, Tensor, conv2d, global_max_pool, grad_check, max_pool2d, relu
from crosr.trainer import joint_loss

from conftest import toy_config, toy_model

TWO_LATERALS = (StageSpec(1, 4), StageSpec(1, 4), StageSpec(1, 4, pool=False, lateral=False))


def test_mnist_default_latent_dim():
    cfg = DHRNetConfig()
    cfg.validate()
    assert cfg.input_shape == (1, 28, 28)
    assert sum(st.convs for st in cfg.stages) == 5
    assert sum(st.pool for st in cfg.stages) == 2
    assert cfg.head == (500,) and cfg.num_classes == 10
    assert len(cfg.lateral_stages) == 2
    assert cfg.latent_dim == 64
    model = build(cfg, np.random.default_rng(0))
    out = forward(model, np.zeros((1, 1, 28, 28)))
    assert out.z.shape == (1, 64)
    assert model.parameter_count > 0


def test_three_laterals_configurable():
    stages = (StageSpec(2, 8), StageSpec(2, 8), StageSpec(1, 8, pool=False, lateral=True))
    cfg = DHRNetConfig(input_shape=(1, 8, 8), stages=stages, head=(16,))
    assert cfg.latent_dim == 96
    out = forward(build(cfg, np.random.default_rng(0)), np.zeros((2, 1, 8, 8)))
    assert out.z.shape == (2, 96)


def test_plain_variant_has_no_latent():
    model = toy_model("plain")
    out = forward(model, np.zeros((2, 1, 8, 8)))
    assert out.y.shape == (2, 3)
    assert out.z is None and out.recon is None
    assert model.config.latent_dim == 0
    assert not any(k.startswith(("g", "h", "recon")) and not k.startswith("head") for k in model.params)


def test_toy_model_round_trips_bit_exactly(tmp_path):
    cfg = DHRNetConfig(input_shape=(1, 8, 8), num_classes=3, stages=(StageSpec(1, 4),), head=(6,),
                       bottleneck_dim=2)
    model = build(cfg, np.random.default_rng(5))
    path = tmp_path / "toy.crsr"
    model.save(path)
    loaded = DHRNetModel.load(path)
    assert loaded.config == cfg
    assert list(loaded.params) == list(model.params)
    for k in model.params:
        assert loaded.params[k].tobytes() == model.params[k].tobytes()
    assert loaded.to_bytes() == path.read_bytes()


def test_load_rejects_wrong_kind(tmp_path):
    from crosr import fileformat

    path = tmp_path / "x.crsr"
    fileformat.write(path, {"kind": "openset"}, {})
    with pytest.raises(FormatError):
        DHRNetModel.load(path)


@pytest.mark.parametrize("variant", ["dhrnet", "ladder", "plain"])
def test_forward_shapes(variant, rng):
    model = toy_model(variant, stages=TWO_LATERALS)
    x = rng.random((3, 1, 8, 8))
    out = forward(model, x)
    assert out.y.shape == (3, 3)
    if variant != "plain":
        assert out.recon.shape == x.shape
        assert out.z.shape == (3, model.config.latent_dim)


def test_eval_forward_is_deterministic(rng):
    model = toy_model(dropout=0.5)
    x = rng.random((2, 1, 8, 8))
    a, b = forward(model, x, "eval"), forward(model, x, "eval")
    assert a.y.data.tobytes() == b.y.data.tobytes()
    assert a.z.data.tobytes() == b.z.data.tobytes()
    assert a.recon.data.tobytes() == b.recon.data.tobytes()


def test_z_is_concatenation_of_pooled_maps(rng):
    model = toy_model(stages=TWO_LATERALS)
    out = forward(model, rng.random((2, 1, 8, 8)))
    pooled = np.concatenate([global_max_pool(m).data for m in out.z_maps], axis=1)
    np.testing.assert_array_equal(out.z.data, pooled)
    assert all(m.shape[1] == model.config.bottleneck_dim for m in out.z_maps)


def test_ladder_latent_is_stage_output(rng):
    model = toy_model("ladder", stages=TWO_LATERALS)
    x = Tensor(rng.random((2, 1, 8, 8)))
    p = {k: Tensor(v) for k, v in model.params.items()}
    x1 = max_pool2d(relu(conv2d(x, p["f0.conv0.w"], p["f0.conv0.b"])))
    x2 = max_pool2d(relu(conv2d(x1, p["f1.conv0.w"], p["f1.conv0.b"])))
    out = forward(model, x)
    np.testing.assert_array_equal(out.z_maps[0].data, x1.data)
    np.testing.assert_array_equal(out.z_maps[1].data, x2.data)
    assert model.config.latent_dim == 8


def test_dhrnet_bottleneck_independent_of_stage_width(rng):
    stages = (StageSpec(1, 6), StageSpec(1, 10), StageSpec(1, 4, pool=False, lateral=False))
    model = toy_model(stages=stages, bottleneck_dim=5)
    out = forward(model, rng.random((1, 1, 8, 8)))
    assert [m.shape[1] for m in out.z_maps] == [5, 5]


@pytest.mark.parametrize("variant", ["dhrnet", "ladder"])
def test_joint_loss_gradients_match_finite_differences(variant):
    model = toy_model(variant, dropout=0.2)
    rng = np.random.default_rng(3)
    x = rng.random((2, 1, 8, 8))
    labels = np.array([0, 2])

    def fn(p):
        # reseeded every call so the dropout mask is fixed
        total, _, _ = joint_loss(model, p, x, labels, mode="train", rng=np.random.default_rng(9))
        return total

    groups = {"f": "f", "h": "h", "hr": "hr", "g": "g", "head": "head", "out": "out", "recon": "recon"}
    for group, prefix in groups.items():
        names = [k for k in model.params if k.split(".")[0].rstrip("0123456789") == prefix]
        if variant == "ladder" and group in ("h", "hr"):
            assert not names
            continue
        assert names, group
        fixed = {k: Tensor(v) for k, v in model.params.items() if k not in names}

        def part(p, fixed=fixed):
            return fn({**fixed, **p})

        err = grad_check(part, {k: model.params[k] for k in names})
        assert err < 1e-5, (group, err)


def test_joint_loss_reaches_head_and_decoder(rng):
    model = toy_model()
    leaves = {k: Tensor(v, requires_grad=True) for k, v in model.params.items()}
    with Tape() as tape:
        total, _, _ = joint_loss(model, leaves, rng.random((4, 1, 8, 8)), np.array([0, 1, 2, 0]),
                                 mode="train", rng=np.random.default_rng(0))
    grads = dict(zip(leaves, tape.gradient(total, list(leaves.values()))))
    for group in ("head0.w", "out.w", "g0.w", "recon.w", "h0.w", "hr0.w"):
        assert np.linalg.norm(grads[group]) > 0, group


def test_feature_modes(rng):
    model = build(DHRNetConfig(input_shape=(1, 8, 8), num_classes=10, stages=TWO_LATERALS, head=(8,)),
                  np.random.default_rng(0))
    x = rng.random((5, 1, 8, 8))
    av = extract_features(model, x, "av")
    joint = extract_features(model, x, "joint")
    assert av.shape == (5, 10)
    assert joint.shape == (5, 74)
    np.testing.assert_array_equal(joint[:, :10], av)


def test_features_batching_is_invisible(rng):
    model = toy_model()
    x = rng.random((7, 1, 8, 8))
    np.testing.assert_array_equal(extract_features(model, x, "joint", batch_size=3),
                                  extract_features(model, x, "joint", batch_size=100))


def test_joint_features_on_plain_rejected(rng):
    with pytest.raises(ConfigurationError):
        extract_features(toy_model("plain"), rng.random((1, 1, 8, 8)), "joint")


def test_input_shape_mismatch_rejected():
    with pytest.raises(InputError):
        forward(toy_model(), np.zeros((1, 1, 6, 6)))


@pytest.mark.parametrize("kwargs", [
    dict(stages=(StageSpec(1, 4), StageSpec(1, 4), StageSpec(1, 4), StageSpec(1, 4))),  # 8 -> 0.5
    dict(variant="unknown"),
    dict(bottleneck_dim=0),
    dict(stages=(StageSpec(1, 4, lateral=False),)),
])
def test_inconsistent_configs_rejected(kwargs):
    cfg = toy_config(**kwargs)
    with pytest.raises(ConfigurationError):
        build(cfg, np.random.default_rng(0))


def test_build_is_seed_deterministic():
    a, b = toy_model(seed=3), toy_model(seed=3)
    assert a.to_bytes() == b.to_bytes()
    assert a.to_bytes() != toy_model(seed=4).to_bytes()
