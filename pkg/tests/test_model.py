import dataclasses

import numpy as np
import pytest

from fragmix.errors import ConfigError, ResolutionMismatchError
from fragmix.model import ABLATION_VARIANTS, STAR_RELU_INIT, Model, ModelConfig, infer_shapes
from fragmix.numerics import Tensor, functional as F
from fragmix.training import cross_entropy_loss

from oracles import gradcheck

SEEDS = [0, 1, 2, 3, 4]

FULL_CFG = ModelConfig(
    input_height=512,
    input_width=128,
    backbone_stage_channels=[16, 32, 64, 512],
    mixer_depth=4,
    projection_channels=512,
    projection_map_dim=4,
)


def tiny_cfg(**kw):
    base = dict(
        input_height=64,
        input_width=32,
        backbone_stage_channels=[4, 4, 4, 8],
        mixer_depth=1,
        projection_channels=3,
        projection_map_dim=2,
        num_classes=3,
        dtype="float64",
    )
    base.update(kw)
    return ModelConfig(**base)


def jitter_affine(model, rng, scale=0.3):
    """Move norm/bias/scale parameters off their neutral init so their gradients matter."""
    for name, p in model.params.items():
        if name.endswith(("gamma", "beta", "b_c", "b_r", "bias", "scale1", "scale2")):
            p.data = p.data + scale * rng.standard_normal(p.shape)


# -- config and shapes --------------------------------------------------------


def test_indivisible_input_rejected_at_build():
    with pytest.raises(ConfigError, match="divisible by 32"):
        ModelConfig(input_height=500, input_width=128)


def test_full_config_shapes_and_descriptor_dim():
    shapes = infer_shapes(FULL_CFG)
    assert shapes["backbone"] == (1, 512, 16, 4)
    assert shapes["descriptor"] == (1, 2048)
    assert FULL_CFG.descriptor_dim == 2048


@pytest.mark.parametrize(
    "cfg",
    [
        tiny_cfg(),
        tiny_cfg(input_height=64, input_width=64, backbone_stage_channels=[8, 16, 32, 64], num_classes=None),
        tiny_cfg(aggregation="avgpool", mixer_depth=0),
        tiny_cfg(backbone_blocks_per_stage=[2, 1, 1, 2], mixer_depth=2),
    ],
)
def test_forward_shapes_match_inference(cfg):
    model = Model(cfg, seed=0)
    taps = {}
    x = np.random.default_rng(0).random((2, 3, cfg.input_height, cfg.input_width))
    model.forward(x, with_logits=bool(cfg.num_classes), taps=taps)
    predicted = infer_shapes(cfg, batch=2)
    for key, shape in taps.items():
        assert tuple(shape) == predicted[key], key


def test_64x64_input_gives_2x2_maps():
    cfg = ModelConfig(input_height=64, input_width=64, backbone_stage_channels=[8, 16, 32, 64], mixer_depth=0)
    out = Model(cfg).backbone_forward(Tensor(np.zeros((1, 3, 64, 64), np.float32)))
    assert out.shape == (1, 64, 2, 2)


def test_batch_doubling_only_changes_leading_dim():
    model = Model(tiny_cfg(), seed=1)
    x = np.random.default_rng(1).random((1, 3, 64, 32))
    one = model.forward(x)["descriptor"].data
    two = model.forward(np.concatenate([x, x]))["descriptor"].data
    assert two.shape == (2,) + one.shape[1:]
    np.testing.assert_allclose(two[0], one[0], rtol=1e-12, atol=1e-12)


def test_wrong_resolution_is_a_clear_error():
    model = Model(tiny_cfg())
    with pytest.raises(ResolutionMismatchError, match="64, 32"):
        model.forward(np.zeros((1, 3, 32, 32)))


# -- StarReLU -------------------------------------------------------------------


@pytest.mark.parametrize(
    "a,b,x,want",
    [(1.0, 0.0, -5.0, 0.0), (2.0, 1.0, 3.0, 19.0), (STAR_RELU_INIT[0], STAR_RELU_INIT[1], 0.0, -0.4472)],
)
def test_star_relu_examples(a, b, x, want):
    out = F.star_relu(Tensor(np.array([x])), Tensor(np.array(a)), Tensor(np.array(b)))
    assert out.data[0] == pytest.approx(want, abs=1e-15)


def test_star_relu_gradients_reach_a_and_b():
    a = Tensor(np.array(0.7), requires_grad=True)
    b = Tensor(np.array(-0.2), requires_grad=True)
    x = Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
    F.sum(F.star_relu(x, a, b)).backward()
    assert a.grad == pytest.approx(0.25 + 4.0)
    assert b.grad == pytest.approx(3.0)


# -- mixer block ------------------------------------------------------------------


def test_mixer_block_preserves_shape():
    model = Model(tiny_cfg(backbone_stage_channels=[4, 4, 4, 8]), seed=0)
    x = Tensor(np.random.default_rng(0).standard_normal((2, 8, 4, 4)))
    assert model.mixer_block_forward(x, 0).shape == (2, 8, 4, 4)


def test_mixer_block_rejects_wrong_channels():
    model = Model(tiny_cfg(), seed=0)
    with pytest.raises(ResolutionMismatchError, match="8 channels"):
        model.mixer_block_forward(Tensor(np.zeros((1, 5, 2, 2))), 0)


@pytest.mark.parametrize("mlp", [True, False])
def test_zeroed_scales_make_mixer_exact_identity(mlp):
    model = Model(tiny_cfg(mixer_depth=3, mixer_mlp=mlp), seed=3)
    for name, p in model.params.items():
        if name.endswith(("scale1", "scale2")):
            p.data = np.zeros_like(p.data)
    x = Tensor(np.random.default_rng(3).standard_normal((2, 8, 2, 1)))
    assert np.abs(model.mixer_forward(x).data - x.data).max() == 0.0


@pytest.mark.parametrize("seed", SEEDS)
def test_mixer_block_gradcheck(seed):
    cfg = tiny_cfg(backbone_stage_channels=[4, 4, 4, 4], mixer_depth=1)
    model = Model(cfg, seed=seed)
    rng = np.random.default_rng(seed + 50)
    jitter_affine(model, rng)
    x = Tensor(rng.standard_normal((1, 4, 3, 3)), requires_grad=True)
    mixer = [p for n, p in model.params.items() if n.startswith("mixer0.")]
    w = rng.standard_normal((1, 4, 3, 3))
    err = gradcheck(lambda: F.sum(F.mul(model.mixer_block_forward(x, 0), Tensor(w))), mixer + [x])
    assert err < 1e-4


# -- projection -----------------------------------------------------------------


def _projection_model(C, hw, k, n):
    cfg = ModelConfig(
        input_height=32 * hw[0], input_width=32 * hw[1], backbone_stage_channels=[4, 4, 4, C],
        mixer_depth=0, projection_channels=k, projection_map_dim=n, dtype="float64",
    )
    return Model(cfg)


def test_projection_hand_example_is_normalised_row_sums():
    model = _projection_model(C=2, hw=(3, 1), k=2, n=1)
    P = model.params
    P["projection.W_c"].data = np.eye(2)
    P["projection.b_c"].data = np.zeros(2)
    P["projection.W_r"].data = np.ones((1, 3))
    P["projection.b_r"].data = np.zeros(1)
    X = np.array([[1.0, 2.0, 3.0], [4.0, 0.0, -1.0]])
    out = model.projection_forward(Tensor(X.reshape(1, 2, 3, 1))).data[0]
    sums = X.sum(axis=1)
    np.testing.assert_allclose(out, sums / np.linalg.norm(sums), rtol=1e-15)


def test_projection_layout_is_n_by_k():
    # X_out = W_r X_c^T is n x k; flattening walks k fastest.
    model = _projection_model(C=2, hw=(2, 1), k=2, n=2)
    P = model.params
    P["projection.W_c"].data = np.eye(2)
    P["projection.W_r"].data = np.array([[1.0, 0.0], [0.0, 1.0]])
    X = np.array([[1.0, 2.0], [3.0, 4.0]])  # channels x positions
    out = model.projection_forward(Tensor(X.reshape(1, 2, 2, 1))).data[0]
    expected = np.array([1.0, 3.0, 2.0, 4.0])
    np.testing.assert_allclose(out, expected / np.linalg.norm(expected), rtol=1e-15)


def test_projection_resolution_mismatch():
    model = _projection_model(C=4, hw=(2, 1), k=2, n=2)
    with pytest.raises(ResolutionMismatchError, match="built for 2 spatial positions"):
        model.projection_forward(Tensor(np.ones((1, 4, 3, 1))))


@pytest.mark.parametrize("seed", SEEDS)
def test_projection_gradcheck(seed):
    model = _projection_model(C=4, hw=(2, 2), k=3, n=2)
    rng = np.random.default_rng(seed)
    jitter_affine(model, rng)
    x = Tensor(rng.standard_normal((2, 4, 2, 2)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 6)))
    params = [p for n, p in model.params.items() if n.startswith("projection.")]
    assert gradcheck(lambda: F.sum(F.mul(model.projection_forward(x), w)), params + [x]) < 1e-4


def test_descriptor_unit_norm_full_config_100_inputs():
    model = Model(FULL_CFG, seed=0)
    rng = np.random.default_rng(0)
    norms = []
    for _ in range(10):
        x = rng.random((10, 3, 512, 128)).astype(np.float32)
        norms.extend(np.linalg.norm(model.forward(x)["descriptor"].data.astype(np.float64), axis=1))
    assert len(norms) == 100
    assert np.abs(np.array(norms) - 1).max() < 1e-5


# -- classifier -------------------------------------------------------------------


def test_classifier_requires_num_classes():
    model = Model(tiny_cfg(num_classes=None))
    with pytest.raises(ConfigError, match="num_classes"):
        model.classifier_forward(Tensor(np.ones((1, 6))), training=False)


def test_classifier_eval_mode_is_deterministic():
    model = Model(tiny_cfg(), seed=0)
    d = Tensor(np.random.default_rng(0).standard_normal((4, 6)))
    a = model.classifier_forward(d, training=False).data
    b = model.classifier_forward(d, training=False).data
    assert np.array_equal(a, b)


def test_classifier_zero_weights_give_bias():
    model = Model(tiny_cfg(), seed=0)
    model.params["classifier.weight"].data[:] = 0
    model.params["classifier.bias"].data[:] = 2.5
    out = model.classifier_forward(Tensor(np.ones((3, 6))), training=True, rng=np.random.default_rng(0))
    assert np.all(out.data == 2.5)


def test_dropout_zeroes_about_half_and_rescales():
    d = Tensor(np.ones((10_000, 1)))
    out = F.dropout(d, 0.5, np.random.default_rng(0), training=True).data
    frac = float((out == 0).mean())
    assert abs(frac - 0.5) < 0.02
    assert set(np.unique(out)) <= {0.0, 2.0}


# -- variants and end to end --------------------------------------------------------


@pytest.mark.parametrize("name", sorted(ABLATION_VARIANTS))
def test_ablation_variants_are_pure_config(name):
    base = tiny_cfg(mixer_depth=2)
    cfg = base.with_variant(name)
    model = Model(cfg, seed=0)
    d = model.forward(np.zeros((1, 3, 64, 32)))["descriptor"]
    has_mixer = any(n.startswith("mixer") for n in model.params)
    assert has_mixer == ("mixer" in name)
    assert d.shape[1] == (8 if "avgpool" in name else 6)


def test_avgpool_no_mixer_descriptor_length_is_channels():
    cfg = dataclasses.replace(FULL_CFG, mixer_depth=0, aggregation="avgpool")
    assert infer_shapes(cfg)["descriptor"] == (1, 512)


def test_eval_forward_is_bitwise_repeatable():
    model = Model(tiny_cfg(dtype="float32"), seed=2)
    x = np.random.default_rng(2).random((3, 3, 64, 32)).astype(np.float32)
    assert np.array_equal(model.forward(x)["descriptor"].data, model.forward(x)["descriptor"].data)


@pytest.mark.parametrize("seed", SEEDS)
def test_end_to_end_gradcheck_tiny_model(seed):
    model = Model(tiny_cfg(), seed=seed)
    rng = np.random.default_rng(100 + seed)
    jitter_affine(model, rng)
    x = rng.random((2, 3, 64, 32))
    y = np.array([0, 2])
    err = gradcheck(lambda: cross_entropy_loss(model.forward(x, with_logits=True)["logits"], y), model.parameters())
    assert err < 1e-3


# -- persistence --------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    model = Model(tiny_cfg(dtype="float32"), seed=4)
    path = tmp_path / "m.ckpt"
    model.save(path, meta={"note": "x"})
    loaded, meta, extra = Model.load(path)
    assert loaded.cfg == model.cfg
    assert loaded.fingerprint() == model.fingerprint()
    assert meta["note"] == "x" and meta["model_config"]["schema_version"] == 1
    assert extra == {}


def test_config_dict_round_trip_and_bad_schema():
    cfg = tiny_cfg()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    bad = cfg.to_dict()
    bad["schema_version"] = 99
    with pytest.raises(ConfigError, match="schema version"):
        ModelConfig.from_dict(bad)
