"""
Test the model module
"""

import numpy as np
import pytest

from convnorm.model import (
    ClassifierConfig,
    NormKind,
    argmax_classes,
    build_allcnn,
    dwck_param_count,
    forward,
    norm_param_count,
    predict,
)
from convnorm.normalization import plan_dwck
from convnorm.tensor import Tensor, cross_entropy, make_rng, precision

SMALL = dict(width_scale=0.1, input_dims=(3, 8, 8))


def norm_params_in_model(model):
    return sum(
        p.data.size for name, p in model.named_parameters().items() if name.startswith("norm")
    )


@pytest.mark.parametrize("name", ["none", "batch", "dwck", "learned", "DWCK", NormKind.BATCH])
def test_norm_kind_from_name(name):
    assert NormKind.from_name(name).value == str(getattr(name, "value", name)).lower()


def test_norm_kind_invalid():
    with pytest.raises(ValueError, match="Valid options are: none, batch, dwck, learned"):
        NormKind.from_name("foo")
    with pytest.raises(ValueError):
        NormKind.from_code(4)


def test_norm_kind_codes():
    for kind in NormKind:
        assert NormKind.from_code(kind.code) is kind


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(width_scale=0),
        dict(width_scale=1.5),
        dict(input_dims=(3, 4, 4)),
        dict(n_classes=1),
        dict(jitter=0.5),
        dict(norm="foo"),
    ],
)
def test_config_invalid(kwargs):
    with pytest.raises(ValueError):
        ClassifierConfig(**kwargs)


def test_layer_shapes():
    assert ClassifierConfig().layer_shapes() == [
        (96, 32, 32),
        (96, 32, 32),
        (96, 16, 16),
        (192, 16, 16),
        (192, 16, 16),
        (192, 8, 8),
        (192, 8, 8),
        (192, 8, 8),
    ]
    assert [c for c, _, _ in ClassifierConfig(width_scale=0.25).layer_shapes()] == [24] * 3 + [
        48
    ] * 5


def test_dwck_stage_weights_per_layer():
    dims = [(h, w) for _, h, w in ClassifierConfig().layer_shapes()]
    assert [dwck_param_count(plan_dwck(*d)) for d in dims] == [28, 28, 24, 24, 24, 12, 12, 12]


def test_norm_param_counts_full_width():
    assert norm_param_count(ClassifierConfig(norm="none")) == 0
    assert norm_param_count(ClassifierConfig(norm="batch")) == 2496
    assert norm_param_count(ClassifierConfig(norm="dwck", affine=False)) == 23_808
    assert norm_param_count(ClassifierConfig(norm="dwck")) == 23_808 + 2496
    assert norm_param_count(ClassifierConfig(norm="learned", affine=False)) == 2 * (85 + 7 * 97)


@pytest.mark.parametrize("norm", list(NormKind))
@pytest.mark.parametrize("affine", [True, False])
def test_norm_param_count_matches_model(norm, affine):
    cfg = ClassifierConfig(norm=norm, affine=affine)
    model = build_allcnn(cfg, make_rng(0))
    assert norm_params_in_model(model) == norm_param_count(cfg)


def test_none_model_has_no_norm_state():
    model = build_allcnn(ClassifierConfig(**SMALL), make_rng(0))
    assert model.norm_states == []
    assert model.named_buffers() == {}
    assert model.weight_sum_drift() == 0
    assert len(model.layers) == 9
    assert model.layers[-1].norm is None and not model.layers[-1].activation


def test_parameter_names():
    model = build_allcnn(ClassifierConfig(norm="dwck", **SMALL), make_rng(0))
    names = list(model.named_parameters())
    assert names[:4] == ["conv1.weight", "conv1.bias", "norm1.stage0", "norm1.stage1"]
    assert "conv9.weight" in names and "norm9.gamma" not in names
    assert "norm8.running_var" in model.named_buffers()


@pytest.mark.parametrize("norm", list(NormKind))
def test_forward_probabilities(norm):
    model = build_allcnn(ClassifierConfig(norm=norm, **SMALL), make_rng(1))
    x = Tensor(make_rng(2).uniform(0, 1, size=(4, 3, 8, 8)))
    for training in (True, False):
        p = forward(model, x, training=training).data
        assert p.shape == (4, 10)
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-5)


def test_forward_shape_mismatch():
    model = build_allcnn(ClassifierConfig(**SMALL), make_rng(0))
    with pytest.raises(ValueError, match=r"\(3, 8, 8\)"):
        forward(model, Tensor(np.zeros((1, 3, 16, 16))), training=False)


def test_shared_conv_weights_across_norm_kinds():
    a = build_allcnn(ClassifierConfig(norm="batch", **SMALL), make_rng(7))
    b = build_allcnn(ClassifierConfig(norm="dwck", **SMALL), make_rng(7))
    for la, lb in zip(a.layers, b.layers):
        np.testing.assert_array_equal(la.weight.data, lb.weight.data)


def test_conv_init_scale():
    model = build_allcnn(ClassifierConfig(width_scale=0.5), make_rng(0))
    for i, layer in enumerate(model.layers, start=1):
        _, c_in, kh, kw = layer.weight.shape
        fan_in = c_in * kh * kw
        bound = np.sqrt((6 if layer.activation else 3) / fan_in)
        w = layer.weight.data
        assert np.abs(w).max() <= bound * (1 + 1e-6)
        assert np.abs(w).max() > 0.9 * bound
        # Variance 2 / fan_in before each ReLU, 1 / fan_in for the class convolution
        assert w.var() == pytest.approx(bound**2 / 3, rel=0.15), i
        assert np.all(layer.bias.data == 0)


def test_fresh_learned_stats_model_matches_plain():
    x = Tensor(make_rng(1).uniform(0, 1, size=(2, 3, 8, 8)))
    plain = build_allcnn(ClassifierConfig(norm="none", **SMALL), make_rng(0))
    learned = build_allcnn(ClassifierConfig(norm="learned", **SMALL), make_rng(0))
    np.testing.assert_allclose(
        forward(learned, x, True).data, forward(plain, x, True).data, rtol=1e-5, atol=1e-7
    )


def test_dwck_uniform_init_matches_batch_norm_model():
    with precision(np.float64):
        bn = build_allcnn(ClassifierConfig(norm="batch", **SMALL), make_rng(3))
        dw = build_allcnn(ClassifierConfig(norm="dwck", jitter=0, **SMALL), make_rng(3))
        x = Tensor(make_rng(4).uniform(0, 1, size=(4, 3, 8, 8)))
        p_bn = forward(bn, x, training=True).data
        p_dw = forward(dw, x, training=True).data
    np.testing.assert_allclose(p_dw, p_bn, atol=1e-8)


def test_eval_mode_is_deterministic():
    model = build_allcnn(ClassifierConfig(norm="batch", **SMALL), make_rng(0))
    x = Tensor(make_rng(1).uniform(0, 1, size=(3, 3, 8, 8)))
    forward(model, x, training=True)
    np.testing.assert_array_equal(forward(model, x, False).data, forward(model, x, False).data)


def test_build_is_deterministic():
    x = Tensor(make_rng(1).uniform(0, 1, size=(2, 3, 8, 8)))
    p = [
        forward(build_allcnn(ClassifierConfig(norm="learned", **SMALL), make_rng(5)), x, True).data
        for _ in range(2)
    ]
    np.testing.assert_array_equal(*p)


def test_argmax_ties_lowest_index():
    probs = np.array([[0.4, 0.4, 0.2], [0.1, 0.45, 0.45], [0.2, 0.3, 0.5]])
    np.testing.assert_array_equal(argmax_classes(probs), [0, 1, 2])
    np.testing.assert_array_equal(argmax_classes(Tensor(probs)), [0, 1, 2])


def test_predict():
    model = build_allcnn(ClassifierConfig(**SMALL), make_rng(0))
    x = Tensor(make_rng(1).uniform(0, 1, size=(5, 3, 8, 8)))
    y = predict(model, x)
    assert y.shape == (5,)
    np.testing.assert_array_equal(y, np.argmax(forward(model, x, False).data, axis=1))


def test_first_loss_near_uniform():
    model = build_allcnn(ClassifierConfig(width_scale=0.25), make_rng(0))
    x = Tensor(make_rng(1).uniform(0, 1, size=(10, 3, 32, 32)))
    onehot = np.eye(10)[np.arange(10)]
    loss = cross_entropy(forward(model, x, training=True), onehot).item()
    assert abs(loss - np.log(10)) < 0.3


def test_repr():
    model = build_allcnn(ClassifierConfig(norm="dwck", **SMALL), make_rng(0))
    assert repr(model).startswith("Model(norm=dwck, width_scale=0.1")
