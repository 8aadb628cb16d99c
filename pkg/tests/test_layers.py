import numpy as np
import pytest

from equivae import tensor as T
from equivae.gradcheck import check_gradients
from equivae.layers import (
    Conv,
    ConvStackConfig,
    Dense,
    MlpEncoderConfig,
    ParameterStore,
    dropout,
    encode_image,
    glorot_uniform,
    make_backbone,
)
from equivae.model import Architecture, EquiVAE
from equivae.tensor import Tensor

LAYER_TOL = 1e-4


def loss_of(out, seed=9):
    # random projection so every output element matters
    w = np.random.default_rng(seed).normal(size=out.shape)
    return T.reduce_sum(T.mul(out, Tensor(w)))


class TestParameterStore:
    def test_duplicate_name(self):
        s = ParameterStore()
        s.add("a/w", np.zeros(2))
        with pytest.raises(KeyError):
            s.add("a/w", np.zeros(2))

    def test_group_and_count(self):
        s = ParameterStore()
        s.add("inv/w", np.zeros((2, 3)))
        s.add("inv/b", np.zeros(3))
        s.add("dec/w", np.zeros(4))
        assert set(s.group("inv")) == {"inv/w", "inv/b"}
        assert s.num_params() == 13

    def test_load_state_mismatch(self):
        s = ParameterStore()
        s.add("a", np.zeros(2))
        with pytest.raises(KeyError):
            s.load_state({"b": np.zeros(2)})
        with pytest.raises(ValueError):
            s.load_state({"a": np.zeros(3)})

    def test_state_is_a_copy(self):
        s = ParameterStore()
        s.add("a", np.ones(2))
        st = s.state()
        st["a"][0] = 5.0
        assert s["a"].data[0] == 1.0


def test_glorot_bounds():
    w = glorot_uniform(np.random.default_rng(0), (200, 300), 200, 300)
    limit = np.sqrt(6.0 / 500)
    assert np.all(np.abs(w) <= limit)
    assert abs(w.mean()) < 0.01 * limit


class TestDense:
    def test_forward(self):
        s = ParameterStore()
        layer = Dense(s, "d", 3, 2, np.random.default_rng(0))
        layer.bias.data[:] = [0.5, -1.0]
        x = np.random.default_rng(1).normal(size=(4, 3))
        np.testing.assert_allclose(layer(Tensor(x)).data, x @ layer.weight.data + [0.5, -1.0])

    def test_wrong_width(self):
        layer = Dense(ParameterStore(), "d", 3, 2, np.random.default_rng(0))
        with pytest.raises(T.DimensionError):
            layer(Tensor(np.zeros((4, 5))))

    def test_gradients(self):
        rng = np.random.default_rng(2)
        layer = Dense(ParameterStore(), "d", 4, 3, rng)
        layer.bias.data[:] = rng.normal(size=3)
        x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        errs = check_gradients(lambda: loss_of(layer(x)), [x, layer.weight, layer.bias])
        assert max(errs) < LAYER_TOL


class TestConv:
    @pytest.mark.parametrize("stride", [1, 2])
    def test_gradients(self, stride):
        rng = np.random.default_rng(3)
        layer = Conv(ParameterStore(), "c", 2, 3, 3, stride, rng)
        layer.bias.data[:] = rng.normal(size=3)
        x = Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
        errs = check_gradients(lambda: loss_of(layer(x)), [x, layer.weight, layer.bias])
        assert max(errs) < LAYER_TOL

    def test_transpose_gradients(self):
        rng = np.random.default_rng(4)
        layer = Conv(ParameterStore(), "t", 3, 2, 3, 2, rng, transpose=True)
        assert layer.weight.shape == (3, 2, 3, 3)
        x = Tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True)
        out = layer(x, output_size=(5, 5))
        assert out.shape == (2, 2, 5, 5)
        errs = check_gradients(lambda: loss_of(layer(x, output_size=(5, 5))), [x, layer.weight, layer.bias])
        assert max(errs) < LAYER_TOL


class TestDropout:
    def test_inference_is_identity(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        assert dropout(x, 0.5, False, None) is x

    def test_rate_zero_is_identity(self):
        x = Tensor(np.ones((2, 3)))
        assert dropout(x, 0.0, True, np.random.default_rng(0)) is x

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            dropout(Tensor(np.ones(3)), 1.0, True, np.random.default_rng(0))

    def test_inverted_scaling(self):
        x = Tensor(np.ones((200, 100)))
        out = dropout(x, 0.5, True, np.random.default_rng(0)).data
        assert set(np.unique(out)) <= {0.0, 2.0}
        assert abs(out.mean() - 1.0) < 0.02


class TestBackbones:
    def test_mlp_shape_and_gradients(self):
        rng = np.random.default_rng(5)
        s = ParameterStore()
        bb = make_backbone(s, "bb", (1, 3, 3), MlpEncoderConfig([4]), 3, rng)
        x = Tensor(rng.uniform(size=(2, 1, 3, 3)), requires_grad=True)
        assert encode_image(bb, x).shape == (2, 3)
        params = list(s.group("bb").values())
        errs = check_gradients(lambda: loss_of(encode_image(bb, x)), [x] + params)
        assert max(errs) < LAYER_TOL

    def test_conv_shape_and_gradients(self):
        rng = np.random.default_rng(6)
        s = ParameterStore()
        bb = make_backbone(s, "bb", (1, 5, 5), ConvStackConfig((2, 2), (1, 2), 3), 3, rng)
        assert bb.feature_shape == (2, 3, 3)
        x = Tensor(rng.uniform(size=(2, 1, 5, 5)), requires_grad=True)
        params = list(s.group("bb").values())
        errs = check_gradients(lambda: loss_of(encode_image(bb, x)), [x] + params)
        assert max(errs) < LAYER_TOL

    def test_encode_image_rank(self):
        bb = make_backbone(ParameterStore(), "bb", (1, 3, 3), MlpEncoderConfig([4]), 3, np.random.default_rng(0))
        with pytest.raises(T.DimensionError):
            encode_image(bb, np.zeros((2, 9)))

    def test_spatial_sizes(self):
        cfg = ConvStackConfig()
        assert cfg.spatial_sizes(28, 28) == [(28, 28), (28, 28), (14, 14), (7, 7), (4, 4), (2, 2)]

    def test_bad_configs(self):
        with pytest.raises(ValueError):
            ConvStackConfig((2,), (3,))
        with pytest.raises(ValueError):
            ConvStackConfig((2, 2), (1,))
        with pytest.raises(ValueError):
            MlpEncoderConfig([])


def test_default_mnist_conv_under_a_million_parameters():
    arch = Architecture(image_shape=(1, 28, 28), n_classes=10, backbone="conv")
    n = EquiVAE(arch, np.random.default_rng(0)).store.num_params()
    assert n < 1_000_000
