"""Parameter store, dense/conv layers, dropout and the image backbones."""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ParameterStore:
    """Ordered map from parameter path (``group/layer/w``) to trainable tensor."""

    def __init__(self):
        self._params = {}

    def add(self, name, data):
        if name in self._params:
            raise KeyError(f"parameter {name!r} registered twice")
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def group(self, prefix):
        """Parameters whose path starts with ``prefix + '/'``."""
        p = prefix + "/"
        return {k: v for k, v in self._params.items() if k.startswith(p)}

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def num_params(self):
        return sum(t.size for t in self._params.values())

    def state(self):
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, arrays):
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, arr in arrays.items():
            t = self._params[k]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {t.shape}")
            t.data[...] = arr


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Dense:
    def __init__(self, store, name, n_in, n_out, rng):
        self.name = name
        self.n_in, self.n_out = n_in, n_out
        self.weight = store.add(f"{name}/w", glorot_uniform(rng, (n_in, n_out), n_in, n_out))
        self.bias = store.add(f"{name}/b", np.zeros(n_out))

    def __call__(self, x):
        return dense_forward(self, x)


def dense_forward(layer, x):
    if x.ndim != 2 or x.shape[1] != layer.n_in:
        raise T.DimensionError(f"{layer.name}: expected [B, {layer.n_in}], got {x.shape}")
    return T.add(T.matmul(x, layer.weight), layer.bias)


class Conv:
    def __init__(self, store, name, c_in, c_out, kernel_size, stride, rng, transpose=False):
        self.name = name
        self.stride = stride
        self.transpose = transpose
        k2 = kernel_size * kernel_size
        # forward-conv layout [F, C, k, k]; a transposed layer maps F -> C
        shape = (c_in, c_out, kernel_size, kernel_size) if transpose else (c_out, c_in, kernel_size, kernel_size)
        self.weight = store.add(f"{name}/w", glorot_uniform(rng, shape, c_in * k2, c_out * k2))
        self.bias = store.add(f"{name}/b", np.zeros(c_out))

    def __call__(self, x, output_size=None):
        if self.transpose:
            return T.conv2d_transpose(x, self.weight, self.bias, self.stride, output_size)
        return T.conv2d(x, self.weight, self.bias, self.stride)


def dropout(x, rate, training, rng):
    """Inverted dropout; the exact identity when not training or ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return T.mul(x, Tensor(keep / (1.0 - rate)))


@dataclass
class ConvStackConfig:
    filters: tuple = (8, 16, 32, 64, 64)
    strides: tuple = (1, 2, 2, 2, 2)
    kernel_size: int = 5

    def __post_init__(self):
        self.filters, self.strides = tuple(self.filters), tuple(self.strides)
        if len(self.filters) != len(self.strides) or not self.filters:
            raise ValueError("conv filters and strides must be equal-length and non-empty")
        if any(s not in (1, 2) for s in self.strides):
            raise ValueError("conv strides must be 1 or 2")

    def spatial_sizes(self, h, w):
        sizes = [(h, w)]
        for s in self.strides:
            h, w = T.conv_output_size(h, s), T.conv_output_size(w, s)
            sizes.append((h, w))
        return sizes


@dataclass
class MlpEncoderConfig:
    hidden: list = field(default_factory=lambda: [256, 128])

    def __post_init__(self):
        self.hidden = list(self.hidden)
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ValueError("MLP hidden sizes must be a non-empty list of positive ints")


class ConvBackbone:
    def __init__(self, store, name, image_shape, cfg, embed_dim, rng):
        c, h, w = image_shape
        self.cfg = cfg
        self.layers = []
        for i, (f, s) in enumerate(zip(cfg.filters, cfg.strides)):
            self.layers.append(Conv(store, f"{name}/conv{i}", c, f, cfg.kernel_size, s, rng))
            c = f
        fh, fw = cfg.spatial_sizes(h, w)[-1]
        self.feature_shape = (c, fh, fw)
        self.head = Dense(store, f"{name}/head", c * fh * fw, embed_dim, rng)

    def features(self, x):
        for layer in self.layers:
            x = T.relu(layer(x))
        return x

    def __call__(self, x):
        f = self.features(x)
        return T.relu(self.head(T.reshape(f, (f.shape[0], -1))))


class MlpBackbone:
    def __init__(self, store, name, image_shape, cfg, embed_dim, rng):
        n = math.prod(image_shape)
        self.layers = []
        for i, hdim in enumerate(cfg.hidden):
            self.layers.append(Dense(store, f"{name}/fc{i}", n, hdim, rng))
            n = hdim
        self.head = Dense(store, f"{name}/head", n, embed_dim, rng)

    def __call__(self, x):
        h = T.reshape(x, (x.shape[0], -1))
        for layer in self.layers:
            h = T.relu(layer(h))
        return T.relu(self.head(h))


def make_backbone(store, name, image_shape, cfg, embed_dim, rng):
    if isinstance(cfg, ConvStackConfig):
        return ConvBackbone(store, name, image_shape, cfg, embed_dim, rng)
    return MlpBackbone(store, name, image_shape, cfg, embed_dim, rng)


def encode_image(backbone, x):
    """Backbone features through its dense head: ``[B, C, H, W] -> [B, embed_dim]``."""
    x = T.as_tensor(x)
    if x.ndim != 4:
        raise T.DimensionError(f"images must be [B, C, H, W], got {x.shape}")
    return backbone(x)
