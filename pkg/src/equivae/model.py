"""The four EquiVAE networks and their wiring.

* invariant encoder: per-image backbone and dense layer, mean over the
  complementary set, then a dense hidden layer and a linear output ``r``;
* equivariant posterior ``q(v | r, x)``: its own backbone on ``x``
  concatenated with a dense transform of ``r``, then separate mean and
  half-log-variance heads;
* decoder ``p(x | r, v)``: ``r`` and ``v`` through separate dense layers,
  concatenated, one more dense layer, then a mirrored transposed-conv (or MLP)
  stack;
* label posterior ``q(y | x)``: its own backbone on ``x`` concatenated with
  the stop-gradient invariant embedding, a two-layer dropout head, softmax.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .layers import (
    Conv,
    ConvStackConfig,
    Dense,
    MlpEncoderConfig,
    ParameterStore,
    dropout,
    encode_image,
    make_backbone,
)
from .tensor import Tensor

GROUPS = ("inv", "cov", "dec", "ypost")


@dataclass
class Architecture:
    image_shape: tuple = (1, 28, 28)
    n_classes: int = 10
    latent_r: int = 16
    latent_v: int = 16
    backbone: str = "mlp"
    mlp_hidden: list = field(default_factory=lambda: [256, 128])
    conv_filters: tuple = (8, 16, 32, 64, 64)
    conv_strides: tuple = (1, 2, 2, 2, 2)
    kernel_size: int = 5
    # dense units after the backbone and after the set mean
    inv_hidden: tuple = (128, 64)
    # r-transform width in the posterior, and the mu / sigma hidden layers
    cov_hidden: tuple = (128, 64)
    decoder_hidden: tuple = (64, 128)
    decoder_filters: tuple = (64, 32, 16, 8)
    ypost_hidden: tuple = (128, 64)
    likelihood: str = "bernoulli"
    dropout: float = 0.5

    def __post_init__(self):
        self.image_shape = tuple(self.image_shape)
        for name in ("conv_filters", "conv_strides", "inv_hidden", "cov_hidden",
                     "decoder_hidden", "decoder_filters", "ypost_hidden"):
            setattr(self, name, tuple(getattr(self, name)))
        self.mlp_hidden = list(self.mlp_hidden)
        if self.backbone not in ("mlp", "conv"):
            raise ValueError(f"backbone must be 'mlp' or 'conv', got {self.backbone!r}")
        if self.likelihood not in ("bernoulli", "gaussian"):
            raise ValueError(f"likelihood must be 'bernoulli' or 'gaussian', got {self.likelihood!r}")
        if self.latent_r < 1 or self.latent_v < 1 or self.n_classes < 1:
            raise ValueError("latent dims and class count must be positive")
        if self.backbone == "conv":
            n_down = sum(1 for s in self.conv_strides if s == 2)
            if len(self.decoder_filters) != n_down:
                raise ValueError("decoder_filters needs one entry per stride-2 encoder layer")

    @classmethod
    def halved(cls, **kw):
        """Dense widths halved, as used with 8-d latents."""
        arch = cls(**kw)
        for name in ("inv_hidden", "cov_hidden", "decoder_hidden", "ypost_hidden"):
            setattr(arch, name, tuple(max(1, h // 2) for h in getattr(arch, name)))
        return arch

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def backbone_config(self):
        if self.backbone == "conv":
            return ConvStackConfig(self.conv_filters, self.conv_strides, self.kernel_size)
        return MlpEncoderConfig(self.mlp_hidden)


@dataclass
class GaussianPosterior:
    mu: Tensor
    log_sigma: Tensor

    @property
    def sigma(self):
        return T.exp(self.log_sigma)


@dataclass
class LabelPosterior:
    probs: Tensor
    log_probs: Tensor


@dataclass
class DecoderOutput:
    params: Tensor
    kind: str = "bernoulli"
    log_var: Tensor = None


class EquiVAE:
    def __init__(self, arch, rng, store=None):
        self.arch = arch
        self.store = store if store is not None else ParameterStore()
        s, a = self.store, arch
        cfg = a.backbone_config()
        e1, e2 = a.inv_hidden

        self.inv_backbone = make_backbone(s, "inv/backbone", a.image_shape, cfg, e1, rng)
        self.inv_hidden = Dense(s, "inv/pooled", e1, e2, rng)
        self.inv_out = Dense(s, "inv/out", e2, a.latent_r, rng)

        c1, c2 = a.cov_hidden
        self.cov_backbone = make_backbone(s, "cov/backbone", a.image_shape, cfg, e1, rng)
        self.cov_r = Dense(s, "cov/r", a.latent_r, c1, rng)
        self.cov_mu_hidden = Dense(s, "cov/mu_hidden", e1 + c1, c2, rng)
        self.cov_mu = Dense(s, "cov/mu", c2, a.latent_v, rng)
        self.cov_sig_hidden = Dense(s, "cov/sigma_hidden", e1 + c1, c2, rng)
        self.cov_sig = Dense(s, "cov/sigma", c2, a.latent_v, rng)

        d1, d2 = a.decoder_hidden
        self.dec_r = Dense(s, "dec/r", a.latent_r, d1, rng)
        self.dec_v = Dense(s, "dec/v", a.latent_v, d1, rng)
        self.dec_joint = Dense(s, "dec/joint", 2 * d1, d2, rng)
        n_pix = math.prod(a.image_shape)
        if a.backbone == "conv":
            self._build_conv_decoder(d2, rng)
        else:
            self.dec_layers = []
            n = d2
            for i, h in enumerate(reversed(a.mlp_hidden)):
                self.dec_layers.append(Dense(s, f"dec/fc{i}", n, h, rng))
                n = h
            self.dec_out = Dense(s, "dec/out", n, n_pix, rng)
        if a.likelihood == "gaussian":
            self.dec_log_var = s.add("dec/log_var", np.zeros(()))

        y1, y2 = a.ypost_hidden
        self.ypost_backbone = make_backbone(s, "ypost/backbone", a.image_shape, cfg, e1, rng)
        self.ypost_h1 = Dense(s, "ypost/h1", e1 + a.latent_r, y1, rng)
        self.ypost_h2 = Dense(s, "ypost/h2", y1, y2, rng)
        self.ypost_out = Dense(s, "ypost/out", y2, a.n_classes, rng)

    def _build_conv_decoder(self, n_in, rng):
        a, s = self.arch, self.store
        c, h, w = a.image_shape
        sizes = ConvStackConfig(a.conv_filters, a.conv_strides, a.kernel_size).spatial_sizes(h, w)
        seed_c = a.conv_filters[-1]
        self.dec_seed_shape = (seed_c,) + sizes[-1]
        self.dec_seed = Dense(s, "dec/seed", n_in, math.prod(self.dec_seed_shape), rng)
        # mirror encoder layers in reverse; each stride-2 layer becomes a transpose
        self.dec_convs, self.dec_sizes = [], []
        ch, fi = seed_c, 0
        for li in reversed(range(len(a.conv_strides))):
            if a.conv_strides[li] != 2:
                continue
            f = a.decoder_filters[fi]
            self.dec_convs.append(Conv(s, f"dec/tconv{fi}", ch, f, a.kernel_size, 2, rng, transpose=True))
            self.dec_sizes.append(sizes[li])
            ch, fi = f, fi + 1
        self.dec_final = Conv(s, "dec/final", ch, c, a.kernel_size, 1, rng)

    # ------------------------------------------------------------------
    # invariant encoder
    # ------------------------------------------------------------------

    def invariant_features(self, images):
        """Per-image embedding ahead of the set mean: ``[N, C, H, W] -> [N, e1]``."""
        return encode_image(self.inv_backbone, images)

    def invariant_head(self, pooled):
        return self.inv_out(T.relu(self.inv_hidden(pooled)))

    def pooled_invariant(self, sets):
        images, counts = _stack_sets(sets)
        return T.segment_mean(self.invariant_features(images), counts)

    def encode_invariant(self, sets):
        """``r`` for each complementary set.

        ``sets`` is a list with one ``[m_i, C, H, W]`` array per example (or a
        single such array). Returns ``[len(sets), latent_r]``.
        """
        return self.invariant_head(self.pooled_invariant(sets))

    def invariant_embedding(self, x):
        """``f(x)``: the invariant encoder applied with ``m = 1``."""
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        return self.encode_invariant([x[i : i + 1] for i in range(x.shape[0])])

    # ------------------------------------------------------------------
    # equivariant posterior, sampling, decoder
    # ------------------------------------------------------------------

    def encode_equivariant(self, r, x):
        x = T.as_tensor(x)
        if r.shape[0] != x.shape[0]:
            raise T.DimensionError(f"batch mismatch: r has {r.shape[0]} rows, x has {x.shape[0]}")
        h = T.concat([encode_image(self.cov_backbone, x), T.relu(self.cov_r(r))], axis=1)
        mu = self.cov_mu(T.relu(self.cov_mu_hidden(h)))
        log_sigma = self.cov_sig(T.relu(self.cov_sig_hidden(h)))
        return GaussianPosterior(mu, log_sigma)

    def decode(self, r, v):
        if r.shape[0] != v.shape[0]:
            raise T.DimensionError(f"batch mismatch: r has {r.shape[0]} rows, v has {v.shape[0]}")
        a = self.arch
        h = T.concat([T.relu(self.dec_r(r)), T.relu(self.dec_v(v))], axis=1)
        h = T.relu(self.dec_joint(h))
        B = h.shape[0]
        if a.backbone == "conv":
            z = T.reshape(T.relu(self.dec_seed(h)), (B,) + self.dec_seed_shape)
            for layer, size in zip(self.dec_convs, self.dec_sizes):
                z = T.relu(layer(z, output_size=size))
            out = self.dec_final(z)
        else:
            for layer in self.dec_layers:
                h = T.relu(layer(h))
            out = T.reshape(self.dec_out(h), (B,) + a.image_shape)
        if a.likelihood == "bernoulli":
            return DecoderOutput(T.sigmoid(out), "bernoulli")
        return DecoderOutput(out, "gaussian", self.dec_log_var)

    # ------------------------------------------------------------------
    # label posterior
    # ------------------------------------------------------------------

    def predict_label_posterior(self, x, training=False, rng=None):
        x = T.as_tensor(x)
        frozen = T.stop_gradient(self.invariant_embedding(x.data))
        h = T.concat([encode_image(self.ypost_backbone, x), frozen], axis=1)
        rate = self.arch.dropout
        h = dropout(T.relu(self.ypost_h1(h)), rate, training, rng)
        h = dropout(T.relu(self.ypost_h2(h)), rate, training, rng)
        logits = self.ypost_out(h)
        return LabelPosterior(T.softmax(logits), T.log_softmax(logits))


def reparameterize(post, eps):
    """``v = mu + sigma * eps``; differentiable in ``mu`` and ``sigma``."""
    eps = T.as_tensor(eps)
    if eps.shape != post.mu.shape:
        raise T.DimensionError(f"eps shape {eps.shape} != posterior shape {post.mu.shape}")
    return T.add(post.mu, T.mul(post.sigma, eps))


def _stack_sets(sets):
    if isinstance(sets, np.ndarray):
        sets = [sets]
    if len(sets) == 0:
        raise ValueError("no complementary sets given")
    counts = [len(s) for s in sets]
    if min(counts) < 1:
        raise ValueError("complementary set must hold at least one image")
    shape = sets[0].shape[1:]
    if any(s.shape[1:] != shape for s in sets):
        raise T.DimensionError("complementary images differ in shape")
    return np.concatenate(sets, axis=0), counts
