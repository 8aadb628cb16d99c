"""Distance-based and neural classification, cluster means, generative probes."""

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Dense, ParameterStore, dropout, encode_image, make_backbone
from .model import LabelPosterior
from .optim import AdamState, adam_step, collect_grads
from .tensor import Tensor

EVAL_BATCH = 256


@dataclass
class ClusterMeans:
    means: np.ndarray
    counts: np.ndarray
    m: int

    @property
    def n_classes(self):
        return len(self.means)


@dataclass
class ClassificationReport:
    error_rate: float
    confusion: np.ndarray
    n: int

    @classmethod
    def from_predictions(cls, y_true, y_pred, n_classes):
        y_true = np.asarray(y_true, dtype=np.intp)
        y_pred = np.asarray(y_pred, dtype=np.intp)
        conf = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(conf, (y_true, y_pred), 1)
        n = len(y_true)
        err = float(np.sum(y_true != y_pred) / n) if n else 0.0
        return cls(err, conf, n)

    def to_dict(self):
        return {"error_rate": self.error_rate, "n": self.n, "confusion": self.confusion.tolist()}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


# ----------------------------------------------------------------------------
# cluster means and the distance classifier
# ----------------------------------------------------------------------------


def invariant_embeddings(model, images, batch=EVAL_BATCH):
    """``f(x)`` for every image, evaluated without building a graph."""
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch):
            out.append(model.invariant_embedding(images[i : i + batch]).data)
    if not out:
        return np.zeros((0, model.arch.latent_r))
    return np.concatenate(out, axis=0)


def member_sets(pool, y, m, rng):
    """One size-``m`` set per class member: the member plus ``m - 1`` classmates."""
    rows = pool.members[y]
    sets = []
    for r in rows:
        others = rows[rows != r]
        extra = m - 1
        if extra == 0:
            pick = np.array([r])
        elif len(others) == 0:
            pick = np.full(m, r)
        elif len(others) >= extra:
            pick = np.concatenate([[r], others[rng.choice(len(others), size=extra, replace=False)]])
        else:
            pick = np.concatenate([[r], others[rng.integers(0, len(others), size=extra)]])
        sets.append(pool.examples.images[pick])
    return sets


def compute_cluster_means(model, pool, m, rng, batch=EVAL_BATCH):
    """Per-class mean of ``r`` over member-anchored complementary sets of size ``m``."""
    K = pool.n_classes
    means = np.zeros((K, model.arch.latent_r))
    counts = np.zeros(K, dtype=np.int64)
    for y in range(K):
        if pool.size(y) == 0:
            raise ValueError(f"class {y} has no examples for its cluster mean")
        sets = member_sets(pool, y, m, rng)
        rs = []
        with T.no_grad():
            for i in range(0, len(sets), batch):
                rs.append(model.encode_invariant(sets[i : i + batch]).data)
        means[y] = np.mean(np.concatenate(rs, axis=0), axis=0)
        counts[y] = len(sets)
    return ClusterMeans(means, counts, m)


def distance_probs(embeddings, means):
    """``softmax(-||e - mean_y||^2)`` row-wise."""
    emb = np.asarray(embeddings, dtype=np.float64)
    mu = means.means if isinstance(means, ClusterMeans) else np.asarray(means, dtype=np.float64)
    d2 = np.sum((emb[:, None, :] - mu[None, :, :]) ** 2, axis=2)
    logits = -d2
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


def distance_classify(model, x, means):
    emb = invariant_embeddings(model, np.asarray(x, dtype=np.float64))
    probs = distance_probs(emb, means)
    with np.errstate(divide="ignore"):
        logp = np.log(probs)
    return LabelPosterior(Tensor(probs), Tensor(np.maximum(logp, np.log(np.finfo(float).tiny))))


def evaluate_distance(model, pool, examples, m, rng):
    if len(examples) == 0:
        raise ValueError("cannot evaluate on an empty split")
    means = compute_cluster_means(model, pool, m, rng)
    probs = distance_probs(invariant_embeddings(model, examples.images), means)
    return ClassificationReport.from_predictions(examples.labels, probs.argmax(axis=1), pool.n_classes), means


def evaluate_label_posterior(model, examples, batch=EVAL_BATCH):
    preds = []
    with T.no_grad():
        for i in range(0, len(examples), batch):
            q = model.predict_label_posterior(examples.images[i : i + batch], training=False)
            preds.append(q.probs.data.argmax(axis=1))
    pred = np.concatenate(preds) if preds else np.zeros(0, dtype=np.intp)
    return ClassificationReport.from_predictions(examples.labels, pred, model.arch.n_classes)


# ----------------------------------------------------------------------------
# neural classification heads
# ----------------------------------------------------------------------------


class NeuralClassifier:
    """Two dropout dense layers and a softmax output, optionally behind an image backbone.

    With ``arch`` given the input is images and the network is the invariant
    encoder's backbone and dense layer followed by the head (the end-to-end
    benchmark); otherwise the input is precomputed embedding vectors.
    """

    def __init__(self, n_in, n_classes, rng, hidden=(128, 64), rate=0.5, arch=None):
        self.store = ParameterStore()
        self.rate = rate
        self.backbone = None
        if arch is not None:
            e1 = arch.inv_hidden[0]
            self.backbone = make_backbone(self.store, "bench/backbone", arch.image_shape, arch.backbone_config(), e1, rng)
            n_in = e1
        h1, h2 = hidden
        self.h1 = Dense(self.store, "head/h1", n_in, h1, rng)
        self.h2 = Dense(self.store, "head/h2", h1, h2, rng)
        self.out = Dense(self.store, "head/out", h2, n_classes, rng)

    def logits(self, x, training=False, rng=None):
        h = encode_image(self.backbone, x) if self.backbone is not None else T.as_tensor(x)
        h = dropout(T.relu(self.h1(h)), self.rate, training, rng)
        h = dropout(T.relu(self.h2(h)), self.rate, training, rng)
        return self.out(h)

    def fit(self, x, y, epochs, rng, batch_size=32, lr=1e-3):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.intp)
        K = self.out.n_out
        state = AdamState.for_params(self.store, lr=lr)
        for _ in range(epochs):
            order = rng.permutation(len(y))
            for i in range(0, len(y), batch_size):
                idx = order[i : i + batch_size]
                self.store.zero_grad()
                logp = T.log_softmax(self.logits(x[idx], training=True, rng=rng))
                loss = -T.reduce_sum(logp * Tensor(np.eye(K)[y[idx]])) / float(len(idx))
                T.backward(loss)
                adam_step(self.store, collect_grads(self.store, state.names), state)
        return self

    def predict(self, x, batch=EVAL_BATCH):
        x = np.asarray(x, dtype=np.float64)
        out = []
        with T.no_grad():
            for i in range(0, len(x), batch):
                out.append(self.logits(x[i : i + batch]).data.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.intp)


def neural_classify_head(train_x, train_y, test_x, test_y, n_classes, seed, epochs=50,
                         arch=None, batch_size=32, lr=1e-3):
    """Train a dropout classifier and report its test error.

    Pass embeddings (and ``arch=None``) for a head on frozen ``f(x)``, or
    images with ``arch`` for the end-to-end benchmark classifier.
    """
    rng = np.random.default_rng(seed)
    train_x = np.asarray(train_x, dtype=np.float64)
    n_in = train_x.shape[1] if arch is None else None
    clf = NeuralClassifier(n_in, n_classes, rng, arch=arch)
    clf.fit(train_x, train_y, epochs, rng, batch_size=batch_size, lr=lr)
    return ClassificationReport.from_predictions(test_y, clf.predict(test_x), n_classes)


# ----------------------------------------------------------------------------
# generative probes
# ----------------------------------------------------------------------------


def _decode_means(model, r, v):
    with T.no_grad():
        return model.decode(Tensor(r), Tensor(v)).params.data


def _posterior_mean(model, r, x):
    with T.no_grad():
        return model.encode_equivariant(Tensor(r), x).mu.data


def tile(cells):
    """``[rows, cols, C, H, W] -> [C, rows*H, cols*W]``."""
    rows, cols, C, H, W = cells.shape
    return cells.transpose(2, 0, 3, 1, 4).reshape(C, rows * H, cols * W)


def generate_prior_samples(model, means, n, rng):
    """Grid with one column per class and ``n`` rows of ``decode(mean_y, v ~ N(0, I))``."""
    K, D = means.n_classes, model.arch.latent_v
    v = rng.standard_normal((n, D))
    cells = np.empty((n, K) + model.arch.image_shape)
    for y in range(K):
        cells[:, y] = _decode_means(model, np.repeat(means.means[y : y + 1], n, axis=0), v)
    return tile(cells)


def interpolate(model, x_a, y_a, x_b, y_b, steps, means):
    """Frames decoded along the straight line between two posterior means at fixed ``r``."""
    if y_a != y_b:
        raise ValueError(f"interpolation endpoints belong to classes {y_a} and {y_b}")
    if steps < 2:
        raise ValueError("need at least 2 interpolation steps")
    r = means.means[y_a : y_a + 1]
    mu = _posterior_mean(model, np.repeat(r, 2, axis=0), np.stack([x_a, x_b]))
    t = np.linspace(0.0, 1.0, steps)[:, None]
    path = (1.0 - t) * mu[0] + t * mu[1]
    return _decode_means(model, np.repeat(r, steps, axis=0), path)


def reconstruct(model, examples, means, labels):
    """Decode each example at its class mean and its posterior mean."""
    r = means.means[np.asarray(labels, dtype=np.intp)]
    return _decode_means(model, r, _posterior_mean(model, r, examples))


def style_transfer_grid(model, examples, means):
    """Cell ``(i, j)`` decodes class ``i``'s mean with example ``j``'s style.

    ``examples[j]`` must be an example of class ``j``. Each column is decoded
    as one batch of ``K`` rows, the same batch shape :func:`reconstruct` uses,
    so the diagonal matches it bit for bit.
    """
    examples = np.asarray(examples, dtype=np.float64)
    K = means.n_classes
    if len(examples) != K:
        raise ValueError(f"need one example per class ({K}), got {len(examples)}")
    v = _posterior_mean(model, means.means, examples)
    cells = np.empty((K, K) + model.arch.image_shape)
    for j in range(K):
        cells[:, j] = _decode_means(model, means.means, np.repeat(v[j : j + 1], K, axis=0))
    return cells


def latent_grid_points(resolution, extent=2.0):
    if resolution == 1:
        return np.zeros(1)
    return -extent + np.arange(resolution) * (2.0 * extent / (resolution - 1))


def latent_grid(model, y, means, resolution=7, extent=2.0):
    """Decode ``mean_y`` over an evenly spaced ``v`` grid on ``[-extent, extent]^2``."""
    if model.arch.latent_v != 2:
        raise ValueError(f"latent grid needs a 2-d equivariant latent, model has {model.arch.latent_v}")
    pts = latent_grid_points(resolution, extent)
    v = np.array([[a, b] for a in pts for b in pts])
    r = np.repeat(means.means[y : y + 1], len(v), axis=0)
    return _decode_means(model, r, v).reshape((resolution, resolution) + model.arch.image_shape)


# ----------------------------------------------------------------------------
# image and embedding files
# ----------------------------------------------------------------------------


def to_bytes(grid, normalize=False):
    g = np.asarray(grid, dtype=np.float64)
    if normalize:
        lo, hi = g.min(), g.max()
        g = (g - lo) / (hi - lo) if hi > lo else np.zeros_like(g)
    return np.clip(np.round(g * 255.0), 0, 255).astype(np.uint8)


def write_image(path, grid, normalize=False):
    """Write ``[C, H, W]`` as binary PGM (C=1) or PPM (C=3)."""
    grid = np.asarray(grid)
    if grid.ndim == 2:
        grid = grid[None]
    C, H, W = grid.shape
    if C not in (1, 3):
        raise ValueError(f"can only write 1- or 3-channel images, got {C}")
    data = to_bytes(grid, normalize)
    with open(path, "wb") as fh:
        fh.write(f"{'P5' if C == 1 else 'P6'}\n{W} {H}\n255\n".encode("ascii"))
        fh.write(data[0].tobytes() if C == 1 else data.transpose(1, 2, 0).tobytes())


def read_image(path):
    """Read back a binary PGM/PPM written by :func:`write_image` as ``[C, H, W]`` uint8."""
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    kind, (W, H), body = parts[0], map(int, parts[1].split()), parts[3]
    C = 1 if kind == b"P5" else 3
    arr = np.frombuffer(body, dtype=np.uint8).reshape(H, W, C)
    return arr.transpose(2, 0, 1)


def export_embeddings(model, examples, path, means=None, batch=EVAL_BATCH):
    """CSV rows ``id, label, r_0..r_{Dr-1}, v_0..v_{Dv-1}``.

    ``r`` is ``f(x)``; ``v`` is the posterior mean given the example's class
    mean when ``means`` is supplied, else given ``f(x)``.
    """
    Dr, Dv = model.arch.latent_r, model.arch.latent_v
    header = ["id", "label"] + [f"r{i}" for i in range(Dr)] + [f"v{i}" for i in range(Dv)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(0, len(examples), batch):
            x = examples.images[i : i + batch]
            lab = examples.labels[i : i + batch]
            r = invariant_embeddings(model, x, batch)
            cond = means.means[lab] if means is not None else r
            v = _posterior_mean(model, cond, x)
            for j in range(len(x)):
                w.writerow([int(examples.ids[i + j]), int(lab[j])] + [repr(float(a)) for a in r[j]] + [repr(float(a)) for a in v[j]])
