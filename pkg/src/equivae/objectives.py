"""Likelihoods, divergences and the labelled / unlabelled / semi-supervised ELBOs.

All per-example quantities are ``[B]`` tensors; the optimiser minimises the
negative of :attr:`ElboTerms.total` summed over the batch.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import reparameterize
from .tensor import ContractError, Tensor

LOG_2PI = float(np.log(2.0 * np.pi))


class InfiniteDivergenceError(ValueError):
    pass


@dataclass
class ClassPrior:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"class prior must be a simplex vector, got {p}")
        self.probs = p

    @classmethod
    def from_labels(cls, labels, n_classes):
        counts = np.bincount(np.asarray(labels, dtype=np.intp), minlength=n_classes).astype(np.float64)
        return cls(counts / counts.sum())

    @classmethod
    def uniform(cls, n_classes):
        return cls(np.full(n_classes, 1.0 / n_classes))

    @property
    def n_classes(self):
        return len(self.probs)

    def log_prob(self, y):
        p = self.probs[np.asarray(y, dtype=np.intp)]
        with np.errstate(divide="ignore"):
            return np.log(p)


@dataclass
class ElboTerms:
    reconstruction: Tensor
    kl_v: Tensor
    log_prior_y: Tensor
    kl_y: Tensor
    classifier_term: Tensor
    total: Tensor

    FIELDS = ("reconstruction", "kl_v", "log_prior_y", "kl_y", "classifier_term", "total")

    @classmethod
    def combine(cls, reconstruction, kl_v, log_prior_y=None, kl_y=None, classifier_term=None):
        zeros = Tensor(np.zeros(reconstruction.shape))
        log_prior_y = zeros if log_prior_y is None else T.as_tensor(log_prior_y)
        kl_y = zeros if kl_y is None else kl_y
        classifier_term = zeros if classifier_term is None else classifier_term
        total = reconstruction - kl_v + log_prior_y - kl_y + classifier_term
        return cls(reconstruction, kl_v, log_prior_y, kl_y, classifier_term, total)

    def sums(self):
        """Per-field sums over the batch as floats."""
        return {f: float(np.sum(getattr(self, f).data)) for f in self.FIELDS}

    @property
    def batch_size(self):
        return self.total.shape[0]


# ----------------------------------------------------------------------------
# likelihoods and divergences
# ----------------------------------------------------------------------------


def _batch_sum(t):
    return T.reduce_sum(t, axes=tuple(range(1, t.ndim)))


def bernoulli_loglik(means, target):
    """Per-example ``sum_pixels t log m + (1 - t) log(1 - m)``, log-guarded."""
    means = T.as_tensor(means)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if means.shape != target.shape:
        raise T.DimensionError(f"means {means.shape} vs target {target.shape}")
    t = Tensor(target)
    ll = t * T.log(means, guard=True) + (1.0 - t) * T.log(1.0 - means, guard=True)
    return _batch_sum(ll)


def gaussian_loglik(means, log_var, target):
    """Per-example ``sum_pixels -0.5 [(t - m)^2 / exp(log_var) + log_var + log 2 pi]``."""
    means = T.as_tensor(means)
    log_var = T.as_tensor(log_var)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if means.shape != target.shape:
        raise T.DimensionError(f"means {means.shape} vs target {target.shape}")
    resid = T.square(Tensor(target) - means)
    ll = -0.5 * (resid / T.exp(log_var) + log_var + LOG_2PI)
    return _batch_sum(ll)


def reconstruction_loglik(decoded, target):
    if decoded.kind == "bernoulli":
        return bernoulli_loglik(decoded.params, target)
    return gaussian_loglik(decoded.params, decoded.log_var, target)


def kl_gaussian_to_unit(post):
    """Per-example ``KL[N(mu, sigma^2) || N(0, I)]``."""
    mu, ls = post.mu, post.log_sigma
    per_dim = T.square(mu) + T.exp(2.0 * ls) - 1.0 - 2.0 * ls
    return 0.5 * T.reduce_sum(per_dim, axes=1)


def kl_categorical(q, prior):
    """Per-example ``sum_y q_y log(q_y / p_y)`` with ``0 log 0 = 0``.

    ``q`` is a :class:`LabelPosterior` or a plain ``[B, K]`` probability array.
    """
    p = prior.probs if isinstance(prior, ClassPrior) else np.asarray(prior, dtype=np.float64)
    if hasattr(q, "log_probs"):
        probs, log_q = q.probs, q.log_probs
    else:
        probs = T.as_tensor(q)
        with np.errstate(divide="ignore"):
            log_q = Tensor(np.where(probs.data > 0, np.log(np.where(probs.data > 0, probs.data, 1.0)), 0.0))
    if np.any((p == 0) & np.any(probs.data > 0, axis=0)):
        raise InfiniteDivergenceError("prior assigns zero mass to a class the posterior supports")
    with np.errstate(divide="ignore"):
        log_p = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), 0.0)
    live = Tensor((probs.data > 0).astype(np.float64))
    return T.reduce_sum(probs * (log_q - Tensor(log_p)) * live, axes=1)


# ----------------------------------------------------------------------------
# ELBOs
# ----------------------------------------------------------------------------


def _check_exclusion(target_ids, set_ids):
    if target_ids is None or set_ids is None:
        return
    for tid, ids in zip(target_ids, set_ids):
        if tid in set(np.asarray(ids).tolist()):
            raise ContractError(f"complementary set for example {tid} contains the example itself")


def labelled_elbo(model, x, y, sets, eps, prior, classifier_term=False,
                  target_ids=None, set_ids=None, training=False, rng=None):
    """Single-sample labelled bound per example.

    ``reconstruction - kl_v + log p(y)``, plus ``log q(y|x)`` when
    ``classifier_term`` is on. ``sets`` are the complementary image sets;
    when ids are supplied they are audited so no set contains its target.
    """
    _check_exclusion(target_ids, set_ids)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    r = model.encode_invariant(sets)
    post = model.encode_equivariant(r, x)
    v = reparameterize(post, eps)
    recon = reconstruction_loglik(model.decode(r, v), x)
    kl_v = kl_gaussian_to_unit(post)
    log_py = Tensor(prior.log_prob(y))
    cls = None
    if classifier_term:
        q = model.predict_label_posterior(x, training=training, rng=rng)
        onehot = Tensor(np.eye(model.arch.n_classes)[y])
        cls = T.reduce_sum(q.log_probs * onehot, axes=1)
    return ElboTerms.combine(recon, kl_v, log_py, None, cls)


def unlabelled_elbo(model, x, class_sets, eps, prior, label_posterior=None,
                    training=False, rng=None):
    """Bound on ``log p(x)`` with exact enumeration over classes.

    ``class_sets[y]`` holds one complementary set per example drawn from the
    class-``y`` labelled pool, and ``eps[y]`` the matching ``[B, D_v]`` noise.
    ``label_posterior`` overrides ``q(y|x)`` (a ``[B, K]`` array or
    :class:`LabelPosterior`).
    """
    x = np.asarray(x, dtype=np.float64)
    K = model.arch.n_classes
    if len(class_sets) != K:
        raise ValueError(f"need complementary sets for all {K} classes, got {len(class_sets)}")
    for yy, sets in enumerate(class_sets):
        if len(sets) == 0 or any(len(s) == 0 for s in sets):
            raise ValueError(f"empty labelled pool for class {yy}")
    if label_posterior is None:
        q = model.predict_label_posterior(x, training=training, rng=rng)
    elif hasattr(label_posterior, "probs"):
        q = label_posterior
    else:
        q = T.as_tensor(label_posterior)
    probs = q.probs if hasattr(q, "probs") else q
    recon_acc, klv_acc = None, None
    for yy in range(K):
        r = model.encode_invariant(class_sets[yy])
        post = model.encode_equivariant(r, x)
        v = reparameterize(post, eps[yy])
        w = _column(probs, yy)
        recon_y = w * reconstruction_loglik(model.decode(r, v), x)
        klv_y = w * kl_gaussian_to_unit(post)
        recon_acc = recon_y if recon_acc is None else recon_acc + recon_y
        klv_acc = klv_y if klv_acc is None else klv_acc + klv_y
    kl_y = kl_categorical(q, prior)
    return ElboTerms.combine(recon_acc, klv_acc, None, kl_y, None)


def _column(probs, k):
    sel = np.zeros((probs.shape[1], 1))
    sel[k, 0] = 1.0
    return T.reshape(T.matmul(probs, Tensor(sel)), (probs.shape[0],))


def semi_supervised_objective(labelled=None, unlabelled=None):
    """Sum of labelled and unlabelled per-example totals.

    Arguments are :class:`ElboTerms` (either may be ``None``); returns a
    scalar tensor.
    """
    parts = [T.reduce_sum(t.total) for t in (labelled, unlabelled) if t is not None and t.batch_size > 0]
    if not parts:
        raise ValueError("semi-supervised objective needs a non-empty labelled or unlabelled batch")
    out = parts[0]
    for p in parts[1:]:
        out = out + p
    return out
