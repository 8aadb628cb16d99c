"""Training loop: batch-size schedule, supervised and semi-supervised epochs, metrics."""

import json
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import build_class_pools, make_labelled_batch, make_unlabelled_batch
from .evaluate import evaluate_distance, evaluate_label_posterior
from .objectives import ClassPrior, ElboTerms, labelled_elbo, semi_supervised_objective, unlabelled_elbo
from .optim import AdamState, adam_step, collect_grads

log = logging.getLogger(__name__)


def rng_stream(seed, name):
    """Independent generator for a named purpose (``data``, ``init``, ``train``, ``eval``...)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


@dataclass
class TrainConfig:
    epochs: int = 30
    initial_batch: int = 32
    max_batch: int = 256
    milestones: list = None
    m_max: int = 7
    mode: str = "supervised"
    classifier_term: bool = None
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_m: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        for b in (self.initial_batch, self.max_batch):
            if b < 32 or b & (b - 1):
                raise ValueError(f"batch sizes must be powers of two >= 32, got {b}")
        if self.mode not in ("supervised", "semi"):
            raise ValueError(f"mode must be 'supervised' or 'semi', got {self.mode!r}")
        if self.m_max < 1:
            raise ValueError("m_max must be >= 1")
        if self.classifier_term is None:
            self.classifier_term = self.mode == "semi"
        if self.milestones is None:
            self.milestones = sorted({self.epochs * q // 4 for q in (1, 2, 3)} - {0})
        self.milestones = [int(e) for e in self.milestones]

    def to_dict(self):
        return asdict(self)


def batch_schedule(epoch, config):
    """``initial_batch * 2**(milestones passed)``, capped at ``max_batch``."""
    passed = sum(1 for e in config.milestones if epoch >= e)
    return min(config.initial_batch * 2**passed, config.max_batch)


@dataclass
class MetricsRecord:
    epoch: int
    batch_size: int
    steps: int
    labelled: dict
    unlabelled: dict = None
    elbo: float = 0.0
    validation_error: float = None
    wall_time: float = field(default=0.0, compare=False)

    def to_json(self):
        """One log line; wall time is left out so logs are reproducible byte for byte."""
        d = asdict(self)
        d.pop("wall_time")
        return json.dumps(d, sort_keys=True)


class _Accumulator:
    def __init__(self):
        self.sums = dict.fromkeys(ElboTerms.FIELDS, 0.0)
        self.n = 0

    def add(self, terms):
        for k, v in terms.sums().items():
            self.sums[k] += v
        self.n += terms.batch_size

    def means(self):
        if self.n == 0:
            return None
        return {k: v / self.n for k, v in self.sums.items()}


def trainable_names(model, config):
    names = model.store.names()
    if config.mode == "supervised" and not config.classifier_term:
        names = [n for n in names if not n.startswith("ypost/")]
    return names


def make_optimizer(model, config):
    return AdamState.for_params(model.store, trainable_names(model, config), lr=config.lr,
                                beta1=config.beta1, beta2=config.beta2, eps=config.eps)


def _step(model, state, loss):
    model.store.zero_grad()
    T.backward(loss)
    adam_step(model.store, collect_grads(model.store, state.names), state)


def run_epoch(model, state, split, config, epoch, rng, prior=None):
    """One pass over the training data; returns the epoch's :class:`MetricsRecord`.

    Supervised mode (or semi mode without unlabelled data) steps through the
    labelled set. Semi mode steps through the unlabelled set, pairing every
    unlabelled mini-batch with a labelled one drawn from a cycling permutation.
    """
    t0 = time.perf_counter()
    K = model.arch.n_classes
    lab = split.train_labelled
    pool = build_class_pools(lab, K)
    prior = prior or ClassPrior.from_labels(lab.labels, K)
    bs = batch_schedule(epoch, config)
    Dv = model.arch.latent_v
    acc_l, acc_u = _Accumulator(), _Accumulator()
    unlab = split.train_unlabelled
    semi = config.mode == "semi" and len(unlab) > 0
    steps = 0

    def lab_terms(rows):
        b = make_labelled_batch(pool, rows, config.m_max, rng)
        eps = rng.standard_normal((len(b), Dv))
        return labelled_elbo(model, b.x, b.y, b.sets, eps, prior, config.classifier_term,
                             target_ids=b.ids, set_ids=b.set_ids, training=True, rng=rng)

    if not semi:
        order = rng.permutation(len(lab))
        for i in range(0, len(lab), bs):
            terms = lab_terms(order[i : i + bs])
            _step(model, state, -semi_supervised_objective(terms, None) / float(terms.batch_size))
            acc_l.add(terms)
            steps += 1
    else:
        lab_bs = min(bs, len(lab))
        lab_order, cursor = rng.permutation(len(lab)), 0
        order = rng.permutation(len(unlab))
        for i in range(0, len(unlab), bs):
            if cursor + lab_bs > len(lab):
                lab_order, cursor = rng.permutation(len(lab)), 0
            lt = lab_terms(lab_order[cursor : cursor + lab_bs])
            cursor += lab_bs
            ub = make_unlabelled_batch(pool, unlab, order[i : i + bs], config.m_max, rng)
            eps = rng.standard_normal((K, len(ub), Dv))
            ut = unlabelled_elbo(model, ub.x, ub.class_sets, eps, prior, training=True, rng=rng)
            n = lt.batch_size + ut.batch_size
            _step(model, state, -semi_supervised_objective(lt, ut) / float(n))
            acc_l.add(lt)
            acc_u.add(ut)
            steps += 1

    total_n = acc_l.n + acc_u.n
    elbo = (acc_l.sums["total"] + acc_u.sums["total"]) / total_n
    val_err = None
    if len(split.validation):
        if config.mode == "semi":
            val_err = evaluate_label_posterior(model, split.validation).error_rate
        else:
            val_err = evaluate_distance(model, pool, split.validation, config.eval_m, rng_stream(config.seed, f"val{epoch}"))[0].error_rate
    rec = MetricsRecord(epoch, bs, steps, acc_l.means(), acc_u.means(), elbo, val_err, time.perf_counter() - t0)
    log.info("epoch %d  batch %d  elbo %.4f  val_err %s  (%.1fs)", epoch, bs, elbo, val_err, rec.wall_time)
    return rec


def train(model, split, config, metrics_path=None, on_epoch=None):
    """Run ``config.epochs`` epochs; returns the list of metrics records."""
    state = make_optimizer(model, config)
    rng = rng_stream(config.seed, "train")
    prior = ClassPrior.from_labels(split.train_labelled.labels, model.arch.n_classes)
    records = []
    fh = open(metrics_path, "w") if metrics_path else None
    try:
        for epoch in range(config.epochs):
            try:
                rec = run_epoch(model, state, split, config, epoch, rng, prior)
            except T.NonFiniteError as exc:
                last = records[-1].epoch if records else None
                raise T.NonFiniteError(f"divergence in epoch {epoch}; last good epoch {last}") from exc
            if not math.isfinite(rec.elbo):
                raise T.NonFiniteError(f"non-finite ELBO in epoch {epoch}")
            records.append(rec)
            if fh:
                fh.write(rec.to_json() + "\n")
                fh.flush()
            if on_epoch:
                on_epoch(rec)
    finally:
        if fh:
            fh.close()
    return records
