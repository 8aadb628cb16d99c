"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The lines are printed in the ``acceptance criteria`` section of the pytest
terminal summary. Run just this file with ``pytest tests/test_acceptance.py``.
"""

import functools
import json
import os
import shutil
import struct
import time

import numpy as np
import pytest
from scipy import integrate, stats

from equivae import cli
from equivae import tensor as T
from equivae.data import (
    SyntheticSpec,
    build_class_pools,
    load_idx,
    make_labelled_batch,
    make_semi_split,
    synth_generate,
    write_idx,
)
from equivae.evaluate import (
    compute_cluster_means,
    evaluate_distance,
    evaluate_label_posterior,
    latent_grid,
    latent_grid_points,
    neural_classify_head,
    reconstruct,
    style_transfer_grid,
)
from equivae.gradcheck import check_gradients, numeric_grad, relative_error
from equivae.model import Architecture, EquiVAE, GaussianPosterior
from equivae.objectives import (
    ClassPrior,
    ElboTerms,
    kl_categorical,
    kl_gaussian_to_unit,
    labelled_elbo,
    semi_supervised_objective,
    unlabelled_elbo,
)
from equivae.tensor import Tensor
from equivae.training import TrainConfig, rng_stream, train

from conftest import ACCEPTANCE, toy_arch


def criterion(key, title):
    """Record the outcome of the wrapped test under ``key``.

    The test returns a short detail string on success; any exception is
    recorded as a failure and re-raised.
    """

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs)
            except pytest.skip.Exception as exc:
                ACCEPTANCE[key] = ("SKIP", title, str(exc))
                raise
            except BaseException as exc:
                msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
                ACCEPTANCE[key] = ("FAIL", title, msg[:160])
                raise
            ACCEPTANCE[key] = ("PASS", title, detail or "")

        return run

    return wrap


def toy_batch(seed, B=3, K=3, m=2):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.1, 0.9, size=(B, 1, 4, 4))
    y = np.arange(B) % K
    sets = [rng.uniform(size=(m, 1, 4, 4)) for _ in range(B)]
    class_sets = [[rng.uniform(size=(m, 1, 4, 4)) for _ in range(B)] for _ in range(K)]
    return rng, x, y, sets, class_sets


# ----------------------------------------------------------------------------
# 1. gradients
# ----------------------------------------------------------------------------


def _op_cases(rng):
    def p(*shape, lo=None):
        data = rng.uniform(0.5, 2.0, size=shape) if lo else rng.normal(size=shape)
        return Tensor(data, requires_grad=True)

    def proj(t):
        return T.reduce_sum(T.mul(t, Tensor(np.random.default_rng(1).normal(size=t.shape))))

    a, b = p(3, 4), p(3, 4)
    pos = p(3, 4, lo=True)
    v = p(4)
    m1, m2 = p(3, 5), p(5, 2)
    seg = p(5, 3)
    img, ker, bias = p(2, 2, 5, 5), p(3, 2, 3, 3), p(3)
    timg, tker = p(2, 3, 3, 3), p(3, 2, 3, 3)
    return {
        "add": (lambda: proj(T.add(a, b)), [a, b]),
        "add-broadcast": (lambda: proj(T.add(a, v)), [a, v]),
        "sub": (lambda: proj(T.sub(a, b)), [a, b]),
        "mul": (lambda: proj(T.mul(a, b)), [a, b]),
        "div": (lambda: proj(T.div(a, pos)), [a, pos]),
        "negate": (lambda: proj(T.negate(a)), [a]),
        "exp": (lambda: proj(T.exp(a)), [a]),
        "log": (lambda: proj(T.log(pos)), [pos]),
        "relu": (lambda: proj(T.relu(a)), [a]),
        "sigmoid": (lambda: proj(T.sigmoid(a)), [a]),
        "square": (lambda: proj(T.square(a)), [a]),
        "reduce_sum": (lambda: proj(T.reduce_sum(a, axes=1)), [a]),
        "reduce_mean": (lambda: proj(T.reduce_mean(a, axes=0)), [a]),
        "reshape": (lambda: proj(T.reshape(a, (4, 3))), [a]),
        "concat": (lambda: proj(T.concat([a, b], axis=1)), [a, b]),
        "rows": (lambda: proj(T.rows(a, np.array([2, 0, 2]))), [a]),
        "segment_mean": (lambda: proj(T.segment_mean(seg, [2, 1, 2])), [seg]),
        "matmul": (lambda: proj(T.matmul(m1, m2)), [m1, m2]),
        "log_softmax": (lambda: proj(T.log_softmax(a)), [a]),
        "softmax": (lambda: proj(T.softmax(a)), [a]),
        "conv2d": (lambda: proj(T.conv2d(img, ker, bias, stride=2)), [img, ker, bias]),
        "conv2d_transpose": (lambda: proj(T.conv2d_transpose(timg, tker, None, 2, (5, 5))), [timg, tker]),
    }


@criterion("1", "gradient suite (ops + labelled/unlabelled/semi objectives)")
def test_criterion_1_gradients():
    t0 = time.perf_counter()
    worst = {}
    for name, (fn, ts) in _op_cases(np.random.default_rng(0)).items():
        worst[name] = max(check_gradients(fn, ts))

    model = EquiVAE(toy_arch(), np.random.default_rng(0))
    params = [model.store[n] for n in model.store.names()]
    rng, x, y, sets, class_sets = toy_batch(1)
    eps_l = rng.normal(size=(3, 2))
    eps_u = rng.normal(size=(3, 3, 2))
    prior = ClassPrior(np.array([0.2, 0.3, 0.5]))

    def lab():
        return labelled_elbo(model, x, y, sets, eps_l, prior, classifier_term=True)

    def unlab():
        return unlabelled_elbo(model, x, class_sets, eps_u, prior)

    objectives = {
        "labelled ELBO": lambda: T.reduce_sum(lab().total),
        "unlabelled ELBO": lambda: T.reduce_sum(unlab().total),
        "semi objective": lambda: semi_supervised_objective(lab(), unlab()),
    }
    frozen = model.invariant_embedding(x).data
    for name, fn in objectives.items():
        T.backward(fn())
        analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        model.store.zero_grad()
        # stop-gradient semantics for the oracle: q(y|x) sees f(x) as a constant
        model.invariant_embedding = lambda _x: Tensor(frozen)
        try:
            numeric = numeric_grad(fn, [p.data for p in params])
        finally:
            del model.invariant_embedding
        worst[name] = max(relative_error(a, n) for a, n in zip(analytic, numeric))
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v < 1e-3}
    assert not bad, f"relative error >= 1e-3: {bad}"
    assert elapsed < 60, f"took {elapsed:.1f}s"
    top = max(worst, key=worst.get)
    return f"{len(worst)} checks, worst rel err {worst[top]:.2e} ({top}), {elapsed:.1f}s"


# ----------------------------------------------------------------------------
# 2. KL oracles
# ----------------------------------------------------------------------------


@criterion("2", "KL oracles")
def test_criterion_2_kl_oracles():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        mu, sigma = rng.normal(scale=1.5), rng.uniform(0.2, 3.0)
        q = stats.norm(mu, sigma)
        ref, _ = integrate.quad(lambda z: q.pdf(z) * (q.logpdf(z) - stats.norm.logpdf(z)),
                                mu - 14 * sigma, mu + 14 * sigma, epsabs=1e-12, epsrel=1e-12, limit=200)
        got = kl_gaussian_to_unit(GaussianPosterior(Tensor([[mu]]), Tensor([[np.log(sigma)]]))).data[0]
        worst = max(worst, abs(got - ref))
    assert worst < 1e-6, f"Gaussian KL off quadrature by {worst:.2e}"

    qs = rng.dirichlet(np.ones(4), size=50)
    p = rng.dirichlet(np.ones(4))
    direct = np.array([sum(qi[k] * (np.log(qi[k]) - np.log(p[k])) for k in range(4)) for qi in qs])
    got = kl_categorical(qs, ClassPrior(p)).data
    assert np.array_equal(got, np.sum(qs * (np.log(qs) - np.log(p)), axis=1))
    assert np.max(np.abs(got - direct)) < 1e-15

    mus = rng.normal(scale=3, size=(10_000, 1))
    lss = rng.uniform(-5, 3, size=(10_000, 1))
    kg = kl_gaussian_to_unit(GaussianPosterior(Tensor(mus), Tensor(lss))).data
    kc = kl_categorical(rng.dirichlet(np.full(4, 0.3), size=10_000), ClassPrior(p)).data
    assert kg.min() >= 0 and kc.min() >= 0, (kg.min(), kc.min())
    return f"quadrature max diff {worst:.1e}; categorical exact; 2x10^4 fuzz cases non-negative"


# ----------------------------------------------------------------------------
# 3. lower-bound property
# ----------------------------------------------------------------------------


def _bound_margins(model, pool, examples, rng, n_is=5000, n_elbo=500):
    """(evidence, mean ELBO, standard error) for the first six examples."""
    out = []
    for i in range(6):
        ex = examples[i]
        rows = pool.members[ex.label][pool.ids(ex.label) != ex.id][:3]
        with T.no_grad():
            r = model.encode_invariant([examples.images[rows]]).data
            post = model.encode_equivariant(Tensor(r), ex.image[None])
            mu, sig = post.mu.data[0], np.exp(post.log_sigma.data[0])
            kl = float(kl_gaussian_to_unit(post).data[0])

            def loglik(v):
                means = model.decode(Tensor(np.repeat(r, len(v), axis=0)), Tensor(v)).params.data
                t = ex.image[None]
                return np.sum(t * np.log(means) + (1 - t) * np.log1p(-means), axis=(1, 2, 3))

            v = mu + sig * rng.standard_normal((n_is, len(mu)))
            logw = loglik(v) + stats.norm.logpdf(v).sum(1) - stats.norm(mu, sig).logpdf(v).sum(1)
            evidence = np.logaddexp.reduce(logw) - np.log(n_is)
            draws = loglik(mu + sig * rng.standard_normal((n_elbo, len(mu)))) - kl
        out.append((evidence, draws.mean(), draws.std(ddof=1) / np.sqrt(n_elbo)))
    return out


@criterion("3", "ELBO below importance-weighted evidence")
def test_criterion_3_lower_bound():
    t0 = time.perf_counter()
    spec = SyntheticSpec(n_classes=3, size=4, n_train=150, n_test=0, max_rotation=0, max_shift=1, seed=3)
    split = synth_generate(spec)
    model = EquiVAE(toy_arch(), rng_stream(0, "init"))
    train(model, split, TrainConfig(epochs=3, m_max=3, lr=3e-3))
    pool = build_class_pools(split.train_labelled, 3)
    rng = np.random.default_rng(4)
    states = {"trained": _bound_margins(model, pool, split.train_labelled, rng)}
    # the bound holds for any q; push q away from the prior and make the decoder use v
    s = model.store
    s["cov/mu/b"].data[:] = rng.normal(scale=1.0, size=2)
    s["cov/sigma/b"].data[:] = np.log(0.4)
    s["dec/v/w"].data *= 4.0
    states["shifted q"] = _bound_margins(model, pool, split.train_labelled, rng)
    elapsed = time.perf_counter() - t0
    for name, rows in states.items():
        bad = [row for row in rows if not row[0] > row[1] - 3 * row[2]]
        assert not bad, f"{name}: evidence below ELBO - 3 SE for {bad}"
    assert elapsed < 120, f"took {elapsed:.1f}s"
    gaps = ", ".join(f"{k} {np.mean([e - m for e, m, _ in v]):.3f}" for k, v in states.items())
    return f"12 checks; mean log p(x) - ELBO in nats: {gaps}; {elapsed:.1f}s"


# ----------------------------------------------------------------------------
# 4. degeneracy identities
# ----------------------------------------------------------------------------


@criterion("4", "degeneracy identities")
def test_criterion_4_degeneracy():
    model = EquiVAE(toy_arch(n_classes=1), np.random.default_rng(5))
    rng, x, _, sets, _ = toy_batch(5, K=1)
    eps = rng.normal(size=(3, 2))
    prior = ClassPrior.uniform(1)
    u = unlabelled_elbo(model, x, [sets], eps[None], prior).total.data
    lab = labelled_elbo(model, x, np.zeros(3, dtype=int), sets, eps, prior).total.data
    diff = np.max(np.abs(u - lab))
    assert diff <= 1e-9, diff

    model = EquiVAE(toy_arch(), np.random.default_rng(6))
    rng, x, y, sets, class_sets = toy_batch(6)
    prior = ClassPrior.uniform(3)
    lt = labelled_elbo(model, x, y, sets, rng.normal(size=(3, 2)), prior, classifier_term=True)
    ut = unlabelled_elbo(model, x, class_sets, rng.normal(size=(3, 3, 2)), prior)
    empty = ElboTerms.combine(Tensor(np.zeros(0)), Tensor(np.zeros(0)))
    assert semi_supervised_objective(lt, empty).data == T.reduce_sum(lt.total).data
    assert semi_supervised_objective(empty, ut).data == T.reduce_sum(ut.total).data
    return f"K=1 max diff {diff:.1e}; empty-batch sums exact"


# ----------------------------------------------------------------------------
# 5. invariance suite
# ----------------------------------------------------------------------------


@criterion("5", "invariance suite")
def test_criterion_5_invariance():
    model = EquiVAE(toy_arch(), np.random.default_rng(7))
    rng = np.random.default_rng(7)
    worst = 0.0
    for m in (2, 5, 9):
        s = rng.uniform(size=(m, 1, 4, 4))
        base = model.encode_invariant([s]).data
        for _ in range(10):
            worst = max(worst, np.max(np.abs(model.encode_invariant([s[rng.permutation(m)]]).data - base)))
    assert worst <= 1e-9, worst

    split = synth_generate(SyntheticSpec(n_classes=4, size=16, n_train=2000, n_test=0, seed=0))
    pool = build_class_pools(split.train_labelled, 4)
    order = rng.permutation(len(split.train_labelled))
    hits, checked = 0, 0
    for i in range(0, len(order), 256):
        b = make_labelled_batch(pool, order[i : i + 256], 7, rng)
        for tid, ids in zip(b.ids, b.set_ids):
            hits += int(tid in ids)
            checked += 1
    assert checked == 2000 and hits == 0, (checked, hits)

    x = rng.uniform(size=(4, 1, 4, 4))
    q = model.predict_label_posterior(x)
    model.store.zero_grad()
    T.backward(T.reduce_sum(T.mul(q.log_probs, Tensor(np.eye(3)[[0, 1, 2, 1]]))))
    inv_grads = [p.grad for p in model.store.group("inv").values()]
    assert all(g is None or not np.any(g) for g in inv_grads)
    return f"permutation max diff {worst:.1e}; 0/{checked} self-inclusions; inv grad via stop-gradient exactly 0"


# ----------------------------------------------------------------------------
# 6. supervised learning at desk scale
# ----------------------------------------------------------------------------


def desk_arch(**kw):
    return Architecture(image_shape=(1, 16, 16), n_classes=4, latent_r=8, latent_v=8, backbone="mlp", **kw)


@criterion("6", "desk-scale supervised (synthetic K=4, 2000/500)")
def test_criterion_6_supervised():
    t0 = time.perf_counter()
    split = synth_generate(SyntheticSpec(n_classes=4, size=16, n_train=2000, n_test=500, seed=0))
    model = EquiVAE(desk_arch(), rng_stream(0, "init"))
    recs = train(model, split, TrainConfig(epochs=20, seed=0))
    pool = build_class_pools(split.train_labelled, 4)
    rep, _ = evaluate_distance(model, pool, split.test, 5, rng_stream(0, "eval"))
    elapsed = time.perf_counter() - t0
    kl_v = recs[-1].labelled["kl_v"]
    assert rep.error_rate <= 0.05, f"test error {rep.error_rate:.3f}"
    assert kl_v > 0, f"final kl_v {kl_v}"
    assert elapsed <= 600, f"took {elapsed:.0f}s"
    return f"distance test error {rep.error_rate:.3f}, final kl_v {kl_v:.2f}, {len(recs)} epochs, {elapsed:.0f}s"


MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def _find_mnist():
    root = os.environ.get("EQUIVAE_MNIST_DIR")
    if not root:
        return None
    paths = []
    for name in MNIST_FILES:
        for cand in (name, name + ".gz"):
            if os.path.exists(os.path.join(root, cand)):
                paths.append(os.path.join(root, cand))
                break
        else:
            return None
    return paths


@pytest.mark.slow
@criterion("6b", "reduced MNIST (5000 train, 20 epochs, MLP)")
def test_criterion_6b_reduced_mnist():
    paths = _find_mnist()
    if paths is None:
        pytest.skip("MNIST IDX files not available; set EQUIVAE_MNIST_DIR to run")
    t0 = time.perf_counter()
    train_all = load_idx(paths[0], paths[1])
    test = load_idx(paths[2], paths[3])
    rng = np.random.default_rng(0)
    sub = train_all.subset(np.sort(rng.choice(55_000, 5000, replace=False)))
    from equivae.data import DatasetSplit, ExampleSet

    test = ExampleSet(test.images, test.labels, test.ids + len(train_all))
    split = DatasetSplit(sub, ExampleSet.empty(sub.image_shape), ExampleSet.empty(sub.image_shape), test)
    model = EquiVAE(Architecture(), rng_stream(0, "init"))
    train(model, split, TrainConfig(epochs=20, seed=0))
    rep, _ = evaluate_distance(model, build_class_pools(sub, 10), test, 5, rng_stream(0, "eval"))
    assert rep.error_rate <= 0.08, f"test error {rep.error_rate:.3f}"
    return f"distance test error {rep.error_rate:.3f}, {time.perf_counter() - t0:.0f}s"


# ----------------------------------------------------------------------------
# 7. semi-supervised benefit
# ----------------------------------------------------------------------------


@criterion("7", "desk-scale semi-supervised benefit (40 labels, 3 seeds)")
def test_criterion_7_semi_supervised():
    t0 = time.perf_counter()
    arch = desk_arch()
    gaps, semi_errs, bench_errs = [], [], []
    for seed in (0, 1, 2):
        full = synth_generate(SyntheticSpec(n_classes=4, size=16, n_train=2000, n_test=500, seed=seed))
        split = make_semi_split(full.train_labelled, 40, seed, 4, test=full.test)
        assert len(split.train_unlabelled) == 1960
        lab = split.train_labelled
        bench = neural_classify_head(lab.images, lab.labels, split.test.images, split.test.labels, 4,
                                     seed, epochs=200, arch=arch)
        model = EquiVAE(arch, rng_stream(seed, "init"))
        train(model, split, TrainConfig(epochs=20, mode="semi", seed=seed))
        semi = evaluate_label_posterior(model, split.test)
        semi_errs.append(semi.error_rate)
        bench_errs.append(bench.error_rate)
        gaps.append(bench.error_rate - semi.error_rate)
    elapsed = time.perf_counter() - t0
    margin = float(np.mean(gaps))
    assert margin > 0.02, f"margin {margin:.3f} (semi {semi_errs}, benchmark {bench_errs})"
    assert elapsed <= 1200, f"took {elapsed:.0f}s"
    return (f"semi error {np.mean(semi_errs):.3f} vs benchmark {np.mean(bench_errs):.3f}, "
            f"margin {margin:.3f}, {elapsed:.0f}s")


# ----------------------------------------------------------------------------
# 8. determinism
# ----------------------------------------------------------------------------


@criterion("8", "cmd_train determinism")
def test_criterion_8_determinism(tmp_path):
    out = tmp_path / "run"
    cfg = {
        "seed": 5,
        "output_dir": str(out),
        "dataset": {"kind": "synthetic", "n_classes": 3, "size": 8, "n_train": 90, "n_test": 30},
        "architecture": {"latent_r": 4, "latent_v": 2, "mlp_hidden": [32]},
        "training": {"epochs": 3, "m_max": 3},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    cli.cmd_train(str(path))
    first = tmp_path / "first"
    shutil.copytree(out, first)
    shutil.rmtree(out)
    cli.cmd_train(str(path))
    same = {name: (first / name).read_bytes() == (out / name).read_bytes() for name in ("metrics.jsonl", "checkpoint.eqv")}
    assert all(same.values()), same
    size = (out / "checkpoint.eqv").stat().st_size
    return f"metrics log and {size}-byte checkpoint byte-identical across runs"


# ----------------------------------------------------------------------------
# 9. probe contracts
# ----------------------------------------------------------------------------


@criterion("9", "probe contracts")
def test_criterion_9_probes(tmp_path):
    split = synth_generate(SyntheticSpec(n_classes=3, size=4, n_train=60, n_test=0, seed=9))
    model = EquiVAE(toy_arch(), rng_stream(9, "init"))
    train(model, split, TrainConfig(epochs=2, m_max=3))
    ex = split.train_labelled
    means = compute_cluster_means(model, build_class_pools(ex, 3), 3, np.random.default_rng(0))
    picks = np.array([np.flatnonzero(ex.labels == k)[0] for k in range(3)])
    grid = style_transfer_grid(model, ex.images[picks], means)
    rec = reconstruct(model, ex.images[picks], means, ex.labels[picks])
    assert all(np.array_equal(grid[k, k], rec[k]) for k in range(3))

    pts = latent_grid_points(7)
    assert pts[0] == -2.0 and pts[-1] == 2.0
    cells = latent_grid(model, 0, means)
    assert cells.shape[:2] == (7, 7)
    assert cli.resolve_config({})["evaluation"]["latent_grid_extent"] == 2.0

    img, lab = tmp_path / "img", tmp_path / "lab"
    pixels = bytes([0, 64, 128, 255, 10, 20, 30, 40])
    img.write_bytes(struct.pack(">IIII", 0x803, 2, 2, 2) + pixels)
    lab.write_bytes(struct.pack(">II", 0x801, 2) + bytes([3, 8]))
    loaded = load_idx(img, lab)
    assert loaded.images.shape == (2, 1, 2, 2) and loaded.labels.tolist() == [3, 8]
    np.testing.assert_array_equal(np.round(loaded.images * 255).astype(np.uint8).ravel(), np.frombuffer(pixels, np.uint8))
    write_idx(tmp_path / "img2", tmp_path / "lab2", np.round(loaded.images[:, 0] * 255), loaded.labels)
    assert (tmp_path / "img2").read_bytes() == img.read_bytes()
    assert (tmp_path / "lab2").read_bytes() == lab.read_bytes()
    return "style-grid diagonal bit-exact; latent grid spans [-2, 2]; 2-image IDX fixture round-trips"
