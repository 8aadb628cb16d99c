"""``equivae`` command line: train, eval, generate, embed.

Every command validates its JSON config against the bundled schema, fills
defaults, and prints the resolved config before doing any work. All
randomness comes from the config seed through the named streams ``data``,
``init``, ``train`` and ``eval``.
"""

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import fields
from importlib import resources

import jsonschema
import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    DatasetSplit,
    ExampleSet,
    IdxFormatError,
    PoolError,
    SyntheticSpec,
    build_class_pools,
    load_idx,
    make_semi_split,
    synth_generate,
)
from .evaluate import (
    ClassificationReport,
    compute_cluster_means,
    distance_probs,
    evaluate_label_posterior,
    export_embeddings,
    generate_prior_samples,
    interpolate,
    invariant_embeddings,
    latent_grid,
    style_transfer_grid,
    tile,
    write_image,
)
from .model import Architecture, EquiVAE
from .training import TrainConfig, rng_stream, train

log = logging.getLogger("equivae")

PROBES = ("prior-samples", "interpolate", "style-grid", "latent-grid")
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

CHECKPOINT_NAME = "checkpoint.eqv"
METRICS_NAME = "metrics.jsonl"
SNAPSHOT_NAME = "config.json"
REPORT_NAME = "report.json"

EVAL_DEFAULTS = {
    "m": 5,
    "probes": [],
    "n_samples": 8,
    "interpolate_steps": 8,
    "latent_grid_resolution": 7,
    "latent_grid_extent": 2.0,
}
IDX_DEFAULTS = {"validation": 5000, "max_train": None, "n_classes": 10}


class UsageError(Exception):
    """Bad invocation or invalid config; exit status 2."""


def load_schema():
    return json.loads(resources.files("equivae").joinpath("config_schema.json").read_text())


def validate_config(cfg):
    try:
        jsonschema.validate(cfg, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError(f"invalid config at {where}: {exc.message}") from None


def _dataclass_defaults(cls, skip=()):
    obj = cls()
    return {f.name: getattr(obj, f.name) for f in fields(cls) if f.name not in skip}


def _jsonable(d):
    return json.loads(json.dumps(d, default=list))


def resolve_config(cfg, base_dir="."):
    """Validate ``cfg`` and return a copy with every default filled in.

    Relative IDX paths are made absolute against ``base_dir`` so the
    snapshot works from anywhere.
    """
    validate_config(cfg)
    cfg = copy.deepcopy(cfg)
    out = {
        "seed": cfg.get("seed", 0),
        "output_dir": cfg.get("output_dir", "equivae-run"),
        "mode": cfg.get("mode", "supervised"),
        "n_labelled": cfg.get("n_labelled"),
    }
    ds = cfg.get("dataset", {"kind": "synthetic"})
    if ds["kind"] == "synthetic":
        base = _dataclass_defaults(SyntheticSpec)
        base["seed"] = None
    else:
        base = dict(IDX_DEFAULTS)
        for k in ("train_images", "train_labels", "test_images", "test_labels"):
            ds[k] = os.path.abspath(os.path.join(base_dir, ds[k]))
    base.update(ds)
    out["dataset"] = base

    arch = _dataclass_defaults(Architecture, skip=("image_shape", "n_classes"))
    arch.update(cfg.get("architecture", {}))
    out["architecture"] = arch
    tr = _dataclass_defaults(TrainConfig, skip=("mode", "seed", "eval_m"))
    tr["milestones"] = None
    tr["classifier_term"] = None
    tr.update(cfg.get("training", {}))
    out["training"] = tr
    ev = dict(EVAL_DEFAULTS)
    ev.update(cfg.get("evaluation", {}))
    out["evaluation"] = ev

    if out["mode"] == "semi" and out["n_labelled"] is None:
        raise UsageError("invalid config: semi mode needs n_labelled")
    out = _jsonable(out)
    validate_config(out)
    return out


def read_config(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    return resolve_config(cfg, os.path.dirname(os.path.abspath(path)))


def echo_config(cfg, stream=None):
    print(json.dumps(cfg, indent=2, sort_keys=True), file=stream or sys.stdout)


# ----------------------------------------------------------------------------
# building blocks
# ----------------------------------------------------------------------------


def data_seed(cfg):
    return int(rng_stream(cfg["seed"], "data").integers(2**31))


def build_dataset(cfg):
    """The configured :class:`DatasetSplit`, labelled/unlabelled per ``n_labelled``."""
    ds = cfg["dataset"]
    seed = data_seed(cfg)
    if ds["kind"] == "synthetic":
        spec_kw = {k: v for k, v in ds.items() if k != "kind"}
        if spec_kw["seed"] is None:
            spec_kw["seed"] = seed
        split = synth_generate(SyntheticSpec(**spec_kw))
        n_classes = ds["n_classes"]
    else:
        n_classes = ds["n_classes"]
        train_all = load_idx(ds["train_images"], ds["train_labels"])
        test = load_idx(ds["test_images"], ds["test_labels"])
        n_val = ds["validation"]
        if n_val >= len(train_all):
            raise ValueError(f"validation size {n_val} leaves no training data")
        n_fit = len(train_all) - n_val
        val = train_all.subset(np.arange(n_fit, len(train_all)))
        fit_rows = np.arange(n_fit)
        if ds["max_train"] is not None and ds["max_train"] < n_fit:
            fit_rows = np.sort(np.random.default_rng(seed).choice(n_fit, ds["max_train"], replace=False))
        test = ExampleSet(test.images, test.labels, test.ids + len(train_all))
        split = DatasetSplit(train_all.subset(fit_rows), ExampleSet.empty(test.image_shape), val, test)
    if cfg["n_labelled"] is not None:
        split = make_semi_split(split.train_labelled, cfg["n_labelled"], seed, n_classes,
                                validation=split.validation, test=split.test)
    return split, n_classes


def build_architecture(cfg, image_shape, n_classes):
    return Architecture(image_shape=tuple(image_shape), n_classes=n_classes, **cfg["architecture"])


def build_train_config(cfg):
    return TrainConfig(mode=cfg["mode"], seed=cfg["seed"], eval_m=cfg["evaluation"]["m"], **cfg["training"])


def cluster_means_for(model, split, cfg, seed=None):
    pool = build_class_pools(split.train_labelled, model.arch.n_classes)
    seed = cfg["seed"] if seed is None else seed
    return compute_cluster_means(model, pool, cfg["evaluation"]["m"], rng_stream(seed, "eval"))


def restore(checkpoint_path):
    """Model, resolved config and stored cluster means from a checkpoint.

    The stored config keeps the training seed, so the dataset is rebuilt
    exactly as it was; a ``--seed`` override only reseeds the eval streams.
    """
    try:
        ck = load_checkpoint(checkpoint_path)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {checkpoint_path}") from None
    cfg = ck.config
    arch = Architecture(**ck.architecture)
    model = EquiVAE(arch, rng_stream(cfg["seed"], "init"))
    model.store.load_state(ck.arrays)
    return model, cfg, ck.cluster_means


def _outdir(cfg, out):
    d = out or cfg["output_dir"]
    os.makedirs(d, exist_ok=True)
    return d


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def cmd_train(config_path, out=None, seed=None):
    """Train per the config; returns the output directory."""
    cfg = read_config(config_path)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["output_dir"] = out
    if cfg["dataset"]["kind"] == "synthetic" and cfg["dataset"]["seed"] is None:
        cfg["dataset"]["seed"] = data_seed(cfg)
    echo_config(cfg)
    d = _outdir(cfg, None)
    with open(os.path.join(d, SNAPSHOT_NAME), "w") as fh:
        fh.write(json.dumps(cfg, indent=2, sort_keys=True) + "\n")

    split, n_classes = build_dataset(cfg)
    arch = build_architecture(cfg, split.train_labelled.image_shape, n_classes)
    model = EquiVAE(arch, rng_stream(cfg["seed"], "init"))
    log.info("model has %d parameters", model.store.num_params())
    train(model, split, build_train_config(cfg), metrics_path=os.path.join(d, METRICS_NAME))
    means = cluster_means_for(model, split, cfg)
    save_checkpoint(os.path.join(d, CHECKPOINT_NAME), model.store.state(), arch.to_dict(), cfg, means)
    for probe in cfg["evaluation"]["probes"]:
        run_probe(model, cfg, means, probe, d, split)
    return d


def cmd_eval(checkpoint_path, out=None, config_path=None, seed=None):
    """Distance-classify the test split with cluster means from the train split."""
    model, cfg, _ = restore(checkpoint_path)
    if config_path is not None:
        cfg = read_config(config_path)
    echo_config(cfg)
    split, _ = build_dataset(cfg)
    if len(split.test) == 0:
        raise ValueError("test split is empty; nothing to evaluate")
    means = cluster_means_for(model, split, cfg, seed)
    probs = distance_probs(invariant_embeddings(model, split.test.images), means)
    report = ClassificationReport.from_predictions(split.test.labels, probs.argmax(axis=1), model.arch.n_classes)
    doc = report.to_dict()
    doc["classifier"] = "distance"
    if cfg["mode"] == "semi":
        doc["label_posterior_error_rate"] = evaluate_label_posterior(model, split.test).error_rate
    d = _outdir(cfg, out)
    path = os.path.join(d, REPORT_NAME)
    with open(path, "w") as fh:
        fh.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    log.info("test error %.4f on %d examples", report.error_rate, report.n)
    return path


def _one_per_class(examples, n_classes):
    rows = []
    for y in range(n_classes):
        idx = np.flatnonzero(examples.labels == y)
        if len(idx) == 0:
            raise ValueError(f"no example of class {y} available for the probe")
        rows.append(idx[0])
    return examples.images[np.array(rows)]


def _probe_examples(split):
    return split.test if len(split.test) else split.train_labelled


def run_probe(model, cfg, means, probe, out_dir, split=None, class_id=0, n=None, seed=None):
    """Write the image(s) for one probe; returns the list of paths."""
    if probe not in PROBES:
        raise UsageError(f"unknown probe {probe!r}; valid probes: {', '.join(PROBES)}")
    ev = cfg["evaluation"]
    K = model.arch.n_classes
    if not 0 <= class_id < K:
        raise UsageError(f"class {class_id} out of range for {K} classes")
    rng = rng_stream(cfg["seed"] if seed is None else seed, f"eval/{probe}")
    if probe == "latent-grid":
        cells = latent_grid(model, class_id, means, ev["latent_grid_resolution"], ev["latent_grid_extent"])
        path = os.path.join(out_dir, f"latent_grid_class{class_id}.{_ext(model)}")
        write_image(path, tile(cells))
        return [path]
    if probe == "prior-samples":
        path = os.path.join(out_dir, f"prior_samples.{_ext(model)}")
        write_image(path, generate_prior_samples(model, means, n or ev["n_samples"], rng))
        return [path]
    if split is None:
        split, _ = build_dataset(cfg)
    ex = _probe_examples(split)
    if probe == "style-grid":
        cells = style_transfer_grid(model, _one_per_class(ex, K), means)
        path = os.path.join(out_dir, f"style_grid.{_ext(model)}")
        write_image(path, tile(cells))
        return [path]
    idx = np.flatnonzero(ex.labels == class_id)
    if len(idx) < 2:
        raise ValueError(f"interpolation needs two examples of class {class_id}")
    a, b = rng.choice(idx, size=2, replace=False)
    frames = interpolate(model, ex.images[a], class_id, ex.images[b], class_id, ev["interpolate_steps"], means)
    path = os.path.join(out_dir, f"interpolate_class{class_id}.{_ext(model)}")
    write_image(path, tile(frames[None]))
    return [path]


def _ext(model):
    return "pgm" if model.arch.image_shape[0] == 1 else "ppm"


def cmd_generate(checkpoint_path, probe, out=None, seed=None, class_id=0, n=None):
    if probe not in PROBES:
        raise UsageError(f"unknown probe {probe!r}; valid probes: {', '.join(PROBES)}")
    model, cfg, means = restore(checkpoint_path)
    echo_config(cfg)
    split = None
    if means is None or seed is not None:
        split, _ = build_dataset(cfg)
        means = cluster_means_for(model, split, cfg, seed)
    return run_probe(model, cfg, means, probe, _outdir(cfg, out), split, class_id, n, seed)


def cmd_embed(checkpoint_path, split_name="test", out=None):
    model, cfg, means = restore(checkpoint_path)
    echo_config(cfg)
    split, _ = build_dataset(cfg)
    names = {"train": split.train_labelled, "unlabelled": split.train_unlabelled,
             "validation": split.validation, "test": split.test}
    if split_name not in names:
        raise UsageError(f"unknown split {split_name!r}; valid splits: {', '.join(names)}")
    if means is None:
        means = cluster_means_for(model, split, cfg)
    path = os.path.join(_outdir(cfg, out), f"embeddings_{split_name}.csv")
    export_embeddings(model, names[split_name], path, means)
    return path


# ----------------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="equivae", description="Invariant-equivariant VAE experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--seed", type=int)

    e = sub.add_parser("eval", help="distance-classifier error on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="override the config stored in the checkpoint")
    e.add_argument("--out")
    e.add_argument("--seed", type=int)

    g = sub.add_parser("generate", help="write probe images")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--probe", required=True, choices=PROBES)
    g.add_argument("--out")
    g.add_argument("--seed", type=int)
    g.add_argument("--class", dest="class_id", type=int, default=0, help="class for interpolate / latent-grid")
    g.add_argument("--n", type=int, help="rows of prior samples")

    m = sub.add_parser("embed", help="export invariant and equivariant embeddings as CSV")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--split", default="test", choices=("train", "unlabelled", "validation", "test"))
    m.add_argument("--out")
    return p


def configure_logging():
    level = os.environ.get("EQUIVAE_LOG", "info").lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"EQUIVAE_LOG must be one of {', '.join(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    T.set_debug(level == "debug")


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        configure_logging()
        if args.command == "train":
            cmd_train(args.config, args.out, args.seed)
        elif args.command == "eval":
            cmd_eval(args.checkpoint, args.out, args.config, args.seed)
        elif args.command == "generate":
            cmd_generate(args.checkpoint, args.probe, args.out, args.seed, args.class_id, args.n)
        else:
            cmd_embed(args.checkpoint, args.split, args.out)
    except UsageError as exc:
        print(f"equivae: error: {exc}", file=sys.stderr)
        return 2
    except (T.NonFiniteError, CheckpointError, IdxFormatError, PoolError, ValueError, OSError) as exc:
        print(f"equivae: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
