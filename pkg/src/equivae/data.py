"""Datasets, class pools, complementary-set sampling and the synthetic generator."""

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class PoolError(ValueError):
    pass


@dataclass
class LabelledExample:
    image: np.ndarray
    label: int
    id: int


class ExampleSet:
    """Images ``[N, C, H, W]`` with integer labels and unique ids."""

    def __init__(self, images, labels, ids=None):
        images = np.asarray(images, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be [N, C, H, W], got {images.shape}")
        if len(images) != len(labels):
            raise ValueError(f"{len(images)} images but {len(labels)} labels")
        ids = np.arange(len(images), dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        if len(np.unique(ids)) != len(ids):
            raise ValueError("example ids must be unique")
        self.images, self.labels, self.ids = images, labels, ids

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return LabelledExample(self.images[i], int(self.labels[i]), int(self.ids[i]))

    def subset(self, index):
        index = np.asarray(index, dtype=np.intp)
        return ExampleSet(self.images[index], self.labels[index], self.ids[index])

    @property
    def image_shape(self):
        return self.images.shape[1:]

    @classmethod
    def empty(cls, image_shape):
        return cls(np.zeros((0,) + tuple(image_shape)), np.zeros(0, dtype=np.int64))


@dataclass
class DatasetSplit:
    train_labelled: ExampleSet
    train_unlabelled: ExampleSet
    validation: ExampleSet
    test: ExampleSet

    def __post_init__(self):
        seen = set()
        for part in (self.train_labelled, self.train_unlabelled, self.validation, self.test):
            ids = set(part.ids.tolist())
            if seen & ids:
                raise ValueError("dataset splits share example ids")
            seen |= ids


# ----------------------------------------------------------------------------
# IDX files
# ----------------------------------------------------------------------------


def _read_maybe_gzip(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw, magic, what):
    if len(raw) < 8:
        raise TruncatedFileError(f"{what}: file shorter than an IDX header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise BadMagicError(f"{what}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{what}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    n = int(np.prod(dims))
    if len(raw) - header < n:
        raise TruncatedFileError(f"{what}: expected {n} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=header).reshape(dims)


def load_idx(images_path, labels_path):
    """Read an IDX image/label pair; pixels scaled to [0, 1], shape ``[N, 1, H, W]``."""
    images = _parse_idx(_read_maybe_gzip(images_path), IDX_IMAGES_MAGIC, "images")
    labels = _parse_idx(_read_maybe_gzip(labels_path), IDX_LABELS_MAGIC, "labels")
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images vs {len(labels)} labels")
    return ExampleSet(images[:, None].astype(np.float64) / 255.0, labels.astype(np.int64))


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 images ``[N, H, W]`` and labels ``[N]`` as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


# ----------------------------------------------------------------------------
# class pools and complementary sampling
# ----------------------------------------------------------------------------


class ClassPool:
    """Labelled examples indexed by class.

    ``members[y]`` holds row indices into the backing :class:`ExampleSet`, in
    ascending id order so pools do not depend on input ordering.
    """

    def __init__(self, examples, n_classes=None):
        self.examples = examples
        K = int(examples.labels.max()) + 1 if n_classes is None and len(examples) else (n_classes or 0)
        self.n_classes = K
        self.members = {}
        self._row_of_id = {int(i): r for r, i in enumerate(examples.ids)}
        for y in range(K):
            rows = np.flatnonzero(examples.labels == y)
            self.members[y] = rows[np.argsort(examples.ids[rows], kind="stable")]

    def ids(self, y):
        return self.examples.ids[self.members[y]]

    def size(self, y):
        return len(self.members[y])

    def row(self, example_id):
        return self._row_of_id[int(example_id)]


def build_class_pools(examples, n_classes=None):
    pool = ClassPool(examples, n_classes)
    for y in range(pool.n_classes):
        if pool.size(y) < 2:
            raise PoolError(f"class {y} has {pool.size(y)} labelled examples; at least 2 are required")
    return pool


def sample_complementary(pool, label, exclude_id, m, rng):
    """Draw ``m`` images of class ``label`` not equal to ``exclude_id``.

    Without replacement when the pool is large enough, with replacement
    otherwise. Returns ``(images [m, C, H, W], ids [m])``.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    rows = pool.members.get(label)
    if rows is None:
        raise PoolError(f"no pool for class {label}")
    if exclude_id is not None:
        rows = rows[pool.examples.ids[rows] != exclude_id]
    if len(rows) == 0:
        raise PoolError(f"class {label} pool is empty after excluding example {exclude_id}")
    if len(rows) >= m:
        pick = rows[rng.choice(len(rows), size=m, replace=False)]
    else:
        pick = rows[rng.integers(0, len(rows), size=m)]
    return pool.examples.images[pick], pool.examples.ids[pick]


@dataclass
class LabelledBatch:
    x: np.ndarray
    y: np.ndarray
    ids: np.ndarray
    sets: list
    set_ids: list
    m: np.ndarray

    def __len__(self):
        return len(self.y)


@dataclass
class UnlabelledBatch:
    x: np.ndarray
    ids: np.ndarray
    class_sets: list = field(default_factory=list)
    m: np.ndarray = None

    def __len__(self):
        return len(self.ids)


def make_labelled_batch(pool, rows, m_max, rng):
    """Targets at pool-backing ``rows`` with ``m ~ U{1..m_max}`` complementary sets each."""
    rows = np.asarray(rows, dtype=np.intp)
    if len(rows) < 1:
        raise ValueError("batch_size must be >= 1")
    ex = pool.examples
    ms = rng.integers(1, m_max + 1, size=len(rows))
    sets, set_ids = [], []
    for r, m in zip(rows, ms):
        imgs, ids = sample_complementary(pool, int(ex.labels[r]), int(ex.ids[r]), int(m), rng)
        sets.append(imgs)
        set_ids.append(ids)
    return LabelledBatch(ex.images[rows], ex.labels[rows], ex.ids[rows], sets, set_ids, ms)


def make_unlabelled_batch(pool, examples, rows, m_max, rng):
    """Unlabelled targets with one complementary set per class per example."""
    rows = np.asarray(rows, dtype=np.intp)
    ms = rng.integers(1, m_max + 1, size=len(rows))
    class_sets = []
    for y in range(pool.n_classes):
        class_sets.append([sample_complementary(pool, y, None, int(m), rng)[0] for m in ms])
    return UnlabelledBatch(examples.images[rows], examples.ids[rows], class_sets, ms)


# ----------------------------------------------------------------------------
# splits and preprocessing
# ----------------------------------------------------------------------------


def make_semi_split(examples, n_labelled, seed, n_classes=None, validation=None, test=None):
    """Stratified labelled subset; every other example becomes unlabelled.

    Each class gets ``n_labelled // K`` examples and the first
    ``n_labelled % K`` classes one more.
    """
    K = n_classes or int(examples.labels.max()) + 1
    if n_labelled < 2 * K:
        raise ValueError(f"need at least 2 labelled examples per class ({2 * K}), got {n_labelled}")
    if n_labelled > len(examples):
        raise ValueError(f"n_labelled {n_labelled} exceeds dataset size {len(examples)}")
    rng = np.random.default_rng(seed)
    base, extra = divmod(n_labelled, K)
    chosen = []
    for y in range(K):
        rows = np.flatnonzero(examples.labels == y)
        want = base + (1 if y < extra else 0)
        if len(rows) < want:
            raise ValueError(f"class {y} has only {len(rows)} examples, {want} requested")
        chosen.append(np.sort(rng.choice(rows, size=want, replace=False)))
    lab = np.concatenate(chosen)
    unlab = np.setdiff1d(np.arange(len(examples)), lab)
    empty = ExampleSet.empty(examples.image_shape)
    return DatasetSplit(
        examples.subset(lab),
        examples.subset(unlab),
        validation if validation is not None else empty,
        test if test is not None else empty,
    )


def standardize(images, mean=None, std=None):
    """Per-pixel zero mean / unit std over the dataset; constant pixels get std 1."""
    images = np.asarray(images, dtype=np.float64)
    if mean is None:
        mean = images.mean(axis=0)
    if std is None:
        std = images.std(axis=0)
        std = np.where(std > 0, std, 1.0)
    return (images - mean) / std, mean, std


# ----------------------------------------------------------------------------
# synthetic data
# ----------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    n_classes: int = 4
    size: int = 16
    n_train: int = 2000
    n_validation: int = 0
    n_test: int = 500
    max_rotation: float = 30.0
    max_shift: int = 2
    intensity: tuple = (0.6, 1.0)
    strokes: int = 3
    seed: int = 0

    def __post_init__(self):
        self.intensity = tuple(self.intensity)
        lo, hi = self.intensity
        if not (0 < lo <= hi <= 1):
            raise ValueError("intensity range must satisfy 0 < lo <= hi <= 1")
        if self.n_classes < 1 or self.size < 4 or self.max_rotation < 0 or self.max_shift < 0:
            raise ValueError("invalid synthetic spec")


def _stroke_prototype(rng, size, strokes):
    """A few thick random line segments, smoothed, values in [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size))
    lo, hi = size * 0.2, size * 0.8
    pts = rng.uniform(lo, hi, size=(strokes + 1, 2))
    width = size / 12.0
    for a, b in zip(pts[:-1], pts[1:]):
        d = b - a
        t = np.clip(((yy - a[0]) * d[0] + (xx - a[1]) * d[1]) / max(d @ d, 1e-9), 0.0, 1.0)
        dist2 = (yy - a[0] - t * d[0]) ** 2 + (xx - a[1] - t * d[1]) ** 2
        img = np.maximum(img, np.exp(-dist2 / (2 * width * width)))
    return img / img.max()


def make_prototypes(n_classes, size, strokes, rng, max_cosine=0.7, max_tries=2000):
    """Stroke prototypes, redrawn until pairwise cosine similarity is below ``max_cosine``."""
    protos, units = [], []
    for _ in range(max_tries):
        if len(protos) == n_classes:
            break
        cand = _stroke_prototype(rng, size, strokes)
        unit = cand.ravel() / np.linalg.norm(cand)
        if all(unit @ u < max_cosine for u in units):
            protos.append(cand)
            units.append(unit)
    if len(protos) < n_classes:
        raise ValueError(f"could not draw {n_classes} distinct prototypes")
    return np.stack(protos)


def rotate_bilinear(img, degrees):
    """Rotate about the image centre with bilinear resampling and zero fill."""
    if degrees == 0:
        return img.copy()
    h, w = img.shape
    th = np.deg2rad(degrees)
    c, s = np.cos(th), np.sin(th)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: output pixel -> source coordinate
    sy = c * (yy - cy) - s * (xx - cx) + cy
    sx = s * (yy - cy) + c * (xx - cx) + cx
    y0, x0 = np.floor(sy).astype(int), np.floor(sx).astype(int)
    fy, fx = sy - y0, sx - x0
    padded = np.pad(img, 1)

    def at(yi, xi):
        ok = (yi >= -1) & (yi <= h) & (xi >= -1) & (xi <= w)
        return np.where(ok, padded[np.clip(yi + 1, 0, h + 1), np.clip(xi + 1, 0, w + 1)], 0.0)

    return (
        (1 - fy) * (1 - fx) * at(y0, x0)
        + (1 - fy) * fx * at(y0, x0 + 1)
        + fy * (1 - fx) * at(y0 + 1, x0)
        + fy * fx * at(y0 + 1, x0 + 1)
    )


def shift_image(img, dy, dx):
    out = np.zeros_like(img)
    h, w = img.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


def transform(img, degrees, dy, dx, scale):
    return np.clip(scale * shift_image(rotate_bilinear(img, degrees), dy, dx), 0.0, 1.0)


def synth_examples(spec, prototypes, n, rng, id_offset=0):
    labels = np.arange(n) % spec.n_classes
    rng.shuffle(labels)
    lo, hi = spec.intensity
    images = np.empty((n, 1, spec.size, spec.size))
    for i, y in enumerate(labels):
        deg = rng.uniform(-spec.max_rotation, spec.max_rotation) if spec.max_rotation else 0.0
        dy, dx = rng.integers(-spec.max_shift, spec.max_shift + 1, size=2) if spec.max_shift else (0, 0)
        scale = rng.uniform(lo, hi) if hi > lo else hi
        images[i, 0] = transform(prototypes[y], deg, int(dy), int(dx), scale)
    return ExampleSet(images, labels, np.arange(id_offset, id_offset + n))


def synth_generate(spec):
    """Deterministic synthetic dataset; everything in ``train_labelled``."""
    rng = np.random.default_rng(spec.seed)
    protos = make_prototypes(spec.n_classes, spec.size, spec.strokes, rng)
    train = synth_examples(spec, protos, spec.n_train, rng, 0)
    val = synth_examples(spec, protos, spec.n_validation, rng, spec.n_train)
    test = synth_examples(spec, protos, spec.n_test, rng, spec.n_train + spec.n_validation)
    empty = ExampleSet.empty(train.image_shape)
    return DatasetSplit(train, empty, val, test)
