import numpy as np
import pytest

from equivae.data import ExampleSet, SyntheticSpec, build_class_pools, synth_generate
from equivae.model import Architecture, EquiVAE


def toy_arch(**kw):
    """Tiny MLP model: 3 classes, 4x4 images, 2-d latents."""
    base = dict(
        image_shape=(1, 4, 4),
        n_classes=3,
        latent_r=2,
        latent_v=2,
        backbone="mlp",
        mlp_hidden=[6],
        inv_hidden=(5, 4),
        cov_hidden=(5, 4),
        decoder_hidden=(4, 5),
        ypost_hidden=(5, 4),
    )
    base.update(kw)
    return Architecture(**base)


def toy_conv_arch(**kw):
    base = dict(
        image_shape=(1, 6, 6),
        n_classes=2,
        latent_r=2,
        latent_v=2,
        backbone="conv",
        conv_filters=(2, 3),
        conv_strides=(1, 2),
        kernel_size=3,
        decoder_filters=(2,),
        inv_hidden=(4, 3),
        cov_hidden=(3, 3),
        decoder_hidden=(3, 4),
        ypost_hidden=(3, 3),
    )
    base.update(kw)
    return Architecture(**base)


def toy_examples(n=12, n_classes=3, shape=(1, 4, 4), seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % n_classes
    return ExampleSet(rng.uniform(0.05, 0.95, size=(n,) + shape), labels, np.arange(n))


@pytest.fixture
def toy_model():
    return EquiVAE(toy_arch(), np.random.default_rng(0))


@pytest.fixture
def toy_pool():
    return build_class_pools(toy_examples(), 3)


@pytest.fixture(scope="session")
def small_synth():
    spec = SyntheticSpec(n_classes=3, size=8, n_train=120, n_test=30, seed=1)
    return synth_generate(spec)


# criterion id ("6", "6b", ...) -> (status, title, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.rstrip("abcdefgh")), k)):
        status, title, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key:<4} {status:<5} {title}: {detail}")
