import numpy as np
import pytest
import torch

from glico.generative_core import ExtractorConfig, FeatureExtractor
from glico.latent_space import NoiseSpec
from glico.trainer import TrainConfig

torch.set_num_threads(1)

# VGG-16 topology at 1/8 width with native-resolution taps; 32x32 inputs keep
# every tap (down to conv5_2 at 2x2) non-empty.
TINY_EXTRACTOR = ExtractorConfig(weights="random", input_size=32, width=0.125, seed=0)


@pytest.fixture(scope="session")
def tiny_extractor():
    return FeatureExtractor(TINY_EXTRACTOR)


def tiny_config(**overrides) -> TrainConfig:
    """8x8 images, 2-layer generator, 1/8-width extractor."""
    base = dict(
        epochs=1,
        batch_size=5,
        latent_dim=16,
        image_size=8,
        generator_width=16,
        classifier_width=8,
        noise=NoiseSpec(4, 0.1),
        extractor=TINY_EXTRACTOR,
        code_lr=0.05,
        gen_lr=0.01,
        cls_lr=0.01,
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


def blob_images(n_per_class: int = 10, size: int = 8, seed: int = 0):
    """Two visually distinct classes: bright-left vs bright-bottom patterns
    with per-image jitter.  Values in [-1, 1]."""
    rng = np.random.default_rng(seed)
    imgs, labels = [], []
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    for c in range(2):
        for _ in range(n_per_class):
            base = (1 - xx) if c == 0 else yy
            color = rng.uniform(0.3, 1.0, size=3)
            img = base[None] * color[:, None, None] + 0.15 * rng.standard_normal((3, size, size))
            imgs.append(np.clip(img * 2 - 1, -1, 1))
            labels.append(c)
    return torch.tensor(np.stack(imgs), dtype=torch.float32), np.array(labels)


def overfit_config(**overrides) -> TrainConfig:
    """500 full-batch steps on the 20-image blob set."""
    base = dict(epochs=500, batch_size=20, generator_width=32, code_lr=0.1)
    base.update(overrides)
    return tiny_config(**base)


@pytest.fixture(scope="session")
def overfit_run():
    x, y = blob_images(10)
    from glico.trainer import fit

    return fit(overfit_config(), x, y), x, y


# Acceptance verdict lines, collected by tests/test_acceptance.py and echoed
# once at the end of the run so they appear without ``-s``.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
