"""Generative latent implicit conditional optimization (GLICO).

Per-image latent codes on the unit sphere are optimized jointly with a
generator and a weak classifier; slerp between same-class codes then
produces new labeled images for small-sample training.
"""

from .data import (
    DatasetManifest,
    SmallSampleSplit,
    load_dataset,
    load_split,
    make_split,
    save_split,
    standard_augment,
)
from .evaluation import (
    DataConfig,
    DownstreamConfig,
    FIDReport,
    RunConfig,
    RunResult,
    ablation_runner,
    aggregate_seeds,
    fid_score,
    run_experiment,
    train_downstream_classifier,
)
from .generative_core import (
    ExtractorConfig,
    FeatureExtractor,
    Generator,
    LossSpec,
    build_classifier,
    combined_loss,
    cross_entropy_loss,
    perceptual_loss,
)
from .latent_space import (
    LatentCodebook,
    NoiseSpec,
    init_hypercube,
    init_random,
    lerp,
    make_generator_input,
    pick_class_partner,
    project_to_sphere,
    slerp,
)
from .sampler import AugmentationPolicy, Synthesizer
from .trainer import GlicoTrainer, TrainConfig, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
