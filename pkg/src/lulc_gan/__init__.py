"""GAN-based augmentation for land-use / land-cover image classification."""

from .classifier import (
    ClassifierTrainConfig,
    EarlyStopping,
    ExperimentResult,
    LULCClassifier,
    build_classifier,
    evaluate,
    train_classifier,
)
from .datasets import (
    EUROSAT_CLASSES,
    AugmentPolicy,
    DatasetIndex,
    ImageBatch,
    ImageRecord,
    denormalize,
    geometric_augment,
    merge_generated,
    normalize_gan,
    prepare_classifier_batch,
    scan_dataset,
    split,
)
from .harness import AblationPlan, build_variants, render_report, run_ablation
from .networks import (
    NetworkSpec,
    build_dcgan_discriminator,
    build_dcgan_generator,
    build_wgan_critic,
    build_wgan_generator,
    init_weights,
    param_count,
)
from .trainer import GanAugmenter, GanCheckpoint, GanTrainConfig, generate_images, sample_grid, train_gan

__version__ = "0.1.0"
