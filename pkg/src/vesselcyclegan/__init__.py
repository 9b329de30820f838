"""Vessel-routed CycleGAN toolkit for unpaired color fundus <-> fluorescein
angiography translation."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    AugmentConfig, ClassLabel, DatasetManifest, Domain, PatchGrid, RetinalImage, UnpairedBatch, VesselMask,
    augment, extract_patch, load_manifest, make_patch_grid, sample_unpaired,
)
from .errors import *  # noqa: F401,F403
from .evaluation import (
    BinaryVesselMask, EmbeddingSet, MetricReport, binarize, dice_score, evaluate_run, kid_score,
    lpips_aggregate, render_overlay,
)
from .losses import (
    LossRecord, LossWeights, adversarial_loss, bce_loss, cycle_loss, identity_loss, seg_consistency_loss,
    soft_dice_loss, total_generator_loss,
)
from .networks import (
    DiscriminatorSpec, GeneratorSpec, SegNetSpec, build_discriminator, build_generator, build_segmenter,
    discriminate, segment, translate,
)
from .training import (
    GanTrainConfig, GanTrainer, ImagePool, SegTrainConfig, gan_train_step, lr_at_epoch, pool_query,
    pretrain_segmenter, train_gan,
)

__version__ = "0.1.0"
