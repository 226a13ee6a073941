"""H&E -> IHC stain translation: attention-gated multi-magnification GAN,
composite contrastive/pyramid objective, and a deterministic metric suite."""

from .data import (
    DatasetManifest,
    MagnificationBranch,
    MagnificationPolicy,
    MagnificationSample,
    SuperResolver,
    downsample_macro,
    load_pairs,
    paired_crop_zoom,
    sample_at,
    sample_batch,
    size_normalize,
)
from .discriminator import PatchDiscriminator, score_map_size
from .embeddings import PatchEmbeddingSet
from .errors import ConfigError, DataError, He2IhcError, NumericError
from .generator import (
    AttentionFusionGate,
    ChannelAttention,
    GeneratorConfig,
    PatchProjectionHead,
    SpatialAttention,
    TranslationGenerator,
    extract_patch_embeddings,
)
from .images import FeatureMap, ImageTile, StainDomain, load_tile, save_tile
from .losses import (
    LossWeights,
    PyramidSpec,
    WeightSchedule,
    adaptive_patch_nce_loss,
    adaptive_weight,
    adversarial_loss,
    gaussian_kernel,
    gaussian_pyramid_loss,
    info_nce,
    patch_nce_loss,
    total_generator_loss,
)
from .metrics import (
    FeatureExtractor,
    MetricReport,
    SeededConvExtractor,
    evaluate_directories,
    fid,
    kid,
    load_extractor,
    perceptual_distance,
    phv,
    psnr,
    ssim,
)
from .synthetic import SyntheticStainSpec, synthesize_dataset
from .training import (
    RunState,
    TrainConfig,
    load_checkpoint,
    lr_at,
    run_training,
    save_checkpoint,
    state_hash,
    train_step,
    translate_directory,
)

__version__ = "0.1.0"
