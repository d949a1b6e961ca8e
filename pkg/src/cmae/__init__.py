"""CMAE: masked-image pretraining with a momentum-contrastive branch, token
location prediction, heatmap-constrained cropping, and a weakened-decoder zoo."""

from .backbone import (
    EncoderState,
    ProjectionHead,
    ProjectionSpec,
    ViTConfig,
    ViTEncoder,
    momentum_update,
    project,
    run_contrastive_branches,
)
from .config import EvalConfig, TrainConfig, load_config, parse_config_text
from .contrastive_crop import (
    BoundingRect,
    CropBox,
    CropSchedule,
    HeatMap,
    compute_heatmap,
    localize,
    refresh_boxes,
    sample_crop,
)
from .datapipe import (
    AugPolicy,
    DatasetSplit,
    ImageRecord,
    PatchSpec,
    ViewPair,
    load_dataset,
    make_views,
    patchify,
    unpatchify,
)
from .decoder_zoo import Decoder, DecoderSpec, build_decoder, decode, param_count
from .errors import ConfigError
from .experiment import (
    LrSchedule,
    evaluate,
    load_checkpoint,
    lr_at,
    pretrain,
    save_checkpoint,
)
from .masking import MaskPlan, SplitTokens, make_mask, restore_merge, split
from .objectives import (
    ContrastiveBatch,
    LocationHead,
    LossReport,
    LossWeights,
    info_nce,
    location_loss,
    location_targets,
    normalize_patch_targets,
    reconstruction_loss,
    total_loss,
)

__version__ = "0.1.0"
