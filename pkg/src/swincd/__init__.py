"""Change detection with a dense Swin V2 grid and a siamese CNN branch."""

__version__ = "0.1.0"

from .attention import (CosineScale, PatchEmbed, PatchMerge, PositionBiasNet,
                        ScaledCosineAttention, SwinStage, SwinV2BlockPair,
                        TokenGrid, log_spaced_coords, position_bias,
                        window_partition, window_reverse)
from .branch import (BranchDecoder, CnnBranch, EncoderFeatures, VggEncoder,
                     load_encoder_state, pseudo_label, region_masks,
                     ssl_losses)
from .config import RunConfig, load_run_config
from .data import (BitemporalPair, DatasetLayout, SynthSpec, augment,
                   colorize, generate_pairs, synth_dataset, tile_pair)
from .errors import (CheckpointVersionError, ConfigurationError, DatasetError,
                     DimensionError, GenerationError, InputValidationError,
                     ScheduleError, SwinCDError)
from .losses import LossConfig, LossTerms, bce_loss, dice_loss, total_loss
from .metrics import ConfusionCounts, MetricReport, confusion, metrics
from .network import (DenseSwinNet, GridIndex, GridState, ModelConfig,
                      NetworkOutputs, admissible_grid_indices,
                      load_checkpoint, save_checkpoint)
from .pyramid import (CBAM, GroundingTransformer, MixedFeaturePyramid,
                      Res2NetConv, SKConv, mfp_forward)
from .training import (ChangePairDataset, TrainingLog, evaluate, lr_schedule,
                       predict, train)
