"""Slice-by-slice segmentation of 3D image stacks with memory and self-prompting."""
from .errors import (ConfigError, ContractError, DataError, DimensionError, FormatError, GapError,
                     StackSegError)
from .tensor import Tensor, backward, no_grad
from .encoder import EncoderConfig, ImageEncoder, encode
from .enhancer import FeatureEnhancer, enhance
from .memory import MemoryBank, MemoryEncoder
from .decoder import decode_stage1, decode_stage2
from .model import ModelConfig, SegmentationModel, SliceContext, full_profile, segment_slice, toy_profile
from .losses import LossWeights, dice_loss, total_loss
from .metrics import dice_score, iou, mean_iou, symmetric_difference
from .optim import AdamW
from .augment import AugmentationConfig, augment
from .train import TrainConfig, Trainer, evaluate
from .volume import VolumeStack, load_stack, make_synthetic_volume, save_stack
from .pipeline import plan_tiles, save_masks, segment_volume
from .checkpoint import read_checkpoint, write_checkpoint
from .config import RunConfig, load_config

__version__ = "0.1.0"
