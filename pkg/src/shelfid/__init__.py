"""Metric-learning finetuning of a block-structured image encoder and a
1-nearest-neighbor embedding gallery for zero-shot product recognition."""

from .arcface import ArcFaceHead, arcface_logits, arcface_loss, cosine_logits, make_head
from .balancing import Record, depth_sweep, make_validation_split, read_manifest, resample_to_depth, write_manifest
from .encoder_core import EncoderConfig, build_encoder, encode, normalize, parameter_blocks
from .evalharness import EvalReport, render_report, zero_shot_eval
from .finetune import FinetuneConfig, TrainingHistory, load_and_augment
from .gallery import Gallery, classify, enroll
from .lr_schedule import BlockLrSchedule, blockwise_lrs, build_param_groups

__version__ = "0.1.0"
