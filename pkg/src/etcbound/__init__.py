"""Expand-then-clarify boundary engine for weakly supervised temporal grounding."""

from .core import (
    DescriptionDict,
    FrameScoreSequence,
    GroundingInstance,
    MatchScorePair,
    ScoreKind,
    TemporalBoundary,
    clamp_interval,
    load_dataset,
    save_dataset,
)
from .autodiff import DiffValue, DomainError, backward, grad_check, stop_gradient
from .losses import LossWeights, mil_loss, mutual_loss, pcl_loss, total_loss
from .model import PredictorParams, init_params, pool_boundary_feature, predict_boundary, soft_window_mask
from .evalkit import EvalReport, interval_iou, intersection_ratio_histogram, rank1_at_iou
from .matchers import TokenEmbedder, minmax_normalize, qdm_scores, qfm_scores
from .expand import CaptionRequest, EchoProvider, ExpansionConfig, build_dictionary, sample_region_description
from .synthbench import SynthConfig, generate_dataset, oracle_boundary
from .trainer import AblationFlags, TrainConfig, ablation_sweep, infer, train

__version__ = "0.1.0"
