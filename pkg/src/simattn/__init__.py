"""Similarity attention and similarity mining for metric-learning models, on numpy."""

from .attention import explain, pair_weight, quadruplet_weight, sample_score, triplet_weight, tuple_attention
from .autodiff import Tensor, backward, grad, no_grad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import DatasetRecord, generate_synthetic
from .encoder import EncoderConfig, ModelParams, encode, forward, init_params
from .evaluation import evaluate_attention, evaluate_retrieval, recall_at_k, segment
from .losses import LossConfig, metric_loss
from .mining import MaskingConfig, mining_forward, soft_mask
from .train import TrainConfig

__version__ = "0.1.0"
