"""Convolution compression through per-layer shared kernel bases and sparse coefficients."""

from .decompose import decompose_layer, decompose_network, reconstruct
from .graph import Network, SkipEdge, backward, forward, validate
from .runtime import benchmark, compile, count_flops, infer, stage1, stage2
from .serialization import load_model, save_model
from .shrink import propagate, redundancy_vectors
from .train import TrainConfig, finetune_masked, pretrain, retrain

__version__ = "0.1.0"
