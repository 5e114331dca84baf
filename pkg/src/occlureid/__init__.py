"""Occluded-face classification and person re-identification.

A from-scratch CPU stack: depthwise-separable convolution kernels, an
inverted-residual backbone bridged into a gated recurrent cell, exact
backpropagation through time, an evaluation metric suite, and a gated
two-stage re-identification pipeline with an append-only audit log.
"""

from .data import AugmentSpec, LabeledImage, OcclusionClass, augment, expand_dataset, load_dataset
from .gru import GruCellParams, cross_entropy, gradient_check, gru_backward, gru_forward, init_gru_params
from .kernels import ConvCostInput, conv_cost, depletion_ratio, depthwise_conv, pointwise_conv
from .metrics import ConfusionCounts, MetricReport, metrics, report_table, tally
from .network import Model, NetworkConfig, build_network, load_checkpoint, save_checkpoint
from .reid import Gallery, MatchResult, append_log, fuse_and_gate, identify, run_batch, run_probe
from .training import TrainConfig, evaluate, toy_overfit_config, train

__all__ = [
    "AugmentSpec", "LabeledImage", "OcclusionClass", "augment", "expand_dataset", "load_dataset",
    "GruCellParams", "cross_entropy", "gradient_check", "gru_backward", "gru_forward", "init_gru_params",
    "ConvCostInput", "conv_cost", "depletion_ratio", "depthwise_conv", "pointwise_conv",
    "ConfusionCounts", "MetricReport", "metrics", "report_table", "tally",
    "Model", "NetworkConfig", "build_network", "load_checkpoint", "save_checkpoint",
    "Gallery", "MatchResult", "append_log", "fuse_and_gate", "identify", "run_batch", "run_probe",
    "TrainConfig", "evaluate", "toy_overfit_config", "train",
]
