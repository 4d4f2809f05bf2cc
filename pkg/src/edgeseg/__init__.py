"""Lightweight semantic segmentation for edge devices, in plain numpy.

UNet-style networks with MobileNetV2 / MobileNetV3-small encoders, an
analytical profiler, segmentation metrics, an AdamW trainer and a latency
benchmark harness.
"""

__version__ = "0.1.0"

from .bench import BenchConfig, BenchReport, derived_metrics, run_bench
from .metrics import ClassSet, ConfusionMatrix, MetricsReport, accumulate_confusion, iou_per_class, mean_iou, pixel_accuracy
from .models import MBConvSpec, Model, ModelConfig, SESpec, build_model, forward, init_weights
from .profiler import ProfileReport, profile_model
from .tensor import ActivationKind, ConvParams, ShapeError
from .train import AdamWConfig, AdamWState, EpochLog, TrainData, adamw_step, cross_entropy_loss, evaluate, train, train_epoch
from .weightfile import load_weights, save_weights

__all__ = [
    "ActivationKind",
    "AdamWConfig",
    "AdamWState",
    "BenchConfig",
    "BenchReport",
    "ClassSet",
    "ConfusionMatrix",
    "ConvParams",
    "EpochLog",
    "MBConvSpec",
    "MetricsReport",
    "Model",
    "ModelConfig",
    "ProfileReport",
    "SESpec",
    "ShapeError",
    "TrainData",
    "accumulate_confusion",
    "adamw_step",
    "build_model",
    "cross_entropy_loss",
    "derived_metrics",
    "evaluate",
    "forward",
    "init_weights",
    "iou_per_class",
    "load_weights",
    "mean_iou",
    "pixel_accuracy",
    "profile_model",
    "run_bench",
    "save_weights",
    "train",
    "train_epoch",
]
