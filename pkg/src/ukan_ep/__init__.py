"""UKAN-EP: KAN-based 3D segmentation with pyramid feature aggregation, on numpy."""

from .losses import dice_loss, cross_entropy_loss, dynamic_total_loss, segmentation_loss
from .metrics import compose_regions, dice_iou_metrics, hd95, summarize
from .model import VARIANTS, ModelConfig, build_model, count_flops, count_params, model_forward
from .tensor import Tensor, backward, gradient_check, no_grad
from .training import TrainConfig, evaluate, lr_schedule, train

__all__ = [
    "Tensor",
    "backward",
    "gradient_check",
    "no_grad",
    "VARIANTS",
    "ModelConfig",
    "build_model",
    "model_forward",
    "count_params",
    "count_flops",
    "cross_entropy_loss",
    "dice_loss",
    "dynamic_total_loss",
    "segmentation_loss",
    "compose_regions",
    "dice_iou_metrics",
    "hd95",
    "summarize",
    "TrainConfig",
    "lr_schedule",
    "train",
    "evaluate",
]
