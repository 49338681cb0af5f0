"""Gated differentiable image processing for object detection in adverse conditions."""

from .block import GateReport, GdipConfig, Mode, gdip_forward
from .datagen import load_dataset, synth_scene, write_dataset
from .detect import Detection, Target
from .encoder import EncoderConfig, encoder_forward
from .ipops import IpKind, apply_op
from .metrics import average_precision, iou, mean_average_precision, psnr
from .mgdip import MgdipConfig, mgdip_forward
from .model import ModelConfig, detect, enhance, init_model
from .tensor import grad_check, normalize_minmax
from .trainer import TrainConfig, cosine_lr, sgd_step, train

__all__ = [
    "Detection", "EncoderConfig", "GateReport", "GdipConfig", "IpKind", "MgdipConfig", "Mode",
    "ModelConfig", "Target", "TrainConfig", "apply_op", "average_precision", "cosine_lr",
    "detect", "encoder_forward", "enhance", "gdip_forward", "grad_check", "init_model", "iou",
    "load_dataset", "mean_average_precision", "mgdip_forward", "normalize_minmax", "psnr",
    "sgd_step", "synth_scene", "train", "write_dataset",
]
