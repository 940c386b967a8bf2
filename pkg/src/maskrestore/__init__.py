"""Masked pre-training, conductance-ranked fine-tuning and gated feature
fusion for small image restoration networks, on a self-contained numpy
autodiff substrate."""

from . import autodiff, degrade, masking, metrics, models, pipeline
from .attribution import (
    LayerReport,
    PathSpec,
    integrated_gradients,
    mac_scores,
    neuron_conductance,
    rank_and_select,
)
from .autodiff import Graph, Tensor, record
from .config import RunConfig, parse_config
from .degrade import DegradationSpec, ImagePair
from .masking import MaskPlan
from .pipeline import (
    EvalResult,
    MetricRecord,
    ScheduleSpec,
    TrainSettings,
    evaluate,
    finetune,
    pretrain,
    twin_mask_infer,
)

__version__ = "0.1.0"
