"""Target-aware transformer knowledge distillation on a small numpy autograd engine."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, parse_config
from .hier import AnchorConfig, PatchGroupConfig, anchor_point_loss, patch_group_loss, tat_cost_estimate
from .losses import CorrelationMap, FeatureMap, KDConfig, fm_loss, kl_distill_loss, tat_forward, tat_loss
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "AnchorConfig",
    "Checkpoint",
    "ConfigError",
    "CorrelationMap",
    "FeatureMap",
    "KDConfig",
    "PatchGroupConfig",
    "RunConfig",
    "Tensor",
    "anchor_point_loss",
    "fm_loss",
    "kl_distill_loss",
    "load_checkpoint",
    "no_grad",
    "parse_config",
    "patch_group_loss",
    "save_checkpoint",
    "tat_cost_estimate",
    "tat_forward",
    "tat_loss",
]
