"""Stealthy adversarial attacks against semantic segmentation, at desk scale.

A small numpy autodiff core, a synthetic street-scene dataset, a frozen
segmentation target, and a dual-head perturbation generator trained to
change chosen labels while leaving the rest of the prediction intact.
"""

from .attack import (
    AttackSpec,
    AttackTrainConfig,
    PretrainConfig,
    map_displace,
    map_embed,
    map_vanish,
    pretrain_target,
    stealthy_labels,
    train_attack,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .evaluation import (
    MetricsReport,
    cross_evaluate,
    efficiency_ratio,
    evaluate_attack,
    manipulated_rate,
    preserved_rate,
)
from .nets import (
    ModelConfig,
    build_generator_unet,
    build_target_fcn,
    count_params,
    forward_generator,
    forward_target,
)
from .scenes import SceneConfig, generate_dataset, generate_scene
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"
