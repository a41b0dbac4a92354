"""Importance-regularised continual LoRA fine-tuning at desk scale.

A general task is trained first while per-element importance is recorded
from the path integral of a virtual full-weight gradient; a domain task is
then trained with a quadratic penalty that anchors important weights, with
per-matrix strength set by a softmax over importance norms.
"""

__version__ = "0.1.0"

from .importance import ImportanceState
from .lora import LoraAdapter, ScalingMode, effective_weight, lora_init, sgd_step, virtual_gradient
from .model import ToyModel
from .tasks import TaskPair, gen_task_pair
from .trainer import TrainConfig, Trainer, run_experiment

__all__ = [
    "ImportanceState",
    "LoraAdapter",
    "ScalingMode",
    "TaskPair",
    "ToyModel",
    "TrainConfig",
    "Trainer",
    "effective_weight",
    "gen_task_pair",
    "lora_init",
    "run_experiment",
    "sgd_step",
    "virtual_gradient",
]
