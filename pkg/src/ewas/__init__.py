"""Desk-scale adversarial-robustness lab built around element-wise
activation scaling: a class-indexed linear classifier over an
intermediate activation whose weight columns double as per-element
scaling masks, trained jointly with the backbone and evaluated against
white-box l-infinity attacks."""

from .attacks import (
    AdversarialBatch,
    AttackConfig,
    attack_objective,
    cw_attack,
    cw_margin_loss,
    fgsm,
    pgd,
    project_linf_box,
)
from .data import Dataset, batches, load_cifar_binary, load_idx, synth_dataset
from .models import (
    ForwardOut,
    Model,
    build_model,
    build_resnet18_like,
    build_small_cnn,
    insert_ewas,
    load_checkpoint,
    save_checkpoint,
)
from .scaling import (
    AlcParams,
    alc_score,
    apply_scaling,
    ewas_forward,
    select_mask,
)
from .tensor import Tensor, backward, no_grad
from .training import (
    TrainConfig,
    at_loss_ewas,
    evaluate,
    lr_schedule,
    mart_loss_ewas,
    sgd_step,
    trades_loss_ewas,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AdversarialBatch", "AlcParams", "AttackConfig", "Dataset", "ForwardOut",
    "Model", "Tensor", "TrainConfig", "alc_score", "apply_scaling",
    "at_loss_ewas", "attack_objective", "backward", "batches", "build_model",
    "build_resnet18_like", "build_small_cnn", "cw_attack", "cw_margin_loss",
    "evaluate", "ewas_forward", "fgsm", "insert_ewas", "load_cifar_binary",
    "load_checkpoint", "load_idx", "lr_schedule", "mart_loss_ewas", "no_grad",
    "pgd", "project_linf_box", "save_checkpoint", "select_mask", "sgd_step",
    "synth_dataset", "trades_loss_ewas", "train",
]
