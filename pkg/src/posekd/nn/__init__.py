"""Minimal differentiable-network engine on float64 numpy arrays."""

from posekd.nn.layers import (
    Conv2d,
    Conv1x1,
    Dense,
    ReLU,
    Sigmoid,
    Upsample2x,
    LayerSpec,
)
from posekd.nn.model import (
    ModelSpec,
    ParamStore,
    init_params,
    forward,
    forward_batch,
    forward_with_cache,
    backward,
    backward_batch,
    backward_from_cache,
    param_count,
    param_checksum,
    model_to_dict,
    model_from_dict,
    outputs_to_prob,
)
from posekd.nn.optim import SGDState, AdamState, sgd_step, adam_step, init_optimizer
from posekd.nn.gradcheck import grad_check, GradCheckResult
from posekd.nn.checkpoint import save_params, load_params, CheckpointError

__all__ = [
    "Conv2d",
    "Conv1x1",
    "Dense",
    "ReLU",
    "Sigmoid",
    "Upsample2x",
    "LayerSpec",
    "ModelSpec",
    "ParamStore",
    "init_params",
    "forward",
    "forward_batch",
    "forward_with_cache",
    "backward",
    "backward_batch",
    "backward_from_cache",
    "param_count",
    "param_checksum",
    "model_to_dict",
    "model_from_dict",
    "outputs_to_prob",
    "SGDState",
    "AdamState",
    "sgd_step",
    "adam_step",
    "init_optimizer",
    "grad_check",
    "GradCheckResult",
    "save_params",
    "load_params",
    "CheckpointError",
]
