"""SGD-with-momentum and Adam, as pure state-passing update rules.

Both optimizers return fresh parameter dicts and fresh state so callers can
serialize mid-run and resume bit-exactly.
"""

from dataclasses import dataclass, field

import numpy as np

from posekd.nn.layers import Array
from posekd.nn.model import ParamStore


def _check_aligned(params: dict[str, Array], grads: dict[str, Array]) -> None:
    if params.keys() != grads.keys():
        missing = sorted(params.keys() - grads.keys())
        extra = sorted(grads.keys() - params.keys())
        raise KeyError(f"gradient names misaligned: missing={missing} extra={extra}")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ValueError(f"gradient {name} has shape {grads[name].shape}, param {p.shape}")


@dataclass
class SGDState:
    """Per-parameter velocity buffers."""

    velocity: dict[str, Array] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Array]) -> "SGDState":
        return cls({k: np.zeros_like(v) for k, v in params.items()})


def sgd_step(
    store: ParamStore,
    grads: dict[str, Array],
    state: SGDState,
    lr: float,
    momentum: float = 0.9,
) -> tuple[ParamStore, SGDState]:
    """v <- momentum*v + g;  w <- w - lr*v."""
    _check_aligned(store.params, grads)
    _check_aligned(store.params, state.velocity)
    new_params: dict[str, Array] = {}
    new_vel: dict[str, Array] = {}
    for name, p in store.params.items():
        v = momentum * state.velocity[name] + grads[name]
        new_vel[name] = v
        new_params[name] = p - lr * v
    return ParamStore(new_params, store.seed), SGDState(new_vel)


@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""

    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Array]) -> "AdamState":
        zeros = lambda: {k: np.zeros_like(p) for k, p in params.items()}
        return cls(zeros(), zeros(), 0)


def adam_step(
    store: ParamStore,
    grads: dict[str, Array],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ParamStore, AdamState]:
    """Standard Adam with bias correction."""
    _check_aligned(store.params, grads)
    _check_aligned(store.params, state.m)
    t = state.t + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new_params: dict[str, Array] = {}
    new_m: dict[str, Array] = {}
    new_v: dict[str, Array] = {}
    for name, p in store.params.items():
        g = grads[name]
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        new_m[name] = m
        new_v[name] = v
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return ParamStore(new_params, store.seed), AdamState(new_m, new_v, t)


OptState = SGDState | AdamState


def init_optimizer(kind: str, params: dict[str, Array]) -> OptState:
    if kind == "sgd":
        return SGDState.for_params(params)
    if kind == "adam":
        return AdamState.for_params(params)
    raise ValueError(f"unknown optimizer {kind!r} (expected 'sgd' or 'adam')")
