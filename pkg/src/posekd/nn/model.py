"""Network-level plumbing: specs, parameter stores, forward and backward.

A model is an immutable tuple of layer specs plus its input contract.
Parameters live outside the spec in a :class:`ParamStore` so the same spec
can be instantiated many times (one per seed) and checkpointed separately.
"""

import hashlib
import json
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.special import expit

from posekd.nn.layers import LAYER_KINDS, Array, LayerSpec, Shape


OUTPUT_KINDS = ("prob", "logits", "linear01")


def _param_name(index: int, suffix: str) -> str:
    # Zero-padded index keeps lexicographic order equal to layer order.
    return f"layer{index:02d}.{suffix}"


@dataclass(frozen=True)
class ModelSpec:
    """Immutable description of a feed-forward network.

    Attributes:
        layers: Ordered layer specs.
        in_channels: Channel count of the (C, H, W) input.
        in_size: Spatial input size (H, W).
        joint_count: Expected channel count of the final heatmap output.
        out_kind: How to read the final layer's output as probabilities:
            "prob" (already sigmoid), "logits" (apply sigmoid), or
            "linear01" (a regression head whose values are nominally [0,1];
            clamp when probability semantics are needed).
    """

    layers: tuple[LayerSpec, ...]
    in_channels: int
    in_size: tuple[int, int]
    joint_count: int
    out_kind: str = "logits"

    def __post_init__(self) -> None:
        if len(self.layers) == 0:
            raise ValueError("model needs at least one layer")
        if len(self.layers) > 100:
            raise ValueError("param naming supports at most 100 layers")
        if self.out_kind not in OUTPUT_KINDS:
            raise ValueError(f"out_kind must be one of {OUTPUT_KINDS}, got {self.out_kind!r}")
        ends_sigmoid = self.layers[-1].kind == "sigmoid"
        if ends_sigmoid != (self.out_kind == "prob"):
            raise ValueError(
                "out_kind 'prob' is exactly for models whose last layer is sigmoid; "
                f"got out_kind={self.out_kind!r} with last layer {self.layers[-1].kind!r}"
            )
        chain = self.shape_chain()
        out = chain[-1]
        if len(out) != 3 or out[0] != self.joint_count:
            raise ValueError(
                f"model output shape {out} does not match joint_count={self.joint_count}"
            )

    @property
    def in_shape(self) -> Shape:
        return (self.in_channels, self.in_size[0], self.in_size[1])

    def shape_chain(self) -> list[Shape]:
        """Shapes from input through every layer; raises on any mismatch."""
        shapes = [self.in_shape]
        for layer in self.layers:
            shapes.append(layer.out_shape(shapes[-1]))
        return shapes

    @property
    def out_shape(self) -> Shape:
        return self.shape_chain()[-1]

    def param_shapes(self) -> dict[str, Shape]:
        out: dict[str, Shape] = {}
        for i, layer in enumerate(self.layers):
            for suffix, shape in layer.param_shapes().items():
                out[_param_name(i, suffix)] = shape
        return out

    def hash(self) -> str:
        """Stable content hash of the architecture (not the weights)."""
        text = json.dumps(model_to_dict(self), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()


def model_to_dict(model: ModelSpec) -> dict:
    layers = []
    for layer in model.layers:
        entry = {"kind": layer.kind}
        for f in fields(layer):
            entry[f.name] = getattr(layer, f.name)
        layers.append(entry)
    return {
        "layers": layers,
        "in_channels": model.in_channels,
        "in_size": list(model.in_size),
        "joint_count": model.joint_count,
        "out_kind": model.out_kind,
    }


def model_from_dict(data: dict) -> ModelSpec:
    layers = []
    for entry in data["layers"]:
        entry = dict(entry)
        kind = entry.pop("kind")
        if kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {kind!r}")
        layers.append(LAYER_KINDS[kind](**entry))
    return ModelSpec(
        layers=tuple(layers),
        in_channels=data["in_channels"],
        in_size=tuple(data["in_size"]),
        joint_count=data["joint_count"],
        out_kind=data["out_kind"],
    )


@dataclass
class ParamStore:
    """Named float64 parameter arrays plus the seed they were drawn from."""

    params: dict[str, Array]
    seed: int = 0

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.params.items()}, self.seed)


def init_params(model: ModelSpec, seed: int) -> ParamStore:
    """He-uniform weights, zero biases, one independent stream per model seed."""
    rng = np.random.default_rng(seed)
    params: dict[str, Array] = {}
    for i, layer in enumerate(model.layers):
        for suffix, value in layer.init_params(rng).items():
            params[_param_name(i, suffix)] = value
    return ParamStore(params, seed)


def param_count(model: ModelSpec) -> int:
    return sum(int(np.prod(s)) for s in model.param_shapes().values())


def param_checksum(store: ParamStore) -> str:
    """SHA-256 over parameter bytes in sorted-name order; detects any mutation."""
    digest = hashlib.sha256()
    for name in sorted(store.params):
        digest.update(name.encode())
        digest.update(store.params[name].astype("<f8").tobytes())
    return digest.hexdigest()


def _layer_params(model: ModelSpec, store: ParamStore, index: int) -> dict[str, Array]:
    layer = model.layers[index]
    return {s: store.params[_param_name(index, s)] for s in layer.param_shapes()}


def _check_store(model: ModelSpec, store: ParamStore) -> None:
    expected = model.param_shapes()
    if store.params.keys() != expected.keys():
        missing = sorted(expected.keys() - store.params.keys())
        extra = sorted(store.params.keys() - expected.keys())
        raise KeyError(f"param store mismatch: missing={missing} extra={extra}")
    for name, shape in expected.items():
        if store.params[name].shape != shape:
            raise ValueError(
                f"param {name} has shape {store.params[name].shape}, expected {shape}"
            )


def _forward_cached(model: ModelSpec, store: ParamStore, x: Array) -> tuple[Array, list[Array]]:
    """Batched forward keeping each layer's input for the backward pass."""
    if not np.isfinite(x).all():
        raise FloatingPointError("non-finite values in network input")
    cache = []
    cur = x
    for i, layer in enumerate(model.layers):
        cache.append(cur)
        cur = layer.forward(cur, _layer_params(model, store, i))
        if not np.isfinite(cur).all():
            raise FloatingPointError(f"non-finite values after layer {i} ({layer.kind})")
    return cur, cache


def _backward_from_cache(
    model: ModelSpec, store: ParamStore, cache: list[Array], gy: Array
) -> dict[str, Array]:
    """Batched backward from cached inputs; param grads are summed over batch."""
    grads: dict[str, Array] = {}
    gcur = gy
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        gcur, layer_grads = layer.backward(cache[i], _layer_params(model, store, i), gcur)
        for suffix, g in layer_grads.items():
            grads[_param_name(i, suffix)] = g
    for name in store.params:
        grads.setdefault(name, np.zeros_like(store.params[name]))
    return grads


def forward_batch(model: ModelSpec, store: ParamStore, x: Array) -> Array:
    """Forward pass over a batch shaped (B, C, H, W); returns (B,) + out_shape."""
    y, _ = forward_with_cache(model, store, x)
    return y


def forward_with_cache(
    model: ModelSpec, store: ParamStore, x: Array
) -> tuple[Array, list[Array]]:
    """Batched forward that also returns the per-layer inputs.

    Feeding the cache to :func:`backward_from_cache` avoids recomputing the
    forward pass when both the output and the gradients are needed.
    """
    _check_store(model, store)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != model.in_shape:
        raise ValueError(f"expected batch shaped (B,) + {model.in_shape}, got {x.shape}")
    return _forward_cached(model, store, x)


def backward_from_cache(
    model: ModelSpec, store: ParamStore, cache: list[Array], gy: Array
) -> dict[str, Array]:
    """Batched backward using a cache from :func:`forward_with_cache`."""
    gy = np.asarray(gy, dtype=np.float64)
    if not np.isfinite(gy).all():
        raise FloatingPointError("non-finite values in upstream gradients")
    return _backward_from_cache(model, store, cache, gy)


def forward(model: ModelSpec, store: ParamStore, x: Array) -> Array:
    """Single-sample forward: (C, H, W) in, model.out_shape out."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.in_shape:
        raise ValueError(f"expected input shaped {model.in_shape}, got {x.shape}")
    return forward_batch(model, store, x[None])[0]


def outputs_to_prob(model: ModelSpec, y: Array) -> Array:
    """Canonical probability-space view of raw model outputs.

    Every consumer that needs [0,1] heatmaps (decoding targets, binarized
    distillation targets, peak counting) must go through this one mapping so
    the interpretation of a model's head is fixed in exactly one place.
    """
    y = np.asarray(y, dtype=np.float64)
    if model.out_kind == "prob":
        return y.copy()
    if model.out_kind == "logits":
        return expit(y)
    return np.clip(y, 0.0, 1.0)


def backward_batch(
    model: ModelSpec, store: ParamStore, x: Array, gy: Array
) -> dict[str, Array]:
    """Parameter gradients summed over the batch for upstream grads ``gy``.

    ``gy`` must already carry any loss scaling (e.g. the 1/B of a batch-mean
    loss), so the returned grads are exactly dLoss/dParam.
    """
    _check_store(model, store)
    x = np.asarray(x, dtype=np.float64)
    gy = np.asarray(gy, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != model.in_shape:
        raise ValueError(f"expected batch shaped (B,) + {model.in_shape}, got {x.shape}")
    if gy.shape != (x.shape[0],) + model.out_shape:
        raise ValueError(
            f"expected upstream grads shaped {(x.shape[0],) + model.out_shape}, got {gy.shape}"
        )
    if not np.isfinite(gy).all():
        raise FloatingPointError("non-finite values in upstream gradients")
    _, cache = _forward_cached(model, store, x)
    return _backward_from_cache(model, store, cache, gy)


def backward(model: ModelSpec, store: ParamStore, x: Array, gy: Array) -> dict[str, Array]:
    """Single-sample parameter gradients for upstream grads wrt the output."""
    x = np.asarray(x, dtype=np.float64)
    gy = np.asarray(gy, dtype=np.float64)
    if x.shape != model.in_shape:
        raise ValueError(f"expected input shaped {model.in_shape}, got {x.shape}")
    if gy.shape != model.out_shape:
        raise ValueError(f"expected upstream grads shaped {model.out_shape}, got {gy.shape}")
    return backward_batch(model, store, x[None], gy[None])
