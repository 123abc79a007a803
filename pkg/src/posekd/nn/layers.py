"""Layer specifications and their forward/backward kernels.

Each layer is a frozen dataclass describing its configuration plus pure
``forward``/``backward`` methods.  Kernels operate on batched float64 arrays
shaped ``(B, ...)``; the single-sample API in :mod:`posekd.nn.model` wraps
them.  Convolutions are evaluated one kernel tap at a time with
``np.tensordot`` so the heavy lifting stays inside BLAS.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

Array = np.ndarray

Shape = tuple[int, ...]


def _he_uniform(rng: np.random.Generator, fan_in: int, shape: Shape) -> Array:
    """He-style uniform init: U(-b, b) with b = sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _conv_forward(x: Array, w: Array, b: Array, stride: int, pad: int) -> Array:
    """Cross-correlation of (B,C,H,W) with (O,C,kh,kw), bias added per channel."""
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (H + 2 * pad - kh) // stride + 1
    wo = (W + 2 * pad - kw) // stride + 1
    acc = np.zeros((O, B, ho, wo))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            acc += np.tensordot(w[:, :, i, j], patch, axes=([1], [1]))
    y = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))
    y += b[None, :, None, None]
    return y


def _conv_backward(
    x: Array, w: Array, stride: int, pad: int, gy: Array
) -> tuple[Array, Array, Array]:
    """Returns (gx, gw, gb) for the cross-correlation above, summed over batch."""
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    _, _, ho, wo = gy.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            rows = slice(i, i + stride * ho, stride)
            cols = slice(j, j + stride * wo, stride)
            patch = xp[:, :, rows, cols]
            gw[:, :, i, j] = np.tensordot(gy, patch, axes=([0, 2, 3], [0, 2, 3]))
            back = np.tensordot(w[:, :, i, j], gy, axes=([0], [1]))
            gxp[:, :, rows, cols] += back.transpose(1, 0, 2, 3)
    gb = gy.sum(axis=(0, 2, 3))
    gx = gxp[:, :, pad : pad + H, pad : pad + W]
    return np.ascontiguousarray(gx), gw, gb


@dataclass(frozen=True)
class Conv2d:
    """2-D convolution (cross-correlation) with odd square kernel.

    Padding defaults to ``kernel_size // 2`` so stride-1 convolutions
    preserve spatial size and stride-2 halves it exactly for even inputs.
    """

    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1

    kind = "conv2d"

    def __post_init__(self) -> None:
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("conv2d channel counts must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("conv2d kernel_size must be odd and >= 1")
        if self.stride < 1:
            raise ValueError("conv2d stride must be >= 1")

    @property
    def padding(self) -> int:
        return self.kernel_size // 2

    def out_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ValueError(f"conv2d expects (C={self.in_channels}, H, W), got {in_shape}")
        _, h, w = in_shape
        k, s, p = self.kernel_size, self.stride, self.padding
        return (self.out_channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def param_shapes(self) -> dict[str, Shape]:
        k = self.kernel_size
        return {"w": (self.out_channels, self.in_channels, k, k), "b": (self.out_channels,)}

    def init_params(self, rng: np.random.Generator) -> dict[str, Array]:
        k = self.kernel_size
        fan_in = self.in_channels * k * k
        return {
            "w": _he_uniform(rng, fan_in, (self.out_channels, self.in_channels, k, k)),
            "b": np.zeros(self.out_channels),
        }

    def forward(self, x: Array, params: dict[str, Array]) -> Array:
        return _conv_forward(x, params["w"], params["b"], self.stride, self.padding)

    def backward(
        self, x: Array, params: dict[str, Array], gy: Array
    ) -> tuple[Array, dict[str, Array]]:
        gx, gw, gb = _conv_backward(x, params["w"], self.stride, self.padding, gy)
        return gx, {"w": gw, "b": gb}


@dataclass(frozen=True)
class Conv1x1:
    """Pointwise channel-mixing convolution (used as the 4->3 input adapter)."""

    in_channels: int
    out_channels: int

    kind = "conv1x1"

    def __post_init__(self) -> None:
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("conv1x1 channel counts must be >= 1")

    def out_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ValueError(f"conv1x1 expects (C={self.in_channels}, H, W), got {in_shape}")
        return (self.out_channels,) + in_shape[1:]

    def param_shapes(self) -> dict[str, Shape]:
        return {"w": (self.out_channels, self.in_channels, 1, 1), "b": (self.out_channels,)}

    def init_params(self, rng: np.random.Generator) -> dict[str, Array]:
        return {
            "w": _he_uniform(rng, self.in_channels, (self.out_channels, self.in_channels, 1, 1)),
            "b": np.zeros(self.out_channels),
        }

    def forward(self, x: Array, params: dict[str, Array]) -> Array:
        return _conv_forward(x, params["w"], params["b"], 1, 0)

    def backward(
        self, x: Array, params: dict[str, Array], gy: Array
    ) -> tuple[Array, dict[str, Array]]:
        gx, gw, gb = _conv_backward(x, params["w"], 1, 0, gy)
        return gx, {"w": gw, "b": gb}


@dataclass(frozen=True)
class Dense:
    """Fully connected layer; flattens whatever input it is given."""

    in_features: int
    out_features: int

    kind = "dense"

    def __post_init__(self) -> None:
        if self.in_features < 1 or self.out_features < 1:
            raise ValueError("dense feature counts must be >= 1")

    def out_shape(self, in_shape: Shape) -> Shape:
        if int(np.prod(in_shape)) != self.in_features:
            raise ValueError(
                f"dense expects {self.in_features} input features, got shape {in_shape}"
            )
        return (self.out_features,)

    def param_shapes(self) -> dict[str, Shape]:
        return {"w": (self.out_features, self.in_features), "b": (self.out_features,)}

    def init_params(self, rng: np.random.Generator) -> dict[str, Array]:
        return {
            "w": _he_uniform(rng, self.in_features, (self.out_features, self.in_features)),
            "b": np.zeros(self.out_features),
        }

    def forward(self, x: Array, params: dict[str, Array]) -> Array:
        xf = x.reshape(x.shape[0], -1)
        return xf @ params["w"].T + params["b"]

    def backward(
        self, x: Array, params: dict[str, Array], gy: Array
    ) -> tuple[Array, dict[str, Array]]:
        xf = x.reshape(x.shape[0], -1)
        gw = gy.T @ xf
        gb = gy.sum(axis=0)
        gx = (gy @ params["w"]).reshape(x.shape)
        return gx, {"w": gw, "b": gb}


@dataclass(frozen=True)
class ReLU:
    kind = "relu"

    def out_shape(self, in_shape: Shape) -> Shape:
        return in_shape

    def param_shapes(self) -> dict[str, Shape]:
        return {}

    def init_params(self, rng: np.random.Generator) -> dict[str, Array]:
        return {}

    def forward(self, x: Array, params: dict[str, Array]) -> Array:
        return np.maximum(x, 0.0)

    def backward(
        self, x: Array, params: dict[str, Array], gy: Array
    ) -> tuple[Array, dict[str, Array]]:
        return gy * (x > 0.0), {}


@dataclass(frozen=True)
class Sigmoid:
    kind = "sigmoid"

    def out_shape(self, in_shape: Shape) -> Shape:
        return in_shape

    def param_shapes(self) -> dict[str, Shape]:
        return {}

    def init_params(self, rng: np.random.Generator) -> dict[str, Array]:
        return {}

    def forward(self, x: Array, params: dict[str, Array]) -> Array:
        return expit(x)

    def backward(
        self, x: Array, params: dict[str, Array], gy: Array
    ) -> tuple[Array, dict[str, Array]]:
        y = self.forward(x, params)
        return gy * y * (1.0 - y), {}


@dataclass(frozen=True)
class Upsample2x:
    """Nearest-neighbour 2x spatial upsampling."""

    kind = "upsample2x"

    def out_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 3:
            raise ValueError(f"upsample2x expects (C, H, W), got {in_shape}")
        c, h, w = in_shape
        return (c, 2 * h, 2 * w)

    def param_shapes(self) -> dict[str, Shape]:
        return {}

    def init_params(self, rng: np.random.Generator) -> dict[str, Array]:
        return {}

    def forward(self, x: Array, params: dict[str, Array]) -> Array:
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(
        self, x: Array, params: dict[str, Array], gy: Array
    ) -> tuple[Array, dict[str, Array]]:
        b, c, h, w = x.shape
        gx = gy.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5))
        return gx, {}


LayerSpec = Conv2d | Conv1x1 | Dense | ReLU | Sigmoid | Upsample2x

LAYER_KINDS: dict[str, type] = {
    "conv2d": Conv2d,
    "conv1x1": Conv1x1,
    "dense": Dense,
    "relu": ReLU,
    "sigmoid": Sigmoid,
    "upsample2x": Upsample2x,
}
