"""Runtime layers instantiated from a :class:`~stconv.netspec.NetSpec`.

Each layer keeps whatever its backward pass needs from the most recent
forward call; inside :func:`no_grad` nothing is cached.  Parameters and
gradients live in per-layer dicts and are addressed from the network by
dotted names that match the manifest paths, e.g. ``conv2_1.conv_a.spatial.weight``.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Iterator, Mapping

import numpy as np

from . import ops
from .errors import FormatError, ShapeError
from .netspec import LayerSpec, NetSpec
from .tensor import DTYPE, Rng, fill_uniform

_grad_enabled = True


@contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Layer:
    def __init__(self, name: str) -> None:
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def children(self) -> list["Layer"]:
        return []

    def _walk(self, prefix: str) -> Iterator[tuple[str, "Layer"]]:
        path = f"{prefix}{self.name}" if self.name else prefix.rstrip(".")
        yield path, self
        child_prefix = f"{path}." if path else ""
        for child in self.children():
            yield from child._walk(child_prefix)

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        for path, layer in self._walk(""):
            for key, value in layer.params.items():
                yield f"{path}.{key}", value

    def named_grads(self) -> Iterator[tuple[str, np.ndarray]]:
        for path, layer in self._walk(""):
            for key in layer.params:
                yield f"{path}.{key}", layer.grads.get(key, np.zeros_like(layer.params[key]))

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for path, layer in self._walk(""):
            for key, value in layer.buffers.items():
                yield f"{path}.{key}", value

    def zero_grad(self) -> None:
        for _, layer in self._walk(""):
            layer.grads = {k: np.zeros_like(v) for k, v in layer.params.items()}


class Conv3d(Layer):
    def __init__(self, name: str, in_channels: int, out_channels: int, kernel, stride=1,
                 padding=0, bias: bool = True, rng: Rng | None = None) -> None:
        super().__init__(name)
        self.kernel = ops.triple(kernel)
        self.stride = ops.triple(stride)
        self.padding = ops.triple(padding)
        shape = (out_channels, in_channels) + self.kernel
        fan_in = in_channels * math.prod(self.kernel)
        bound = math.sqrt(1.0 / fan_in)
        if rng is None:
            self.params["weight"] = np.zeros(shape, dtype=DTYPE)
        else:
            self.params["weight"] = fill_uniform(shape, -bound, bound, rng)
        if bias:
            self.params["bias"] = (np.zeros(out_channels, dtype=DTYPE) if rng is None
                                   else fill_uniform((out_channels,), -bound, bound, rng))
        self._x: np.ndarray | None = None

    def forward(self, x, train=False):
        if _grad_enabled:
            self._x = x
        return ops.conv3d_forward(x, self.params["weight"], self.params.get("bias"),
                                  self.stride, self.padding)

    def backward(self, grad):
        gx, gw, gb = ops.conv3d_backward(self._x, self.params["weight"], grad,
                                         self.stride, self.padding)
        self.grads["weight"] = gw.astype(self.params["weight"].dtype, copy=False)
        if "bias" in self.params:
            self.grads["bias"] = gb.astype(self.params["bias"].dtype, copy=False)
        return gx


class BatchNorm(Layer):
    def __init__(self, name: str, channels: int, eps: float = ops.BN_EPS,
                 momentum: float = ops.BN_MOMENTUM) -> None:
        super().__init__(name)
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = np.ones(channels, dtype=DTYPE)
        self.params["beta"] = np.zeros(channels, dtype=DTYPE)
        self.buffers["running_mean"] = np.zeros(channels, dtype=DTYPE)
        self.buffers["running_var"] = np.ones(channels, dtype=DTYPE)
        self._cache = None

    def forward(self, x, train=False):
        y, cache = ops.batchnorm_forward(
            x, self.params["gamma"], self.params["beta"], self.buffers["running_mean"],
            self.buffers["running_var"], "train" if train else "infer", self.eps, self.momentum)
        if _grad_enabled:
            self._cache = cache
        return y

    def backward(self, grad):
        gx, gg, gb = ops.batchnorm_backward(grad, self._cache)
        self.grads["gamma"] = gg.astype(DTYPE) if grad.dtype == DTYPE else gg
        self.grads["beta"] = gb.astype(DTYPE) if grad.dtype == DTYPE else gb
        return gx


class ReLU(Layer):
    def forward(self, x, train=False):
        if _grad_enabled:
            self._x = x
        return ops.relu_forward(x)

    def backward(self, grad):
        return ops.relu_backward(self._x, grad)


class MaxPool3d(Layer):
    def __init__(self, name: str, kernel, stride, padding=0) -> None:
        super().__init__(name)
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def forward(self, x, train=False):
        y, cache = ops.maxpool3d_forward(x, self.kernel, self.stride, self.padding)
        if _grad_enabled:
            self._cache = cache
        return y

    def backward(self, grad):
        return ops.maxpool3d_backward(grad, self._cache)


class Linear(Layer):
    def __init__(self, name: str, in_features: int, out_features: int, bias: bool = True,
                 rng: Rng | None = None) -> None:
        super().__init__(name)
        bound = math.sqrt(1.0 / in_features)
        shape = (in_features, out_features)
        self.params["weight"] = (np.zeros(shape, dtype=DTYPE) if rng is None
                                 else fill_uniform(shape, -bound, bound, rng))
        if bias:
            self.params["bias"] = (np.zeros(out_features, dtype=DTYPE) if rng is None
                                   else fill_uniform((out_features,), -bound, bound, rng))

    def forward(self, x, train=False):
        if _grad_enabled:
            self._x = x
        return ops.fully_connected_forward(x, self.params["weight"], self.params.get("bias"))

    def backward(self, grad):
        gx, gw, gb = ops.fully_connected_backward(self._x, self.params["weight"], grad)
        self.grads["weight"] = gw
        if "bias" in self.params:
            self.grads["bias"] = gb
        return gx


class GlobalAvgPool(Layer):
    def forward(self, x, train=False):
        self._shape = x.shape
        return ops.global_avg_pool_forward(x)

    def backward(self, grad):
        return ops.global_avg_pool_backward(self._shape, grad)


class Softmax(Layer):
    def forward(self, x, train=False):
        p = ops.softmax(x)
        if _grad_enabled:
            self._p = p
        return p

    def backward(self, grad):
        return ops.softmax_backward(self._p, grad)


class Sequential(Layer):
    def __init__(self, name: str, layers: list[Layer]) -> None:
        super().__init__(name)
        self.layers = layers
        self._depth = len(layers)

    def children(self):
        return self.layers

    def forward(self, x, train=False, stop_at: str | None = None):
        self._depth = len(self.layers)
        for i, layer in enumerate(self.layers):
            x = layer.forward(x, train)
            if stop_at is not None and layer.name == stop_at:
                self._depth = i + 1
                break
        else:
            if stop_at is not None:
                raise KeyError(f"no layer named {stop_at!r}")
        return x

    def backward(self, grad):
        for layer in reversed(self.layers[:self._depth]):
            grad = layer.backward(grad)
        return grad


class ResidualBlock(Layer):
    """``relu(main(x) + shortcut(x))``; the shortcut is the identity when empty."""

    def __init__(self, name: str, main: Sequential, shortcut: Sequential | None) -> None:
        super().__init__(name)
        self.main = main
        self.shortcut = shortcut

    def children(self):
        return [self.main] + ([self.shortcut] if self.shortcut is not None else [])

    def forward(self, x, train=False):
        h = self.main.forward(x, train)
        s = self.shortcut.forward(x, train) if self.shortcut is not None else x
        if h.shape != s.shape:
            raise ShapeError(f"{self.name}: branch shapes {h.shape} and {s.shape} differ")
        z = h + s
        if _grad_enabled:
            self._z = z
        return ops.relu_forward(z)

    def backward(self, grad):
        gz = ops.relu_backward(self._z, grad)
        gx = self.main.backward(gz)
        if self.shortcut is not None:
            return gx + self.shortcut.backward(gz)
        return gx + gz


class Network(Sequential):
    """Top-level container built from a NetSpec; parameter names are unprefixed."""

    def __init__(self, spec: NetSpec, layers: list[Layer]) -> None:
        super().__init__("", layers)
        self.spec = spec

    @property
    def head_name(self) -> str:
        """Name of the last layer before the softmax (the logits)."""
        names = [layer.name for layer in self.layers]
        if isinstance(self.layers[-1], Softmax):
            return names[-2]
        return names[-1]

    def logits(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        return self.forward(x, train, stop_at=self.head_name)

    def features(self, x: np.ndarray) -> np.ndarray:
        """Activations of the NetSpec feature layer (fc6 for C3D, pre-ReLU)."""
        with no_grad():
            return self.forward(x, False, stop_at=self.spec.feature_layer)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(x, False)

    def parameters(self) -> dict[str, np.ndarray]:
        return dict(self.named_parameters())

    def gradients(self) -> dict[str, np.ndarray]:
        return dict(self.named_grads())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = dict(self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        targets = dict(self.named_parameters())
        targets.update(self.named_buffers())
        missing = [k for k in targets if k not in state]
        unexpected = [k for k in state if k not in targets]
        if strict and (missing or unexpected):
            raise FormatError(f"checkpoint mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for key, dst in targets.items():
            if key in state:
                src = np.asarray(state[key], dtype=DTYPE)
                if src.shape != dst.shape:
                    raise FormatError(f"{key}: checkpoint shape {src.shape} != model {dst.shape}")
                dst[...] = src


def _build(spec: LayerSpec, rng: Rng | None) -> Layer:
    kind = spec.kind
    if kind == "conv3d":
        return Conv3d(spec.name, spec.in_channels, spec.out_channels, spec.kernel, spec.stride,
                      spec.padding, spec.bias, rng)
    if kind == "conv2p1d":
        return Sequential(spec.name, [_build(s, rng) for s in spec.expand()])
    if kind == "batchnorm":
        return BatchNorm(spec.name, spec.in_channels)
    if kind == "relu":
        return ReLU(spec.name)
    if kind == "maxpool3d":
        return MaxPool3d(spec.name, spec.kernel, spec.stride, spec.padding)
    if kind == "fc":
        return Linear(spec.name, spec.in_channels, spec.out_channels, spec.bias, rng)
    if kind == "softmax":
        return Softmax(spec.name)
    if kind == "global_avg_pool":
        return GlobalAvgPool(spec.name)
    if kind == "residual_block":
        # unnamed branches keep parameter names equal to manifest paths
        main = Sequential("", [_build(s, rng) for s in spec.main])
        shortcut = (Sequential("", [_build(s, rng) for s in spec.shortcut])
                    if spec.shortcut else None)
        return ResidualBlock(spec.name, main, shortcut)
    raise ValueError(f"cannot instantiate layer kind {kind}")


def instantiate(spec: NetSpec, rng: Rng | None) -> Network:
    """Allocate a network; weights are fan-in uniform from ``rng`` (zeros if ``rng`` is None)."""
    return Network(spec, [_build(s, rng) for s in spec.layers])
