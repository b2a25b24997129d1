"""Layers and modules built on the autodiff Tensor.

Every layer knows its output shape before execution (``output_shape``),
carries its parameters as requires-grad Tensors, and serialises its
hyperparameters to a LayerSpec for checkpoint headers. Models that are
not simple chains subclass Module and get parameter discovery through
attribute traversal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, concat, conv2d, conv_transpose2d

__all__ = [
    "LayerSpec",
    "ShapeError",
    "Module",
    "Conv2d",
    "ConvTranspose2d",
    "Linear",
    "ReLU",
    "LeakyReLU",
    "Sigmoid",
    "Tanh",
    "LogSoftmax",
    "GroupNorm",
    "BatchNorm2d",
    "AvgPool2d",
    "NearestUpsample",
    "Embedding",
    "Flatten",
    "Sequential",
    "build_layer",
    "kaiming_uniform",
]


class ShapeError(ValueError):
    """Input shape incompatible with a layer."""


@dataclass
class LayerSpec:
    """Declarative layer description: kind plus per-kind hyperparameters."""

    kind: str
    params: dict = field(default_factory=dict)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Base class with parameter discovery over attributes (tensors, layers, lists)."""

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        seen = set()
        self._collect("", out, seen)
        return out

    def _collect(self, prefix, out, seen):
        if id(self) in seen:
            return
        seen.add(id(self))
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                out.append((key, value))
            elif isinstance(value, Module):
                value._collect(key + ".", out, seen)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Tensor):
                        out.append((f"{key}.{i}", item))
                    elif isinstance(item, Module):
                        item._collect(f"{key}.{i}.", out, seen)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        missing = set(params) ^ set(state)
        if missing:
            raise KeyError(f"state dict mismatch on parameter names: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def train(self):
        self._set_mode(True)
        return self

    def eval(self):
        self._set_mode(False)
        return self

    def _set_mode(self, training: bool):
        for value in vars(self).values():
            if isinstance(value, Module):
                value._set_mode(training)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item._set_mode(training)
        if hasattr(self, "training"):
            self.training = training


class Layer(Module):
    """A module with a computable output shape and a LayerSpec."""

    def output_shape(self, in_shape: tuple) -> tuple:
        raise NotImplementedError

    def spec(self) -> LayerSpec:
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 groups=1, bias=True, rng: np.random.Generator | None = None):
        if in_channels % groups or out_channels % groups:
            raise ValueError("channels must divide groups")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.groups = groups
        rng = rng or np.random.default_rng(0)
        fan_in = (in_channels // groups) * kernel_size * kernel_size
        self.weight = Tensor(
            kaiming_uniform(rng, (out_channels, in_channels // groups, kernel_size, kernel_size), fan_in),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"conv2d expects (B, {self.in_channels}, H, W), got {x.shape}")
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def output_shape(self, in_shape):
        b, c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError(f"conv2d expects {self.in_channels} channels, got {c}")
        k, s, p = self.kernel_size, self.stride, self.padding
        return (b, self.out_channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def spec(self):
        return LayerSpec("conv2d", dict(in_channels=self.in_channels, out_channels=self.out_channels,
                                        kernel_size=self.kernel_size, stride=self.stride,
                                        padding=self.padding, groups=self.groups,
                                        bias=self.bias is not None))


class ConvTranspose2d(Layer):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 bias=True, rng: np.random.Generator | None = None):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Tensor(
            kaiming_uniform(rng, (in_channels, out_channels, kernel_size, kernel_size), fan_in),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"transposed-conv2d expects (B, {self.in_channels}, H, W), got {x.shape}")
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)

    def output_shape(self, in_shape):
        b, c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError(f"transposed-conv2d expects {self.in_channels} channels, got {c}")
        k, s, p = self.kernel_size, self.stride, self.padding
        return (b, self.out_channels, (h - 1) * s - 2 * p + k, (w - 1) * s - 2 * p + k)

    def spec(self):
        return LayerSpec("transposed-conv2d", dict(in_channels=self.in_channels,
                                                   out_channels=self.out_channels,
                                                   kernel_size=self.kernel_size, stride=self.stride,
                                                   padding=self.padding, bias=self.bias is not None))


class Linear(Layer):
    def __init__(self, in_features, out_features, bias=True, rng: np.random.Generator | None = None):
        self.in_features = in_features
        self.out_features = out_features
        rng = rng or np.random.default_rng(0)
        self.weight = Tensor(kaiming_uniform(rng, (in_features, out_features), in_features),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"linear expects last dim {self.in_features}, got {x.shape}")
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out

    def output_shape(self, in_shape):
        if in_shape[-1] != self.in_features:
            raise ShapeError(f"linear expects last dim {self.in_features}, got {in_shape}")
        return tuple(in_shape[:-1]) + (self.out_features,)

    def spec(self):
        return LayerSpec("linear", dict(in_features=self.in_features, out_features=self.out_features,
                                        bias=self.bias is not None))


class _Activation(Layer):
    kind = ""

    def forward(self, x):
        raise NotImplementedError

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def spec(self):
        return LayerSpec(self.kind, {})


class ReLU(_Activation):
    kind = "relu"

    def forward(self, x):
        return x.relu()


class LeakyReLU(_Activation):
    kind = "leaky-relu"

    def __init__(self, negative_slope=0.2):
        self.negative_slope = negative_slope

    def forward(self, x):
        return x.leaky_relu(self.negative_slope)

    def spec(self):
        return LayerSpec(self.kind, dict(negative_slope=self.negative_slope))


class Sigmoid(_Activation):
    kind = "sigmoid"

    def forward(self, x):
        return x.sigmoid()


class Tanh(_Activation):
    kind = "tanh"

    def forward(self, x):
        return x.tanh()


class LogSoftmax(_Activation):
    kind = "log-softmax"

    def __init__(self, axis=-1):
        self.axis = axis

    def forward(self, x):
        return x.log_softmax(self.axis)

    def spec(self):
        return LayerSpec(self.kind, dict(axis=self.axis))


class GroupNorm(Layer):
    def __init__(self, num_groups, num_channels, eps=1e-5):
        if num_channels % num_groups:
            raise ValueError("channels must divide groups")
        self.num_groups = num_groups
        self.num_channels = num_channels
        self.eps = eps
        self.weight = Tensor(np.ones(num_channels), requires_grad=True)
        self.bias = Tensor(np.zeros(num_channels), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.num_channels:
            raise ShapeError(f"group-norm expects (B, {self.num_channels}, H, W), got {x.shape}")
        b, c, h, w = x.shape
        g = self.num_groups
        xg = x.reshape(b, g, c // g * h * w)
        mu = xg.mean(axis=2, keepdims=True)
        var = ((xg - mu) ** 2).mean(axis=2, keepdims=True)
        norm = (xg - mu) / ((var + self.eps) ** 0.5)
        norm = norm.reshape(b, c, h, w)
        return norm * self.weight.reshape(1, c, 1, 1) + self.bias.reshape(1, c, 1, 1)

    def output_shape(self, in_shape):
        if in_shape[1] != self.num_channels:
            raise ShapeError(f"group-norm expects {self.num_channels} channels, got {in_shape}")
        return tuple(in_shape)

    def spec(self):
        return LayerSpec("group-norm", dict(num_groups=self.num_groups,
                                            num_channels=self.num_channels, eps=self.eps))


class BatchNorm2d(Layer):
    def __init__(self, num_channels, eps=1e-5, momentum=0.1):
        self.num_channels = num_channels
        self.eps = eps
        self.momentum = momentum
        self.training = True
        self.weight = Tensor(np.ones(num_channels), requires_grad=True)
        self.bias = Tensor(np.zeros(num_channels), requires_grad=True)
        self.running_mean = np.zeros(num_channels)
        self.running_var = np.ones(num_channels)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.num_channels:
            raise ShapeError(f"batch-norm expects (B, {self.num_channels}, H, W), got {x.shape}")
        c = self.num_channels
        if self.training:
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            var = ((x - mu) ** 2).mean(axis=(0, 2, 3), keepdims=True)
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mu.data.reshape(c)
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var.data.reshape(c)
        else:
            mu = Tensor(self.running_mean.reshape(1, c, 1, 1))
            var = Tensor(self.running_var.reshape(1, c, 1, 1))
        norm = (x - mu) / ((var + self.eps) ** 0.5)
        return norm * self.weight.reshape(1, c, 1, 1) + self.bias.reshape(1, c, 1, 1)

    def output_shape(self, in_shape):
        if in_shape[1] != self.num_channels:
            raise ShapeError(f"batch-norm expects {self.num_channels} channels, got {in_shape}")
        return tuple(in_shape)

    def spec(self):
        return LayerSpec("batch-norm", dict(num_channels=self.num_channels, eps=self.eps,
                                            momentum=self.momentum))


class AvgPool2d(Layer):
    def __init__(self, kernel_size):
        self.kernel_size = kernel_size

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        k = self.kernel_size
        if h % k or w % k:
            raise ShapeError(f"avg-pool kernel {k} must divide spatial dims {h}x{w}")
        return x.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def output_shape(self, in_shape):
        b, c, h, w = in_shape
        k = self.kernel_size
        if h % k or w % k:
            raise ShapeError(f"avg-pool kernel {k} must divide spatial dims {h}x{w}")
        return (b, c, h // k, w // k)

    def spec(self):
        return LayerSpec("avg-pool", dict(kernel_size=self.kernel_size))


class NearestUpsample(Layer):
    def __init__(self, scale=2):
        self.scale = scale

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        s = self.scale
        out = x.reshape(b, c, h, 1, w, 1)
        out = concat([out] * s, axis=3)
        out = concat([out] * s, axis=5)
        return out.reshape(b, c, h * s, w * s)

    def output_shape(self, in_shape):
        b, c, h, w = in_shape
        return (b, c, h * self.scale, w * self.scale)

    def spec(self):
        return LayerSpec("nearest-upsample", dict(scale=self.scale))


class Embedding(Layer):
    def __init__(self, num_embeddings, dim, rng: np.random.Generator | None = None):
        self.num_embeddings = num_embeddings
        self.dim = dim
        rng = rng or np.random.default_rng(0)
        self.weight = Tensor(rng.normal(size=(num_embeddings, dim)) * 0.02, requires_grad=True)

    def forward(self, idx) -> Tensor:
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.num_embeddings):
            raise IndexError(f"embedding index out of range [0, {self.num_embeddings})")
        return self.weight[idx]

    def output_shape(self, in_shape):
        return tuple(in_shape) + (self.dim,)

    def spec(self):
        return LayerSpec("embedding", dict(num_embeddings=self.num_embeddings, dim=self.dim))


class Flatten(Layer):
    def forward(self, x: Tensor) -> Tensor:
        return x.reshape(x.shape[0], -1)

    def output_shape(self, in_shape):
        return (in_shape[0], int(np.prod(in_shape[1:])))

    def spec(self):
        return LayerSpec("flatten", {})


class Sequential(Module):
    """Chain of layers; shape errors name the offending layer index."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            try:
                x = layer(x)
            except (ShapeError, ValueError) as exc:
                raise ShapeError(f"layer {i} ({type(layer).__name__}): {exc}") from exc
        return x

    def output_shape(self, in_shape):
        for i, layer in enumerate(self.layers):
            try:
                in_shape = layer.output_shape(in_shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({type(layer).__name__}): {exc}") from exc
        return tuple(in_shape)

    def specs(self) -> list[LayerSpec]:
        return [layer.spec() for layer in self.layers]


_LAYER_KINDS = {
    "conv2d": Conv2d,
    "transposed-conv2d": ConvTranspose2d,
    "linear": Linear,
    "relu": ReLU,
    "leaky-relu": LeakyReLU,
    "sigmoid": Sigmoid,
    "tanh": Tanh,
    "log-softmax": LogSoftmax,
    "group-norm": GroupNorm,
    "batch-norm": BatchNorm2d,
    "avg-pool": AvgPool2d,
    "nearest-upsample": NearestUpsample,
    "embedding": Embedding,
    "flatten": Flatten,
}


def build_layer(spec: LayerSpec, rng: np.random.Generator | None = None) -> Layer:
    """Materialise a layer from its spec; parameterised kinds accept an rng."""
    if spec.kind not in _LAYER_KINDS:
        raise ValueError(f"unknown layer kind {spec.kind!r}")
    cls = _LAYER_KINDS[spec.kind]
    params = dict(spec.params)
    if cls in (Conv2d, ConvTranspose2d, Linear, Embedding):
        params["rng"] = rng
    return cls(**params)
