"""Small feed-forward networks used as coupling subnets and condition heads.

Layers hold ``Parameter`` leaves; evaluation goes through the recorded-op
tensor primitives so gradients come for free. Conditioning inputs are
concatenated along the feature/channel axis.
"""

from __future__ import annotations

import numpy as np

from condflow.errors import DimensionError
from condflow.numerics import tensor as T
from condflow.numerics.tensor import Parameter, Tensor


def xavier_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator,
                   dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Linear:
    def __init__(self, in_dim: int, out_dim: int, name: str = "linear",
                 dtype=np.float32):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Parameter(np.zeros((out_dim, in_dim), dtype=dtype), name=f"{name}.weight")
        self.bias = Parameter(np.zeros(out_dim, dtype=dtype), name=f"{name}.bias")

    def init_xavier(self, rng: np.random.Generator):
        self.weight.data = xavier_uniform(self.weight.shape, self.in_dim,
                                          self.out_dim, rng, self.weight.data.dtype)
        self.bias.data = np.zeros_like(self.bias.data)

    def init_zero(self):
        self.weight.data = np.zeros_like(self.weight.data)
        self.bias.data = np.zeros_like(self.bias.data)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(
                f"linear layer expects (N, {self.in_dim}), got {x.shape}")
        return T.matmul(x, self.weight.T) + self.bias

    def parameters(self):
        return [self.weight, self.bias]


class Conv2d:
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 padding: int = 1, name: str = "conv", dtype=np.float32):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(np.zeros((out_ch, in_ch, kernel, kernel), dtype=dtype),
                                name=f"{name}.weight")
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype), name=f"{name}.bias")

    def init_xavier(self, rng: np.random.Generator):
        k2 = self.kernel * self.kernel
        self.weight.data = xavier_uniform(self.weight.shape, self.in_ch * k2,
                                          self.out_ch * k2, rng, self.weight.data.dtype)
        self.bias.data = np.zeros_like(self.bias.data)

    def init_zero(self):
        self.weight.data = np.zeros_like(self.weight.data)
        self.bias.data = np.zeros_like(self.bias.data)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding)

    def out_spatial(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        return ho, wo

    def parameters(self):
        return [self.weight, self.bias]


class BatchNorm2d:
    """Per-channel normalization: batch statistics while training, running
    averages at inference."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 name: str = "bn", dtype=np.float32):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype), name=f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels, dtype=dtype), name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.training = True

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DimensionError(
                f"batchnorm expects (N, {self.channels}, H, W), got {x.shape}")
        if self.training:
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            centered = x - mu
            var = centered.square().mean(axis=(0, 2, 3), keepdims=True)
            self.running_mean = ((1 - self.momentum) * self.running_mean
                                 + self.momentum * mu.data.reshape(-1))
            self.running_var = ((1 - self.momentum) * self.running_var
                                + self.momentum * var.data.reshape(-1))
            inv = (var + self.eps) ** -0.5
            normed = centered * inv
        else:
            shape = (1, self.channels, 1, 1)
            mu = Tensor(self.running_mean.reshape(shape))
            inv = Tensor(1.0 / np.sqrt(self.running_var.reshape(shape) + self.eps))
            normed = (x - mu) * inv
        g = self.gamma.reshape((1, self.channels, 1, 1))
        b = self.beta.reshape((1, self.channels, 1, 1))
        return normed * g + b

    def parameters(self):
        return [self.gamma, self.beta]

    def state_arrays(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class MLP:
    """Fully connected subnet; conditioning is concatenated to the input."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, cond_dim: int = 0,
                 n_hidden: int = 2, slope: float = 0.01, name: str = "mlp",
                 dtype=np.float32):
        self.in_dim = in_dim
        self.cond_dim = cond_dim
        self.out_dim = out_dim
        self.slope = slope
        dims = [in_dim + cond_dim] + [hidden] * n_hidden + [out_dim]
        self.layers = [
            Linear(dims[i], dims[i + 1], name=f"{name}.fc{i}", dtype=dtype)
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x: Tensor, cond: Tensor | None = None) -> Tensor:
        if self.cond_dim:
            if cond is None:
                raise DimensionError("subnet expects conditioning features")
            if cond.ndim != 2 or cond.shape[1] != self.cond_dim:
                raise DimensionError(
                    f"conditioning shape {cond.shape} != (N, {self.cond_dim})")
            x = T.concat([x, cond], axis=1)
        elif cond is not None and cond.size:
            raise DimensionError("unconditional subnet received conditioning input")
        for layer in self.layers[:-1]:
            x = T.leaky_relu(layer(x), self.slope)
        return self.layers[-1](x)

    def init_xavier(self, rng, zero_last: bool = True):
        for layer in self.layers:
            layer.init_xavier(rng)
        if zero_last:
            self.layers[-1].init_zero()

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def arch(self) -> dict:
        return {"kind": "mlp", "in_dim": self.in_dim, "cond_dim": self.cond_dim,
                "hidden": self.layers[0].out_dim, "out_dim": self.out_dim,
                "n_hidden": len(self.layers) - 1, "slope": self.slope}


class ConvNet:
    """Stride-1 convolutional subnet; conditioning joins along channels and
    must share the spatial extent of the data input."""

    def __init__(self, in_ch: int, hidden: int, out_ch: int, cond_ch: int = 0,
                 n_hidden: int = 2, slope: float = 0.01, name: str = "convnet",
                 dtype=np.float32):
        self.in_ch = in_ch
        self.cond_ch = cond_ch
        self.out_ch = out_ch
        self.slope = slope
        chans = [in_ch + cond_ch] + [hidden] * n_hidden + [out_ch]
        self.layers = [
            Conv2d(chans[i], chans[i + 1], kernel=3, stride=1, padding=1,
                   name=f"{name}.conv{i}", dtype=dtype)
            for i in range(len(chans) - 1)
        ]

    def __call__(self, x: Tensor, cond: Tensor | None = None) -> Tensor:
        if self.cond_ch:
            if cond is None:
                raise DimensionError("subnet expects conditioning features")
            if cond.ndim != 4 or cond.shape[1] != self.cond_ch or \
                    cond.shape[2:] != x.shape[2:]:
                raise DimensionError(
                    f"conditioning shape {cond.shape} incompatible with input {x.shape}")
            x = T.concat([x, cond], axis=1)
        elif cond is not None and cond.size:
            raise DimensionError("unconditional subnet received conditioning input")
        for layer in self.layers[:-1]:
            x = T.leaky_relu(layer(x), self.slope)
        return self.layers[-1](x)

    def init_xavier(self, rng, zero_last: bool = True):
        for layer in self.layers:
            layer.init_xavier(rng)
        if zero_last:
            self.layers[-1].init_zero()

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def arch(self) -> dict:
        return {"kind": "convnet", "in_ch": self.in_ch, "cond_ch": self.cond_ch,
                "hidden": self.layers[0].out_ch, "out_ch": self.out_ch,
                "n_hidden": len(self.layers) - 1, "slope": self.slope}


def build_subnet(arch: dict, name: str, dtype=np.float32):
    kind = arch["kind"]
    if kind == "mlp":
        return MLP(arch["in_dim"], arch["hidden"], arch["out_dim"],
                   cond_dim=arch["cond_dim"], n_hidden=arch["n_hidden"],
                   slope=arch["slope"], name=name, dtype=dtype)
    if kind == "convnet":
        return ConvNet(arch["in_ch"], arch["hidden"], arch["out_ch"],
                       cond_ch=arch["cond_ch"], n_hidden=arch["n_hidden"],
                       slope=arch["slope"], name=name, dtype=dtype)
    raise ValueError(f"unknown subnet kind {kind!r}")


def forward_eval(net, x, cond=None) -> Tensor:
    """Evaluate a subnet on (input, conditioning); both may be arrays."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if cond is not None and not isinstance(cond, Tensor):
        cond = Tensor(cond)
    return net(x, cond)
