# -*- coding: UTF-8 -*-
"""
Layers and modules on top of the tensor engine
A Module owns named parameters (Tensors with requires_grad), buffers
(running statistics) and child modules. Names are dotted paths, which is
also how checkpoints address them.
"""

import logging
import math
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from . import engine as E
from .core import Rng
from .engine import Tensor
from .errors import InputError, ShapeError

logger = logging.getLogger(__name__)

MODES = ("train", "eval")


class Module:
    kind = "module"

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.name = ""
        self._params: Dict[str, Tensor] = {}
        self._buffers: Dict[str, np.ndarray] = {}
        self._children: Dict[str, "Module"] = {}

    def add_param(self, name: str, shape: Tuple[int, ...], fill: float = 0.0) -> Tensor:
        t = Tensor(np.full(shape, fill, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = np.asarray(value, dtype=self.dtype)

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for cname, child in self._children.items():
            yield from child.named_modules(prefix + cname + ".")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_buffer(self, path: str, value: np.ndarray) -> None:
        module, leaf = self._resolve(path)
        if leaf not in module._buffers:
            raise InputError("Unknown buffer {!r}".format(path))
        module._buffers[leaf] = np.asarray(value, dtype=module.dtype).reshape(module._buffers[leaf].shape)

    def _resolve(self, path: str) -> Tuple["Module", str]:
        parts = path.split(".")
        module = self
        for part in parts[:-1]:
            if part not in module._children:
                raise InputError("Unknown module path {!r}".format(path))
            module = module._children[part]
        return module, parts[-1]

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise InputError("State is missing entries: {}".format(", ".join(sorted(missing)[:5])))
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError("{}: stored shape {} does not match {}".format(name, value.shape, p.shape))
            p.data = value.astype(p.dtype, copy=True)
        for name, b in buffers.items():
            self.set_buffer(name, state[name])

    def finalize_names(self, prefix: str = "") -> "Module":
        """Give every module its dotted path, used in error messages"""
        for path, module in self.named_modules(prefix + "." if prefix else ""):
            module.name = path or type(module).__name__
        return self

    def __call__(self, x, mode: str = "train"):
        return self.forward(x, mode)

    def forward(self, x, mode: str = "train"):
        raise NotImplementedError


class Conv2d(Module):
    kind = "conv"

    def __init__(self, in_channels: int, out_channels: int, kernel: Union[int, Tuple[int, int]] = 3, stride: int = 1, bias: bool = True, dtype=np.float32):
        super().__init__(dtype)
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.in_channels, self.out_channels, self.kernel, self.stride = in_channels, out_channels, (kh, kw), stride
        self.weight = self.add_param("weight", (out_channels, in_channels, kh, kw))
        self.bias = self.add_param("bias", (out_channels,)) if bias else None

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel[0] * self.kernel[1]

    def forward(self, x, mode="train"):
        return E.conv2d(x, self.weight, self.bias, self.stride, name=self.name or "conv")


class Linear(Module):
    kind = "fully-connected"

    def __init__(self, in_features: int, out_features: int, bias: bool = True, dtype=np.float32):
        super().__init__(dtype)
        self.in_features, self.out_features = in_features, out_features
        self.weight = self.add_param("weight", (out_features, in_features))
        self.bias = self.add_param("bias", (out_features,)) if bias else None

    @property
    def fan_in(self) -> int:
        return self.in_features

    def forward(self, x, mode="train"):
        return E.linear(x, self.weight, self.bias, name=self.name or "linear")


class BatchNorm2d(Module):
    """Batch statistics in train mode, running statistics in eval mode"""

    kind = "batchnorm"

    def __init__(self, channels: int, eps: float = E.BN_EPS, momentum: float = E.BN_MOMENTUM, dtype=np.float32):
        super().__init__(dtype)
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.weight = self.add_param("weight", (channels,), 1.0)
        self.bias = self.add_param("bias", (channels,), 0.0)
        self.add_buffer("running_mean", np.zeros(channels))
        self.add_buffer("running_var", np.ones(channels))

    def forward(self, x, mode="train"):
        if x.data.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError("{}: expects {} channels, got input of shape {}".format(self.name or "batchnorm", self.channels, x.shape))
        if mode == "eval":
            return E.batch_norm_eval(x, self.weight, self.bias, self._buffers["running_mean"], self._buffers["running_var"], self.eps)
        out, mu, var = E.batch_norm_train(x, self.weight, self.bias, self.eps)
        m = self.momentum
        self._buffers["running_mean"] = ((1.0 - m) * self._buffers["running_mean"] + m * mu).astype(self.dtype)
        self._buffers["running_var"] = ((1.0 - m) * self._buffers["running_var"] + m * var).astype(self.dtype)
        return out


class LeakyReLU(Module):
    kind = "leaky-relu"

    def __init__(self, slope: float = 0.1, dtype=np.float32):
        super().__init__(dtype)
        self.slope = slope

    def forward(self, x, mode="train"):
        return E.leaky_relu(x, self.slope)


class Sigmoid(Module):
    kind = "sigmoid"

    def forward(self, x, mode="train"):
        return E.sigmoid(x)


class MaxPool2d(Module):
    kind = "spatial-max-pool"

    def forward(self, x, mode="train"):
        return E.max_pool2d(x)


class AvgPool2d(Module):
    kind = "spatial-avg-pool"

    def forward(self, x, mode="train"):
        return E.avg_pool2d(x)


class GlobalMaxPool(Module):
    kind = "global-max-pool"

    def forward(self, x, mode="train"):
        return E.global_max_pool(x)


class GlobalAvgPool(Module):
    kind = "global-avg-pool"

    def forward(self, x, mode="train"):
        return E.global_avg_pool(x)


class Upsample(Module):
    """Bilinear resize to an explicit size, or x2 when no size is given"""

    kind = "upsample"

    def __init__(self, size: Optional[Tuple[int, int]] = None, dtype=np.float32):
        super().__init__(dtype)
        self.size = size

    def forward(self, x, mode="train"):
        h, w = self.size or (x.shape[2] * 2, x.shape[3] * 2)
        return E.upsample_bilinear(x, h, w)


class L2Norm(Module):
    kind = "l2norm"

    def forward(self, x, mode="train"):
        return E.l2norm_channels(x)


class Sequential(Module):
    kind = "sequential"

    def __init__(self, *layers: Module, dtype=np.float32):
        super().__init__(dtype)
        self.layers = [self.add_child(str(i), layer) for i, layer in enumerate(layers)]

    def forward(self, x, mode="train"):
        for layer in self.layers:
            x = layer(x, mode)
        return x


def conv_bn_act(in_channels: int, out_channels: int, kernel=3, stride: int = 1, slope: float = 0.1, dtype=np.float32) -> Sequential:
    """Convolution (no bias, the norm absorbs it), batch norm, leaky ReLU"""
    return Sequential(
        Conv2d(in_channels, out_channels, kernel, stride, bias=False, dtype=dtype),
        BatchNorm2d(out_channels, dtype=dtype),
        LeakyReLU(slope, dtype=dtype),
        dtype=dtype,
    )


def forward(layer: Module, x: Tensor, mode: str = "train") -> Tensor:
    if mode not in MODES:
        raise InputError("mode must be 'train' or 'eval', got {!r}".format(mode))
    return layer(x, mode)


def init_params(layer: Module, rng: Rng) -> None:
    """
    He-normal weights (variance 2 / fan_in) for conv and fully-connected
    layers, zero biases, unit batch-norm scale and zero shift.

    Each parameter draws from its own stream keyed by its dotted name, so
    adding a layer never reshuffles the others.
    """
    for path, module in layer.named_modules():
        if isinstance(module, (Conv2d, Linear)):
            std = math.sqrt(2.0 / module.fan_in)
            stream = rng.split(path or "root")
            module.weight.data = stream.normal(0.0, std, module.weight.shape).astype(module.dtype)
            if module.bias is not None:
                module.bias.data = np.zeros(module.bias.shape, dtype=module.dtype)
        elif isinstance(module, BatchNorm2d):
            module.weight.data = np.ones(module.channels, dtype=module.dtype)
            module.bias.data = np.zeros(module.channels, dtype=module.dtype)
            module._buffers["running_mean"] = np.zeros(module.channels, dtype=module.dtype)
            module._buffers["running_var"] = np.ones(module.channels, dtype=module.dtype)
