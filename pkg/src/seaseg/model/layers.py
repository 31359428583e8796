"""Minimal module tree: named parameters, batch-norm buffers, train/eval mode."""

from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .. import autodiff as ad
from ..autodiff import BatchNormState, Tensor
from ..autodiff.functional import nhwc


class Module:
    """Base class. Children and parameters are kept in registration order."""

    def __init__(self) -> None:
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "_params", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def register_parameter(self, name: str, tensor: Tensor) -> Tensor:
        tensor.requires_grad = True
        self._params[name] = tensor
        object.__setattr__(self, name, tensor)
        return tensor

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        return iter(self._children.items())

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        out = []
        for path, mod in self.named_modules(prefix):
            for name, t in mod._params.items():
                out.append((f"{path}.{name}" if path else name, t))
        return out

    def named_buffers(self, prefix: str = "") -> List[Tuple[str, np.ndarray]]:
        out = []
        for path, mod in self.named_modules(prefix):
            if isinstance(mod, BatchNorm2d):
                out.append((f"{path}.running_mean", mod.state.running_mean))
                out.append((f"{path}.running_var", mod.state.running_var))
        return out

    def set_mode(self, mode: str) -> None:
        for _, mod in self.named_modules():
            if isinstance(mod, BatchNorm2d):
                mod.state.mode = mode

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:  # pragma: no cover - abstract
        raise NotImplementedError


def _fused_inference(bn: Optional["BatchNorm2d"]) -> bool:
    return not ad.is_grad_enabled() and (bn is None or bn.state.mode == "eval")


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1, padding: int = 0,
                 dilation: int = 1, bias: bool = False):
        super().__init__()
        self.spec = ad.ConvSpec(cin, cout, (kernel, kernel), stride, padding, dilation, bias)
        self.register_parameter("weight", Tensor(np.zeros((cout, cin, kernel, kernel), np.float32)))
        self.bias = None
        if bias:
            self.register_parameter("bias", Tensor(np.zeros(cout, np.float32)))

    def reset(self, rng: np.random.Generator) -> None:
        # Kaiming normal, fan-out mode, ReLU gain
        o, _, kh, kw = self.weight.shape
        std = np.sqrt(2.0 / (o * kh * kw))
        self.weight.data[...] = rng.standard_normal(self.weight.shape) * std
        if self.bias is not None:
            self.bias.data[...] = 0

    def forward(self, x: Tensor) -> Tensor:
        s = self.spec
        return ad.conv2d(x, self.weight, self.bias, s.stride, s.padding, s.dilation)


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.state = BatchNormState.create(channels)
        self.register_parameter("weight", self.state.gamma)
        self.register_parameter("bias", self.state.beta)

    def forward(self, x: Tensor) -> Tensor:
        return ad.batch_norm2d(x, self.state)


def _affine_inplace(y: np.ndarray, bn: "BatchNorm2d", relu: bool, residual: Optional[np.ndarray] = None):
    scale, shift = bn.state.eval_affine()
    yh = nhwc(y)
    yh *= scale.astype(y.dtype)
    yh += shift.astype(y.dtype)
    if residual is not None:
        y += residual
    if relu:
        np.maximum(y, 0, out=y)
    return y


class ConvBN(Module):
    """Conv, then batch norm, then optional ReLU."""

    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1, padding: int = 0,
                 dilation: int = 1, relu: bool = True):
        super().__init__()
        self.conv = Conv2d(cin, cout, kernel, stride, padding, dilation)
        self.bn = BatchNorm2d(cout)
        self.relu = relu

    def forward(self, x: Tensor, residual: Optional[Tensor] = None) -> Tensor:
        if _fused_inference(self.bn):
            # eval without a graph: fold BN into an in-place affine to save memory
            y = self.conv(x).data
            return Tensor(_affine_inplace(y, self.bn, self.relu, None if residual is None else residual.data))
        y = self.bn(self.conv(x))
        if residual is not None:
            y = ad.add(y, residual)
        return ad.relu(y) if self.relu else y

    def __call__(self, x: Tensor, residual: Optional[Tensor] = None) -> Tensor:
        return self.forward(x, residual)


class Sequential(Module):
    def __init__(self, *mods: Module):
        super().__init__()
        for i, m in enumerate(mods):
            self.add_child(str(i), m)

    def __iter__(self):
        return iter(self._children.values())

    def __getitem__(self, i: int) -> Module:
        return list(self._children.values())[i]

    def __len__(self) -> int:
        return len(self._children)

    def forward(self, x: Tensor) -> Tensor:
        for m in self._children.values():
            x = m(x)
        return x


def init_modules(root: Module, rng: np.random.Generator) -> None:
    """Random init in registration order so equal seeds give identical weights."""
    for _, mod in root.named_modules():
        if isinstance(mod, Conv2d):
            mod.reset(rng)
        elif isinstance(mod, BatchNorm2d):
            mod.state.gamma.data[...] = 1
            mod.state.beta.data[...] = 0
            mod.state.running_mean[...] = 0
            mod.state.running_var[...] = 1


def cast_module(root: Module, dtype) -> None:
    """Convert every parameter and batch-norm buffer to ``dtype`` in place (float64 for gradient checks)."""
    for _, t in root.named_parameters():
        t.data = t.data.astype(dtype)
        t.grad = None
    for _, mod in root.named_modules():
        if isinstance(mod, BatchNorm2d):
            mod.state.running_mean = mod.state.running_mean.astype(dtype)
            mod.state.running_var = mod.state.running_var.astype(dtype)


def count(params: List[Tuple[str, Tensor]]) -> int:
    return int(np.sum([t.data.size for _, t in params], dtype=np.int64))


def state_dict(root: Module, prefix: str = "") -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = OrderedDict()
    for name, t in root.named_parameters(prefix):
        out[name] = t.data
    for name, b in root.named_buffers(prefix):
        out[name] = b
    return out
