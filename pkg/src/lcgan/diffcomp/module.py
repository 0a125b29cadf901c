"""Minimal parameter containers on top of the tensor engine."""
from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Iterator, List, Tuple

import numpy as np

from . import functional as fn
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(np.asarray(data), requires_grad=requires_grad)


class Module:
    """Base class: attributes that are Parameters, Modules or registered buffers
    are discovered in assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        elif name in self._buffers:
            self._buffers[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    # -- traversal --------------------------------------------------------
    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, mod in self._modules.items():
            yield from mod.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for mod_name, mod in self.named_modules(prefix):
            for name, p in mod._params.items():
                yield (f"{mod_name}.{name}" if mod_name else name), p

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for mod_name, mod in self.named_modules(prefix):
            for name, b in mod._buffers.items():
                yield (f"{mod_name}.{name}" if mod_name else name), b

    def num_parameters(self, trainable_only: bool = False) -> int:
        ps = self.trainable_parameters() if trainable_only else self.parameters()
        return int(sum(p.size for p in ps))

    # -- state ------------------------------------------------------------
    def train(self, mode: bool = True):
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = OrderedDict((name, p.data) for name, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True):
        params = dict(self.named_parameters())
        buffers = {name for name, _ in self.named_buffers()}
        expected = set(params) | buffers
        if strict:
            missing = expected - set(state)
            unexpected = set(state) - expected
            if missing or unexpected:
                raise KeyError(f"state mismatch; missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, value in state.items():
            if name in params:
                p = params[name]
                if p.shape != value.shape:
                    raise ValueError(f"{name}: shape {value.shape} does not match {p.shape}")
                p.data = np.array(value, dtype=p.dtype)
            elif name in buffers:
                mod_name, _, attr = name.rpartition(".")
                mod = dict(self.named_modules())[mod_name]
                old = getattr(mod, attr)
                if np.shape(old) != np.shape(value):
                    raise ValueError(f"{name}: shape {np.shape(value)} does not match {np.shape(old)}")
                setattr(mod, attr, np.array(value, dtype=np.asarray(old).dtype))
        return self

    def astype(self, dtype):
        """Cast parameters and buffers in place (float64 for gradient checks)."""
        for _, m in self.named_modules():
            for p in m._params.values():
                p.data = p.data.astype(dtype)
                p.grad = None
            for name in list(m._buffers):
                setattr(m, name, np.asarray(m._buffers[name]).astype(dtype))
        return self


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)
        object.__setattr__(self, "layers", list(layers))

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)


def _gaussian(rng, shape, std=0.02):
    return (rng.standard_normal(shape) * std).astype(np.float32)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, k, stride=1, padding=0, dilation=1, bias=True, rng=None, std=0.02):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.padding, self.dilation = stride, padding, dilation
        self.weight = Parameter(_gaussian(rng, (out_ch, in_ch, k, k), std))
        self.bias = Parameter(np.zeros(out_ch, np.float32)) if bias else None

    def forward(self, x):
        return fn.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class ConvTranspose2d(Module):
    def __init__(self, in_ch, out_ch, k, stride=1, padding=0, bias=True, rng=None, std=0.02):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        self.weight = Parameter(_gaussian(rng, (in_ch, out_ch, k, k), std))
        self.bias = Parameter(np.zeros(out_ch, np.float32)) if bias else None

    def forward(self, x):
        return fn.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class InstanceNorm(Module):
    def __init__(self, eps=1e-5):
        super().__init__()
        self.eps = eps

    def forward(self, x):
        return fn.instance_norm(x, self.eps)


class BatchNorm(Module):
    """Batch statistics in training mode, running statistics in eval mode."""

    def __init__(self, ch, eps=1e-5, momentum=0.1):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.gamma = Parameter(np.ones(ch, np.float32))
        self.beta = Parameter(np.zeros(ch, np.float32))
        self.register_buffer("running_mean", np.zeros(ch, np.float32))
        self.register_buffer("running_var", np.ones(ch, np.float32))

    def forward(self, x):
        c = x.shape[1]
        if self.training:
            xhat, mu, var = fn.batch_statistics(x, self.eps)
            m = self.momentum
            n = x.size // c
            unbiased = var * (n / max(n - 1, 1))
            self.running_mean = ((1 - m) * self.running_mean + m * mu).astype(self.running_mean.dtype)
            self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(self.running_var.dtype)
        else:
            scale = (1.0 / np.sqrt(self.running_var + self.eps)).reshape(1, c, 1, 1).astype(x.dtype)
            shift = (-self.running_mean.reshape(1, c, 1, 1) * scale).astype(x.dtype)
            xhat = x * scale + shift
        return xhat * self.gamma.reshape(1, c, 1, 1) + self.beta.reshape(1, c, 1, 1)


class Activation(Module):
    def __init__(self, kind: str, slope: float = 0.2):
        super().__init__()
        if kind not in ("relu", "leaky_relu", "tanh", "sigmoid"):
            raise ValueError(f"unknown activation {kind!r}")
        self.kind, self.slope = kind, slope

    def forward(self, x):
        if self.kind == "relu":
            return x.relu()
        if self.kind == "leaky_relu":
            return x.leaky_relu(self.slope)
        if self.kind == "tanh":
            return x.tanh()
        return x.sigmoid()
