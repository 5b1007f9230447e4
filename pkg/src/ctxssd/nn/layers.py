"""Parameterised layers and the module container."""
from __future__ import annotations

import numpy as np

from . import functional as F
from .tensor import Parameter, get_default_dtype


class Module:
    """Base container.

    Parameters, child modules and lists/dicts of child modules assigned as
    attributes are discovered in assignment order.  Non-trainable state lives
    in ``self._buffers`` (name -> ndarray).
    """

    training = True

    def __init__(self):
        self._buffers = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Module, Parameter)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, (Module, Parameter)):
                        yield f"{name}.{i}", v
            elif isinstance(value, dict):
                for k, v in value.items():
                    if isinstance(v, (Module, Parameter)):
                        yield f"{name}.{k}", v

    def named_modules(self, prefix: str = ""):
        yield prefix, self
        for name, child in self._children():
            if isinstance(child, Module):
                yield from child.named_modules(f"{prefix}{name}.")

    def named_parameters(self, prefix: str = ""):
        for name, child in self._children():
            if isinstance(child, Parameter):
                yield prefix + name, child
            else:
                yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        for prefix, mod in self.named_modules():
            for name, buf in getattr(mod, "_buffers", {}).items():
                yield prefix + name, buf

    def state_dict(self) -> dict:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        own = dict(self.named_parameters())
        bufs = {}
        for prefix, mod in self.named_modules():
            for name in getattr(mod, "_buffers", {}):
                bufs[prefix + name] = (mod, name)
        if strict:
            missing = (set(own) | set(bufs)) - set(state)
            unexpected = set(state) - (set(own) | set(bufs))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}")
        for name, value in state.items():
            if name in own:
                p = own[name]
                if p.shape != np.shape(value):
                    raise ValueError(f"{name}: checkpoint shape {np.shape(value)} != model shape {p.shape}")
                p.data = np.array(value, dtype=p.dtype)
            elif name in bufs:
                mod, key = bufs[name]
                if mod._buffers[key].shape != np.shape(value):
                    raise ValueError(f"{name}: checkpoint shape {np.shape(value)} != model shape")
                mod._buffers[key][...] = value

    def train(self, mode: bool = True):
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 dilation=1, bias=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng()
        kh, kw = F._pair(kernel_size)
        self.weight = Parameter(he_uniform(rng, (out_channels, in_channels, kh, kw), in_channels * kh * kw))
        self.bias = Parameter(np.zeros(out_channels, dtype=get_default_dtype())) if bias else None
        self.stride, self.padding, self.dilation = stride, padding, dilation

    @property
    def params(self) -> F.ConvParams:
        return F.ConvParams(self.weight, self.bias, self.stride, self.padding, self.dilation)

    def forward(self, x):
        return F.conv2d(x, self.params)


class ConvTranspose2d(Module):
    """Transposed convolution whose output is aligned to a requested size."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 bias=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng()
        kh, kw = F._pair(kernel_size)
        self.weight = Parameter(he_uniform(rng, (out_channels, in_channels, kh, kw), in_channels * kh * kw))
        self.bias = Parameter(np.zeros(out_channels, dtype=get_default_dtype())) if bias else None
        self.stride, self.padding = stride, padding

    @property
    def params(self) -> F.ConvParams:
        return F.ConvParams(self.weight, self.bias, self.stride, self.padding)

    def forward(self, x, target_hw=None):
        return F.conv_transpose2d(x, self.params, target_hw)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        dt = get_default_dtype()
        self.gamma = Parameter(np.ones(channels, dtype=dt))
        self.beta = Parameter(np.zeros(channels, dtype=dt))
        self._buffers["running_mean"] = np.zeros(channels, dtype=dt)
        self._buffers["running_var"] = np.ones(channels, dtype=dt)
        self.momentum, self.eps = momentum, eps

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def forward(self, x):
        return F.batch_norm(
            x, self.gamma, self.beta, self._buffers["running_mean"], self._buffers["running_var"],
            self.training, self.momentum, self.eps,
        )


class L2Norm(Module):
    """Channelwise L2 normalisation with a learnable per-channel scale."""

    def __init__(self, channels, init_scale=20.0):
        super().__init__()
        self.scale = Parameter(np.full(channels, init_scale, dtype=get_default_dtype()))

    def forward(self, x):
        return F.l2_normalize_channels(x, self.scale)


class ConvBNReLU(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, relu=True, rng=None):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel_size, stride, padding, bias=False, rng=rng)
        self.bn = BatchNorm2d(out_channels)
        self.relu = relu

    def forward(self, x):
        y = self.bn(self.conv(x))
        return F.relu(y) if self.relu else y


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class ReLU(Module):
    def forward(self, x):
        return F.relu(x)


class MaxPool2d(Module):
    def __init__(self, kernel, stride=None, padding=0, ceil_mode=False):
        super().__init__()
        self.kernel, self.stride, self.padding, self.ceil_mode = kernel, stride, padding, ceil_mode

    def forward(self, x):
        return F.max_pool2d(x, self.kernel, self.stride, self.padding, self.ceil_mode)
