"""Thin layer abstractions over the tensor primitives.

A ``Module`` owns named parameters (``Tensor`` leaves with requires_grad)
and possibly named buffers (batch-norm running stats). Forward passes take
a ``mode`` ("train"/"eval") and a ``linearize`` flag used by the receptive
field saliency oracle (ReLU becomes identity, MaxPool becomes AvgPool,
batch-norm uses identity stats).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _walk(val, full):
    """Yield (name, child) pairs for Modules/Tensors/BN states, through nested lists."""
    if isinstance(val, (Module, Tensor, T.BatchNormState)):
        yield full, val
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(item, f"{full}.{i}")


class Module:
    def _children(self, prefix=""):
        for name, val in vars(self).items():
            full = f"{prefix}.{name}" if prefix else name
            yield from _walk(val, full)

    def named_parameters(self, prefix=""):
        # target-network copies carry requires_grad=False but are still
        # parameters (EMA pairing iterates them), so no filtering here
        for full, val in self._children(prefix):
            if isinstance(val, Tensor):
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for full, val in self._children(prefix):
            if isinstance(val, T.BatchNormState):
                yield full + ".running_mean", val.running_mean
                yield full + ".running_var", val.running_var
                yield full + ".init_flag", val.init_flag
            elif isinstance(val, Module):
                yield from val.named_buffers(full)

    def bn_states(self):
        out = []
        for _, val in self._children():
            if isinstance(val, T.BatchNormState):
                out.append(val)
            elif isinstance(val, Module):
                out.extend(val.bn_states())
        return out

    def count_params(self):
        return sum(p.size for p in self.parameters())

    def forward(self, x, mode="train", linearize=False):
        raise NotImplementedError

    def __call__(self, x, mode="train", linearize=False):
        return self.forward(x, mode=mode, linearize=linearize)


def _fan_in_normal(rng, shape, fan_in, dtype):
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=None, bias=False, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        fan_in = in_ch * kernel * kernel
        self.weight = _fan_in_normal(rng, (out_ch, in_ch, kernel, kernel), fan_in, dtype)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x, mode="train", linearize=False):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.state = T.BatchNormState(channels, dtype=dtype, momentum=momentum)
        self.eps = eps

    def forward(self, x, mode="train", linearize=False):
        if linearize:
            # identity running stats, eval mode: a pure affine map
            saved = (self.state.running_mean.copy(), self.state.running_var.copy(), self.state.initialized)
            self.state.set_identity()
            try:
                return T.batch_norm(x, self.gamma, self.beta, self.state, mode="eval", eps=self.eps)
            finally:
                self.state.running_mean[:] = saved[0]
                self.state.running_var[:] = saved[1]
                self.state.initialized = saved[2]
        return T.batch_norm(x, self.gamma, self.beta, self.state, mode=mode, eps=self.eps)


class ReLU(Module):
    def forward(self, x, mode="train", linearize=False):
        return x if linearize else T.relu(x)


class MaxPool2d(Module):
    def __init__(self, kernel, stride, padding=0):
        self.kernel = kernel
        self.stride = stride
        self.pool_padding = padding

    def forward(self, x, mode="train", linearize=False):
        if linearize:
            x = T.pad2d(x, self.pool_padding, value=0.0)
            return T.avg_pool2d(x, self.kernel, self.stride)
        x = T.pad2d(x, self.pool_padding, value=-1e30)
        return T.max_pool2d(x, self.kernel, self.stride)


class Identity(Module):
    def forward(self, x, mode="train", linearize=False):
        return x


class Linear(Module):
    def __init__(self, in_features, out_features, bias=True, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.weight = _fan_in_normal(rng, (in_features, out_features), in_features, dtype)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x, mode="train", linearize=False):
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = T.add(y, self.bias)
        return y


class BatchNorm1d(Module):
    """Batch norm over row-vector features, reusing the NCHW primitive."""

    def __init__(self, features, momentum=0.9, eps=1e-5, dtype=np.float32):
        self.bn = BatchNorm2d(features, momentum=momentum, eps=eps, dtype=dtype)

    def forward(self, x, mode="train", linearize=False):
        n, c = x.data.shape
        y = self.bn(T.reshape(x, (n, c, 1, 1)), mode=mode, linearize=linearize)
        return T.reshape(y, (n, c))


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x, mode="train", linearize=False):
        for layer in self.layers:
            x = layer(x, mode=mode, linearize=linearize)
        return x
