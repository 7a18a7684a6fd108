"""Named parameter storage.

Every learnable tensor and every buffer (BN running statistics) lives in one
flat store keyed by a hierarchical dotted name; shapes are fully determined
by the network configuration, never inferred from data.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import DEFAULT_DTYPE, Tensor


class ParamStore:
    def __init__(self, dtype=DEFAULT_DTYPE):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, Tensor] = {}

    def add_param(self, name, array):
        if name in self._params or name in self._buffers:
            raise KeyError(f"duplicate parameter name: {name}")
        self._params[name] = Tensor(np.asarray(array, dtype=self.dtype), requires_grad=True)

    def add_buffer(self, name, array):
        if name in self._params or name in self._buffers:
            raise KeyError(f"duplicate buffer name: {name}")
        self._buffers[name] = Tensor(np.asarray(array, dtype=self.dtype), requires_grad=False)

    def __getitem__(self, name) -> Tensor:
        if name in self._params:
            return self._params[name]
        if name in self._buffers:
            return self._buffers[name]
        raise KeyError(f"unknown tensor: {name}")

    def __contains__(self, name):
        return name in self._params or name in self._buffers

    def params(self):
        return self._params.items()

    def buffers(self):
        return self._buffers.items()

    def is_buffer(self, name):
        return name in self._buffers

    def names(self):
        return list(self._params) + list(self._buffers)

    def count_learnable(self):
        return sum(t.size for t in self._params.values())

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def copy(self, requires_grad=True):
        out = ParamStore(self.dtype)
        for name, t in self._params.items():
            clone = Tensor(t.data.copy(), requires_grad=requires_grad)
            out._params[name] = clone
        for name, t in self._buffers.items():
            out._buffers[name] = Tensor(t.data.copy(), requires_grad=False)
        return out


def fan_in_uniform(rng, shape, fan_in, dtype):
    limit = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_conv(store, name, out_c, in_c_per_group, kh, kw, rng, bias=True):
    fan_in = in_c_per_group * kh * kw
    store.add_param(f"{name}.weight",
                    fan_in_uniform(rng, (out_c, in_c_per_group, kh, kw), fan_in, store.dtype))
    if bias:
        store.add_param(f"{name}.bias", np.zeros(out_c))


def init_linear(store, name, in_f, out_f, rng):
    store.add_param(f"{name}.weight", fan_in_uniform(rng, (in_f, out_f), in_f, store.dtype))
    store.add_param(f"{name}.bias", np.zeros(out_f))


def init_bn(store, name, c):
    store.add_param(f"{name}.gamma", np.ones(c))
    store.add_param(f"{name}.beta", np.zeros(c))
    store.add_buffer(f"{name}.running_mean", np.zeros(c))
    store.add_buffer(f"{name}.running_var", np.ones(c))
