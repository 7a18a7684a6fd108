"""Network building blocks: inverted bottleneck, SE channel attention,
window multi-head self-attention over scalar tokens, and the information
aggregation block that composes them.

All blocks preserve [N, C, H, W] shape; resampling lives in the network
assembly. Blocks are pure functions of (input, params) apart from BN
running-stat updates in training mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import init_bn, init_conv, init_linear
from .tensor import ConvSpec, ShapeError

ACTIVATIONS = {"gelu": T.gelu, "silu": T.silu, "relu": T.relu, "sigmoid": T.sigmoid}


@dataclass(frozen=True)
class WindowSpec:
    """Window side length and per-head geometry for window attention."""

    window: int
    heads: int
    head_dim: int


def apply_bn(x, store, name, training, momentum=0.1):
    return T.batchnorm2d(x, store[f"{name}.gamma"], store[f"{name}.beta"],
                         store[f"{name}.running_mean"], store[f"{name}.running_var"],
                         training=training, momentum=momentum)


def apply_conv(x, store, name, spec):
    bias_name = f"{name}.bias"
    bias = store[bias_name] if bias_name in store else None
    return T.conv2d(x, store[f"{name}.weight"], bias, spec)


# ---------------------------------------------------------------------------
# inverted bottleneck: thin heads, 4x-wide middle, linear residual join


def init_ib_block(store, prefix, c, rng):
    init_bn(store, f"{prefix}.bn1", c)
    init_conv(store, f"{prefix}.conv1", c, c, 3, 3, rng)
    init_bn(store, f"{prefix}.bn2", c)
    init_conv(store, f"{prefix}.conv2", 4 * c, c, 1, 1, rng)
    init_bn(store, f"{prefix}.bn3", 4 * c)
    init_conv(store, f"{prefix}.conv3", c, 4 * c, 1, 1, rng)


def ib_block(x, store, prefix, training):
    c = x.shape[1]
    h = apply_bn(x, store, f"{prefix}.bn1", training)
    h = apply_conv(h, store, f"{prefix}.conv1", ConvSpec(c, (3, 3), (1, 1), (1, 1)))
    h = T.gelu(h)
    h = apply_bn(h, store, f"{prefix}.bn2", training)
    h = apply_conv(h, store, f"{prefix}.conv2", ConvSpec(4 * c, (1, 1)))
    h = T.gelu(h)
    h = apply_bn(h, store, f"{prefix}.bn3", training)
    h = apply_conv(h, store, f"{prefix}.conv3", ConvSpec(c, (1, 1)))
    return x + h


# ---------------------------------------------------------------------------
# squeeze-and-excitation channel gate


def init_se(store, prefix, c, ratio, rng):
    if c % ratio:
        raise ShapeError(f"channels {c} not divisible by SE ratio {ratio}")
    init_linear(store, f"{prefix}.fc1", c, c // ratio, rng)
    init_linear(store, f"{prefix}.fc2", c // ratio, c, rng)


def se_attention(x, store, prefix):
    n, c = x.shape[0], x.shape[1]
    s = T.global_avg_pool(x)
    z = T.matmul(s, store[f"{prefix}.fc1.weight"]) + store[f"{prefix}.fc1.bias"]
    z = T.silu(z)
    z = T.matmul(z, store[f"{prefix}.fc2.weight"]) + store[f"{prefix}.fc2.bias"]
    gate = T.sigmoid(z)
    return x * T.reshape(gate, (n, c, 1, 1))


# ---------------------------------------------------------------------------
# window attention on scalar tokens
#
# The feature map is cut into L x L windows with channels folded into the
# batch axis, so every window contributes L^2 scalar tokens. Learned
# projections (shared across channels and windows) lift each scalar to
# `heads` vectors of head_dim for Q/K/V; heads are merged back to one scalar
# per token by an output projection.


def window_partition(x, window):
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by window {window}")
    gh, gw = h // window, w // window
    t = T.reshape(x, (n, c, gh, window, gw, window))
    t = T.transpose(t, (0, 1, 2, 4, 3, 5))
    return T.reshape(t, (n * c * gh * gw, window, window))


def window_merge(t, n, c, h, w, window):
    gh, gw = h // window, w // window
    t = T.reshape(t, (n, c, gh, gw, window, window))
    t = T.transpose(t, (0, 1, 2, 4, 3, 5))
    return T.reshape(t, (n, c, h, w))


def init_wmhsa(store, prefix, heads, head_dim, rng):
    hd = heads * head_dim
    for proj in ("q", "k", "v"):
        store.add_param(f"{prefix}.{proj}.weight",
                        rng.uniform(-1.0, 1.0, size=hd).astype(store.dtype))
        store.add_param(f"{prefix}.{proj}.bias", np.zeros(hd))
    store.add_param(f"{prefix}.out.weight",
                    rng.uniform(-1.0, 1.0, size=hd).astype(store.dtype) / math.sqrt(hd))
    store.add_param(f"{prefix}.out.bias", np.zeros(1))


def wmhsa(x, store, prefix, spec: WindowSpec, return_attn=False):
    n, c, h, w = x.shape
    L, heads, dh = spec.window, spec.heads, spec.head_dim
    tok = T.reshape(window_partition(x, L), (-1, L * L, 1))
    b, t = tok.shape[0], L * L

    def lift(name):
        p = tok * store[f"{prefix}.{name}.weight"] + store[f"{prefix}.{name}.bias"]
        return T.transpose(T.reshape(p, (b, t, heads, dh)), (0, 2, 1, 3))

    q, k, v = lift("q"), lift("k"), lift("v")
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, heads * dh))
    out = T.tsum(ctx * store[f"{prefix}.out.weight"], axis=-1, keepdims=True)
    out = out + store[f"{prefix}.out.bias"]
    out = window_merge(T.reshape(out, (b, L, L)), n, c, h, w, L)
    out = out + x  # inner skip
    if return_attn:
        return out, attn
    return out


# ---------------------------------------------------------------------------
# information aggregation block: WMHSA -> SE -> DW conv -> 1x1, outer skip


def init_ia_block(store, prefix, c, heads, head_dim, dw_kernel, se_ratio, rng):
    init_wmhsa(store, f"{prefix}.attn", heads, head_dim, rng)
    init_se(store, f"{prefix}.se", c, se_ratio, rng)
    init_conv(store, f"{prefix}.dw", c, 1, dw_kernel, dw_kernel, rng)
    init_conv(store, f"{prefix}.proj", c, c, 1, 1, rng)


def ia_block(x, store, prefix, window_spec, dw_kernel, se_ratio,
             activations=("gelu", "silu")):
    c = x.shape[1]
    act1, act2 = (ACTIVATIONS[a] for a in activations)
    h = wmhsa(x, store, f"{prefix}.attn", window_spec)
    h = act1(h)
    h = se_attention(h, store, f"{prefix}.se")
    pad = dw_kernel // 2
    dw = ConvSpec(c, (dw_kernel, dw_kernel), (1, 1), (pad, pad), groups=c)
    h = h + apply_conv(h, store, f"{prefix}.dw", dw)
    h = act2(h)
    h = apply_conv(h, store, f"{prefix}.proj", ConvSpec(c, (1, 1)))
    return x + h  # outer skip


def ia_block_param_count(c, heads, head_dim, dw_kernel, se_ratio):
    """Closed-form learnable-parameter total for one IA block."""
    hd = heads * head_dim
    attn = 3 * (hd + hd) + hd + 1
    se = c * (c // se_ratio) + c // se_ratio + (c // se_ratio) * c + c
    dw = c * dw_kernel * dw_kernel + c
    proj = c * c + c
    return attn + se + dw + proj


# ---------------------------------------------------------------------------
# plain residual block (two 3x3 convs) kept as the parameter-count baseline


def init_basic_block(store, prefix, c, rng):
    init_bn(store, f"{prefix}.bn1", c)
    init_conv(store, f"{prefix}.conv1", c, c, 3, 3, rng)
    init_bn(store, f"{prefix}.bn2", c)
    init_conv(store, f"{prefix}.conv2", c, c, 3, 3, rng)


def basic_block(x, store, prefix, training):
    c = x.shape[1]
    h = apply_bn(x, store, f"{prefix}.bn1", training)
    h = apply_conv(h, store, f"{prefix}.conv1", ConvSpec(c, (3, 3), (1, 1), (1, 1)))
    h = T.gelu(h)
    h = apply_bn(h, store, f"{prefix}.bn2", training)
    h = apply_conv(h, store, f"{prefix}.conv2", ConvSpec(c, (3, 3), (1, 1), (1, 1)))
    return x + h
