"""Full network assembly: funnel stem, parallel multi-resolution branches
with repeated cross-scale fusion, and the coarse + refined segmentation head.

Branch i lives at 1/(4*2^i) of the input resolution with channels[i] maps;
the ladder stops at three branches, there is no fourth stage anywhere in
the graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import blocks
from . import tensor as T
from .blocks import WindowSpec, apply_bn, apply_conv
from .params import ParamStore, init_bn, init_conv
from .tensor import ConvSpec, ShapeError, Tensor


@dataclass(frozen=True)
class NetworkConfig:
    channels: tuple = (8, 16, 32)
    blocks: tuple = (2, 2, 3)        # funnel IB count, layer1 IA count, layer2 IA count
    modules: tuple = (1, 2)          # fusion module repeats per layer
    window: int = 4
    heads: int = 2
    head_dim: int = 4
    dw_kernel: int = 5
    se_ratio: int = 4
    num_classes: int = 4
    input_hw: tuple = (64, 64)
    block_kind: str = "ia"           # "ia" | "basic"
    ia_activations: tuple = ("gelu", "silu")
    ocr_dim: int = 0                 # 0 -> sum(channels) // 2

    def __post_init__(self):
        if len(self.channels) != 3 or len(self.blocks) != 3 or len(self.modules) != 2:
            raise ValueError("expected 3 channel widths, 3 block counts, 2 module counts")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.block_kind not in ("ia", "basic"):
            raise ValueError(f"unknown block kind {self.block_kind!r}")
        h, w = self.input_hw
        if self.block_kind == "ia" and (h % (16 * self.window) or w % (16 * self.window)):
            raise ValueError(
                f"input {h}x{w} must be divisible by 16*window={16 * self.window} "
                "so every branch windows evenly")
        if h % 16 or w % 16:
            raise ValueError(f"input {h}x{w} must be divisible by 16")

    @classmethod
    def full_scale(cls, num_classes=7, input_hw=(224, 224)):
        """Full-size widths and depths; heavy on CPU, used for shape checks."""
        return cls(channels=(48, 96, 192), blocks=(4, 4, 12), modules=(1, 4),
                   window=7, heads=2, head_dim=8, num_classes=num_classes,
                   input_hw=input_hw)

    @property
    def context_dim(self):
        return self.ocr_dim if self.ocr_dim else sum(self.channels) // 2

    def window_spec(self):
        return WindowSpec(self.window, self.heads, self.head_dim)


@dataclass
class SegOutput:
    coarse_logits: Tensor
    refined_logits: Tensor


# ---------------------------------------------------------------------------
# parameter initialization (shapes fixed entirely by the config)


def init_funnel(store, config, rng, prefix="funnel"):
    c1 = config.channels[0]
    init_bn(store, f"{prefix}.bn1", 3)
    init_conv(store, f"{prefix}.conv1", c1, 3, 3, 3, rng)
    init_bn(store, f"{prefix}.bn2", c1)
    init_conv(store, f"{prefix}.conv2", c1, c1, 3, 3, rng)
    for k in range(config.blocks[0]):
        blocks.init_ib_block(store, f"{prefix}.ib{k}", c1, rng)


def _init_stage_block(store, prefix, c, config, rng):
    if config.block_kind == "ia":
        blocks.init_ia_block(store, prefix, c, config.heads, config.head_dim,
                             config.dw_kernel, config.se_ratio, rng)
    else:
        blocks.init_basic_block(store, prefix, c, rng)


def _init_spawn(store, prefix, c_in, c_out, rng):
    init_bn(store, f"{prefix}.bn", c_in)
    init_conv(store, f"{prefix}.conv", c_out, c_in, 3, 3, rng)


def _init_fuse(store, prefix, channels, rng):
    """Cross-scale paths between every ordered pair of the given branches."""
    k = len(channels)
    for i in range(k):
        for j in range(k):
            if i == j:
                continue
            path = f"{prefix}.{i}to{j}"
            if i < j:  # downsample: repeated BN + stride-2 3x3
                for s in range(j - i):
                    init_bn(store, f"{path}.step{s}.bn", channels[i + s])
                    init_conv(store, f"{path}.step{s}.conv",
                              channels[i + s + 1], channels[i + s], 3, 3, rng)
            else:      # upsample: bilinear + BN + 1x1
                init_bn(store, f"{path}.bn", channels[i])
                init_conv(store, f"{path}.conv", channels[j], channels[i], 1, 1, rng)


def init_refine(store, config, rng, prefix="refine"):
    cs = sum(config.channels)
    d = config.context_dim
    k = config.num_classes
    init_conv(store, f"{prefix}.coarse", k, cs, 1, 1, rng)
    for name in ("pixel_key", "region_key", "region_value"):
        init_conv(store, f"{prefix}.{name}.conv", d, cs, 1, 1, rng)
        init_bn(store, f"{prefix}.{name}.bn", d)
    init_conv(store, f"{prefix}.refined", k, cs + d, 1, 1, rng)


def init_network(config, rng, dtype=np.float32):
    store = ParamStore(dtype=dtype)
    init_funnel(store, config, rng)
    c1, c2, c3 = config.channels
    _, b2, b3 = config.blocks
    m1, m2 = config.modules

    _init_spawn(store, "layer1.spawn", c1, c2, rng)
    for m in range(m1):
        for br, c in enumerate((c1, c2)):
            for k in range(b2):
                _init_stage_block(store, f"layer1.mod{m}.b{br}.blk{k}", c, config, rng)
        _init_fuse(store, f"layer1.mod{m}.fuse", (c1, c2), rng)

    _init_spawn(store, "layer2.spawn", c2, c3, rng)
    for m in range(m2):
        for br, c in enumerate((c1, c2, c3)):
            for k in range(b3):
                _init_stage_block(store, f"layer2.mod{m}.b{br}.blk{k}", c, config, rng)
        _init_fuse(store, f"layer2.mod{m}.fuse", (c1, c2, c3), rng)

    init_refine(store, config, rng)
    return store


def param_count(config):
    """Learnable parameter total (BN running stats excluded)."""
    rng = np.random.default_rng(0)  # values irrelevant to the count
    return init_network(config, rng).count_learnable()


# ---------------------------------------------------------------------------
# forward passes


def funnel_forward(image, store, config, training, prefix="funnel"):
    h, w = image.shape[2], image.shape[3]
    if h % 4 or w % 4:
        raise ShapeError(f"funnel needs input divisible by 4, got {h}x{w}")
    c1 = config.channels[0]
    down = ConvSpec(c1, (3, 3), (2, 2), (1, 1))
    x = apply_bn(image, store, f"{prefix}.bn1", training)
    x = T.gelu(apply_conv(x, store, f"{prefix}.conv1", down))
    x = apply_bn(x, store, f"{prefix}.bn2", training)
    x = T.gelu(apply_conv(x, store, f"{prefix}.conv2", down))
    for k in range(config.blocks[0]):
        x = blocks.ib_block(x, store, f"{prefix}.ib{k}", training)
    return x


def new_branch(x, store, prefix, c_out, training):
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"cannot halve odd spatial dims {x.shape[2:]}")
    h = apply_bn(x, store, f"{prefix}.bn", training)
    return apply_conv(h, store, f"{prefix}.conv", ConvSpec(c_out, (3, 3), (2, 2), (1, 1)))


def _apply_stage_block(x, store, prefix, config, training):
    if config.block_kind == "ia":
        return blocks.ia_block(x, store, prefix, config.window_spec(),
                               config.dw_kernel, config.se_ratio,
                               activations=config.ia_activations)
    return blocks.basic_block(x, store, prefix, training)


def fuse(branches, store, prefix, channels, training):
    """Bring every branch to every resolution and sum the aligned maps."""
    k = len(branches)
    if k == 1:
        return list(branches)
    outs = []
    for j in range(k):
        acc = branches[j]  # own-resolution branch passes through unchanged
        for i in range(k):
            if i == j:
                continue
            path = f"{prefix}.{i}to{j}"
            x = branches[i]
            if i < j:
                for s in range(j - i):
                    x = apply_bn(x, store, f"{path}.step{s}.bn", training)
                    x = apply_conv(x, store, f"{path}.step{s}.conv",
                                   ConvSpec(channels[i + s + 1], (3, 3), (2, 2), (1, 1)))
            else:
                x = T.bilinear_upsample(x, 2 ** (i - j))
                x = apply_bn(x, store, f"{path}.bn", training)
                x = apply_conv(x, store, f"{path}.conv", ConvSpec(channels[j], (1, 1)))
            acc = acc + x
        outs.append(acc)
    return outs


def multi_branch_forward(x, store, config, training):
    c1, c2, c3 = config.channels
    _, b2, b3 = config.blocks
    m1, m2 = config.modules

    b0 = x
    b1 = new_branch(b0, store, "layer1.spawn", c2, training)
    for m in range(m1):
        cur = []
        for br, t in enumerate((b0, b1)):
            for k in range(b2):
                t = _apply_stage_block(t, store, f"layer1.mod{m}.b{br}.blk{k}", config, training)
            cur.append(t)
        b0, b1 = fuse(cur, store, f"layer1.mod{m}.fuse", (c1, c2), training)

    b2_ = new_branch(b1, store, "layer2.spawn", c3, training)
    branches = [b0, b1, b2_]
    for m in range(m2):
        cur = []
        for br, t in enumerate(branches):
            for k in range(b3):
                t = _apply_stage_block(t, store, f"layer2.mod{m}.b{br}.blk{k}", config, training)
            cur.append(t)
        branches = fuse(cur, store, f"layer2.mod{m}.fuse", (c1, c2, c3), training)
    return branches


def _embed(x, store, name, training):
    d = store[f"{name}.conv.weight"].shape[0]
    h = apply_conv(x, store, f"{name}.conv", ConvSpec(d, (1, 1)))
    h = apply_bn(h, store, f"{name}.bn", training)
    return T.gelu(h)


def refine(branches, store, config, training, prefix="refine"):
    """Coarse 1x1 head plus pixel-region context refinement.

    Soft region features are softmax-of-logits weighted sums of the shared
    pixel features; pixel-region affinities re-weight embedded region
    descriptors into a context map that augments each pixel before the
    refined classification.
    """
    n = branches[0].shape[0]
    hq, wq = branches[0].shape[2], branches[0].shape[3]
    k = config.num_classes
    cs = sum(config.channels)
    d = config.context_dim

    aligned = [branches[0]]
    for i, b in enumerate(branches[1:], start=1):
        aligned.append(T.bilinear_upsample(b, 2 ** i))
    feat = T.concat(aligned, axis=1)                      # [N, Cs, Hq, Wq]
    coarse = apply_conv(feat, store, f"{prefix}.coarse", ConvSpec(k, (1, 1)))

    p = hq * wq
    logits_flat = T.reshape(coarse, (n, k, p))
    region_weights = T.softmax(logits_flat, axis=2)       # spatial softmax per class
    feat_flat = T.reshape(feat, (n, cs, p))
    regions = T.matmul(region_weights, T.transpose(feat_flat, (0, 2, 1)))  # [N, K, Cs]
    regions = T.reshape(T.transpose(regions, (0, 2, 1)), (n, cs, k, 1))

    pixel_key = _embed(feat, store, f"{prefix}.pixel_key", training)        # [N, d, Hq, Wq]
    region_key = _embed(regions, store, f"{prefix}.region_key", training)   # [N, d, K, 1]
    region_value = _embed(regions, store, f"{prefix}.region_value", training)

    pk = T.transpose(T.reshape(pixel_key, (n, d, p)), (0, 2, 1))            # [N, P, d]
    rk = T.reshape(region_key, (n, d, k))
    affinity = T.softmax(T.matmul(pk, rk) * (1.0 / math.sqrt(d)), axis=2)   # [N, P, K]
    rv = T.transpose(T.reshape(region_value, (n, d, k)), (0, 2, 1))         # [N, K, d]
    context = T.matmul(affinity, rv)                                        # [N, P, d]
    context = T.reshape(T.transpose(context, (0, 2, 1)), (n, d, hq, wq))

    refined_in = T.concat([feat, context], axis=1)
    refined = apply_conv(refined_in, store, f"{prefix}.refined", ConvSpec(k, (1, 1)))

    scale = config.input_hw[0] // hq
    return SegOutput(coarse_logits=T.bilinear_upsample(coarse, scale),
                     refined_logits=T.bilinear_upsample(refined, scale))


def network_forward(image, store, config, training):
    x = funnel_forward(image, store, config, training)
    branches = multi_branch_forward(x, store, config, training)
    return refine(branches, store, config, training)


def fused_probabilities(out: SegOutput):
    """Inference rule: mean of the two class-probability maps (1:1 mix)."""
    pc = T.softmax(out.coarse_logits, axis=1)
    pr = T.softmax(out.refined_logits, axis=1)
    return (pc.data + pr.data) * 0.5


def predict_labels(out: SegOutput):
    return np.argmax(fused_probabilities(out), axis=1)
