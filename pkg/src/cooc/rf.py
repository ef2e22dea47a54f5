"""RF-bounded ResNet family: construction, receptive-field math, verification.

The family replaces most 3x3 convolutions of a ResNet with 1x1 convolutions
so that the pre-pool feature grid consists of patch representations with a
bounded receptive field. Only the first 3x3 of the first and middle block of
each stack survives; the stem is kept identical to the reference network.
Block counts are extended ((4,4,4,5) for the 18-layer family, (3,4,6,4) for
the 50-layer one) to keep parameter counts close to the reference models.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from . import nn


# ---------------------------------------------------------------------------
# receptive field formula
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerDescriptor:
    kind: str  # conv | maxpool | identity
    kernel: int
    stride: int

    def __post_init__(self):
        if self.kind not in ("conv", "maxpool", "identity"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kernel < 1 or self.stride < 1:
            raise ValueError("kernel and stride must be positive integers")


def receptive_field_profile(layers):
    """Receptive field size after each layer: RFS(L) = sum (k_l-1) * prod s_i + 1."""
    out = []
    rf = 1
    jump = 1
    for layer in layers:
        rf += (layer.kernel - 1) * jump
        jump *= layer.stride
        out.append(rf)
    return out


def total_stride(layers):
    s = 1
    for layer in layers:
        s *= layer.stride
    return s


# ---------------------------------------------------------------------------
# architecture configuration
# ---------------------------------------------------------------------------

_BASE_BLOCKS = {
    "rf_resnet18": ((4, 4, 4, 5), "basic"),
    "rf_resnet50": ((3, 4, 6, 4), "bottleneck"),
    "resnet18_reference": ((2, 2, 2, 2), "basic"),
    "resnet50_reference": ((3, 4, 6, 3), "bottleneck"),
}

_STACK_WIDTHS = (64, 128, 256, 512)


@dataclass
class ArchConfig:
    base: str = "rf_resnet18"
    m: bool = False  # keep the MaxPool layer after the stem
    strides: tuple = (2, 2, 2)  # 3x3 stride of the first block in stacks 2..4
    blocks: tuple = None  # defaults to the base family's counts
    block_kind: str = None
    width: float = 1.0
    small_image_stem: bool = False
    post_pool_mlp: bool = True

    def __post_init__(self):
        if self.base not in _BASE_BLOCKS:
            raise ValueError(f"unknown base {self.base!r}; choose from {sorted(_BASE_BLOCKS)}")
        base_blocks, base_kind = _BASE_BLOCKS[self.base]
        if self.blocks is None:
            self.blocks = base_blocks
        self.blocks = tuple(int(b) for b in self.blocks)
        if len(self.blocks) != 4 or any(b < 1 for b in self.blocks):
            raise ValueError("blocks must be four positive counts")
        if self.block_kind is None:
            self.block_kind = base_kind
        if self.block_kind not in ("basic", "bottleneck"):
            raise ValueError(f"unknown block kind {self.block_kind!r}")
        self.strides = tuple(int(s) for s in self.strides)
        if len(self.strides) != 3 or any(s not in (1, 2) for s in self.strides):
            raise ValueError("strides must be three values in {1, 2}")
        if self.small_image_stem and self.m:
            raise ValueError("the small-image stem has no MaxPool layer")
        if self.is_reference:
            self.post_pool_mlp = False  # the MLP belongs to the rf_* family

    @property
    def is_reference(self):
        return self.base.endswith("_reference")

    def kept_blocks(self, stack_index):
        """Blocks whose first 3x3 conv survives: first and middle of the stack."""
        n = self.blocks[stack_index]
        return {0, n // 2}

    def stack_stride(self, stack_index):
        if stack_index == 0:
            return 1
        if self.is_reference:
            return 2
        return self.strides[stack_index - 1]

    def stack_channels(self):
        out = []
        for w in _STACK_WIDTHS:
            c = max(1, int(round(w * self.width)))
            out.append(c)
        return out

    def to_flat_dict(self, prefix="arch."):
        d = {
            "base": self.base,
            "m": self.m,
            "strides": ",".join(str(s) for s in self.strides),
            "blocks": ",".join(str(b) for b in self.blocks),
            "block_kind": self.block_kind,
            "width": self.width,
            "small_image_stem": self.small_image_stem,
            "post_pool_mlp": self.post_pool_mlp,
        }
        return {prefix + k: v for k, v in d.items()}

    @classmethod
    def from_flat_dict(cls, d, prefix="arch."):
        kw = {}
        for key in ("base", "block_kind"):
            if prefix + key in d:
                kw[key] = d[prefix + key]
        for key in ("m", "small_image_stem", "post_pool_mlp"):
            if prefix + key in d:
                v = d[prefix + key]
                kw[key] = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes")
        if prefix + "width" in d:
            kw["width"] = float(d[prefix + "width"])
        for key in ("strides", "blocks"):
            if prefix + key in d:
                v = d[prefix + key]
                kw[key] = tuple(int(x) for x in str(v).split(","))
        return cls(**kw)


def descriptor_chain(config: ArchConfig):
    """Main-path layer descriptors of the configured backbone, stem to last block."""
    layers = []
    if config.small_image_stem:
        layers.append(LayerDescriptor("conv", 3, 1))
    else:
        layers.append(LayerDescriptor("conv", 7, 2))
        if config.m or config.is_reference:
            layers.append(LayerDescriptor("maxpool", 3, 2))
    for si in range(4):
        kept = config.kept_blocks(si)
        for b in range(config.blocks[si]):
            stride = config.stack_stride(si) if b == 0 else 1
            keep = config.is_reference or b in kept
            k_mid = 3 if keep else 1
            if config.block_kind == "bottleneck":
                layers.append(LayerDescriptor("conv", 1, 1))
                layers.append(LayerDescriptor("conv", k_mid, stride))
                layers.append(LayerDescriptor("conv", 1, 1))
            else:
                layers.append(LayerDescriptor("conv", k_mid, stride))
                k2 = 3 if config.is_reference else 1
                layers.append(LayerDescriptor("conv", k2, 1))
    return layers


def final_rf(config: ArchConfig):
    return receptive_field_profile(descriptor_chain(config))[-1]


def export_chain_json(config: ArchConfig):
    chain = descriptor_chain(config)
    profile = receptive_field_profile(chain)
    return json.dumps(
        {
            "layers": [asdict(l) for l in chain],
            "rf_profile": profile,
            "final_rf": profile[-1],
            "total_stride": total_stride(chain),
        },
        indent=2,
    )


def solve_rf_config(base, target_rf, small_image_stem=False, **overrides):
    """Exhaustive search over MaxPool x stride combinations hitting target_rf exactly.

    Ties are broken in favor of larger early strides (smaller feature maps).
    """
    if base.endswith("_reference"):
        raise ValueError("solve_rf_config applies to the rf_* families only")
    candidates = []
    achievable = set()
    m_options = (False,) if small_image_stem else (True, False)
    for m in m_options:
        for s2 in (2, 1):
            for s3 in (2, 1):
                for s4 in (2, 1):
                    cfg = ArchConfig(
                        base=base,
                        m=m,
                        strides=(s2, s3, s4),
                        small_image_stem=small_image_stem,
                        **overrides,
                    )
                    rf = final_rf(cfg)
                    achievable.add(rf)
                    if rf == target_rf:
                        candidates.append(cfg)
    if not candidates:
        raise ValueError(
            f"no (maxpool, strides) combination of {base} reaches RF {target_rf}; "
            f"achievable: {sorted(achievable)}"
        )
    candidates.sort(key=lambda c: (c.strides[0], c.strides[1], c.strides[2], c.m), reverse=True)
    return candidates[0]


# ---------------------------------------------------------------------------
# network construction
# ---------------------------------------------------------------------------

class BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, k1, k2, stride, rng, dtype):
        self.conv1 = nn.Conv2d(in_ch, out_ch, k1, stride=stride, bias=False, rng=rng, dtype=dtype)
        self.bn1 = nn.BatchNorm2d(out_ch, dtype=dtype)
        self.conv2 = nn.Conv2d(out_ch, out_ch, k2, stride=1, bias=False, rng=rng, dtype=dtype)
        self.bn2 = nn.BatchNorm2d(out_ch, dtype=dtype)
        if stride != 1 or in_ch != out_ch:
            self.down_conv = nn.Conv2d(in_ch, out_ch, 1, stride=stride, padding=0, bias=False, rng=rng, dtype=dtype)
            self.down_bn = nn.BatchNorm2d(out_ch, dtype=dtype)
        else:
            self.down_conv = None
            self.down_bn = None

    def forward(self, x, mode="train", linearize=False):
        y = self.bn1(self.conv1(x), mode=mode, linearize=linearize)
        y = nn.ReLU()(y, linearize=linearize)
        y = self.bn2(self.conv2(y), mode=mode, linearize=linearize)
        if self.down_conv is not None:
            x = self.down_bn(self.down_conv(x), mode=mode, linearize=linearize)
        y = T.add(y, x)
        return nn.ReLU()(y, linearize=linearize)


class BottleneckBlock(nn.Module):
    def __init__(self, in_ch, planes, out_ch, k_mid, stride, rng, dtype):
        self.conv1 = nn.Conv2d(in_ch, planes, 1, stride=1, padding=0, bias=False, rng=rng, dtype=dtype)
        self.bn1 = nn.BatchNorm2d(planes, dtype=dtype)
        self.conv2 = nn.Conv2d(planes, planes, k_mid, stride=stride, bias=False, rng=rng, dtype=dtype)
        self.bn2 = nn.BatchNorm2d(planes, dtype=dtype)
        self.conv3 = nn.Conv2d(planes, out_ch, 1, stride=1, padding=0, bias=False, rng=rng, dtype=dtype)
        self.bn3 = nn.BatchNorm2d(out_ch, dtype=dtype)
        if stride != 1 or in_ch != out_ch:
            self.down_conv = nn.Conv2d(in_ch, out_ch, 1, stride=stride, padding=0, bias=False, rng=rng, dtype=dtype)
            self.down_bn = nn.BatchNorm2d(out_ch, dtype=dtype)
        else:
            self.down_conv = None
            self.down_bn = None

    def forward(self, x, mode="train", linearize=False):
        y = nn.ReLU()(self.bn1(self.conv1(x), mode=mode, linearize=linearize), linearize=linearize)
        y = nn.ReLU()(self.bn2(self.conv2(y), mode=mode, linearize=linearize), linearize=linearize)
        y = self.bn3(self.conv3(y), mode=mode, linearize=linearize)
        if self.down_conv is not None:
            x = self.down_bn(self.down_conv(x), mode=mode, linearize=linearize)
        y = T.add(y, x)
        return nn.ReLU()(y, linearize=linearize)


class ResidualMlp(nn.Module):
    """Post-pool MLP shaped like one convolution block, with a skip connection."""

    def __init__(self, features, kind, rng, dtype):
        if kind == "bottleneck":
            hidden = max(1, features // 4)
            self.fc1 = nn.Linear(features, hidden, bias=False, rng=rng, dtype=dtype)
            self.bn1 = nn.BatchNorm1d(hidden, dtype=dtype)
            self.fc2 = nn.Linear(hidden, hidden, bias=False, rng=rng, dtype=dtype)
            self.bn2 = nn.BatchNorm1d(hidden, dtype=dtype)
            self.fc3 = nn.Linear(hidden, features, bias=False, rng=rng, dtype=dtype)
            self.bn3 = nn.BatchNorm1d(features, dtype=dtype)
        else:
            self.fc1 = nn.Linear(features, features, bias=False, rng=rng, dtype=dtype)
            self.bn1 = nn.BatchNorm1d(features, dtype=dtype)
            self.fc2 = nn.Linear(features, features, bias=False, rng=rng, dtype=dtype)
            self.bn2 = nn.BatchNorm1d(features, dtype=dtype)
            self.fc3 = None
            self.bn3 = None

    def forward(self, x, mode="train", linearize=False):
        y = nn.ReLU()(self.bn1(self.fc1(x), mode=mode, linearize=linearize), linearize=linearize)
        if self.fc3 is not None:
            y = nn.ReLU()(self.bn2(self.fc2(y), mode=mode, linearize=linearize), linearize=linearize)
            y = self.bn3(self.fc3(y), mode=mode, linearize=linearize)
        else:
            y = self.bn2(self.fc2(y), mode=mode, linearize=linearize)
        y = T.add(y, x)
        return nn.ReLU()(y, linearize=linearize)


@dataclass
class BackboneOutput:
    local: T.Tensor          # N x C x n x n pre-pool grid
    global_pooled: T.Tensor  # N x C spatial mean of the grid ("patch" layer)
    global_: T.Tensor        # N x C after the post-pool MLP (== pooled without it)


class Backbone(nn.Module):
    def __init__(self, config: ArchConfig, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        channels = config.stack_channels()
        stem_ch = channels[0]
        if config.small_image_stem:
            self.stem = nn.Conv2d(3, stem_ch, 3, stride=1, bias=False, rng=rng, dtype=dtype)
            self.maxpool = None
        else:
            self.stem = nn.Conv2d(3, stem_ch, 7, stride=2, bias=False, rng=rng, dtype=dtype)
            self.maxpool = nn.MaxPool2d(3, 2, padding=1) if (config.m or config.is_reference) else None
        self.stem_bn = nn.BatchNorm2d(stem_ch, dtype=dtype)

        expansion = 4 if config.block_kind == "bottleneck" else 1
        self.stacks = []
        in_ch = stem_ch
        for si in range(4):
            planes = channels[si]
            out_ch = planes * expansion
            kept = config.kept_blocks(si)
            blocks = []
            for b in range(config.blocks[si]):
                stride = config.stack_stride(si) if b == 0 else 1
                keep = config.is_reference or b in kept
                k_mid = 3 if keep else 1
                if config.block_kind == "bottleneck":
                    blocks.append(BottleneckBlock(in_ch, planes, out_ch, k_mid, stride, rng, dtype))
                else:
                    k2 = 3 if config.is_reference else 1
                    blocks.append(BasicBlock(in_ch, out_ch, k_mid, k2, stride, rng, dtype))
                in_ch = out_ch
            self.stacks.append(blocks)
        self.features = in_ch
        self.mlp = ResidualMlp(in_ch, config.block_kind, rng, dtype) if config.post_pool_mlp else None

    def forward(self, x, mode="train", linearize=False):
        y = self.stem_bn(self.stem(x), mode=mode, linearize=linearize)
        y = nn.ReLU()(y, linearize=linearize)
        if self.maxpool is not None:
            y = self.maxpool(y, linearize=linearize)
        for blocks in self.stacks:
            for block in blocks:
                y = block(y, mode=mode, linearize=linearize)
        pooled = T.global_avg_pool(y)
        if self.mlp is not None:
            glob = self.mlp(pooled, mode=mode, linearize=linearize)
        else:
            glob = pooled
        return BackboneOutput(local=y, global_pooled=pooled, global_=glob)

    def grid_side(self, image_size):
        return image_size // total_stride(descriptor_chain(self.config))


def build_backbone(config: ArchConfig, rng=None, dtype=np.float32):
    return Backbone(config, rng=rng, dtype=dtype)


def count_params(module: nn.Module):
    """Learnable scalar count: weights, biases, batch-norm affine parameters."""
    return module.count_params()


def empirical_rf(backbone: Backbone, image_size, probe_position=None, rng=None):
    """Saliency-support width of one local representation on a random network.

    Backpropagates the sum of the probed grid cell onto the input of a
    linearized forward pass (identity ReLU, average instead of max pooling,
    identity batch-norm stats) and returns the bounding-box side of strictly
    nonzero input-gradient pixels.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    x = T.Tensor(rng.standard_normal((1, 3, image_size, image_size)), requires_grad=True)
    with T.tape():
        out = backbone(x, mode="train", linearize=True)
        _, c, gh, gw = out.local.shape
        if probe_position is None:
            probe_position = (gh // 2, gw // 2)
        i, j = probe_position
        if not (0 <= i < gh and 0 <= j < gw):
            raise ValueError(f"probe position {probe_position} outside local grid {gh}x{gw}")
        mask = np.zeros((1, c, gh, gw), dtype=out.local.dtype)
        mask[0, :, i, j] = 1.0
        loss = T.tensor_sum(T.mul(out.local, T.Tensor(mask)))
        T.backward(loss)
    g = np.abs(x.grad.data[0]).max(axis=0)
    rows = np.flatnonzero(g.max(axis=1) > 0)
    cols = np.flatnonzero(g.max(axis=0) > 0)
    if rows.size == 0:
        return 0
    return int(max(rows[-1] - rows[0] + 1, cols[-1] - cols[0] + 1))
