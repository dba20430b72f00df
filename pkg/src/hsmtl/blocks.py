"""Reusable network building blocks.

Each block is a pure function of (input, parameters, mode); parameters
live in small dataclasses built from a seeded generator so construction
is reproducible.  Every parameterized object exposes ``named_params``
and ``named_states`` for the optimizer and the checkpoint writer, with
deterministic ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Conv2dSpec, ShapeError, Tensor

LEAKY_SLOPE = 0.01


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(scale=np.sqrt(2.0 / fan_in), size=shape)


class ConvBn:
    """Convolution with optional batch norm and optional activation."""

    def __init__(self, rng, in_ch, out_ch, kernel, stride=1, padding=0, dilation=1,
                 bn=True, act: Optional[str] = "leaky_relu", bias: Optional[bool] = None):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.spec = Conv2dSpec(in_ch, out_ch, kernel=(kh, kw), stride=stride,
                               padding=padding, dilation=dilation)
        fan_in = in_ch * kh * kw
        self.weight = Tensor(he_normal(rng, (out_ch, in_ch, kh, kw), fan_in), requires_grad=True)
        # bias is redundant directly before batch norm
        use_bias = (not bn) if bias is None else bias
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True) if use_bias else None
        self.bn = bn
        self.act = act
        if bn:
            self.gamma = Tensor(np.ones(out_ch), requires_grad=True)
            self.beta = Tensor(np.zeros(out_ch), requires_grad=True)
            self.state = BatchNormState.fresh(out_ch)

    def apply(self, x: Tensor, mode: str, act: Optional[str] = "unset") -> Tensor:
        h = ad.conv2d(x, self.weight, self.bias, self.spec)
        if self.bn:
            h = ad.batch_norm(h, self.gamma, self.beta, self.state, mode=mode)
        kind = self.act if act == "unset" else act
        if kind is not None:
            if kind == "leaky_relu":
                h = ad.leaky_relu(h, slope=LEAKY_SLOPE)
            else:
                h = ad.activation(h, kind)
        return h

    def named_params(self, prefix: str):
        out = [(prefix + ".weight", self.weight)]
        if self.bias is not None:
            out.append((prefix + ".bias", self.bias))
        if self.bn:
            out.append((prefix + ".gamma", self.gamma))
            out.append((prefix + ".beta", self.beta))
        return out

    def named_states(self, prefix: str):
        return [(prefix + ".bn", self.state)] if self.bn else []


# ---------------------------------------------------------------------------
# residual blocks


class ResNetBlockParams:
    """Two-convolution identity block or three-convolution bottleneck block."""

    def __init__(self, rng, in_ch, out_ch, variant="identity", mid_ch=None):
        if variant not in ("identity", "bottleneck"):
            raise ValueError(f"variant must be 'identity' or 'bottleneck', got {variant!r}")
        if variant == "identity" and in_ch != out_ch:
            raise ShapeError(
                f"identity variant needs matching channels, got {in_ch} -> {out_ch}")
        self.variant = variant
        self.in_ch = in_ch
        self.out_ch = out_ch
        if variant == "identity":
            self.conv1 = ConvBn(rng, in_ch, out_ch, 3, padding=1)
            self.conv2 = ConvBn(rng, out_ch, out_ch, 3, padding=1, act=None)
            self.projection = None
        else:
            mid = mid_ch if mid_ch is not None else max(out_ch // 4, 1)
            self.conv1 = ConvBn(rng, in_ch, mid, 1)
            self.conv2 = ConvBn(rng, mid, mid, 3, padding=1)
            self.conv3 = ConvBn(rng, mid, out_ch, 1, act=None)
            self.projection = ConvBn(rng, in_ch, out_ch, 1, bn=False, act=None) \
                if in_ch != out_ch else None

    def named_params(self, prefix: str):
        out = self.conv1.named_params(prefix + ".conv1")
        out += self.conv2.named_params(prefix + ".conv2")
        if self.variant == "bottleneck":
            out += self.conv3.named_params(prefix + ".conv3")
        if self.projection is not None:
            out += self.projection.named_params(prefix + ".projection")
        return out

    def named_states(self, prefix: str):
        out = self.conv1.named_states(prefix + ".conv1")
        out += self.conv2.named_states(prefix + ".conv2")
        if self.variant == "bottleneck":
            out += self.conv3.named_states(prefix + ".conv3")
        return out


def resnet_block(x: Tensor, params: ResNetBlockParams, mode: str = "train") -> Tensor:
    """Residual branch plus identity or projected shortcut, activated after the sum."""
    if x.data.shape[1] != params.in_ch:
        raise ShapeError(f"input channels {x.data.shape[1]} != block in_ch {params.in_ch}")
    h = params.conv1.apply(x, mode)
    h = params.conv2.apply(h, mode)
    if params.variant == "bottleneck":
        h = params.conv3.apply(h, mode)
    shortcut = x if params.projection is None else params.projection.apply(x, mode)
    return ad.leaky_relu(ad.add(h, shortcut), slope=LEAKY_SLOPE)


class PlainBlockParams:
    """Ablation stand-in: the same convolutions without the shortcut path."""

    def __init__(self, rng, in_ch, out_ch):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.conv1 = ConvBn(rng, in_ch, out_ch, 3, padding=1)
        self.conv2 = ConvBn(rng, out_ch, out_ch, 3, padding=1)

    def named_params(self, prefix: str):
        return self.conv1.named_params(prefix + ".conv1") \
            + self.conv2.named_params(prefix + ".conv2")

    def named_states(self, prefix: str):
        return self.conv1.named_states(prefix + ".conv1") \
            + self.conv2.named_states(prefix + ".conv2")


def plain_block(x: Tensor, params: PlainBlockParams, mode: str = "train") -> Tensor:
    return params.conv2.apply(params.conv1.apply(x, mode), mode)


# ---------------------------------------------------------------------------
# dense dilated spatial pyramid


class DenseAsppParams:
    """Gated dilated branches with dense connectivity plus an expansion conv.

    Branch i consumes the channel concatenation of the block input with
    all earlier branch outputs, so its convolution takes i*c channels.
    """

    def __init__(self, rng, channels, rates=(6, 12, 18)):
        if len(rates) < 1 or any(r < 1 for r in rates):
            raise ValueError(f"dilation rates must be positive, got {rates}")
        self.channels = channels
        self.rates = tuple(int(r) for r in rates)
        wide = int(1.5 * channels)
        self.gates = [Tensor(np.zeros(()), requires_grad=True) for _ in self.rates]
        self.branch_dilated = []
        self.branch_narrow = []
        for i, r in enumerate(self.rates):
            in_ch = channels * (i + 1)
            self.branch_dilated.append(
                ConvBn(rng, in_ch, wide, 3, padding=r, dilation=r))
            self.branch_narrow.append(ConvBn(rng, wide, channels, 1, act=None))
        self.post = ConvBn(rng, channels, 2 * channels, 1)

    def named_params(self, prefix: str):
        out = []
        for i in range(len(self.rates)):
            out.append((f"{prefix}.gate{i}", self.gates[i]))
            out += self.branch_dilated[i].named_params(f"{prefix}.branch{i}.dilated")
            out += self.branch_narrow[i].named_params(f"{prefix}.branch{i}.narrow")
        out += self.post.named_params(prefix + ".post")
        return out

    def named_states(self, prefix: str):
        out = []
        for i in range(len(self.rates)):
            out += self.branch_dilated[i].named_states(f"{prefix}.branch{i}.dilated")
            out += self.branch_narrow[i].named_states(f"{prefix}.branch{i}.narrow")
        out += self.post.named_states(prefix + ".post")
        return out


def dense_aspp(x: Tensor, params: DenseAsppParams, mode: str = "train") -> Tensor:
    """Input plus sigmoid-gated dilated branches; spatial extent preserved."""
    n, c, h, w = x.data.shape
    if c != params.channels:
        raise ShapeError(f"input channels {c} != configured {params.channels}")
    if min(h, w) <= max(params.rates):
        raise ShapeError(
            f"extent {(h, w)} too small for dilation {max(params.rates)}: every "
            f"off-center tap would read padding")
    outputs = []
    total = x
    for i in range(len(params.rates)):
        branch_in = x if not outputs else ad.concat_channels([x] + outputs)
        b = params.branch_dilated[i].apply(branch_in, mode)
        b = params.branch_narrow[i].apply(b, mode)
        outputs.append(b)
        gate = ad.sigmoid(ad.reshape(params.gates[i], (1, 1, 1, 1)))
        total = ad.add(total, ad.mul(b, gate))
    return total


def dense_aspp_expand(f_l: Tensor, params: DenseAsppParams, mode: str = "train") -> Tensor:
    """Post-summation 1x1 convolution doubling the channel count."""
    return params.post.apply(f_l, mode)


class SingleConvParams:
    """Ablation stand-in for the dilated pyramid: one plain 3x3 convolution."""

    def __init__(self, rng, channels):
        self.channels = channels
        self.conv = ConvBn(rng, channels, channels, 3, padding=1)
        self.post = ConvBn(rng, channels, 2 * channels, 1)

    def named_params(self, prefix: str):
        return self.conv.named_params(prefix + ".conv") + self.post.named_params(prefix + ".post")

    def named_states(self, prefix: str):
        return self.conv.named_states(prefix + ".conv") + self.post.named_states(prefix + ".post")


# ---------------------------------------------------------------------------
# encoder transition


class TransitionParams:
    """2x2 average pooling then a 1x1 convolution doubling the channels."""

    def __init__(self, rng, channels):
        self.channels = channels
        self.conv = ConvBn(rng, channels, 2 * channels, 1)

    def named_params(self, prefix: str):
        return self.conv.named_params(prefix + ".conv")

    def named_states(self, prefix: str):
        return self.conv.named_states(prefix + ".conv")


def encoder_transition(f_l: Tensor, params: TransitionParams, mode: str = "train") -> Tensor:
    n, c, h, w = f_l.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"transition requires even extents, got {(h, w)}")
    pooled = ad.pool2d(f_l, "avg", (2, 2))
    return params.conv.apply(pooled, mode)


# ---------------------------------------------------------------------------
# attention


class ChannelAttentionParams:
    """Spectral gate: pooled band vectors through a shared 1-D conv and MLP."""

    def __init__(self, rng, channels, ratio=8):
        if channels % ratio:
            raise ValueError(f"reduction ratio {ratio} must divide channel count {channels}")
        self.channels = channels
        self.ratio = ratio
        self.conv_w = Tensor(he_normal(rng, (1, 1, 3), 3), requires_grad=True)
        self.conv_b = Tensor(np.zeros(1), requires_grad=True)
        hidden = channels // ratio
        self.w1 = Tensor(he_normal(rng, (hidden, channels), channels), requires_grad=True)
        self.w2 = Tensor(he_normal(rng, (channels, hidden), hidden), requires_grad=True)

    def named_params(self, prefix: str):
        return [(prefix + ".conv_w", self.conv_w), (prefix + ".conv_b", self.conv_b),
                (prefix + ".w1", self.w1), (prefix + ".w2", self.w2)]

    def named_states(self, prefix: str):
        return []


def _spectral_path(pooled: Tensor, params: ChannelAttentionParams) -> Tensor:
    n = pooled.data.shape[0]
    c = params.channels
    v = ad.reshape(pooled, (n, 1, c))
    v = ad.conv1d(v, params.conv_w, params.conv_b, padding=1)
    v = ad.reshape(v, (n, c))
    h = ad.relu(ad.linear(v, params.w1))
    return ad.linear(h, params.w2)


def channel_attention(x: Tensor, params: ChannelAttentionParams) -> Tensor:
    """Per-channel weights in (0,1), shape (N, C, 1, 1)."""
    if x.data.shape[1] != params.channels:
        raise ShapeError(f"input channels {x.data.shape[1]} != configured {params.channels}")
    avg = _spectral_path(ad.global_avg_pool(x), params)
    mx = _spectral_path(ad.spatial_max(x), params)
    n = x.data.shape[0]
    return ad.reshape(ad.sigmoid(ad.add(avg, mx)), (n, params.channels, 1, 1))


class SpatialAttentionParams:
    """One 3x3 convolution over the stacked channelwise max and mean maps."""

    def __init__(self, rng):
        self.conv_w = Tensor(he_normal(rng, (1, 2, 3, 3), 18), requires_grad=True)
        self.conv_b = Tensor(np.zeros(1), requires_grad=True)
        self.spec = Conv2dSpec(2, 1, kernel=(3, 3), padding=(1, 1))

    def named_params(self, prefix: str):
        return [(prefix + ".conv_w", self.conv_w), (prefix + ".conv_b", self.conv_b)]

    def named_states(self, prefix: str):
        return []


def spatial_attention(x: Tensor, params: SpatialAttentionParams) -> Tensor:
    """Location weights in [0,1], shape (N, 1, H, W)."""
    stacked = ad.concat_channels([ad.channel_max(x), ad.channel_mean(x)])
    return ad.sigmoid(ad.conv2d(stacked, params.conv_w, params.conv_b, params.spec))


class ResidualAttentionParams:
    def __init__(self, rng, channels, ratio=8):
        self.channels = channels
        self.channel = ChannelAttentionParams(rng, channels, ratio)
        self.spatial = SpatialAttentionParams(rng)

    def named_params(self, prefix: str):
        return self.channel.named_params(prefix + ".channel") \
            + self.spatial.named_params(prefix + ".spatial")

    def named_states(self, prefix: str):
        return []


def residual_attention(x: Tensor, fx: Tensor, params: ResidualAttentionParams,
                       include_skip: bool = True) -> Tensor:
    """x + F(x) refined by channel-then-spatial attention.

    ``include_skip=False`` degrades to the purely multiplicative form
    used in the ablation study.
    """
    if x.data.shape != fx.data.shape:
        raise ShapeError(f"skip and feature shapes differ: {x.data.shape} vs {fx.data.shape}")
    attended = ad.mul(fx, channel_attention(fx, params.channel))
    attended = ad.mul(attended, spatial_attention(attended, params.spatial))
    return ad.add(x, attended) if include_skip else attended


# ---------------------------------------------------------------------------
# channel pooling


class ChannelPoolParams:
    """Independent 1x1 compressions for the two task families."""

    def __init__(self, rng, in_ch, out_channels=256):
        if out_channels < 1:
            raise ValueError(f"out_channels must be >= 1, got {out_channels}")
        self.in_ch = in_ch
        self.out_channels = out_channels
        self.classification = ConvBn(rng, in_ch, out_channels, 1, bn=False, act=None)
        self.regression = ConvBn(rng, in_ch, out_channels, 1, bn=False, act=None)

    def named_params(self, prefix: str):
        return self.classification.named_params(prefix + ".classification") \
            + self.regression.named_params(prefix + ".regression")

    def named_states(self, prefix: str):
        return []


def channel_pool(x: Tensor, params: ChannelPoolParams, family: str) -> Tensor:
    if family not in ("classification", "regression"):
        raise ValueError(f"family must be 'classification' or 'regression', got {family!r}")
    conv = params.classification if family == "classification" else params.regression
    return conv.apply(x, "eval")
