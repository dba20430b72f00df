"""Shared-encoder multitask network with switchable architecture pieces.

The network reads a band cube and emits one map per task at input
resolution.  A single encoder trunk feeds two decoder families, one for
categorical tasks and one for continuous tasks; five independent flags
swap major pieces for plain stand-ins of identical output shape so
architecture contributions can be measured one at a time:

  R: residual blocks (off: plain double convolutions)
  D: gated dilated-pyramid context block (off: one plain 3x3 convolution)
  A: spectral-spatial attention bridge (off: pass-through)
  M: adaptive multitask loss balancing (off: fixed equal weights; read by
     the trainer, carries no parameters here)
  C: learned per-family channel pooling (off: fixed half-split of the
     shared feature stack)
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, Optional, Tuple

import numpy as np

from . import autodiff as ad
from . import blocks as bl
from .autodiff import ShapeError, Tensor
from .losses import ClassWeightTable

__all__ = [
    "FLAG_NAMES",
    "TaskSpec",
    "ModelConfig",
    "TaskOutputs",
    "Model",
    "build_model",
    "forward",
    "ablation_variant",
    "parameter_count",
]

FLAG_NAMES = ("R", "D", "A", "M", "C")


@dataclass(frozen=True)
class TaskSpec:
    """One output of the network: a categorical map or a continuous map."""

    name: str
    kind: str
    classes: int = 0
    weights: Optional[ClassWeightTable] = None
    vrange: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if not self.name:
            raise ValueError("task name must be non-empty")
        if self.kind not in ("categorical", "continuous"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == "categorical" and self.classes < 2:
            raise ValueError(f"categorical task {self.name!r} needs >= 2 classes")
        if self.kind == "continuous" and self.vrange is not None:
            lo, hi = self.vrange
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ValueError(f"bad value range for {self.name!r}: {self.vrange}")


@dataclass(frozen=True)
class ModelConfig:
    bands: int
    tasks: Tuple[TaskSpec, ...]
    base_channels: int = 32
    depth: int = 3
    flags: Tuple[Tuple[str, bool], ...] = tuple((f, True) for f in FLAG_NAMES)
    rates: Tuple[int, ...] = (6, 12, 18)
    balance: str = "uncertainty"

    def __post_init__(self):
        if self.bands < 1:
            raise ValueError(f"bands must be >= 1, got {self.bands}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.depth < 2:
            raise ValueError(
                f"depth must be >= 2 so at least one skip connection exists, got {self.depth}")
        if not self.tasks:
            raise ValueError("task list must be non-empty")
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate task names in {names}")
        object.__setattr__(self, "tasks", tuple(self.tasks))
        flags = dict(self.flags)
        if set(flags) != set(FLAG_NAMES):
            raise ValueError(f"flags must cover exactly {FLAG_NAMES}, got {sorted(flags)}")
        object.__setattr__(self, "flags", tuple((f, bool(flags[f])) for f in FLAG_NAMES))
        if self.balance not in ("fixed_equal", "uncertainty", "gradnorm"):
            raise ValueError(f"unknown balance mode {self.balance!r}")
        if self.balance in ("uncertainty", "gradnorm"):
            kinds = {t.kind for t in self.tasks}
            if kinds != {"categorical", "continuous"}:
                raise ValueError(
                    f"balance mode {self.balance!r} needs at least one categorical "
                    "and one continuous task")

    def flag(self, name: str) -> bool:
        return dict(self.flags)[name]

    def family_tasks(self, family: str) -> Tuple[TaskSpec, ...]:
        kind = "categorical" if family == "classification" else "continuous"
        return tuple(t for t in self.tasks if t.kind == kind)


class TaskOutputs:
    """Per-task output maps, all at the input spatial resolution."""

    def __init__(self, maps: Dict[str, Tensor]):
        self.maps = maps

    def __getitem__(self, name: str) -> Tensor:
        return self.maps[name]

    def __iter__(self):
        return iter(self.maps)

    def items(self):
        return self.maps.items()


def _attention_ratio(channels: int) -> int:
    return max(r for r in (8, 4, 2, 1) if channels % r == 0)


class _Bridge:
    """Attention over a transformed copy of the feature map, plus skip."""

    def __init__(self, rng, channels):
        self.transform = bl.ConvBn(rng, channels, channels, 3, padding=1)
        self.attn = bl.ResidualAttentionParams(rng, channels,
                                               ratio=_attention_ratio(channels))

    def apply(self, x: Tensor, mode: str) -> Tensor:
        fx = self.transform.apply(x, mode)
        return bl.residual_attention(x, fx, self.attn)

    def named_params(self, prefix):
        return self.transform.named_params(prefix + ".transform") \
            + self.attn.named_params(prefix + ".attn")

    def named_states(self, prefix):
        return self.transform.named_states(prefix + ".transform")


class _DecoderStage:
    """Upsample, concatenate the matching skip, reconcile, refine."""

    def __init__(self, rng, in_ch, skip_ch, residual):
        self.skip_ch = skip_ch
        self.reconcile = bl.ConvBn(rng, in_ch + skip_ch, skip_ch, 1)
        if residual:
            self.block = bl.ResNetBlockParams(rng, skip_ch, skip_ch)
            self._run = bl.resnet_block
        else:
            self.block = bl.PlainBlockParams(rng, skip_ch, skip_ch)
            self._run = bl.plain_block

    def apply(self, x: Tensor, skip: Tensor, mode: str) -> Tensor:
        n, c, h, w = skip.data.shape
        x = ad.bilinear_upsample(x, (h, w))
        h_ = ad.concat_channels([x, skip])
        h_ = self.reconcile.apply(h_, mode)
        return self._run(h_, self.block, mode)

    def named_params(self, prefix):
        return self.reconcile.named_params(prefix + ".reconcile") \
            + self.block.named_params(prefix + ".block")

    def named_states(self, prefix):
        return self.reconcile.named_states(prefix + ".reconcile") \
            + self.block.named_states(prefix + ".block")


class Model:
    """Built network: parameters, batch-norm state, and the forward graph."""

    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        c0 = config.base_channels
        depth = config.depth
        residual = config.flag("R")

        self.stem = bl.ConvBn(rng, config.bands, c0, 3, padding=1)

        self.stage_blocks = []
        self.transitions = []
        for i in range(depth):
            ch = c0 * 2**i
            if residual:
                self.stage_blocks.append(bl.ResNetBlockParams(rng, ch, ch))
            else:
                self.stage_blocks.append(bl.PlainBlockParams(rng, ch, ch))
            if i < depth - 1:
                self.transitions.append(bl.TransitionParams(rng, ch))

        cb = c0 * 2 ** (depth - 1)
        self.bottleneck_channels = 2 * cb
        if config.flag("D"):
            self.context = bl.DenseAsppParams(rng, cb, rates=config.rates)
        else:
            self.context = bl.SingleConvParams(rng, cb)

        self.skip_channels = [c0 * 2**i for i in range(depth - 1)]
        if config.flag("A"):
            self.bridge = _Bridge(rng, self.bottleneck_channels)
            self.skip_bridges = [_Bridge(rng, ch) for ch in self.skip_channels]
        else:
            self.bridge = None
            self.skip_bridges = [None] * (depth - 1)

        self.pool_channels = self.bottleneck_channels // 2
        if config.flag("C"):
            self.pool = bl.ChannelPoolParams(rng, self.bottleneck_channels,
                                             out_channels=self.pool_channels)
        else:
            self.pool = None

        self.decoders: Dict[str, list] = {}
        self.heads: Dict[str, bl.ConvBn] = {}
        for family in ("classification", "regression"):
            tasks = config.family_tasks(family)
            if not tasks:
                self.decoders[family] = []
                continue
            stages = []
            ch = self.pool_channels
            for i in range(depth - 1):
                skip_ch = self.skip_channels[depth - 2 - i]
                stages.append(_DecoderStage(rng, ch, skip_ch, residual))
                ch = skip_ch
            self.decoders[family] = stages
            for t in tasks:
                out_ch = t.classes if t.kind == "categorical" else 1
                self.heads[t.name] = bl.ConvBn(rng, ch, out_ch, 1, bn=False, act=None)

    # -- parameter and state enumeration ------------------------------------

    def component_params(self):
        """Ordered (component, name, tensor) triples covering every parameter."""
        out = []

        def push(component, pairs):
            out.extend((component, n, t) for n, t in pairs)

        push("encoder", self.stem.named_params("stem"))
        for i, b in enumerate(self.stage_blocks):
            push("encoder", b.named_params(f"stage{i}"))
        for i, t in enumerate(self.transitions):
            push("encoder", t.named_params(f"transition{i}"))
        push("encoder", self.context.named_params("context"))
        if self.bridge is not None:
            push("attention", self.bridge.named_params("bridge"))
            for i, b in enumerate(self.skip_bridges):
                push("attention", b.named_params(f"skip_bridge{i}"))
        if self.pool is not None:
            push("channel_pool", self.pool.named_params("pool"))
        for family in ("classification", "regression"):
            for i, s in enumerate(self.decoders[family]):
                push(f"decoder_{family}", s.named_params(f"decoder.{family}.{i}"))
        for t in self.config.tasks:
            if t.name in self.heads:
                push("heads", self.heads[t.name].named_params(f"head.{t.name}"))
        return out

    def named_params(self):
        return [(n, t) for _, n, t in self.component_params()]

    def named_states(self):
        out = []
        out.extend(self.stem.named_states("stem"))
        for i, b in enumerate(self.stage_blocks):
            out.extend(b.named_states(f"stage{i}"))
        for i, t in enumerate(self.transitions):
            out.extend(t.named_states(f"transition{i}"))
        out.extend(self.context.named_states("context"))
        if self.bridge is not None:
            out.extend(self.bridge.named_states("bridge"))
            for i, b in enumerate(self.skip_bridges):
                out.extend(b.named_states(f"skip_bridge{i}"))
        for family in ("classification", "regression"):
            for i, s in enumerate(self.decoders[family]):
                out.extend(s.named_states(f"decoder.{family}.{i}"))
        return out


def build_model(config: ModelConfig, seed: int) -> Model:
    """Construct the network with a deterministic seeded initialization."""
    return Model(config, seed)


def _context_apply(model: Model, x: Tensor, mode: str) -> Tensor:
    if isinstance(model.context, bl.DenseAsppParams):
        h = bl.dense_aspp(x, model.context, mode)
        return bl.dense_aspp_expand(h, model.context, mode)
    h = model.context.conv.apply(x, mode)
    return model.context.post.apply(h, mode)


def _pool_apply(model: Model, x: Tensor, family: str) -> Tensor:
    if model.pool is not None:
        return bl.channel_pool(x, model.pool, family)
    half = model.pool_channels
    if family == "classification":
        return ad.channel_slice(x, 0, half)
    return ad.channel_slice(x, half, 2 * half)


def forward(model: Model, batch: Tensor, mode: str = "train") -> TaskOutputs:
    """Run the network; returns one map per task at input resolution."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if not isinstance(batch, Tensor):
        batch = Tensor(batch)
    if batch.data.ndim != 4:
        raise ShapeError(f"batch must be (N, B, H, W), got {batch.data.shape}")
    n, b, h, w = batch.data.shape
    cfg = model.config
    if b != cfg.bands:
        raise ShapeError(f"batch has {b} bands, model expects {cfg.bands}")
    step = 2 ** (cfg.depth - 1)
    if h % step or w % step:
        raise ShapeError(
            f"spatial extents {(h, w)} must be divisible by {step} for depth {cfg.depth}")

    x = model.stem.apply(batch, mode)
    skips = []
    for i in range(cfg.depth):
        if cfg.flag("R"):
            x = bl.resnet_block(x, model.stage_blocks[i], mode)
        else:
            x = bl.plain_block(x, model.stage_blocks[i], mode)
        if i < cfg.depth - 1:
            skips.append(x)
            x = bl.encoder_transition(x, model.transitions[i], mode)

    x = _context_apply(model, x, mode)

    if model.bridge is not None:
        x = model.bridge.apply(x, mode)
        skips = [br.apply(s, mode) for br, s in zip(model.skip_bridges, skips)]

    maps: Dict[str, Tensor] = {}
    for family in ("classification", "regression"):
        tasks = cfg.family_tasks(family)
        if not tasks:
            continue
        d = _pool_apply(model, x, family)
        for i, stage in enumerate(model.decoders[family]):
            skip = skips[cfg.depth - 2 - i]
            d = stage.apply(d, skip, mode)
        for t in tasks:
            out = model.heads[t.name].apply(d, mode)
            maps[t.name] = ad.bilinear_upsample(out, (h, w))
    return TaskOutputs(maps)


def ablation_variant(config: ModelConfig, flags) -> ModelConfig:
    """Config with only the named modules enabled; stand-ins keep shapes."""
    enabled = set(flags)
    unknown = enabled - set(FLAG_NAMES)
    if unknown:
        raise ValueError(f"unknown ablation flags {sorted(unknown)}")
    new_flags = tuple((f, f in enabled) for f in FLAG_NAMES)
    balance = config.balance if "M" in enabled else "fixed_equal"
    return replace(config, flags=new_flags, balance=balance)


def parameter_count(model: Model):
    """Per-component parameter totals; components partition the model."""
    counts: Dict[str, int] = {}
    for component, _, tensor in model.component_params():
        counts[component] = counts.get(component, 0) + tensor.data.size
    counts["total"] = sum(v for k, v in counts.items() if k != "total")
    return counts
