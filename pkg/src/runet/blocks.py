"""Compact U-Net building blocks: conv/norm layers, encoder-decoder
segments, and the full backbone.

The channel schedule starts at `base` (8) and doubles after each of the 4
pooling levels, so level j carries base * 2**j channels with the
bottleneck at base * 16. A "segment" at level L is the sub-network from
encoder level L down to the bottleneck and back up to decoder level L,
skips included; L=0 is the whole U-Net body and L=4 degenerates to the
bottleneck block.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

POOL_LEVELS = 4

# Every conv feeds a group norm, which absorbs scale; 1.5 just keeps raw
# conv outputs mid-band for the variance sanity checks.
INIT_GAIN_SQ = 1.5


class Module:
    """Minimal parameter container; parameters are requires_grad tensors
    found on attributes, recursively through sub-modules and lists."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            path = f"{prefix}.{name}" if prefix else name
            yield from _walk_params(path, value)

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data) for name, p in self.named_parameters())

    def load_state_dict(self, state: dict):
        own = OrderedDict(self.named_parameters())
        missing = [k for k in own if k not in state]
        if missing:
            raise ShapeError(f"missing parameter in state: {missing[0]}")
        extra = [k for k in state if k not in own]
        if extra:
            raise ShapeError(f"unexpected parameter in state: {extra[0]}")
        for name, p in own.items():
            arr = state[name]
            if tuple(arr.shape) != p.shape:
                raise ShapeError(
                    f"shape mismatch for {name}: checkpoint {tuple(arr.shape)} "
                    f"vs model {p.shape}"
                )
            p.data = np.ascontiguousarray(arr, dtype=p.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk_params(path: str, value):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path)
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk_params(f"{path}.{i}", item)


def count_parameters(module: Module) -> tuple[int, list[tuple[str, tuple, int]]]:
    """Total trainable scalar count plus a per-tensor breakdown."""
    rows = [(name, p.shape, p.size) for name, p in module.named_parameters()]
    return sum(n for _, _, n in rows), rows


def channels_at(base: int, level: int) -> int:
    return base << level


def encoder_input_channels(base: int, level: int, in_channels: int) -> int:
    return in_channels if level == 0 else channels_at(base, level - 1)


def _param(rng: np.random.Generator, shape, std: float, dtype) -> Tensor:
    if std == 0.0:
        data = np.zeros(shape, dtype=dtype)
    else:
        data = rng.normal(0.0, std, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int | None = None,
        dtype=np.float32,
    ):
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        fan_in = in_channels * kernel_size * kernel_size
        std = (INIT_GAIN_SQ / fan_in) ** 0.5
        self.weight = _param(
            rng, (out_channels, in_channels, kernel_size, kernel_size), std, dtype
        )
        self.bias = _param(rng, (out_channels,), 0.0, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        dtype=np.float32,
    ):
        self.stride = stride
        self.padding = padding
        # each output position receives kh*kw/stride^2 taps on average
        fan_in = max(1, in_channels * kernel_size * kernel_size // (stride * stride))
        std = (INIT_GAIN_SQ / fan_in) ** 0.5
        self.weight = _param(
            rng, (in_channels, out_channels, kernel_size, kernel_size), std, dtype
        )
        self.bias = _param(rng, (out_channels,), 0.0, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int, dtype=np.float32, eps: float = 1e-5):
        if channels % groups:
            raise ShapeError(f"group norm: {channels} channels, {groups} groups")
        self.groups = groups
        self.eps = eps
        self.scale = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.shift = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return ops.group_norm(x, self.groups, self.scale, self.shift, self.eps)


class ConvBlock(Module):
    """conv (same padding) -> group norm -> optional relu.

    Gate networks drop the trailing relu so the sigmoid/tanh that follows
    them can reach both saturation regimes.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        kernel_size: int = 3,
        groups: int = 8,
        activation: bool = True,
        dtype=np.float32,
    ):
        self.conv = Conv2d(in_channels, out_channels, kernel_size, rng, dtype=dtype)
        self.norm = GroupNorm(out_channels, groups, dtype=dtype)
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        y = self.norm(self.conv(x))
        return ops.relu(y) if self.activation else y


class EncoderDecoderSegment(Module):
    """U-Net body from encoder level `level` through the bottleneck and
    back; output spatial size equals input spatial size."""

    def __init__(
        self,
        level: int,
        in_channels: int,
        rng: np.random.Generator,
        base: int = 8,
        groups: int = 8,
        final_activation: bool = True,
        dtype=np.float32,
    ):
        if not 0 <= level <= POOL_LEVELS:
            raise ShapeError(f"segment level {level} outside 0..{POOL_LEVELS}")
        self.level = level
        self.base = base
        if level == POOL_LEVELS:
            self.enc_blocks = []
            self.bottleneck = ConvBlock(
                in_channels, channels_at(base, POOL_LEVELS), rng, groups=groups,
                activation=final_activation, dtype=dtype,
            )
            self.ups = []
            self.dec_blocks = []
        else:
            self.enc_blocks = []
            c_in = in_channels
            for j in range(level, POOL_LEVELS):
                self.enc_blocks.append(
                    ConvBlock(c_in, channels_at(base, j), rng, groups=groups, dtype=dtype)
                )
                c_in = channels_at(base, j)
            self.bottleneck = ConvBlock(
                channels_at(base, POOL_LEVELS - 1),
                channels_at(base, POOL_LEVELS),
                rng, groups=groups, dtype=dtype,
            )
            self.ups = []
            self.dec_blocks = []
            for j in reversed(range(level, POOL_LEVELS)):
                ch = channels_at(base, j)
                self.ups.append(
                    ConvTranspose2d(channels_at(base, j + 1), ch, 2, rng, stride=2, dtype=dtype)
                )
                self.dec_blocks.append(
                    ConvBlock(
                        2 * ch, ch, rng, groups=groups,
                        activation=(final_activation if j == level else True),
                        dtype=dtype,
                    )
                )

    @property
    def out_channels(self) -> int:
        return channels_at(self.base, POOL_LEVELS if self.level == POOL_LEVELS else self.level)

    def check_spatial(self, h: int, w: int):
        div = 1 << (POOL_LEVELS - self.level)
        if h % div or w % div:
            raise ShapeError(
                f"segment at level {self.level} needs spatial dims divisible by "
                f"{div}, got ({h},{w}); reflect-pad the input up to a multiple "
                f"of {1 << POOL_LEVELS} first"
            )

    def forward(self, x: Tensor) -> Tensor:
        self.check_spatial(x.shape[2], x.shape[3])
        skips = []
        h = x
        for block in self.enc_blocks:
            a = block(h)
            skips.append(a)
            h = ops.maxpool2d(a)
        h = self.bottleneck(h)
        for up, dec, skip in zip(self.ups, self.dec_blocks, reversed(skips)):
            h = dec(ops.concat_channels(up(h), skip))
        return h

    def final_norm(self) -> GroupNorm:
        """The norm whose shift is the block's output bias (post-normalization)."""
        if self.level == POOL_LEVELS:
            return self.bottleneck.norm
        return self.dec_blocks[-1].norm


class UNetBackbone(Module):
    """Full compact U-Net: a level-0 segment plus a 1x1 logit head."""

    def __init__(
        self,
        in_channels: int,
        n_classes: int,
        rng: np.random.Generator,
        base: int = 8,
        groups: int = 8,
        dtype=np.float32,
    ):
        self.body = EncoderDecoderSegment(0, in_channels, rng, base=base, groups=groups, dtype=dtype)
        self.head = Conv2d(channels_at(base, 0), n_classes, 1, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.body(x))
