"""Gated recurrent units wrapped around U-Net segments, plus the simpler
recurrent baselines, and the driver that threads (mask, hidden state)
through the iterations.

The dual-gate cell computes, per iteration, from the encoder activations
e and previous hidden state h:

    z    = sigmoid(f_z(e))            update gate
    r    = sigmoid(proj(f_r(e)))      reset tensor, matched to e's channels
    cand = tanh(f_h(r * e))           candidate hidden state
    h'   = z * h + (1 - z) * cand
    d    = f_s(h')                    decoder-level activations

where f_z, f_r, f_h are independently parameterized encoder-decoder
segments with the same architecture as the U-Net portion they replace.
The single-gate cell drops r and feeds e to f_h directly.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .blocks import (
    POOL_LEVELS,
    Conv2d,
    ConvBlock,
    ConvTranspose2d,
    EncoderDecoderSegment,
    Module,
    UNetBackbone,
    channels_at,
    encoder_input_channels,
)
from .config import ModelConfig
from .tensor import ConfigError, NumericsError, ShapeError, Tensor, zeros


class DRUCell(Module):
    """Dual-gated recurrent unit over an encoder-decoder segment."""

    def __init__(self, level, in_channels, rng, base=8, groups=8, dtype=np.float32):
        seg = lambda: EncoderDecoderSegment(
            level, in_channels, rng, base=base, groups=groups,
            final_activation=False, dtype=dtype,
        )
        self.f_z = seg()
        self.f_r = seg()
        self.f_h = seg()
        out_ch = self.f_z.out_channels
        # r multiplies e elementwise, so it must come back down to e's channels
        self.r_proj = Conv2d(out_ch, in_channels, 1, rng, dtype=dtype)
        self.f_s = ConvBlock(out_ch, out_ch, rng, kernel_size=1, groups=groups, dtype=dtype)
        # start biased toward keeping the previous hidden state
        self.f_z.final_norm().shift.data[:] = 1.0

    @property
    def out_channels(self):
        return self.f_z.out_channels

    def step(self, e: Tensor, h_prev: Tensor):
        z = ops.sigmoid(self.f_z(e))
        if z.shape != h_prev.shape:
            raise ShapeError(
                f"update gate z shape {z.shape} does not match hidden state "
                f"{h_prev.shape}"
            )
        r = ops.sigmoid(self.r_proj(self.f_r(e)))
        if r.shape != e.shape:
            raise ShapeError(
                f"reset tensor r shape {r.shape} does not match encoder "
                f"activations {e.shape}"
            )
        cand = ops.tanh(self.f_h(ops.mul(r, e)))
        h_next = ops.affine_blend(z, h_prev, cand)
        return self.f_s(h_next), h_next


class SRUCell(Module):
    """Single-gated variant: no reset tensor, candidate comes from e directly."""

    def __init__(self, level, in_channels, rng, base=8, groups=8, dtype=np.float32):
        seg = lambda: EncoderDecoderSegment(
            level, in_channels, rng, base=base, groups=groups,
            final_activation=False, dtype=dtype,
        )
        self.f_z = seg()
        self.f_h = seg()
        out_ch = self.f_z.out_channels
        self.f_s = ConvBlock(out_ch, out_ch, rng, kernel_size=1, groups=groups, dtype=dtype)
        self.f_z.final_norm().shift.data[:] = 1.0

    @property
    def out_channels(self):
        return self.f_z.out_channels

    def step(self, e: Tensor, h_prev: Tensor):
        z = ops.sigmoid(self.f_z(e))
        if z.shape != h_prev.shape:
            raise ShapeError(
                f"update gate z shape {z.shape} does not match hidden state "
                f"{h_prev.shape}"
            )
        cand = ops.tanh(self.f_h(e))
        h_next = ops.affine_blend(z, h_prev, cand)
        return self.f_s(h_next), h_next


class ConvGRUCell(Module):
    """Plain convolutional GRU with 3x3 gates, used by the baselines."""

    def __init__(self, in_channels, hidden_channels, rng, dtype=np.float32):
        self.hidden_channels = hidden_channels
        total = in_channels + hidden_channels
        self.conv_z = Conv2d(total, hidden_channels, 3, rng, dtype=dtype)
        self.conv_r = Conv2d(total, hidden_channels, 3, rng, dtype=dtype)
        self.conv_h = Conv2d(total, hidden_channels, 3, rng, dtype=dtype)
        self.conv_z.bias.data[:] = 1.0

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        xh = ops.concat_channels(x, h)
        z = ops.sigmoid(self.conv_z(xh))
        r = ops.sigmoid(self.conv_r(xh))
        cand = ops.tanh(self.conv_h(ops.concat_channels(x, ops.mul(r, h))))
        return ops.affine_blend(z, h, cand)


class _SegmentationModel(Module):
    config: ModelConfig

    @property
    def input_channels(self) -> int:
        return self.config.in_channels + (1 if self.config.uses_mask_feedback() else 0)

    def init_state(self, batch, height, width, dtype):
        return None


class PlainUNet(_SegmentationModel):
    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        self.config = cfg
        self.backbone = UNetBackbone(
            self.input_channels, cfg.n_classes, rng,
            base=cfg.base_channels, groups=cfg.norm_groups, dtype=dtype,
        )

    def step(self, inp, state):
        return self.backbone(inp), state


class RecSimpleUNet(PlainUNet):
    """Mask-feedback-only recurrence: the backbone sees image + previous
    mask each iteration and carries no hidden state."""


class RecurrentUNet(_SegmentationModel):
    """U-Net with a DRU or SRU replacing its levels >= `level`."""

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        self.config = cfg
        base, groups = cfg.base_channels, cfg.norm_groups
        self.enc_blocks = []
        c_in = self.input_channels
        for j in range(cfg.level):
            self.enc_blocks.append(
                ConvBlock(c_in, channels_at(base, j), rng, groups=groups, dtype=dtype)
            )
            c_in = channels_at(base, j)
        cell_in = encoder_input_channels(base, cfg.level, self.input_channels)
        cell_cls = DRUCell if cfg.variant == "dru" else SRUCell
        self.cell = cell_cls(cfg.level, cell_in, rng, base=base, groups=groups, dtype=dtype)
        self.ups = []
        self.dec_blocks = []
        for j in reversed(range(cfg.level)):
            ch = channels_at(base, j)
            self.ups.append(
                ConvTranspose2d(channels_at(base, j + 1), ch, 2, rng, stride=2, dtype=dtype)
            )
            self.dec_blocks.append(
                ConvBlock(2 * ch, ch, rng, groups=groups, dtype=dtype)
            )
        self.head = Conv2d(channels_at(base, 0), cfg.n_classes, 1, rng, dtype=dtype)

    def init_state(self, batch, height, width, dtype):
        scale = 1 << self.config.level
        if height % (1 << POOL_LEVELS) or width % (1 << POOL_LEVELS):
            raise ShapeError(
                f"input spatial dims ({height},{width}) must be multiples of "
                f"{1 << POOL_LEVELS}; reflect-pad the input first"
            )
        return zeros(
            (batch, self.cell.out_channels, height // scale, width // scale),
            dtype=dtype,
        )

    def step(self, inp, state):
        skips = []
        h = inp
        for block in self.enc_blocks:
            a = block(h)
            skips.append(a)
            h = ops.maxpool2d(a)
        d, state = self.cell.step(h, state)
        for up, dec, skip in zip(self.ups, self.dec_blocks, reversed(skips)):
            d = dec(ops.concat_channels(up(d), skip))
        return self.head(d), state


class RecMiddleUNet(_SegmentationModel):
    """Baseline: a ConvGRU replaces the bottleneck; hidden width 128."""

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        self.config = cfg
        base, groups = cfg.base_channels, cfg.norm_groups
        self.enc_blocks = []
        c_in = self.input_channels
        for j in range(POOL_LEVELS):
            self.enc_blocks.append(
                ConvBlock(c_in, channels_at(base, j), rng, groups=groups, dtype=dtype)
            )
            c_in = channels_at(base, j)
        hidden = channels_at(base, POOL_LEVELS)
        self.cell = ConvGRUCell(channels_at(base, POOL_LEVELS - 1), hidden, rng, dtype=dtype)
        self.ups = []
        self.dec_blocks = []
        for j in reversed(range(POOL_LEVELS)):
            ch = channels_at(base, j)
            self.ups.append(
                ConvTranspose2d(channels_at(base, j + 1), ch, 2, rng, stride=2, dtype=dtype)
            )
            self.dec_blocks.append(ConvBlock(2 * ch, ch, rng, groups=groups, dtype=dtype))
        self.head = Conv2d(channels_at(base, 0), cfg.n_classes, 1, rng, dtype=dtype)

    def init_state(self, batch, height, width, dtype):
        scale = 1 << POOL_LEVELS
        return zeros(
            (batch, self.cell.hidden_channels, height // scale, width // scale),
            dtype=dtype,
        )

    def step(self, inp, state):
        skips = []
        h = inp
        for block in self.enc_blocks:
            a = block(h)
            skips.append(a)
            h = ops.maxpool2d(a)
        state = self.cell.step(h, state)
        d = state
        for up, dec, skip in zip(self.ups, self.dec_blocks, reversed(skips)):
            d = dec(ops.concat_channels(up(d), skip))
        return self.head(d), state


class RecLastUNet(_SegmentationModel):
    """Baseline: a small ConvGRU after the full network, before the head."""

    HIDDEN = 8

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        self.config = cfg
        self.body = EncoderDecoderSegment(
            0, self.input_channels, rng,
            base=cfg.base_channels, groups=cfg.norm_groups, dtype=dtype,
        )
        self.cell = ConvGRUCell(channels_at(cfg.base_channels, 0), self.HIDDEN, rng, dtype=dtype)
        self.head = Conv2d(self.HIDDEN, cfg.n_classes, 1, rng, dtype=dtype)

    def init_state(self, batch, height, width, dtype):
        return zeros((batch, self.HIDDEN, height, width), dtype=dtype)

    def step(self, inp, state):
        features = self.body(inp)
        state = self.cell.step(features, state)
        return self.head(state), state


_MODEL_CLASSES = {
    "unet": PlainUNet,
    "rec_simple": RecSimpleUNet,
    "rec_middle": RecMiddleUNet,
    "rec_last": RecLastUNet,
    "sru": RecurrentUNet,
    "dru": RecurrentUNet,
}


def build_model(cfg: ModelConfig, rng_or_seed=0, dtype=np.float32) -> _SegmentationModel:
    cfg.validate()
    rng = (
        rng_or_seed
        if isinstance(rng_or_seed, np.random.Generator)
        else np.random.default_rng(rng_or_seed)
    )
    return _MODEL_CLASSES[cfg.variant](cfg, rng, dtype=dtype)


def recurrent_forward(model, x: Tensor, iterations: int | None = None) -> list[Tensor]:
    """Run the recurrence and return one logits tensor per iteration.

    The mask fed back is the sigmoid of the previous logits; iteration 1
    sees an all-zero mask and an all-zero hidden state. Parameters are
    shared across iterations, so backward through the returned list sums
    the per-iteration contributions.
    """
    cfg = model.config
    n_iter = cfg.iterations if iterations is None else iterations
    if n_iter < 1:
        raise ConfigError(f"iterations must be >= 1, got {n_iter}")
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(
            f"input shape {x.shape} does not match (N,{cfg.in_channels},H,W)"
        )
    feedback = cfg.uses_mask_feedback()
    if feedback and cfg.n_classes != 1:
        raise ConfigError("mask feedback is defined for single-class models only")
    n, _, h, w = x.shape
    state = model.init_state(n, h, w, x.dtype)
    mask = zeros((n, 1, h, w), dtype=x.dtype)
    outputs = []
    for t in range(1, n_iter + 1):
        inp = ops.concat_channels(x, mask) if feedback else x
        logits, state = model.step(inp, state)
        if not logits.is_finite() or (state is not None and not state.is_finite()):
            raise NumericsError(f"non-finite activations at recurrence iteration {t}")
        if feedback:
            mask = ops.sigmoid(logits)
        outputs.append(logits)
    return outputs
