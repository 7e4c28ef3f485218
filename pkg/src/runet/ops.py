"""Primitive tensor operations with hand-derived backward rules.

Convolutions run as im2col views + BLAS matmuls; their input gradients use
a kernel-position loop over strided slices, which keeps everything
vectorized without scatter ops. No implicit broadcasting: operand shapes
must match exactly, except for plain Python scalars in `add`/`mul`.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import ShapeError, Tensor, record

__all__ = [
    "add",
    "mul",
    "relu",
    "sigmoid",
    "tanh",
    "affine_blend",
    "concat_channels",
    "slice_channels",
    "reduce_sum",
    "conv2d",
    "conv_transpose2d",
    "maxpool2d",
    "group_norm",
    "bce_with_logits",
]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: operand dtypes {a.dtype} and {b.dtype} differ")


def _check_4d(op: str, name: str, t: Tensor):
    if t.ndim != 4:
        raise ShapeError(f"{op}: {name} must be 4-d (N,C,H,W), got shape {t.shape}")


# ---------------------------------------------------------------------------
# pointwise


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        out = Tensor(a.data + a.data.dtype.type(b))
        return record(out, (a,), lambda g: (g,))
    b = _as_tensor(b)
    _check_same_shape("add", a, b)
    out = Tensor(a.data + b.data)
    return record(out, (a, b), lambda g: (g, g))


def mul(a: Tensor, b) -> Tensor:
    """Hadamard product, or scaling by a Python scalar."""
    if isinstance(b, (int, float)):
        s = a.data.dtype.type(b)
        out = Tensor(a.data * s)
        return record(out, (a,), lambda g: (g * s,))
    b = _as_tensor(b)
    _check_same_shape("mul", a, b)
    out = Tensor(a.data * b.data)
    return record(out, (a, b), lambda g: (g * b.data, g * a.data))


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    mask = x.data > 0  # subgradient 0 at 0
    return record(out, (x,), lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # Stable two-branch form; never exponentiates a large positive value.
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    out = Tensor(y)
    return record(out, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)
    return record(out, (x,), lambda g: (g * (1.0 - y * y),))


def affine_blend(z: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """z*a + (1-z)*b, the gated convex blend of two tensors.

    Computed literally so that z == 1 returns `a` exactly and z == 0
    returns `b` exactly.
    """
    _check_same_shape("affine_blend", z, a)
    _check_same_shape("affine_blend", z, b)
    zd = z.data
    out = Tensor(zd * a.data + (1.0 - zd) * b.data)

    def backward_fn(g):
        return (g * (a.data - b.data), g * zd, g * (1.0 - zd))

    return record(out, (z, a, b), backward_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_4d("concat_channels", "a", a)
    _check_4d("concat_channels", "b", b)
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(
            "concat_channels: non-channel dims differ, "
            f"(N,H,W)=({na},{ha},{wa}) vs ({nb},{hb},{wb})"
        )
    if a.dtype != b.dtype:
        raise ShapeError(f"concat_channels: dtypes {a.dtype} and {b.dtype} differ")
    out = Tensor(np.concatenate([a.data, b.data], axis=1))

    def backward_fn(g):
        return (g[:, :ca], g[:, ca:])

    return record(out, (a, b), backward_fn)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _check_4d("slice_channels", "input", x)
    c = x.shape[1]
    if not (0 <= start < stop <= c):
        raise ShapeError(
            f"slice_channels: range [{start},{stop}) invalid for {c} channels"
        )
    out = Tensor(np.ascontiguousarray(x.data[:, start:stop]))

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return record(out, (x,), backward_fn)


def reduce_sum(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())

    def backward_fn(g):
        return (np.full_like(x.data, g.reshape(())),)

    return record(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# convolutions


def _window_view(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int):
    """(N,C,kh,kw,oh,ow) sliding-window view over a padded NCHW array."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )


def _pad_hw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(
    x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0
) -> Tensor:
    """Cross-correlation of an NCHW batch with an (Cout,Cin,kh,kw) kernel."""
    _check_4d("conv2d", "input", x)
    _check_4d("conv2d", "kernel", kernel)
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(
            f"conv2d: input has {cin} channels but kernel expects {kcin} "
            f"(input {x.shape}, kernel {kernel.shape})"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: bad stride/padding ({stride}, {padding})")
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise ShapeError(
            f"conv2d: spatial dims ({h},{w}) with padding {padding}, kernel "
            f"{kh}x{kw}, stride {stride} leave a non-integral output size"
        )
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: empty output ({oh},{ow}) for input ({h},{w})")

    xp = _pad_hw(x.data, padding)
    windows = _window_view(xp, kh, kw, stride, oh, ow)
    out = np.tensordot(kernel.data, windows, axes=([1, 2, 3], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    out += bias.data.reshape(1, cout, 1, 1)

    def backward_fn(g):
        gb = g.sum(axis=(0, 2, 3))
        win = _window_view(xp, kh, kw, stride, oh, ow)
        gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 4, 5]))
        # input grad = correlation of the stride-dilated output grad with the
        # channel-transposed, spatially flipped kernel
        if stride > 1:
            gd = np.zeros(
                (n, cout, (oh - 1) * stride + 1, (ow - 1) * stride + 1), dtype=g.dtype
            )
            gd[:, :, ::stride, ::stride] = g
        else:
            gd = g
        pb = kh - 1 - padding
        if pb < 0:
            gd = gd[:, :, -pb:pb, -pb:pb]
            pb = 0
        gdp = _pad_hw(gd, pb)
        wv = _window_view(gdp, kh, kw, 1, h, w)
        kflip = kernel.data[:, :, ::-1, ::-1]
        gx = np.tensordot(wv, kflip, axes=([1, 2, 3], [0, 2, 3]))
        return (np.ascontiguousarray(gx.transpose(0, 3, 1, 2)), gk, gb)

    return record(Tensor(out), (x, kernel, bias), backward_fn)


def conv_transpose2d(
    x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0
) -> Tensor:
    """Adjoint of conv2d; kernel layout is (Cin, Cout, kh, kw).

    Output spatial size is (H-1)*stride - 2*padding + kh.
    """
    _check_4d("conv_transpose2d", "input", x)
    _check_4d("conv_transpose2d", "kernel", kernel)
    n, cin, h, w = x.shape
    kcin, cout, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(
            f"conv_transpose2d: input has {cin} channels but kernel expects "
            f"{kcin} (input {x.shape}, kernel {kernel.shape})"
        )
    if bias.shape != (cout,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1 or padding < 0:
        raise ShapeError(
            f"conv_transpose2d: bad stride/padding ({stride}, {padding})"
        )
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (w - 1) * stride - 2 * padding + kw
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv_transpose2d: empty output ({oh},{ow}) for input ({h},{w})"
        )

    fh = (h - 1) * stride + kh  # full extent before padding crop
    fw = (w - 1) * stride + kw

    def _scatter(src: np.ndarray) -> np.ndarray:
        # src: (N, H, W, Cout, kh, kw) contributions, summed into the full canvas
        full = np.zeros((n, fh, fw, cout), dtype=src.dtype)
        for i in range(kh):
            for j in range(kw):
                full[:, i : i + stride * h : stride, j : j + stride * w : stride]\
                    += src[:, :, :, :, i, j]
        return full

    xt = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    prod = np.tensordot(xt, kernel.data, axes=([3], [0]))  # (N,H,W,Cout,kh,kw)
    full = _scatter(prod)
    out = full[:, padding : padding + oh, padding : padding + ow, :]
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    out += bias.data.reshape(1, cout, 1, 1)

    def backward_fn(g):
        gb = g.sum(axis=(0, 2, 3))
        gfull = np.zeros((n, cout, fh, fw), dtype=g.dtype)
        gfull[:, :, padding : padding + oh, padding : padding + ow] = g
        win = _window_view(gfull, kh, kw, stride, h, w)  # (N,Cout,kh,kw,H,W)
        gx = np.tensordot(win, kernel.data, axes=([1, 2, 3], [1, 2, 3]))
        gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
        gk = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 4, 5]))
        return (gx, gk, gb)

    return record(Tensor(out), (x, kernel, bias), backward_fn)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route gradient to the first
    (row-major) maximum of each window."""
    _check_4d("maxpool2d", "input", x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d: spatial dims ({h},{w}) must be even")
    oh, ow = h // 2, w // 2
    win = np.ascontiguousarray(
        x.data.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(n, c, oh, ow, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gw = np.zeros((n, c, oh, ow, 4), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = (
            gw.reshape(n, c, oh, ow, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return (np.ascontiguousarray(gx),)

    return record(Tensor(out), (x,), backward_fn)


def group_norm(
    x: Tensor, groups: int, scale: Tensor, shift: Tensor, eps: float = 1e-5
) -> Tensor:
    """Per-sample, per-group normalization followed by a channel affine."""
    _check_4d("group_norm", "input", x)
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ShapeError(
            f"group_norm: {c} channels not divisible into {groups} groups"
        )
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(
            f"group_norm: scale/shift shapes {scale.shape}/{shift.shape} != ({c},)"
        )
    if eps <= 0:
        raise ShapeError(f"group_norm: eps must be positive, got {eps}")

    xg = x.data.reshape(n, groups, -1)
    mean = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat_g = (xg - mean) * inv
    xhat = xhat_g.reshape(n, c, h, w)
    out = xhat * scale.data.reshape(1, c, 1, 1) + shift.data.reshape(1, c, 1, 1)

    def backward_fn(g):
        gshift = g.sum(axis=(0, 2, 3))
        gscale = (g * xhat).sum(axis=(0, 2, 3))
        gx_hat = (g * scale.data.reshape(1, c, 1, 1)).reshape(n, groups, -1)
        mean_g = gx_hat.mean(axis=-1, keepdims=True)
        mean_gx = (gx_hat * xhat_g).mean(axis=-1, keepdims=True)
        gx = inv * (gx_hat - mean_g - xhat_g * mean_gx)
        return (gx.reshape(n, c, h, w), gscale, gshift)

    return record(Tensor(out), (x, scale, shift), backward_fn)


def bce_with_logits(logits: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy on raw logits, in the stable softplus form."""
    _check_same_shape("bce_with_logits", logits, target)
    t = target.data
    if t.size and (t.min() < 0 or t.max() > 1):
        raise ShapeError(
            f"bce_with_logits: target values outside [0,1] "
            f"(min {t.min():.4g}, max {t.max():.4g})"
        )
    z = logits.data
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = Tensor(np.asarray(loss.mean(), dtype=z.dtype))
    inv_count = 1.0 / z.size

    def backward_fn(g):
        s = z.dtype.type(float(g.reshape(())) * inv_count)
        gz = (_sigmoid(z) - t) * s
        gt = (-z) * s if target.requires_grad else None
        return (gz, gt)

    return record(out, (logits, target), backward_fn)
