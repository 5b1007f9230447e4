"""Differentiable operators.

Every function takes and returns :class:`Tensor` objects.  Backward closures
return one gradient (or ``None``) per parent, in parent order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_result


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_result(a.data + b.data, (a, b), backward, "add")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting (e.g. a mask over channels)."""
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ValueError(f"mul: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "mul")


elementwise_mul = mul


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(
        np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "permute"
    )


def index(x: Tensor, idx) -> Tensor:
    src_shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        if _is_advanced(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)

    return make_result(x.data[idx], (x,), backward, "index")


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(x.data.sum(axis=axis)), (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis), 1.0 / float(n))


def concat(xs, axis: int = 1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise ValueError("concat of an empty list")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ValueError(f"concat: shape {t.shape} incompatible with {ref} on axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return out

    return make_result(np.concatenate([t.data for t in xs], axis=axis), xs, backward, "concat")


def concat_channels(xs) -> Tensor:
    """Stack feature maps along the channel axis; batch and spatial dims must agree."""
    return concat(xs, axis=1)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor, strict: bool = False) -> Tensor:
    """Logistic function.  ``strict`` keeps outputs inside the open interval (0, 1)
    even where the working precision would round them to 0 or 1."""
    z = x.data
    e = np.exp(-np.abs(z))
    y = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)
    if strict:
        fi = np.finfo(y.dtype)
        y = np.clip(y, fi.tiny, 1.0 - fi.epsneg).astype(y.dtype)
    return make_result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return ((g - (g * y).sum(axis=axis, keepdims=True)) * y,)

    return make_result(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return make_result(y, (x,), backward, "log_softmax")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

@dataclass
class ConvParams:
    """Weights and geometry of one (transposed) convolution.

    ``weight`` is laid out ``(out_channels, in_channels, kh, kw)`` for both
    ordinary and transposed convolution.
    """

    weight: Tensor
    bias: Tensor | None = None
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    dilation: tuple = (1, 1)

    def __post_init__(self):
        self.stride = _pair(self.stride)
        self.padding = _pair(self.padding)
        self.dilation = _pair(self.dilation)
        if self.weight.ndim != 4:
            raise ValueError(f"conv weight must be 4-D, got {self.weight.shape}")
        if min(self.stride) < 1 or min(self.dilation) < 1:
            raise ValueError("stride and dilation must be >= 1")
        if min(self.padding) < 0:
            raise ValueError("padding must be >= 0")
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            raise ValueError(f"bias shape {self.bias.shape} != ({self.out_channels},)")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> tuple:
        return self.weight.shape[2], self.weight.shape[3]


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int = 1) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"conv2d expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    if c != p.in_channels:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {p.in_channels}")
    (kh, kw), (sh, sw), (ph, pw), (dh, dw) = p.kernel, p.stride, p.padding, p.dilation
    ho = conv_output_size(h, kh, sh, ph, dh)
    wo = conv_output_size(w, kw, sw, pw, dw)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: non-positive output size {ho}x{wo} for input {h}x{w}")
    oc = p.out_channels
    wmat = p.weight.data.reshape(oc, -1)
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data

    def tap(arr, i, j):
        r0, c0 = i * dh, j * dw
        return arr[:, :, r0 : r0 + sh * (ho - 1) + 1 : sh, c0 : c0 + sw * (wo - 1) + 1 : sw]

    # columns laid out (N, C*kh*kw, Ho*Wo); one gemm per image keeps images independent
    # of batch composition (bit-identical results for identical images)
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = tap(xp, i, j)
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    out = np.matmul(wmat, cols)
    if p.bias is not None:
        out += p.bias.data[None, :, None]
    out = out.reshape(n, oc, ho, wo)

    parents = (x, p.weight) + ((p.bias,) if p.bias is not None else ())

    def backward(g):
        gmat = g.reshape(n, oc, ho * wo)
        gw = None
        if p.weight.requires_grad:
            gw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(p.weight.shape)
        gb = g.sum(axis=(0, 2, 3)) if p.bias is not None and p.bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, gmat).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    tap(gxp, i, j)[...] += dcols[:, :, i, j]
            gx = gxp[:, :, ph : ph + h, pw : pw + w]
        return (gx, gw) + ((gb,) if p.bias is not None else ())

    return make_result(out, parents, backward, "conv2d")


def _crop_or_pad_offsets(raw: int, target: int):
    """Center alignment of a raw length onto a target length.

    Returns (src_start, dst_start, length) of the overlapping window.
    """
    if raw >= target:
        return (raw - target) // 2, 0, target
    return 0, (target - raw) // 2, raw


def conv_transpose2d(x: Tensor, p: ConvParams, target_hw=None) -> Tensor:
    """Transposed convolution, then center crop / zero pad to ``target_hw``.

    The raw output is ``(H - 1) * stride - 2 * padding + kernel`` per axis.
    """
    if x.ndim != 4:
        raise ValueError(f"conv_transpose2d expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    if c != p.in_channels:
        raise ValueError(f"conv_transpose2d: input has {c} channels, weight expects {p.in_channels}")
    (kh, kw), (sh, sw), (ph, pw) = p.kernel, p.stride, p.padding
    if kh < 1 or kw < 1:
        raise ValueError("conv_transpose2d: degenerate kernel")
    if p.dilation != (1, 1):
        raise ValueError("conv_transpose2d: dilation is not supported")
    rh = (h - 1) * sh - 2 * ph + kh
    rw = (w - 1) * sw - 2 * pw + kw
    if rh <= 0 or rw <= 0:
        raise ValueError(f"conv_transpose2d: non-positive raw output {rh}x{rw}")
    th, tw = (rh, rw) if target_hw is None else _pair(target_hw)
    if th < h or tw < w:
        raise ValueError(f"conv_transpose2d: target {th}x{tw} smaller than input {h}x{w}")
    oc = p.out_channels
    # (C, O*kh*kw) so that x-pixel rows scatter into every kernel tap
    wmat = p.weight.data.transpose(1, 0, 2, 3).reshape(c, oc * kh * kw)
    xmat = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    taps = (xmat @ wmat).reshape(n, h, w, oc, kh, kw)

    full_h, full_w = (h - 1) * sh + kh, (w - 1) * sw + kw
    full = np.zeros((n, oc, full_h, full_w), dtype=taps.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i : i + sh * (h - 1) + 1 : sh, j : j + sw * (w - 1) + 1 : sw] += (
                taps[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    raw = full[:, :, ph : ph + rh, pw : pw + rw]
    sy, dy, ly = _crop_or_pad_offsets(rh, th)
    sx, dx, lx = _crop_or_pad_offsets(rw, tw)
    out = np.zeros((n, oc, th, tw), dtype=taps.dtype)
    out[:, :, dy : dy + ly, dx : dx + lx] = raw[:, :, sy : sy + ly, sx : sx + lx]
    if p.bias is not None:  # bias belongs to the raw output; padding stays zero
        out[:, :, dy : dy + ly, dx : dx + lx] += p.bias.data[None, :, None, None]

    parents = (x, p.weight) + ((p.bias,) if p.bias is not None else ())

    def backward(g):
        gfull = np.zeros((n, oc, full_h, full_w), dtype=g.dtype)
        gfull[:, :, ph + sy : ph + sy + ly, pw + sx : pw + sx + lx] = g[:, :, dy : dy + ly, dx : dx + lx]
        gtaps = np.empty((n, h, w, oc, kh, kw), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gtaps[:, :, :, :, i, j] = gfull[
                    :, :, i : i + sh * (h - 1) + 1 : sh, j : j + sw * (w - 1) + 1 : sw
                ].transpose(0, 2, 3, 1)
        gtaps = gtaps.reshape(n * h * w, oc * kh * kw)
        gx = (gtaps @ wmat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = None
        if p.weight.requires_grad:
            gw = (xmat.T @ gtaps).reshape(c, oc, kh, kw).transpose(1, 0, 2, 3)
        gb = None
        if p.bias is not None and p.bias.requires_grad:
            gb = g[:, :, dy : dy + ly, dx : dx + lx].sum(axis=(0, 2, 3))
        return (gx, gw) + ((gb,) if p.bias is not None else ())

    return make_result(out, parents, backward, "conv_transpose2d")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the running moments are updated in place (unbiased
    variance, exponential average with ``momentum``).
    """
    c = x.shape[1]
    if gamma.shape != (c,) or running_mean.shape != (c,):
        raise ValueError(f"batch_norm: {c} input channels, state has {gamma.shape[0]}")
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.data.size // c
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if training:
                gx = (
                    gxhat
                    - gxhat.mean(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
                ) * inv_std[None, :, None, None]
            else:
                gx = gxhat * inv_std[None, :, None, None]
        return gx, ggamma, gbeta

    return make_result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batch_norm")


def l2_normalize_channels(x: Tensor, scale: Tensor, eps: float = 1e-10) -> Tensor:
    """Divide every spatial position's channel vector by its L2 norm, then scale per channel."""
    if scale.shape != (x.shape[1],):
        raise ValueError(f"l2_normalize_channels: scale shape {scale.shape} for {x.shape[1]} channels")
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    denom = norm + eps
    unit = x.data / denom
    s = scale.data[None, :, None, None]
    out = unit * s

    def backward(g):
        gscale = (g * unit).sum(axis=(0, 2, 3)) if scale.requires_grad else None
        gx = None
        if x.requires_grad:
            gs = g * s
            dot = (gs * x.data).sum(axis=1, keepdims=True)
            safe = np.where(norm > 0, norm, 1.0)
            gx = gs / denom - x.data * dot / (denom * denom * safe)
        return gx, gscale

    return make_result(out, (x, scale), backward, "l2_normalize_channels")


# ---------------------------------------------------------------------------
# pooling / resampling
# ---------------------------------------------------------------------------

def _pool_out(size, k, s, p, ceil_mode):
    span = size + 2 * p - k
    out = (-(-span // s) if ceil_mode else span // s) + 1
    # last window must start inside the input or left padding
    if ceil_mode and (out - 1) * s >= size + p:
        out -= 1
    return out


def max_pool2d(x: Tensor, kernel, stride=None, padding=0, ceil_mode: bool = False) -> Tensor:
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    ph, pw = _pair(padding)
    n, c, h, w = x.shape
    ho = _pool_out(h, kh, sh, ph, ceil_mode)
    wo = _pool_out(w, kw, sw, pw, ceil_mode)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"max_pool2d: non-positive output size for input {h}x{w}")
    need_h = (ho - 1) * sh + kh
    need_w = (wo - 1) * sw + kw
    xp = np.full((n, c, need_h, need_w), -np.inf, dtype=x.dtype)
    hh, ww = min(h, need_h - ph), min(w, need_w - pw)
    xp[:, :, ph : ph + hh, pw : pw + ww] = x.data[:, :, :hh, :ww]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    flat = win.reshape(n, c, ho, wo, kh * kw)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros((n, c, need_h, need_w), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                hit = arg == i * kw + j
                gxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += g * hit
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        gx[:, :, :hh, :ww] = gxp[:, :, ph : ph + hh, pw : pw + ww]
        return (gx,)

    return make_result(np.ascontiguousarray(out), (x,), backward, "max_pool2d")


def _nearest_index(src: int, dst: int) -> np.ndarray:
    return (np.arange(dst) * src) // dst


def upsample_nearest(x: Tensor, size) -> Tensor:
    """Nearest-neighbour resize to an output size at least as large as the input."""
    th, tw = _pair(size)
    n, c, h, w = x.shape
    if th < h or tw < w:
        raise ValueError(f"upsample_nearest: target {th}x{tw} smaller than input {h}x{w}")
    ri, ci = _nearest_index(h, th), _nearest_index(w, tw)
    out = x.data[:, :, ri][:, :, :, ci]
    # index maps are non-decreasing and cover every source row/col
    rstart = np.searchsorted(ri, np.arange(h))
    cstart = np.searchsorted(ci, np.arange(w))

    def backward(g):
        gr = np.add.reduceat(g, rstart, axis=2)
        return (np.add.reduceat(gr, cstart, axis=3),)

    return make_result(out, (x,), backward, "upsample_nearest")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def smooth_l1(x: Tensor, target: np.ndarray) -> Tensor:
    """Sum of Huber(beta=1) penalties between ``x`` and a constant target."""
    d = x.data - target
    ad = np.abs(d)
    val = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5).sum()

    def backward(g):
        return (g * np.clip(d, -1.0, 1.0),)

    return make_result(np.asarray(val, dtype=x.dtype), (x,), backward, "smooth_l1")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Summed softmax cross-entropy of rows of a 2-D logit matrix."""
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    rows = np.arange(len(labels))
    val = (np.log(s[:, 0]) - z[rows, labels]).sum()

    def backward(g):
        p = e / s
        p[rows, labels] -= 1.0
        return (g * p,)

    return make_result(np.asarray(val, dtype=logits.dtype), (logits,), backward, "cross_entropy")
