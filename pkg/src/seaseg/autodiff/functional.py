"""Differentiable operations used by the segmentation models.

All ops take and return :class:`Tensor` objects, keep the dtype of their
input, and register a backward closure when any operand requires grad.
Convolution and pooling results depend only on the operands, never on the
chunking used internally, so outputs are reproducible bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.linalg import blas as _blas

from ..errors import EmptyLossError, ShapeError
from .tensor import Tensor, make_node

Pair = Union[int, Tuple[int, int]]

# Upper bound for one im2col buffer; larger convolutions are processed in row chunks.
COL_BUDGET_BYTES = 64 << 20


def _pair(v: Pair) -> Tuple[int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ValueError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def out_size(n: int, k: int, s: int, p: int, d: int) -> int:
    """Output length of a window op along one axis."""
    eff = d * (k - 1) + 1
    return (n + 2 * p - eff) // s + 1


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: Tuple[int, int] = (3, 3)
    stride: Tuple[int, int] = (1, 1)
    padding: Tuple[int, int] = (0, 0)
    dilation: Tuple[int, int] = (1, 1)
    bias: bool = False

    def __post_init__(self):
        for name in ("kernel", "stride", "padding", "dilation"):
            object.__setattr__(self, name, _pair(getattr(self, name)))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.dilation) < 1 or min(self.padding) < 0:
            raise ValueError(f"invalid ConvSpec geometry: {self}")

    @property
    def effective_kernel(self) -> Tuple[int, int]:
        return tuple(d * (k - 1) + 1 for k, d in zip(self.kernel, self.dilation))

    def output_hw(self, h: int, w: int) -> Tuple[int, int]:
        oh = out_size(h, self.kernel[0], self.stride[0], self.padding[0], self.dilation[0])
        ow = out_size(w, self.kernel[1], self.stride[1], self.padding[1], self.dilation[1])
        if oh < 1:
            raise ShapeError(f"conv2d: height axis too small ({h}) for effective kernel {self.effective_kernel[0]}")
        if ow < 1:
            raise ShapeError(f"conv2d: width axis too small ({w}) for effective kernel {self.effective_kernel[1]}")
        return oh, ow


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_node(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_node(ad * bd, (a, b), backward, "mul")


def sum(x) -> Tensor:  # noqa: A001 - mirrors the numpy name
    x = _t(x)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        return (np.broadcast_to(g, shape).astype(dtype),)

    return make_node(np.asarray(x.data.sum(), dtype=dtype), (x,), backward, "sum")


def relu(x: Tensor) -> Tensor:
    d = x.data
    out = np.maximum(d, 0)

    def backward(g):
        # subgradient at 0 is 0
        return (g * (d > 0),)

    return make_node(out, (x,), backward, "relu")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [_t(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    if axis == 1 and all(x.ndim == 4 for x in xs):
        # join channels-last so the result stays in the activation layout
        out = np.concatenate([nhwc(x.data) for x in xs], axis=3).transpose(0, 3, 1, 2)
    else:
        out = np.concatenate([x.data for x in xs], axis=axis)

    def backward(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return make_node(out, xs, backward, "concat")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def nhwc(a: np.ndarray) -> np.ndarray:
    """Channels-last view of a logical (N, C, H, W) array (no copy)."""
    return a.transpose(0, 2, 3, 1)


def empty4(n: int, c: int, h: int, w: int, dtype) -> np.ndarray:
    """Logical (N, C, H, W) array stored channels-last."""
    return np.empty((n, h, w, c), dtype=dtype).transpose(0, 3, 1, 2)


def zeros4(n: int, c: int, h: int, w: int, dtype) -> np.ndarray:
    return np.zeros((n, h, w, c), dtype=dtype).transpose(0, 3, 1, 2)


def _gemm_acc(c: np.ndarray, a: np.ndarray, b: np.ndarray) -> None:
    """In place ``c += a @ b`` for C-contiguous 2-D operands."""
    gemm = _blas.dgemm if c.dtype == np.float64 else _blas.sgemm
    # row-major c = a @ b  <=>  column-major c.T = b.T @ a.T
    gemm(1.0, b.T, a.T, beta=1.0, c=c.T, overwrite_c=1)


# Inputs with fewer channels than this use im2col; wider ones use the shift engine.
SHIFT_MIN_CHANNELS = 8


class _ShiftPlan:
    """Tap layout for the shift-and-accumulate convolution.

    The padded input is split into stride phases; every kernel tap becomes a
    contiguous row-block of one phase buffer, so each tap is a single GEMM of
    (rows * Wb, C) by (C, O) accumulated into a (rows * Wb, O) output block.
    Columns at or beyond the true output width are scratch and discarded.
    Taps that only ever read zero padding are dropped.
    """

    def __init__(self, h, w, kh, kw, sh, sw, ph, pw, dh, dw, ho, wo):
        self.h, self.w, self.sh, self.sw, self.ph, self.pw = h, w, sh, sw, ph, pw
        self.ho, self.wo = ho, wo

        def active(offset, stride, pad, size, n_out):
            first, last = offset, offset + stride * (n_out - 1)
            return last >= pad and first <= pad + size - 1

        taps = [(i, j) for i in range(kh) for j in range(kw)
                if active(i * dh, sh, ph, h, ho) and active(j * dw, sw, pw, w, wo)]
        self.r_lo = min(i * dh for i, _ in taps)
        self.c_lo = min(j * dw for _, j in taps)
        self.taps = []
        for i, j in taps:
            ri, cj = i * dh - self.r_lo, j * dw - self.c_lo
            self.taps.append((i, j, ri % sh, ri // sh, cj % sw, cj // sw))
        a_max = max(t[3] for t in self.taps)
        b_max = max(t[5] for t in self.taps)
        self.hb = ho + a_max + 1
        self.wb = wo + b_max
        self.phases = sorted({(t[2], t[4]) for t in self.taps})

    def _span(self, lo, phase, stride, pad, size, n_buf):
        # buffer index y maps to unpadded index lo + stride*y + phase - pad
        base = lo + phase - pad
        y0 = (-base + stride - 1) // stride if base < 0 else 0
        y1 = min(n_buf, (size - 1 - base) // stride + 1) if size - 1 - base >= 0 else 0
        return y0, y1, base + stride * y0

    def fill(self, x_hwc: np.ndarray, p: int, q: int) -> np.ndarray:
        c = x_hwc.shape[2]
        buf = np.zeros((self.hb, self.wb, c), dtype=x_hwc.dtype)
        y0, y1, rs = self._span(self.r_lo, p, self.sh, self.ph, self.h, self.hb)
        x0, x1, cs = self._span(self.c_lo, q, self.sw, self.pw, self.w, self.wb)
        if y1 > y0 and x1 > x0:
            buf[y0:y1, x0:x1] = x_hwc[rs:rs + self.sh * (y1 - y0 - 1) + 1:self.sh,
                                      cs:cs + self.sw * (x1 - x0 - 1) + 1:self.sw]
        return buf

    def scatter(self, gx_hwc: np.ndarray, gbuf: np.ndarray, p: int, q: int) -> None:
        y0, y1, rs = self._span(self.r_lo, p, self.sh, self.ph, self.h, self.hb)
        x0, x1, cs = self._span(self.c_lo, q, self.sw, self.pw, self.w, self.wb)
        if y1 > y0 and x1 > x0:
            gx_hwc[rs:rs + self.sh * (y1 - y0 - 1) + 1:self.sh,
                   cs:cs + self.sw * (x1 - x0 - 1) + 1:self.sw] += gbuf[y0:y1, x0:x1]

    def row_chunks(self, o: int, itemsize: int):
        step = max(1, COL_BUDGET_BYTES // max(1, self.wb * o * itemsize))
        for r0 in range(0, self.ho, step):
            yield r0, min(self.ho, r0 + step)


def _shift_forward(xd, wd, plan: _ShiftPlan, out_hwc):
    n = xd.shape[0]
    o = wd.shape[0]
    wb = plan.wb
    wt = {(i, j): np.ascontiguousarray(wd[:, :, i, j].T) for i, j, *_ in plan.taps}
    x_hwc = nhwc(xd)
    for s in range(n):
        bufs = {pq: plan.fill(x_hwc[s], *pq).reshape(-1, xd.shape[1]) for pq in plan.phases}
        for r0, r1 in plan.row_chunks(o, xd.itemsize):
            length = (r1 - r0) * wb
            acc = np.zeros((length, o), dtype=out_hwc.dtype)
            for i, j, p, a, q, b in plan.taps:
                start = (r0 + a) * wb + b
                _gemm_acc(acc, bufs[(p, q)][start:start + length], wt[(i, j)])
            out_hwc[s, r0:r1] = acc.reshape(r1 - r0, wb, o)[:, :plan.wo]


def _shift_backward(xd, wd, plan: _ShiftPlan, g_hwc, need_x: bool, need_w: bool):
    n, c = xd.shape[:2]
    o = wd.shape[0]
    wb = plan.wb
    x_hwc = nhwc(xd)
    gw = np.zeros_like(wd) if need_w else None
    gx = zeros4(*xd.shape, dtype=xd.dtype) if need_x else None
    wtap = {(i, j): np.ascontiguousarray(wd[:, :, i, j]) for i, j, *_ in plan.taps}
    for s in range(n):
        bufs = {pq: plan.fill(x_hwc[s], *pq).reshape(-1, c) for pq in plan.phases} if need_w else None
        gbufs = {pq: np.zeros((plan.hb * wb, c), dtype=xd.dtype) for pq in plan.phases} if need_x else None
        for r0, r1 in plan.row_chunks(o, xd.itemsize):
            rows = r1 - r0
            length = rows * wb
            gl = np.zeros((rows, wb, o), dtype=xd.dtype)
            gl[:, :plan.wo] = g_hwc[s, r0:r1]
            gl = gl.reshape(length, o)
            for i, j, p, a, q, b in plan.taps:
                start = (r0 + a) * wb + b
                if need_w:
                    gw[:, :, i, j] += (bufs[(p, q)][start:start + length].T @ gl).T
                if need_x:
                    _gemm_acc(gbufs[(p, q)][start:start + length], gl, wtap[(i, j)])
        if need_x:
            gxs = nhwc(gx)[s]
            for pq in plan.phases:
                plan.scatter(gxs, gbufs[pq].reshape(plan.hb, wb, c), *pq)
    return gx, gw


def _im2col(xp: np.ndarray, kh, kw, sh, sw, dh, dw, r0, r1, wo) -> np.ndarray:
    """(C*kh*kw, rows*wo) columns for output rows [r0, r1) of one padded sample (C, Hp, Wp)."""
    c = xp.shape[0]
    rows = r1 - r0
    cols = np.empty((c, kh, kw, rows, wo), dtype=xp.dtype)
    for i in range(kh):
        h0 = i * dh + r0 * sh
        hs = slice(h0, h0 + (rows - 1) * sh + 1, sh)
        for j in range(kw):
            w0 = j * dw
            cols[:, i, j] = xp[:, hs, w0:w0 + (wo - 1) * sw + 1:sw]
    return cols.reshape(c * kh * kw, rows * wo)


def _row_chunks(ho: int, wo: int, k: int, itemsize: int):
    step = max(1, COL_BUDGET_BYTES // max(1, k * wo * itemsize))
    for r0 in range(0, ho, step):
        yield r0, min(ho, r0 + step)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: Pair = 1,
           padding: Pair = 0, dilation: Pair = 1) -> Tensor:
    """2-D cross-correlation with zero padding and dilation (atrous) support.

    Output is stored channels-last. Three kernels are used: a pointwise
    matmul for 1x1 convolutions, im2col for narrow inputs, and the shift
    engine (:class:`_ShiftPlan`) for everything else.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D (N, C, H, W), got rank {x.ndim}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-D (out, in, kh, kw), got rank {weight.ndim}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: channel axis mismatch, input C={c} but weight expects {ci}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias axis 0 must have length {o}, got {bias.shape}")
    spec = ConvSpec(c, o, (kh, kw), stride, padding, dilation, bias is not None)
    ho, wo = spec.output_hw(h, w)
    (sh, sw), (ph, pw), (dh, dw) = spec.stride, spec.padding, spec.dilation

    dtype = np.result_type(x.dtype, weight.dtype)
    xd = x.data.astype(dtype, copy=False)
    wd = weight.data.astype(dtype, copy=False)

    if kh == 1 and kw == 1 and ph == 0 and pw == 0:
        mode = "pointwise"
        xs = np.ascontiguousarray(nhwc(xd)[:, ::sh, ::sw]).reshape(-1, c)
        wt = np.ascontiguousarray(wd.reshape(o, c).T)
        out = (xs @ wt).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    elif c >= SHIFT_MIN_CHANNELS:
        mode = "shift"
        plan = _ShiftPlan(h, w, kh, kw, sh, sw, ph, pw, dh, dw, ho, wo)
        out = empty4(n, o, ho, wo, dtype)
        _shift_forward(xd, wd, plan, nhwc(out))
    else:
        mode = "im2col"
        xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
        wm = wd.reshape(o, c * kh * kw)
        wmt = np.ascontiguousarray(wm.T)
        out = empty4(n, o, ho, wo, dtype)
        out_flat = nhwc(out).reshape(n, ho * wo, o)
        k = c * kh * kw
        for s in range(n):
            for r0, r1 in _row_chunks(ho, wo, k, xd.itemsize):
                cols = _im2col(xp[s], kh, kw, sh, sw, dh, dw, r0, r1, wo)
                out_flat[s, r0 * wo:r1 * wo] = cols.T @ wmt
    if bias is not None:
        out += bias.data.astype(dtype, copy=False).reshape(1, o, 1, 1)

    def backward(g):
        need_x, need_w = x.requires_grad, weight.requires_grad
        gx = gw = None
        g_hwc = nhwc(g)
        if mode == "pointwise":
            g2 = np.ascontiguousarray(g_hwc).reshape(-1, o)
            if need_w:
                gw = (xs.T @ g2).T.reshape(o, c, 1, 1)
            if need_x:
                gxs = (g2 @ wt.T).reshape(n, ho, wo, c)
                if (sh, sw) == (1, 1):
                    gx = gxs.transpose(0, 3, 1, 2)
                else:
                    gx = zeros4(n, c, h, w, dtype)
                    nhwc(gx)[:, ::sh, ::sw] = gxs
        elif mode == "shift":
            gx, gw = _shift_backward(xd, wd, plan, g_hwc, need_x, need_w)
        else:
            gwm = np.zeros((k, o), dtype=dtype) if need_w else None
            gxp = np.zeros(xp.shape, dtype=dtype) if need_x else None
            g_flat = g_hwc.reshape(n, ho * wo, o) if g_hwc.flags.c_contiguous else \
                np.ascontiguousarray(g_hwc).reshape(n, ho * wo, o)
            for s in range(n):
                for r0, r1 in _row_chunks(ho, wo, k, xd.itemsize):
                    gchunk = g_flat[s, r0 * wo:r1 * wo]
                    if need_w:
                        cols = _im2col(xp[s], kh, kw, sh, sw, dh, dw, r0, r1, wo)
                        gwm += cols @ gchunk
                    if need_x:
                        rows = r1 - r0
                        gc = (wm.T @ gchunk.T).reshape(c, kh, kw, rows, wo)
                        for i in range(kh):
                            h0 = i * dh + r0 * sh
                            hs = slice(h0, h0 + (rows - 1) * sh + 1, sh)
                            for j in range(kw):
                                w0 = j * dw
                                gxp[s, :, hs, w0:w0 + (wo - 1) * sw + 1:sw] += gc[:, i, j]
            if need_w:
                gw = gwm.T.reshape(o, c, kh, kw)
            if need_x:
                gx = np.ascontiguousarray(gxp[:, :, ph:ph + h, pw:pw + w]) if (ph or pw) else gxp
        if gw is not None:
            gw = np.ascontiguousarray(gw).astype(weight.dtype, copy=False)
        if gx is not None:
            gx = gx.astype(x.dtype, copy=False)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)).astype(bias.dtype, copy=False) if bias.requires_grad else None)
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward, "conv2d")


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    mode: str = "train"

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, epsilon: float = 1e-5, dtype=np.float32):
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            epsilon=epsilon,
        )

    def eval_affine(self) -> Tuple[np.ndarray, np.ndarray]:
        """(scale, shift) such that eval-mode output = scale * x + shift per channel."""
        dtype = self.gamma.dtype
        inv = (1.0 / np.sqrt(self.running_var.astype(dtype) + dtype.type(self.epsilon))).astype(dtype)
        scale = self.gamma.data * inv
        shift = self.beta.data - self.running_mean.astype(dtype) * scale
        return scale, shift


def batch_norm2d(x: Tensor, state: BatchNormState) -> Tensor:
    """Batch normalization over (N, H, W) per channel.

    Train mode normalizes with biased batch variance and folds the unbiased
    variance into the running estimate; eval mode is a fixed affine map.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d: input must be 4-D, got rank {x.ndim}")
    c = x.shape[1]
    if state.gamma.shape != (c,) or state.beta.shape != (c,):
        raise ShapeError(f"batch_norm2d: channel axis C={c} does not match state length {state.gamma.shape[0]}")
    if not state.epsilon > 0:
        raise ValueError(f"batch_norm2d: epsilon must be positive, got {state.epsilon}")
    if state.mode not in ("train", "eval"):
        raise ValueError(f"batch_norm2d: unknown mode {state.mode!r}")
    gamma, beta = state.gamma, state.beta
    xd = x.data
    dtype = xd.dtype
    bshape = (1, c, 1, 1)

    if state.mode == "eval":
        scale, shift = state.eval_affine()
        scale = scale.astype(dtype, copy=False)
        shift = shift.astype(dtype, copy=False)
        inv = (1.0 / np.sqrt(state.running_var.astype(dtype) + dtype.type(state.epsilon))).astype(dtype)
        out = xd * scale.reshape(bshape) + shift.reshape(bshape)

        def backward_eval(g):
            gx = g * scale.reshape(bshape) if x.requires_grad else None
            xhat = (xd - state.running_mean.astype(dtype).reshape(bshape)) * inv.reshape(bshape)
            gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
            return gx, gg, gbeta

        return make_node(out, (x, gamma, beta), backward_eval, "batch_norm2d")

    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    mean = xd.mean(axis=(0, 2, 3))
    centered = xd - mean.reshape(bshape)
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv = (1.0 / np.sqrt(var + dtype.type(state.epsilon))).astype(dtype)
    xhat = centered * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    mom = state.momentum
    unbiased = var * (m / max(m - 1, 1))
    state.running_mean[...] = (1 - mom) * state.running_mean + mom * mean
    state.running_var[...] = (1 - mom) * state.running_var + mom * unbiased

    def backward_train(g):
        gsum = g.sum(axis=(0, 2, 3))
        gxhat_sum = (g * xhat).sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            k = (gamma.data * inv / m).reshape(bshape)
            gx = k * (m * g - gsum.reshape(bshape) - xhat * gxhat_sum.reshape(bshape))
        return gx, (gxhat_sum if gamma.requires_grad else None), (gsum if beta.requires_grad else None)

    return make_node(out, (x, gamma, beta), backward_train, "batch_norm2d")


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def _pool_geometry(x: Tensor, kernel, stride, padding):
    (kh, kw), (sh, sw), (ph, pw) = _pair(kernel), _pair(stride), _pair(padding)
    if kh < 1 or kw < 1:
        raise ValueError(f"pool2d: degenerate kernel {(kh, kw)}")
    if sh < 1 or sw < 1:
        raise ValueError(f"pool2d: stride must be positive, got {(sh, sw)}")
    if ph < 0 or pw < 0 or ph >= kh or pw >= kw:
        raise ValueError(f"pool2d: padding {(ph, pw)} must be smaller than the kernel")
    if x.ndim != 4:
        raise ShapeError(f"pool2d: input must be 4-D, got rank {x.ndim}")
    _, _, h, w = x.shape
    ho, wo = out_size(h, kh, sh, ph, 1), out_size(w, kw, sw, pw, 1)
    if ho < 1:
        raise ShapeError(f"pool2d: height axis {h} smaller than kernel {kh}")
    if wo < 1:
        raise ShapeError(f"pool2d: width axis {w} smaller than kernel {kw}")
    return kh, kw, sh, sw, ph, pw, ho, wo


def _pad_hw(a: np.ndarray, ph: int, pw: int, value: float) -> np.ndarray:
    if not (ph or pw):
        return a
    padded = np.pad(nhwc(a), ((0, 0), (ph, ph), (pw, pw), (0, 0)), constant_values=value)
    return padded.transpose(0, 3, 1, 2)


def _tap(arr, i, j, sh, sw, ho, wo):
    return arr[:, :, i:i + (ho - 1) * sh + 1:sh, j:j + (wo - 1) * sw + 1:sw]


def max_pool2d(x: Tensor, kernel: Pair, stride: Pair, padding: Pair = 0) -> Tensor:
    kh, kw, sh, sw, ph, pw, ho, wo = _pool_geometry(x, kernel, stride, padding)
    xd = x.data
    xp = _pad_hw(xd, ph, pw, -np.inf)
    track = x.requires_grad
    best = _tap(xp, 0, 0, sh, sw, ho, wo).copy(order="K")
    idx = np.zeros_like(best, dtype=np.int16) if track else None
    for t in range(1, kh * kw):
        i, j = divmod(t, kw)
        v = _tap(xp, i, j, sh, sw, ho, wo)
        if track:
            # strict comparison keeps the first maximum in row-major window order
            better = v > best
            idx[better] = t
            np.copyto(best, v, where=better)
        else:
            np.maximum(best, v, out=best)

    def backward(g):
        gxp = zeros4(*xp.shape, dtype=xd.dtype)
        for t in range(kh * kw):
            i, j = divmod(t, kw)
            _tap(gxp, i, j, sh, sw, ho, wo)[...] += np.where(idx == t, g, 0)
        return (gxp[:, :, ph:ph + xd.shape[2], pw:pw + xd.shape[3]],)

    return make_node(best, (x,), backward, "max_pool2d")


def avg_pool2d(x: Tensor, kernel: Pair, stride: Pair, padding: Pair = 0) -> Tensor:
    """Average pooling; zero padding is excluded from the divisor."""
    kh, kw, sh, sw, ph, pw, ho, wo = _pool_geometry(x, kernel, stride, padding)
    xd = x.data
    h, w = xd.shape[2:]
    xp = _pad_hw(xd, ph, pw, 0)
    total = zeros4(xd.shape[0], xd.shape[1], ho, wo, dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            total += _tap(xp, i, j, sh, sw, ho, wo)
    if ph or pw:
        ones = np.pad(np.ones((1, 1, h, w), dtype=xd.dtype), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        count = np.zeros((1, 1, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                count += _tap(ones, i, j, sh, sw, ho, wo)
    else:
        count = np.full((1, 1, ho, wo), kh * kw, dtype=xd.dtype)
    out = total / count

    def backward(g):
        gq = g / count
        gxp = zeros4(*xp.shape, dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                _tap(gxp, i, j, sh, sw, ho, wo)[...] += gq
        return (gxp[:, :, ph:ph + h, pw:pw + w],)

    return make_node(out, (x,), backward, "avg_pool2d")


def pool2d(x: Tensor, kind: str, kernel: Pair, stride: Pair, padding: Pair = 0) -> Tensor:
    if kind == "max":
        return max_pool2d(x, kernel, stride, padding)
    if kind == "avg":
        return avg_pool2d(x, kernel, stride, padding)
    raise ValueError(f"pool2d: unknown kind {kind!r}")


# ---------------------------------------------------------------------------
# bilinear resize (half-pixel centres, edge clamping)
# ---------------------------------------------------------------------------

def interp_taps(n_in: int, n_out: int):
    """Source indices and weights along one axis: out = (1-f)*x[i0] + f*x[i1]."""
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def _interp_matrix(n_in: int, n_out: int) -> sparse.csr_matrix:
    i0, i1, f = interp_taps(n_in, n_out)
    rows = np.concatenate([np.arange(n_out), np.arange(n_out)])
    cols = np.concatenate([i0, i1])
    vals = np.concatenate([1.0 - f, f])
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n_out, n_in))


def _resize_axis(a: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = a.shape[axis]
    if n_in == n_out:
        return a
    i0, i1, f = interp_taps(n_in, n_out)
    shape = [1] * a.ndim
    shape[axis] = n_out
    f = f.astype(a.dtype).reshape(shape)
    lo = np.take(a, i0, axis=axis)
    hi = np.take(a, i1, axis=axis)
    # (1 - f) * lo + f * hi, arranged to avoid extra temporaries
    lo *= 1 - f
    hi *= f
    lo += hi
    return lo


def _resize_axis_grad(g: np.ndarray, axis: int, n_in: int) -> np.ndarray:
    n_out = g.shape[axis]
    if n_in == n_out:
        return g
    mt = _interp_matrix(n_in, n_out).T.tocsr()
    moved = np.moveaxis(g, axis, 0)
    rest = moved.shape[1:]
    res = mt @ moved.reshape(n_out, -1)
    return np.moveaxis(np.asarray(res, dtype=g.dtype).reshape((n_in,) + rest), 0, axis)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize: input must be 4-D, got rank {x.ndim}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: output size must be positive, got {(out_h, out_w)}")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        out = x.data.copy(order="K")
    else:
        # resize in the channels-last view: axis 1 is H, axis 2 is W
        out = _resize_axis(_resize_axis(nhwc(x.data), 2, out_w), 1, out_h).transpose(0, 3, 1, 2)

    def backward(g):
        gh = _resize_axis_grad(_resize_axis_grad(nhwc(g), 1, h), 2, w)
        return (gh.transpose(0, 3, 1, 2),)

    return make_node(out, (x,), backward, "bilinear_resize")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

class LossValue:
    """Scalar loss tensor plus the number of pixels that contributed to it."""

    __slots__ = ("tensor", "valid_pixel_count")

    def __init__(self, tensor: Tensor, valid_pixel_count: int):
        self.tensor = tensor
        self.valid_pixel_count = int(valid_pixel_count)

    @property
    def value(self) -> float:
        return float(self.tensor.data)

    def backward(self, retain_graph: bool = False) -> None:
        self.tensor.backward(retain_graph=retain_graph)

    def __repr__(self) -> str:
        return f"LossValue(value={self.value:.6g}, valid_pixel_count={self.valid_pixel_count})"


def log_softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    m = logits.max(axis=axis, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray, ignore_label: int = 255) -> LossValue:
    """Mean negative log-softmax over pixels whose target is not ``ignore_label``."""
    if logits.ndim != 4:
        raise ShapeError(f"softmax_cross_entropy: logits must be (N, K, H, W), got rank {logits.ndim}")
    n, k, h, w = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (n, h, w):
        raise ShapeError(f"softmax_cross_entropy: targets shape {targets.shape} != (N, H, W) = {(n, h, w)}")
    valid = targets != ignore_label
    count = int(valid.sum())
    if count == 0:
        raise EmptyLossError("softmax_cross_entropy: every pixel carries the ignore label")
    bad = valid & ((targets < 0) | (targets >= k))
    if bad.any():
        raise ValueError(f"softmax_cross_entropy: target values outside [0, {k}) on {int(bad.sum())} pixel(s)")
    ld = logits.data
    logp = log_softmax(ld, axis=1)
    safe = np.where(valid, targets, 0).astype(np.int64)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked[valid].sum(dtype=ld.dtype)) / ld.dtype.type(count)

    def backward(g):
        p = np.exp(logp)
        np.put_along_axis(p, safe[:, None], np.take_along_axis(p, safe[:, None], axis=1) - 1, axis=1)
        p *= valid[:, None]
        p *= g / ld.dtype.type(count)
        return (p,)

    t = make_node(np.asarray(loss, dtype=ld.dtype), (logits,), backward, "softmax_cross_entropy")
    return LossValue(t, count)
