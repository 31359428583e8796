"""Finite-difference checks of every differentiable op and of both composed models."""

import numpy as np

from seaseg import autodiff as ad
from seaseg.autodiff import BatchNormState, GradCheckReport, Tensor, check_tensors, grad_check
from seaseg.model import ModelConfig, build_model

OP_TOL = 1e-4
BN_TRAIN_TOL = 1e-3
SMOOTH_H = 1e-3
# ReLU and max-pool are piecewise linear; a coarse step straddles kinks
KINK_H = 1e-6


def _bn(mode, channels=3, seed=0):
    def build(x, g, b):
        rng = np.random.default_rng(seed)
        s = BatchNormState(g, b, rng.normal(0, 0.3, channels), rng.uniform(0.5, 2.0, channels), mode=mode)
        return ad.batch_norm2d(x, s)
    return build


def op_report(seed: int, n_coords: int = 20) -> GradCheckReport:
    rep = GradCheckReport()
    add = rep.add
    add(grad_check(lambda x, w, b: ad.conv2d(x, w, b, 1, 2, 2), [(2, 3, 8, 8), (4, 3, 3, 3), (4,)], OP_TOL,
                   "conv2d dilation 2", n_coords, SMOOTH_H, seed))
    add(grad_check(lambda x, w: ad.conv2d(x, w, None, 2, 3), [(1, 3, 13, 13), (5, 3, 7, 7)], OP_TOL,
                   "conv2d 7x7 stride 2", n_coords, SMOOTH_H, seed))
    add(grad_check(lambda x, w: ad.conv2d(x, w, None, 2, 1), [(2, 9, 9, 10), (6, 9, 3, 3)], OP_TOL,
                   "conv2d 3x3 stride 2", n_coords, SMOOTH_H, seed))
    add(grad_check(lambda x, w, b: ad.conv2d(x, w, b, 2), [(2, 8, 7, 7), (4, 8, 1, 1), (4,)], OP_TOL,
                   "conv2d 1x1 stride 2", n_coords, SMOOTH_H, seed))
    add(grad_check(lambda x, w: ad.conv2d(x, w, None, 1, 6, 6), [(1, 10, 9, 9), (3, 10, 3, 3)], OP_TOL,
                   "conv2d dilation 6", n_coords, SMOOTH_H, seed))
    g = lambda r, shape: r.uniform(0.5, 1.5, shape) if len(shape) == 1 else r.standard_normal(shape)
    add(grad_check(_bn("train", seed=seed), [(3, 3, 5, 5), (3,), (3,)], BN_TRAIN_TOL,
                   "batch_norm2d train", n_coords, SMOOTH_H, seed, init=g))
    add(grad_check(_bn("eval", seed=seed), [(2, 3, 5, 5), (3,), (3,)], OP_TOL,
                   "batch_norm2d eval", n_coords, SMOOTH_H, seed, init=g))
    add(grad_check(lambda x: ad.max_pool2d(x, 3, 2, 1), [(2, 3, 9, 9)], OP_TOL,
                   "max_pool2d 3x3/2", n_coords, KINK_H, seed))
    add(grad_check(lambda x: ad.max_pool2d(x, 2, 2), [(2, 3, 8, 8)], OP_TOL,
                   "max_pool2d 2x2/2", n_coords, KINK_H, seed))
    add(grad_check(lambda x: ad.avg_pool2d(x, 2, 2), [(2, 3, 8, 8)], OP_TOL,
                   "avg_pool2d 2x2/2", n_coords, SMOOTH_H, seed))
    add(grad_check(lambda x: ad.avg_pool2d(x, 3, 2, 1), [(1, 2, 7, 7)], OP_TOL,
                   "avg_pool2d padded", n_coords, SMOOTH_H, seed))
    add(grad_check(lambda x: ad.bilinear_resize(x, 11, 6), [(2, 3, 4, 5)], OP_TOL,
                   "bilinear_resize up", n_coords, SMOOTH_H, seed))
    add(grad_check(lambda x: ad.bilinear_resize(x, 3, 4), [(1, 2, 7, 9)], OP_TOL,
                   "bilinear_resize down", n_coords, SMOOTH_H, seed))
    add(grad_check(lambda x: ad.relu(x), [(2, 3, 4, 4)], OP_TOL, "relu", n_coords, KINK_H, seed))
    add(grad_check(lambda a, b: ad.concat([a, b], 1), [(2, 3, 4, 4), (2, 2, 4, 4)], OP_TOL,
                   "concat", n_coords, SMOOTH_H, seed))
    add(grad_check(lambda a, b: ad.add(ad.mul(a, b), a), [(2, 3, 4, 4), (2, 3, 4, 4)], OP_TOL,
                   "add/mul", n_coords, SMOOTH_H, seed))
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 4, (2, 5, 5))
    y[0, :2] = 255
    add(grad_check(lambda z: ad.softmax_cross_entropy(z, y), [(2, 4, 5, 5)], OP_TOL,
                   "softmax_cross_entropy", n_coords, SMOOTH_H, seed))
    return rep


def model_check(seed: int, architecture: str, mode: str, n_coords: int = 1):
    """Every parameter tensor (``n_coords`` coordinates each) and the input of a small float64 model."""
    cfg = ModelConfig(width=0.125, seed=seed, architecture=architecture, atrous_rates=(2, 4, 6),
                      unet_filters=(4, 8, 8, 8))
    model = build_model(cfg).astype(np.float64)
    rng = np.random.default_rng(seed)
    for name, buf in model.named_buffers():
        buf[...] = rng.normal(0, 0.1, buf.shape) if name.endswith("running_mean") else rng.uniform(0.5, 1.5, buf.shape)
    x = Tensor(rng.standard_normal((1, 3, 64, 64)), requires_grad=True)
    y = rng.integers(0, 2, (1, 64, 64))
    y[0, :5] = 255
    params = model.parameters()
    tol = BN_TRAIN_TOL if mode == "train" else OP_TOL

    def fn(xt, *_):
        return ad.softmax_cross_entropy(model(xt, mode=mode), y)

    return check_tensors(fn, [x] + params, tol, f"{architecture} model {mode}", n_coords=n_coords,
                         h=KINK_H, seed=seed)
