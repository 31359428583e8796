import numpy as np
import pytest

from seaseg.raster import IGNORE, RasterScene


def direct_conv2d(x, w, b=None, stride=(1, 1), pad=(0, 0), dil=(1, 1)):
    """Nested-loop cross-correlation in float64."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad[0], wd + 2 * pad[1]))
    xp[:, :, pad[0]:pad[0] + h, pad[1]:pad[1] + wd] = x
    ho = (h + 2 * pad[0] - dil[0] * (kh - 1) - 1) // stride[0] + 1
    wo = (wd + 2 * pad[1] - dil[1] * (kw - 1) - 1) // stride[1] + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            for u in range(kh):
                for v in range(kw):
                    patch = xp[:, :, i * stride[0] + u * dil[0], j * stride[1] + v * dil[1]]
                    out[:, :, i, j] += patch @ w[:, :, u, v].T.astype(np.float64)
    if b is not None:
        out += np.asarray(b, dtype=np.float64)[None, :, None, None]
    return out


def bilinear_oracle(img, out_h, out_w):
    """Scalar half-pixel-centre bilinear with edge clamping, one plane."""
    in_h, in_w = img.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        sy = min(max((i + 0.5) * in_h / out_h - 0.5, 0.0), in_h - 1)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, in_h - 1)
        fy = sy - y0
        for j in range(out_w):
            sx = min(max((j + 0.5) * in_w / out_w - 0.5, 0.0), in_w - 1)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, in_w - 1)
            fx = sx - x0
            top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
            bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


def make_scene(h=64, w=64, seed=0, invalid=None, labels=True, scene_id="t", k=2):
    rng = np.random.default_rng(seed)
    chans = {
        "hh_db": rng.normal(-18, 3, (h, w)).astype(np.float32),
        "hv_db": rng.normal(-26, 3, (h, w)).astype(np.float32),
        "incidence_deg": np.tile(np.linspace(19, 46, w, dtype=np.float32), (h, 1)),
    }
    mask = np.ones((h, w), bool) if invalid is None else ~invalid
    lab = rng.integers(0, k, (h, w)).astype(np.uint8) if labels else None
    if lab is not None:
        lab[~mask] = IGNORE
    return RasterScene(scene_id, chans, mask, lab, 80.0, {})


@pytest.fixture
def scene_factory():
    return make_scene
