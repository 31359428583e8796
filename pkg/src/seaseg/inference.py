"""Full-scene prediction: fill, normalize, pad to the model block, one forward pass."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import SegError, ShapeError
from .model import ASPP_BLOCK, SegModel
from .raster import CHANNELS, IGNORE, NormStats, RasterScene, valid_channel_means
from .sampler import normalize_array

TILE_PX = 1024
TILE_OVERLAP = 256


class InferenceMemoryError(SegError, MemoryError):
    """The single-pass forward did not fit in memory."""


@dataclass
class PredictionProduct:
    classes: np.ndarray                       # (H, W) uint8, IGNORE outside the valid mask
    probabilities: Optional[np.ndarray]       # (K, H, W) float32 or None
    timing: Dict[str, float]
    provenance: Dict[str, object] = field(default_factory=dict)


def prepare_input(scene: RasterScene, stats: NormStats, extra_pad_blocks: int = 0,
                  block: int = ASPP_BLOCK) -> Tuple[np.ndarray, Tuple[int, int]]:
    """(1, C, Hp, Wp) normalized input padded right/bottom with the normalized scene mean."""
    x = scene.stack(stats.channels)
    means = valid_channel_means(scene, stats.channels)
    if not scene.valid_mask.all():
        x[:, ~scene.valid_mask] = means.astype(np.float32)[:, None]
    h, w = scene.shape
    hp = -(-h // block) * block + extra_pad_blocks * block
    wp = -(-w // block) * block + extra_pad_blocks * block
    fill = normalize_array(means.astype(np.float32).reshape(-1, 1, 1), stats).reshape(-1)
    out = np.empty((1, x.shape[0], hp, wp), dtype=np.float32)
    out[0, :, :h, :w] = normalize_array(x, stats)
    out[0, :, h:, :] = fill[:, None, None]
    out[0, :, :h, w:] = fill[:, None, None]
    return out, (h, w)


def forward_logits(model: SegModel, x: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return model(Tensor(x), mode="eval").data


def _tile_starts(n: int, tile: int, step: int) -> List[int]:
    if n <= tile:
        return [0]
    starts = list(range(0, n - tile, step))
    starts.append(n - tile)
    return starts


def _keep_ranges(starts: List[int], tile: int, n: int) -> List[Tuple[int, int]]:
    # split each overlap at its midpoint so every pixel comes from exactly one tile centre
    bounds = [0]
    for a, b in zip(starts, starts[1:]):
        bounds.append((b + a + tile) // 2)
    bounds.append(n)
    return list(zip(bounds[:-1], bounds[1:]))


def tiled_logits(model: SegModel, x: np.ndarray, tile: int = TILE_PX, overlap: int = TILE_OVERLAP) -> np.ndarray:
    """Overlapping tiles with centre-crop stitching (not a single pass)."""
    _, _, hp, wp = x.shape
    th, tw = min(tile, hp), min(tile, wp)
    rows = _tile_starts(hp, th, th - overlap)
    cols = _tile_starts(wp, tw, tw - overlap)
    out = None
    for r0, (ra, rb) in zip(rows, _keep_ranges(rows, th, hp)):
        for c0, (ca, cb) in zip(cols, _keep_ranges(cols, tw, wp)):
            logits = forward_logits(model, np.ascontiguousarray(x[:, :, r0:r0 + th, c0:c0 + tw]))
            if out is None:
                out = np.empty((1, logits.shape[1], hp, wp), dtype=logits.dtype)
            out[:, :, ra:rb, ca:cb] = logits[:, :, ra - r0:rb - r0, ca - c0:cb - c0]
    return out


def softmax_planes(logits: np.ndarray) -> np.ndarray:
    """Softmax over the class axis of (K, H, W), computed in float64 and stored as float32."""
    k, h, w = logits.shape
    out = np.empty((k, h, w), dtype=np.float32)
    step = max(1, (16 << 20) // max(1, k * w * 8))
    for r0 in range(0, h, step):
        z = logits[:, r0:r0 + step].astype(np.float64)
        z -= z.max(axis=0, keepdims=True)
        np.exp(z, out=z)
        z /= z.sum(axis=0, keepdims=True)
        out[:, r0:r0 + step] = z
    return out


def predict_scene(model: SegModel, scene: RasterScene, stats: NormStats, probs: bool = False,
                  tile: bool = False, extra_pad_blocks: int = 0) -> PredictionProduct:
    if model.config.in_channels != len(stats.channels):
        raise ShapeError(f"model expects {model.config.in_channels} channels, stats describe {len(stats.channels)}")
    t0 = time.perf_counter()
    x, (h, w) = prepare_input(scene, stats, extra_pad_blocks)
    t1 = time.perf_counter()
    try:
        logits = tiled_logits(model, x) if tile else forward_logits(model, x)
    except MemoryError as exc:
        raise InferenceMemoryError(
            f"single-pass forward of a {x.shape[2]}x{x.shape[3]} input ran out of memory; "
            "rerun with --tile for overlapping-tile inference") from exc
    del x
    t2 = time.perf_counter()
    logits = logits[0, :, :h, :w]
    classes = np.argmax(logits, axis=0).astype(np.uint8)   # first maximum: ties go to the lower index
    classes[~scene.valid_mask] = IGNORE
    planes = softmax_planes(logits) if probs else None
    t3 = time.perf_counter()
    timing = {"prepare_s": t1 - t0, "forward_s": t2 - t1, "post_s": t3 - t2, "total_s": t3 - t0}
    prov = {
        "architecture": model.architecture,
        "num_classes": model.config.num_classes,
        "single_pass": not tile,
        "padded_hw": [int(-(-h // ASPP_BLOCK) * ASPP_BLOCK + extra_pad_blocks * ASPP_BLOCK),
                      int(-(-w // ASPP_BLOCK) * ASPP_BLOCK + extra_pad_blocks * ASPP_BLOCK)],
        "norm_stats": stats.to_dict(),
    }
    if tile:
        prov["tiled"] = {"tile_px": TILE_PX, "overlap_px": TILE_OVERLAP,
                         "note": "overlapping-tile fallback; deviates from single-pass inference"}
    return PredictionProduct(classes, planes, timing, prov)
