"""Palette rendering to binary PPM (P6)."""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Dict, Mapping, Tuple

import numpy as np

from .raster import IGNORE

RGB = Tuple[int, int, int]

IGNORE_COLOR: RGB = (96, 96, 96)

PALETTES: Dict[str, Dict[int, RGB]] = {
    "ice_water": {0: (16, 52, 140), 1: (235, 238, 245), IGNORE: IGNORE_COLOR},
    "sod": {
        0: (16, 52, 140),      # water
        1: (240, 150, 220),    # new ice
        2: (170, 90, 200),     # nilas
        3: (250, 210, 60),     # young ice
        4: (70, 190, 90),      # first-year ice
        5: (200, 60, 40),      # old ice
        IGNORE: IGNORE_COLOR,
    },
    "error": {0: (255, 255, 255), 1: (220, 30, 30), IGNORE: IGNORE_COLOR},
}
PALETTES["oldest_type"] = PALETTES["sod"]
PALETTES["dominant_type"] = PALETTES["sod"]


def load_palette(path) -> Dict[int, RGB]:
    """JSON object mapping code (as string) to [r, g, b]."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return parse_palette(raw)


def parse_palette(raw: Mapping) -> Dict[int, RGB]:
    out: Dict[int, RGB] = {}
    for k, v in raw.items():
        rgb = tuple(int(c) for c in v)
        if len(rgb) != 3 or any(not 0 <= c <= 255 for c in rgb):
            raise ValueError(f"palette entry {k!r}: expected three values in [0, 255], got {v!r}")
        out[int(k)] = rgb
    return out


def colorize(raster: np.ndarray, palette: Mapping[int, RGB]) -> np.ndarray:
    raster = np.asarray(raster)
    codes = np.unique(raster)
    unmapped = [int(c) for c in codes if int(c) not in palette]
    if unmapped:
        raise ValueError(f"palette has no color for code(s) {unmapped}")
    lut = np.zeros((256, 3), dtype=np.uint8)
    for code, rgb in palette.items():
        if 0 <= code < 256:
            lut[code] = rgb
    return lut[raster.astype(np.uint8)]


def ppm_bytes(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def render_map(raster: np.ndarray, palette: Mapping[int, RGB], path=None) -> bytes:
    data = ppm_bytes(colorize(raster, palette))
    if path is not None:
        Path(path).write_bytes(data)
    return data


_PPM_HEADER = re.compile(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = _PPM_HEADER.match(data)
    if m is None:
        raise ValueError("not a binary PPM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError("only 8-bit PPM is supported")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=m.end())
    return pixels.reshape(h, w, 3)
