"""Scene container, on-disk format, dB conversion, 2x downsampling, label
derivation from ice-chart polygons, and normalization statistics.

On disk a scene is a directory::

    header          JSON: width, height, pixel_spacing_m, channel order, ...
    hh_db.f32       one little-endian float32 plane per channel, row-major
    hv_db.f32
    incidence_deg.f32
    mask.u8         1 valid / 0 invalid
    labels.u8       optional, 255 = IGNORE
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import LabelError, SceneFormatError, ZeroVarianceError

IGNORE = 255
CHANNELS = ("hh_db", "hv_db", "incidence_deg")
KNOWN_CHANNELS = CHANNELS + ("hh_linear", "hv_linear")
HEADER = "header"
FORMAT = "seaseg-scene"

ICE_WATER = {0: "Water", 1: "Ice"}
SOD = {0: "Water", 1: "NewIce", 2: "Nilas", 3: "YoungIce", 4: "FirstYearIce", 5: "OldIce"}
SCHEMES = {"ice_water": ICE_WATER, "oldest_type": SOD, "dominant_type": SOD}

# WMO Egg Code stage-of-development codes folded into the six-class scheme
EGG_TO_SOD = {
    81: 1, 82: 2, 83: 3, 84: 3, 85: 3,
    86: 4, 87: 4, 88: 4, 89: 4, 91: 4, 93: 4,
    95: 5, 96: 5, 97: 5,
}
_SOD_BY_NAME = {v.lower(): k for k, v in SOD.items()}

ICE_THRESHOLD_PCT = 10.0

PathLike = Union[str, os.PathLike]


@dataclass
class RasterScene:
    scene_id: str
    channels: Dict[str, np.ndarray]
    valid_mask: np.ndarray
    labels: Optional[np.ndarray] = None
    pixel_spacing_m: float = 80.0
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = {k: v.shape for k, v in self.channels.items()}
        for name in self.channels:
            if name not in KNOWN_CHANNELS:
                raise SceneFormatError(f"unknown channel name {name!r}")
        ref = self.valid_mask.shape
        bad = {k: s for k, s in shapes.items() if s != ref}
        if bad or (self.labels is not None and self.labels.shape != ref):
            raise SceneFormatError(f"plane shapes disagree with mask {ref}: {bad or self.labels.shape}")
        self.valid_mask = self.valid_mask.astype(bool, copy=False)
        for k, v in self.channels.items():
            self.channels[k] = v.astype(np.float32, copy=False)
        if self.labels is not None:
            self.labels = self.labels.astype(np.uint8, copy=False)

    @property
    def height(self) -> int:
        return int(self.valid_mask.shape[0])

    @property
    def width(self) -> int:
        return int(self.valid_mask.shape[1])

    @property
    def shape(self) -> Tuple[int, int]:
        return self.valid_mask.shape

    def stack(self, names: Sequence[str] = CHANNELS) -> np.ndarray:
        """(C, H, W) float32 array of the named channels."""
        missing = [n for n in names if n not in self.channels]
        if missing:
            raise SceneFormatError(f"scene {self.scene_id}: missing channel(s) {missing}")
        return np.stack([self.channels[n] for n in names])

    def learnable_mask(self) -> np.ndarray:
        """Pixels with valid input and a non-IGNORE label."""
        if self.labels is None:
            return self.valid_mask.copy()
        return self.valid_mask & (self.labels != IGNORE)

    def crop(self, rows: slice, cols: slice, scene_id: Optional[str] = None) -> "RasterScene":
        return RasterScene(
            scene_id or self.scene_id,
            {k: v[rows, cols].copy() for k, v in self.channels.items()},
            self.valid_mask[rows, cols].copy(),
            None if self.labels is None else self.labels[rows, cols].copy(),
            self.pixel_spacing_m,
            dict(self.provenance),
        )


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def write_scene(scene: RasterScene, path: PathLike) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    header = {
        "format": FORMAT,
        "version": 1,
        "scene_id": scene.scene_id,
        "width": scene.width,
        "height": scene.height,
        "pixel_spacing_m": float(scene.pixel_spacing_m),
        "channels": list(scene.channels),
        "has_labels": scene.labels is not None,
        "byte_order": "little-endian",
        "dtype": {"channels": "f32", "mask": "u8", "labels": "u8"},
        "provenance": scene.provenance,
    }
    for name, plane in scene.channels.items():
        plane.astype("<f4").tofile(path / f"{name}.f32")
    scene.valid_mask.astype(np.uint8).tofile(path / "mask.u8")
    if scene.labels is not None:
        scene.labels.astype(np.uint8).tofile(path / "labels.u8")
    elif (path / "labels.u8").exists():
        (path / "labels.u8").unlink()
    with open(path / HEADER, "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=1)
        fh.write("\n")
    return path


def _read_plane(path: Path, dtype: str, n: int) -> np.ndarray:
    if not path.exists():
        raise SceneFormatError(f"missing plane file {path.name}")
    size = path.stat().st_size
    itemsize = np.dtype(dtype).itemsize
    if size != n * itemsize:
        raise SceneFormatError(f"{path.name}: payload has {size} bytes, header implies {n * itemsize}")
    return np.fromfile(path, dtype=dtype)


def load_scene(path: PathLike) -> RasterScene:
    path = Path(path)
    try:
        with open(path / HEADER, encoding="utf-8") as fh:
            header = json.load(fh)
    except FileNotFoundError as exc:
        raise SceneFormatError(f"{path}: no header file") from exc
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: header is not valid JSON ({exc})") from exc
    try:
        h, w = int(header["height"]), int(header["width"])
        names = list(header["channels"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneFormatError(f"{path}: header lacks width/height/channels") from exc
    if header.get("byte_order", "little-endian") != "little-endian":
        raise SceneFormatError(f"{path}: unsupported byte order {header['byte_order']!r}")
    for name in names:
        if name not in KNOWN_CHANNELS:
            raise SceneFormatError(f"{path}: unknown channel name {name!r}")
    n = h * w
    channels = {name: _read_plane(path / f"{name}.f32", "<f4", n).reshape(h, w).astype(np.float32)
                for name in names}
    mask = _read_plane(path / "mask.u8", "u1", n).reshape(h, w).astype(bool)
    for plane in channels.values():
        mask &= np.isfinite(plane)
    labels = None
    if header.get("has_labels"):
        labels = _read_plane(path / "labels.u8", "u1", n).reshape(h, w)
    return RasterScene(str(header.get("scene_id", path.name)), channels, mask, labels,
                       float(header.get("pixel_spacing_m", 80.0)), dict(header.get("provenance", {})))


# ---------------------------------------------------------------------------
# radiometry and resampling
# ---------------------------------------------------------------------------

def to_decibels(linear: np.ndarray, valid: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """10*log10 of a linear power plane. Non-positive or non-finite pixels become invalid (NaN)."""
    linear = np.asarray(linear, dtype=np.float64)
    ok = np.isfinite(linear) & (linear > 0)
    if valid is not None:
        ok &= valid
    db = np.full(linear.shape, np.nan, dtype=np.float32)
    db[ok] = 10.0 * np.log10(linear[ok])
    return db, ok


def scene_to_decibels(scene: RasterScene) -> RasterScene:
    """Replace ``hh_linear``/``hv_linear`` by their dB planes, masking non-positive pixels."""
    channels: Dict[str, np.ndarray] = {}
    mask = scene.valid_mask.copy()
    for name, plane in scene.channels.items():
        if name.endswith("_linear"):
            db, ok = to_decibels(plane, scene.valid_mask)
            channels[name.replace("_linear", "_db")] = db
            mask &= ok
        else:
            channels[name] = plane
    ordered = {k: channels[k] for k in CHANNELS if k in channels}
    ordered.update({k: v for k, v in channels.items() if k not in ordered})
    return RasterScene(scene.scene_id, ordered, mask, scene.labels, scene.pixel_spacing_m, dict(scene.provenance))


def _blocks(a: np.ndarray) -> np.ndarray:
    h, w = a.shape
    return a.reshape(h // 2, 2, w // 2, 2).transpose(0, 2, 1, 3).reshape(h // 2, w // 2, 4)


def majority_2x2(labels: np.ndarray) -> np.ndarray:
    """Most frequent code of each 2x2 block; ties go to the lower code."""
    b = _blocks(labels.astype(np.int32))
    counts = (b[..., :, None] == b[..., None, :]).sum(axis=-1)
    key = counts * 256 + (255 - b)
    pick = np.argmax(key, axis=-1)
    return np.take_along_axis(b, pick[..., None], axis=-1)[..., 0].astype(np.uint8)


def downsample_2x(scene: RasterScene) -> RasterScene:
    """Halve resolution: count-valid block means, invalid only when all four are invalid."""
    h, w = scene.shape
    h2, w2 = h - h % 2, w - w % 2
    prov = dict(scene.provenance)
    if (h2, w2) != (h, w):
        prov["downsample_dropped"] = {"rows": h - h2, "cols": w - w2}
    mask = _blocks(scene.valid_mask[:h2, :w2])
    n_valid = mask.sum(axis=-1)
    out_mask = n_valid > 0
    channels = {}
    for name, plane in scene.channels.items():
        vals = _blocks(plane[:h2, :w2].astype(np.float64))
        total = np.where(mask, vals, 0.0).sum(axis=-1)
        mean = np.full(out_mask.shape, np.nan, dtype=np.float64)
        np.divide(total, n_valid, out=mean, where=out_mask)
        channels[name] = mean.astype(np.float32)
    labels = None if scene.labels is None else majority_2x2(scene.labels[:h2, :w2])
    prov["pixel_spacing_history"] = prov.get("pixel_spacing_history", []) + [scene.pixel_spacing_m]
    return RasterScene(scene.scene_id, channels, out_mask, labels, scene.pixel_spacing_m * 2, prov)



def preprocess(scene: RasterScene, downsample: bool = True) -> RasterScene:
    """Linear-power scene at 40 m to dB at 80 m. Conversion precedes averaging, so blocks are averaged in dB."""
    out = scene_to_decibels(scene)
    return downsample_2x(out) if downsample else out

# ---------------------------------------------------------------------------
# labels from ice-chart polygons
# ---------------------------------------------------------------------------

@dataclass
class Polygon:
    sa: Optional[int]                       # oldest type as a six-class code
    partials: List[Tuple[int, float]]       # (six-class code, partial concentration %)
    total: float                            # total concentration %


def parse_stage(value) -> Optional[int]:
    """Map an Egg Code number or a class name to the six-class code."""
    if value is None:
        return None
    s = str(value).strip()
    if not s:
        return None
    if s.lower() in _SOD_BY_NAME:
        return _SOD_BY_NAME[s.lower()]
    try:
        code = int(float(s))
    except ValueError as exc:
        raise LabelError(f"unknown stage-of-development code {s!r}") from exc
    if code in EGG_TO_SOD:
        return EGG_TO_SOD[code]
    raise LabelError(f"unknown stage-of-development code {s!r}")


class PolygonTable:
    """Ice-chart attributes keyed by polygon id."""

    def __init__(self, rows: Optional[Mapping[int, Polygon]] = None):
        self.rows: Dict[int, Polygon] = dict(rows or {})

    def add(self, pid: int, sa, partials: Iterable[Tuple[object, float]], total: float) -> None:
        parts = [(parse_stage(t), float(c)) for t, c in partials]
        parts = [(t, c) for t, c in parts if t is not None]
        if len(parts) > 3:
            raise LabelError(f"polygon {pid}: more than three typed entries")
        for _, c in parts:
            if not 0 < c <= 100:
                raise LabelError(f"polygon {pid}: partial concentration {c} outside (0, 100]")
        if not 0 <= total <= 100:
            raise LabelError(f"polygon {pid}: total concentration {total} outside [0, 100]")
        self.rows[int(pid)] = Polygon(parse_stage(sa), parts, float(total))

    def __len__(self) -> int:
        return len(self.rows)

    @classmethod
    def read_csv(cls, path: PathLike) -> "PolygonTable":
        """Columns: id, SA, type_1, conc_1, type_2, conc_2, type_3, conc_3, total_conc."""
        table = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                partials = []
                for i in (1, 2, 3):
                    t, c = row.get(f"type_{i}", ""), row.get(f"conc_{i}", "")
                    if t and t.strip() and c and c.strip():
                        partials.append((t, float(c)))
                table.add(int(row["id"]), row.get("SA"), partials, float(row["total_conc"]))
        return table

    def write_csv(self, path: PathLike) -> None:
        cols = ["id", "SA", "type_1", "conc_1", "type_2", "conc_2", "type_3", "conc_3", "total_conc"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(cols)
            for pid in sorted(self.rows):
                p = self.rows[pid]
                cells: List[object] = [pid, "" if p.sa is None else SOD[p.sa]]
                for i in range(3):
                    if i < len(p.partials):
                        cells += [SOD[p.partials[i][0]], p.partials[i][1]]
                    else:
                        cells += ["", ""]
                wr.writerow(cells + [p.total])


def polygon_class(p: Polygon, scheme: str, ice_threshold: float = ICE_THRESHOLD_PCT) -> int:
    if scheme not in SCHEMES:
        raise LabelError(f"unknown class scheme {scheme!r}")
    # below the open-water threshold the polygon is water under every scheme
    if p.total < ice_threshold:
        return 0
    if scheme == "ice_water":
        return 1
    if scheme == "oldest_type":
        if p.sa is not None:
            return p.sa
        if p.partials:
            return max(t for t, _ in p.partials)
        raise LabelError("ice polygon without SA or typed entries")
    if not p.partials:
        if p.sa is not None:
            return p.sa
        raise LabelError("ice polygon without typed entries")
    # largest partial concentration; ties go to the older (higher) code
    return max(p.partials, key=lambda tc: (tc[1], tc[0]))[0]


def derive_labels(id_raster: np.ndarray, table: PolygonTable, scheme: str,
                  ice_threshold: float = ICE_THRESHOLD_PCT, ignore_id: int = -1) -> np.ndarray:
    """Label plane for ``scheme``; pixels carrying ``ignore_id`` (land) become IGNORE."""
    ids = np.asarray(id_raster)
    uniq, inverse = np.unique(ids, return_inverse=True)
    missing = [int(u) for u in uniq if u != ignore_id and int(u) not in table.rows]
    if missing:
        raise LabelError(f"polygon id(s) missing from table: {missing}")
    lut = np.array([IGNORE if u == ignore_id else polygon_class(table.rows[int(u)], scheme, ice_threshold)
                    for u in uniq], dtype=np.uint8)
    return lut[inverse.reshape(ids.shape)]


# ---------------------------------------------------------------------------
# normalization statistics
# ---------------------------------------------------------------------------

@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    provenance: List[str] = field(default_factory=list)
    channels: Tuple[str, ...] = CHANNELS

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(~(self.std > 0)):
            raise ZeroVarianceError(f"non-positive std in normalization stats: {self.std}")

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "provenance": list(self.provenance),
                "channels": list(self.channels)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.array(d["mean"]), np.array(d["std"]), list(d.get("provenance", [])),
                   tuple(d.get("channels", CHANNELS)))


def compute_norm_stats(scenes: Sequence[RasterScene], channels: Sequence[str] = CHANNELS) -> NormStats:
    """Per-channel mean and population std over the union of valid pixels (two passes, float64)."""
    if not scenes:
        raise ValueError("compute_norm_stats needs at least one scene")
    c = len(channels)
    total = np.zeros(c)
    n = 0
    for s in scenes:
        m = s.valid_mask
        n += int(m.sum())
        for i, name in enumerate(channels):
            total[i] += s.channels[name][m].sum(dtype=np.float64)
    if n == 0:
        raise ZeroVarianceError("no valid pixels in the listed scenes")
    mean = total / n
    sq = np.zeros(c)
    for s in scenes:
        m = s.valid_mask
        for i, name in enumerate(channels):
            d = s.channels[name][m].astype(np.float64) - mean[i]
            sq[i] += np.dot(d, d)
    std = np.sqrt(sq / n)
    zero = [name for name, v in zip(channels, std) if not v > 0]
    if zero:
        raise ZeroVarianceError(f"zero variance in channel(s) {zero}")
    return NormStats(mean, std, [s.scene_id for s in scenes], tuple(channels))


def valid_channel_means(scene: RasterScene, channels: Sequence[str] = CHANNELS) -> np.ndarray:
    m = scene.valid_mask
    if not m.any():
        raise SceneFormatError(f"scene {scene.scene_id} has no valid pixels")
    return np.array([scene.channels[n][m].mean(dtype=np.float64) for n in channels])
