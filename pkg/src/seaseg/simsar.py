"""Synthetic EW-mode-like SAR scenes with known labels.

Geometry, HH speckle and HV speckle draw from separate seeded streams, so
changing a noise parameter never changes the labels or the other noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError
from .raster import IGNORE, RasterScene, write_scene


@dataclass
class ClassSignature:
    name: str
    hh_mean_db: float
    hv_mean_db: float
    incidence_slope_db_per_deg: float


@dataclass
class BandingSpec:
    n_subswaths: int = 5
    offsets_db: Tuple[float, ...] = (0.0, 0.0, 0.0, 0.0, 0.0)
    scallop_amplitude_db: float = 0.0
    scallop_period_px: float = 100.0

    def __post_init__(self):
        self.offsets_db = tuple(float(o) for o in self.offsets_db)
        if self.n_subswaths < 1:
            raise ConfigError("n_subswaths must be >= 1")
        if len(self.offsets_db) != self.n_subswaths:
            raise ConfigError(f"need {self.n_subswaths} subswath offsets, got {len(self.offsets_db)}")
        if not self.scallop_period_px > 0:
            raise ConfigError("scallop_period_px must be positive")

    def scaled(self, factor: float) -> "BandingSpec":
        return BandingSpec(self.n_subswaths, tuple(o * factor for o in self.offsets_db),
                           self.scallop_amplitude_db * factor, self.scallop_period_px)


ICE_WATER_CLASSES = (
    ClassSignature("Water", -22.0, -30.0, -0.2),
    ClassSignature("Ice", -16.0, -24.0, -0.1),
)
LAND = ClassSignature("Land", -9.0, -17.0, -0.05)


@dataclass
class SimSceneSpec:
    width: int = 1024
    height: int = 1024
    pixel_spacing_m: float = 80.0
    classes: Tuple[ClassSignature, ...] = ICE_WATER_CLASSES
    incidence_deg: Tuple[float, float] = (19.0, 46.0)
    n_regions: int = 12
    speckle_looks: Optional[float] = 5.0
    banding: BandingSpec = field(default_factory=BandingSpec)
    land_fraction: float = 0.0
    invalid_border_px: int = 0
    seed: int = 0

    def __post_init__(self):
        self.classes = tuple(c if isinstance(c, ClassSignature) else ClassSignature(**c) for c in self.classes)
        if isinstance(self.banding, dict):
            self.banding = BandingSpec(**self.banding)
        self.incidence_deg = tuple(float(v) for v in self.incidence_deg)
        if self.width < 1 or self.height < 1:
            raise ConfigError("scene dimensions must be positive")
        if self.n_regions < 1 or self.n_regions > self.width * self.height:
            raise ConfigError(f"n_regions={self.n_regions} does not fit a {self.height}x{self.width} scene")
        if not self.classes:
            raise ConfigError("at least one class signature is required")
        for c in self.classes:
            if not all(np.isfinite([c.hh_mean_db, c.hv_mean_db, c.incidence_slope_db_per_deg])):
                raise ConfigError(f"class {c.name}: non-finite signature")
        if self.speckle_looks is not None and self.speckle_looks < 1:
            raise ConfigError("speckle_looks must be >= 1 (or None for no speckle)")
        if not 0 <= self.land_fraction < 1:
            raise ConfigError("land_fraction must be in [0, 1)")
        if self.invalid_border_px < 0 or 2 * self.invalid_border_px >= min(self.width, self.height):
            raise ConfigError("invalid_border_px leaves no valid pixels")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = [asdict(c) for c in self.classes]
        d["banding"]["offsets_db"] = list(self.banding.offsets_db)
        d["incidence_deg"] = list(self.incidence_deg)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimSceneSpec":
        d = dict(d)
        try:
            if "banding" in d and isinstance(d["banding"], dict):
                d["banding"] = BandingSpec(**d["banding"])
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad scene spec: {exc}") from exc


@dataclass
class SimScene:
    scene: RasterScene
    clean: Dict[str, np.ndarray]
    spec: SimSceneSpec


def incidence_plane(spec: SimSceneSpec) -> np.ndarray:
    lo, hi = spec.incidence_deg
    cols = np.linspace(lo, hi, spec.width, dtype=np.float64) if spec.width > 1 else np.array([(lo + hi) / 2])
    return np.broadcast_to(cols.astype(np.float32), (spec.height, spec.width)).copy()


def region_map(spec: SimSceneSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest-seed tessellation; returns (region id plane, class code per region)."""
    pts = np.column_stack([rng.uniform(0, spec.height, spec.n_regions), rng.uniform(0, spec.width, spec.n_regions)])
    k = len(spec.classes)
    # every class appears when there are enough regions
    codes = np.concatenate([np.arange(min(k, spec.n_regions)),
                            rng.integers(0, k, max(0, spec.n_regions - k))])
    codes = rng.permutation(codes)
    tree = cKDTree(pts)
    out = np.empty((spec.height, spec.width), dtype=np.int32)
    cols = np.arange(spec.width, dtype=np.float64) + 0.5
    step = max(1, (1 << 20) // spec.width)
    for r0 in range(0, spec.height, step):
        r1 = min(spec.height, r0 + step)
        rr, cc = np.meshgrid(np.arange(r0, r1, dtype=np.float64) + 0.5, cols, indexing="ij")
        _, idx = tree.query(np.column_stack([rr.ravel(), cc.ravel()]))
        out[r0:r1] = idx.reshape(r1 - r0, spec.width)
    return out, codes.astype(np.int32)


def inject_speckle(plane_db: np.ndarray, looks: float, rng) -> np.ndarray:
    """Multiply linear power by Gamma(looks, 1/looks) draws (unit mean)."""
    if looks < 1:
        raise ConfigError("looks must be >= 1")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    lin = np.power(10.0, plane_db.astype(np.float64) / 10.0)
    lin *= rng.gamma(shape=looks, scale=1.0 / looks, size=plane_db.shape)
    return (10.0 * np.log10(lin)).astype(np.float32)


def banding_pattern(width: int, banding: BandingSpec) -> np.ndarray:
    """Additive dB profile along a row: sub-swath offsets plus a sinusoidal scallop."""
    n = banding.n_subswaths
    base = width // n
    prof = np.empty(width, dtype=np.float64)
    for i in range(n):
        c0 = i * base
        c1 = width if i == n - 1 else (i + 1) * base
        prof[c0:c1] = banding.offsets_db[i]
    if banding.scallop_amplitude_db:
        x = np.arange(width, dtype=np.float64)
        prof += banding.scallop_amplitude_db * np.sin(2 * np.pi * x / banding.scallop_period_px)
    return prof


def inject_banding(hv_plane_db: np.ndarray, banding: BandingSpec) -> np.ndarray:
    prof = banding_pattern(hv_plane_db.shape[1], banding)
    if not prof.any():
        return hv_plane_db.copy()
    return (hv_plane_db.astype(np.float64) + prof[None, :]).astype(np.float32)


def generate_scene(spec: SimSceneSpec, seed: Optional[int] = None, scene_id: str = "sim") -> SimScene:
    seed = spec.seed if seed is None else seed
    geo_ss, hh_ss, hv_ss = np.random.SeedSequence(int(seed)).spawn(3)
    geo = np.random.default_rng(geo_ss)
    regions, codes = region_map(spec, geo)
    labels = codes[regions].astype(np.uint8)

    inc = incidence_plane(spec)
    mid = 0.5 * (spec.incidence_deg[0] + spec.incidence_deg[1])
    sigs = list(spec.classes)
    hh_mean = np.array([c.hh_mean_db for c in sigs])[labels]
    hv_mean = np.array([c.hv_mean_db for c in sigs])[labels]
    slope = np.array([c.incidence_slope_db_per_deg for c in sigs])[labels]

    n_land = int(round(spec.land_fraction * spec.height))
    if n_land:
        land = np.zeros(labels.shape, dtype=bool)
        land[spec.height - n_land:] = True
        hh_mean[land], hv_mean[land], slope[land] = LAND.hh_mean_db, LAND.hv_mean_db, LAND.incidence_slope_db_per_deg
        labels[land] = IGNORE

    tilt = slope * (inc.astype(np.float64) - mid)
    clean_hh = (hh_mean + tilt).astype(np.float32)
    clean_hv = (hv_mean + tilt).astype(np.float32)

    hh, hv = clean_hh, clean_hv
    if spec.speckle_looks is not None:
        hh = inject_speckle(hh, spec.speckle_looks, np.random.default_rng(hh_ss))
        hv = inject_speckle(hv, spec.speckle_looks, np.random.default_rng(hv_ss))
    hv = inject_banding(hv, spec.banding)

    mask = np.ones(labels.shape, dtype=bool)
    b = spec.invalid_border_px
    if b:
        mask[:b] = mask[-b:] = False
        mask[:, :b] = mask[:, -b:] = False
        hh = hh.copy()
        hv = hv.copy()
        hh[~mask] = np.nan
        hv[~mask] = np.nan
        labels[~mask] = IGNORE

    prov = {"generator": "simsar", "seed": int(seed), "spec": spec.to_dict()}
    scene = RasterScene(scene_id, {"hh_db": hh, "hv_db": hv, "incidence_deg": inc}, mask, labels,
                        spec.pixel_spacing_m, prov)
    return SimScene(scene, {"hh_db": clean_hh, "hv_db": clean_hv}, spec)


def write_sim_scene(sim: SimScene, path) -> Path:
    path = write_scene(sim.scene, path)
    with open(Path(path) / "simspec.json", "w", encoding="utf-8") as fh:
        json.dump(sim.scene.provenance, fh, indent=1)
        fh.write("\n")
    return path


def acceptance_spec(seed: int = 0, size: int = 1024, banding_scale: float = 1.0) -> SimSceneSpec:
    """Two-class scene: 6 dB class separation, 5-look speckle, +-1.5 dB HV sub-swath banding."""
    band = BandingSpec(5, (1.5, -1.5, 1.5, -1.5, 1.5), 0.5, 160.0).scaled(banding_scale)
    return SimSceneSpec(width=size, height=size, n_regions=10, speckle_looks=5.0, banding=band,
                        land_fraction=0.05, seed=seed)
