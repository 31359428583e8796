"""Patch extraction, Z-score normalization, split plans and scene halving."""

from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, SamplerError
from .raster import CHANNELS, IGNORE, NormStats, RasterScene

MAX_CONSECUTIVE_REJECTIONS = 10_000
VALIDATION_STREAM = 0x7A11D  # fixed epoch tag of the frozen validation stream
ROLES = ("train", "validation", "test")


@dataclass
class PatchSpec:
    patch_px: int = 768
    max_invalid_fraction: float = 0.30
    patches_per_scene: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.patch_px < 32 or self.patch_px % 32:
            raise ConfigError(f"patch_px must be a positive multiple of 32, got {self.patch_px}")
        if not 0 <= self.max_invalid_fraction < 1:
            raise ConfigError(f"max_invalid_fraction must be in [0, 1), got {self.max_invalid_fraction}")
        if self.patches_per_scene < 1:
            raise ConfigError("patches_per_scene must be >= 1")


@dataclass
class Patch:
    inputs: np.ndarray          # (C, P, P) float32
    labels: np.ndarray          # (P, P) uint8
    origin: Tuple[str, int, int]
    invalid_fraction: float


@dataclass(frozen=True)
class Rejected:
    origin: Tuple[str, int, int]
    invalid_fraction: float


# ---------------------------------------------------------------------------
# single-patch sampling
# ---------------------------------------------------------------------------

class SceneWindowIndex:
    """Invalid-or-land mask of a scene with a summed-area table for O(1) window counts."""

    def __init__(self, scene: RasterScene):
        self.scene = scene
        invalid = ~scene.valid_mask
        if scene.labels is not None:
            invalid |= scene.labels == IGNORE
        self.invalid = invalid
        sat = np.zeros((invalid.shape[0] + 1, invalid.shape[1] + 1), dtype=np.int64)
        np.cumsum(np.cumsum(invalid, axis=0, dtype=np.int64), axis=1, out=sat[1:, 1:])
        self.sat = sat

    def invalid_count(self, r: int, c: int, p: int) -> int:
        s = self.sat
        return int(s[r + p, c + p] - s[r, c + p] - s[r + p, c] + s[r, c])


def _index(scene_or_index) -> SceneWindowIndex:
    return scene_or_index if isinstance(scene_or_index, SceneWindowIndex) else SceneWindowIndex(scene_or_index)


def extract_patch(idx: SceneWindowIndex, r: int, c: int, p: int, channels: Sequence[str] = CHANNELS) -> Patch:
    """Cut the window at (r, c) and substitute invalid-or-land pixels by the valid-pixel channel means."""
    scene = idx.scene
    bad = idx.invalid[r:r + p, c:c + p]
    x = np.stack([scene.channels[n][r:r + p, c:c + p] for n in channels]).astype(np.float32)
    if scene.labels is None:
        raise SamplerError(f"scene {scene.scene_id} has no label plane")
    y = scene.labels[r:r + p, c:c + p].copy()
    n_bad = int(bad.sum())
    if n_bad:
        good = ~bad
        if not good.any():
            raise SamplerError(f"{scene.scene_id}@({r},{c}): no valid pixel to substitute from")
        means = np.array([x[i][good].mean(dtype=np.float64) for i in range(x.shape[0])], dtype=np.float32)
        x[:, bad] = means[:, None]
        y[bad] = IGNORE
    return Patch(x, y, (scene.scene_id, r, c), n_bad / float(p * p))


def sample_patch(scene, spec: PatchSpec, rng: np.random.Generator) -> Union[Patch, Rejected]:
    """Uniform random top-left corner; rejected iff invalid fraction exceeds the limit."""
    idx = _index(scene)
    h, w = idx.invalid.shape
    p = spec.patch_px
    if h < p or w < p:
        raise SamplerError(f"scene {idx.scene.scene_id} ({h}x{w}) smaller than patch {p}")
    r = int(rng.integers(0, h - p + 1))
    c = int(rng.integers(0, w - p + 1))
    frac = idx.invalid_count(r, c, p) / float(p * p)
    if frac > spec.max_invalid_fraction:
        return Rejected((idx.scene.scene_id, r, c), frac)
    return extract_patch(idx, r, c, p)


def patch_rng(seed: int, scene_id: str, epoch_tag: int, index: int) -> np.random.Generator:
    """Per-patch stream keyed by (seed, scene id, epoch, patch index): independent of scheduling."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(scene_id.encode("utf-8")), int(epoch_tag), int(index)]
    return np.random.default_rng(np.random.SeedSequence(key))


def draw_accepted(idx: SceneWindowIndex, spec: PatchSpec, epoch_tag: int, index: int) -> Patch:
    rng = patch_rng(spec.seed, idx.scene.scene_id, epoch_tag, index)
    for _ in range(MAX_CONSECUTIVE_REJECTIONS):
        out = sample_patch(idx, spec, rng)
        if isinstance(out, Patch):
            return out
    frac = float(idx.invalid.mean())
    raise SamplerError(
        f"scene {idx.scene.scene_id}: {MAX_CONSECUTIVE_REJECTIONS} consecutive rejections "
        f"(scene invalid fraction {frac:.3f}, limit {spec.max_invalid_fraction})")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def normalize(patch: Patch, stats: NormStats) -> Patch:
    x = normalize_array(patch.inputs, stats)
    return Patch(x, patch.labels, patch.origin, patch.invalid_fraction)


def normalize_array(x: np.ndarray, stats: NormStats) -> np.ndarray:
    if x.shape[-3] != stats.mean.size:
        raise ConfigError(f"normalization stats have {stats.mean.size} channels, data has {x.shape[-3]}")
    shape = (-1, 1, 1)
    mean = stats.mean.astype(np.float32).reshape(shape)
    std = stats.std.astype(np.float32).reshape(shape)
    return ((x - mean) / std).astype(np.float32)


def denormalize_array(x: np.ndarray, stats: NormStats) -> np.ndarray:
    shape = (-1, 1, 1)
    return (x * stats.std.astype(np.float32).reshape(shape) + stats.mean.astype(np.float32).reshape(shape)).astype(np.float32)


# ---------------------------------------------------------------------------
# split plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitEntry:
    scene_id: str
    role: str
    half: Optional[str] = None   # "E", "W" or None for the whole scene

    @property
    def unit_id(self) -> str:
        return self.scene_id if self.half is None else f"{self.scene_id}-{self.half}"


@dataclass
class SplitPlan:
    group: str
    entries: List[SplitEntry] = field(default_factory=list)

    def __post_init__(self):
        # a unit is a whole scene or one half; units of one group must not overlap
        seen: Dict[Tuple[str, Optional[str]], str] = {}
        for e in self.entries:
            if e.role not in ROLES:
                raise ConfigError(f"unknown role {e.role!r} for {e.unit_id}")
            if e.half not in (None, "E", "W"):
                raise ConfigError(f"half must be E, W or empty, got {e.half!r}")
            overlaps = [(e.scene_id, e.half)] + ([(e.scene_id, "E"), (e.scene_id, "W")] if e.half is None
                                                 else [(e.scene_id, None)])
            clash = [k for k in overlaps if k in seen]
            if clash:
                raise ConfigError(f"scene {e.scene_id} listed more than once "
                                  f"(roles {seen[clash[0]]!r} and {e.role!r})")
            seen[(e.scene_id, e.half)] = e.role

    def ids(self, role: str) -> List[str]:
        return [e.unit_id for e in self.entries if e.role == role]

    def role_entries(self, role: str) -> List[SplitEntry]:
        return [e for e in self.entries if e.role == role]

    def scene_ids(self) -> List[str]:
        out: List[str] = []
        for e in self.entries:
            if e.scene_id not in out:
                out.append(e.scene_id)
        return out

    def to_dict(self) -> dict:
        return {"group": self.group,
                "entries": [{"scene_id": e.scene_id, "role": e.role, "half": e.half} for e in self.entries]}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(d["group"], [SplitEntry(e["scene_id"], e["role"], e.get("half")) for e in d["entries"]])

    @classmethod
    def simple(cls, train: Sequence[str], validation: Sequence[str] = (), test: Sequence[str] = (),
               group: str = "custom") -> "SplitPlan":
        entries = [SplitEntry(s, "train") for s in train]
        entries += [SplitEntry(s, "validation") for s in validation]
        entries += [SplitEntry(s, "test") for s in test]
        return cls(group, entries)


MONTHS = ("january", "february", "march", "april", "may", "june", "july", "august",
          "september", "october", "november", "december")
_HALVED = ("february", "june", "august", "december")
_FREEZE_TRAIN = ("february", "march", "october", "november", "december")
_MELT_TRAIN = ("april", "may", "june", "august", "september")


def extremeearth_v2(group: str) -> SplitPlan:
    """Experiment-group split of the twelve monthly scenes (one per month of one year).

    February, June, August and December are bisected: the W half trains and
    the E half validates whenever the month belongs to the group's training
    season; otherwise the whole month is a test scene. January and July are
    always test scenes.
    """
    if group not in ("all", "freeze", "melt"):
        raise ConfigError(f"unknown experiment group {group!r}")
    season = {"all": _FREEZE_TRAIN + _MELT_TRAIN, "freeze": _FREEZE_TRAIN, "melt": _MELT_TRAIN}[group]
    entries: List[SplitEntry] = []
    for m in MONTHS:
        if m in ("january", "july") or m not in season:
            if m in _HALVED:
                entries += [SplitEntry(m, "test", "W"), SplitEntry(m, "test", "E")]
            else:
                entries.append(SplitEntry(m, "test"))
        elif m in _HALVED:
            entries += [SplitEntry(m, "train", "W"), SplitEntry(m, "validation", "E")]
        else:
            entries.append(SplitEntry(m, "train"))
    return SplitPlan(group, entries)


PRESETS = {"extremeearth-v2": extremeearth_v2}


def split_scene_half(scene: RasterScene, half: str, patch_px: int = 0) -> RasterScene:
    """W = columns [0, width//2), E = the rest."""
    if half not in ("E", "W"):
        raise ConfigError(f"half must be 'E' or 'W', got {half!r}")
    w = scene.width
    if w < 2 * max(patch_px, 1):
        raise SamplerError(f"scene {scene.scene_id} width {w} too narrow to halve for patch {patch_px}")
    mid = w // 2
    cols = slice(0, mid) if half == "W" else slice(mid, w)
    out = scene.crop(slice(None), cols, f"{scene.scene_id}-{half}")
    out.provenance["half"] = {"of": scene.scene_id, "half": half, "col0": cols.start}
    return out


def resolve_units(scenes: Mapping[str, RasterScene], plan: SplitPlan, role: str,
                  patch_px: int = 0) -> List[RasterScene]:
    missing = [e.scene_id for e in plan.role_entries(role) if e.scene_id not in scenes]
    if missing:
        raise SamplerError(f"plan references unknown scene id(s): {sorted(set(missing))}")
    out = []
    for e in plan.role_entries(role):
        s = scenes[e.scene_id]
        out.append(s if e.half is None else split_scene_half(s, e.half, patch_px))
    return out


# ---------------------------------------------------------------------------
# epoch streams
# ---------------------------------------------------------------------------

def _draw_all(units: Sequence[RasterScene], spec: PatchSpec, epoch_tag: int, workers: int) -> List[Patch]:
    indexes = [SceneWindowIndex(u) for u in units]
    jobs = [(idx, i) for idx in indexes for i in range(spec.patches_per_scene)]

    def run(job):
        return draw_accepted(job[0], spec, epoch_tag, job[1])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(run, jobs))
    return [run(j) for j in jobs]


def make_epoch(scenes: Mapping[str, RasterScene], plan: SplitPlan, spec: PatchSpec, epoch_seed: int,
               stats: Optional[NormStats] = None, workers: int = 1) -> List[Patch]:
    """``patches_per_scene`` accepted training patches per train unit, shuffled by ``epoch_seed``."""
    units = resolve_units(scenes, plan, "train", spec.patch_px)
    if not units:
        raise SamplerError("plan has no training scenes")
    patches = _draw_all(units, spec, epoch_seed, workers)
    order = np.random.default_rng(np.random.SeedSequence([spec.seed, int(epoch_seed), 1])).permutation(len(patches))
    patches = [patches[i] for i in order]
    return [normalize(p, stats) for p in patches] if stats is not None else patches


def make_validation(scenes: Mapping[str, RasterScene], plan: SplitPlan, spec: PatchSpec,
                    stats: Optional[NormStats] = None, workers: int = 1) -> List[Patch]:
    """Frozen validation stream: same patches every call for a given ``spec.seed``."""
    units = resolve_units(scenes, plan, "validation", spec.patch_px)
    patches = _draw_all(units, spec, VALIDATION_STREAM, workers)
    return [normalize(p, stats) for p in patches] if stats is not None else patches


def batches(patches: Sequence[Patch], batch_size: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Stack consecutive patches; the last short batch is kept."""
    for i in range(0, len(patches), batch_size):
        chunk = patches[i:i + batch_size]
        yield np.stack([p.inputs for p in chunk]), np.stack([p.labels for p in chunk])
