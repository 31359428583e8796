"""Confusion matrices and the scores derived from them, ice-edge areas, error maps."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .raster import IGNORE, SCHEMES

PIXEL_AREA_80M_KM2 = 0.0064


@dataclass
class ConfusionMatrix:
    """Rows are true labels, columns are predictions."""

    counts: np.ndarray

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def _check_pair(pred: np.ndarray, label: np.ndarray) -> None:
    if pred.shape != label.shape:
        raise ValueError(f"prediction shape {pred.shape} != label shape {label.shape}")


def confusion(pred, label, k: int, ignore: int = IGNORE) -> ConfusionMatrix:
    pred = np.asarray(pred)
    label = np.asarray(label)
    _check_pair(pred, label)
    keep = label != ignore
    p = pred[keep].astype(np.int64)
    t = label[keep].astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= k):
        raise ValueError(f"prediction codes outside [0, {k}) on labelled pixels")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise ValueError(f"label codes outside [0, {k}) and not the ignore value {ignore}")
    counts = np.bincount(t * k + p, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(counts.astype(np.int64))


@dataclass
class ClassScores:
    precision: float
    recall: float
    f1: float
    iou: float
    support: int
    present: bool


@dataclass
class MetricsReport:
    accuracy: float
    per_class: List[ClassScores]
    macro_f1: float
    weighted_f1: float
    macro_iou: float
    weighted_iou: float
    kappa: float
    kappa_degenerate: bool
    total: int
    edge: Optional[Dict[str, float]] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = [asdict(c) for c in self.per_class]
        return d


def _ratio(a: float, b: float) -> float:
    return a / b if b else 0.0


def summarize(cm: ConfusionMatrix) -> MetricsReport:
    c = cm.counts.astype(np.float64)
    total = c.sum()
    if total == 0:
        raise ValueError("empty confusion matrix: no labelled pixels")
    rows = c.sum(axis=1)
    cols = c.sum(axis=0)
    diag = np.diag(c)
    per: List[ClassScores] = []
    for i in range(cm.k):
        tp = float(diag[i])
        prec = _ratio(tp, float(cols[i]))
        rec = _ratio(tp, float(rows[i]))
        f1 = _ratio(2 * prec * rec, prec + rec)
        iou = _ratio(tp, float(rows[i] + cols[i] - tp))
        per.append(ClassScores(prec, rec, f1, iou, int(rows[i]), bool(rows[i] > 0 or cols[i] > 0)))
    present = [s for s in per if s.present]
    macro_f1 = math.fsum(s.f1 for s in present) / len(present)
    macro_iou = math.fsum(s.iou for s in present) / len(present)
    weighted_f1 = math.fsum(s.f1 * s.support for s in per) / total
    weighted_iou = math.fsum(s.iou * s.support for s in per) / total
    p_o = float(diag.sum()) / total
    p_e = math.fsum(float(r) * float(k) for r, k in zip(rows, cols)) / (total * total)
    degenerate = p_e == 1.0
    kappa = 0.0 if degenerate else (p_o - p_e) / (1.0 - p_e)
    return MetricsReport(p_o, per, macro_f1, weighted_f1, macro_iou, weighted_iou, kappa, degenerate, int(total))


def ice_edge_errors(pred, label, pixel_area_km2: float = PIXEL_AREA_80M_KM2, ignore: int = IGNORE,
                    water: int = 0, ice: int = 1) -> Dict[str, float]:
    """Over-/under-estimated ice area and their sum (IIEE), in km^2."""
    pred = np.asarray(pred)
    label = np.asarray(label)
    _check_pair(pred, label)
    keep = label != ignore
    for name, arr in (("prediction", pred[keep]), ("label", label[keep])):
        if arr.size and not np.isin(arr, (water, ice)).all():
            raise ValueError(f"ice_edge_errors needs binary ice/water planes; {name} has other codes")
    over_px = int(np.count_nonzero(keep & (pred == ice) & (label == water)))
    under_px = int(np.count_nonzero(keep & (pred == water) & (label == ice)))
    return edge_areas(over_px * pixel_area_km2, under_px * pixel_area_km2)


def edge_areas(over_km2: float, under_km2: float) -> Dict[str, float]:
    """Combine over- and underestimation into the IIEE triple."""
    if over_km2 < 0 or under_km2 < 0:
        raise ValueError("areas must be non-negative")
    return {"over_km2": float(over_km2), "under_km2": float(under_km2), "iiee_km2": float(over_km2) + float(under_km2)}


def pixel_area_km2(spacing_m: float) -> float:
    return (spacing_m / 1000.0) ** 2


def error_map(pred, label, ignore: int = IGNORE) -> np.ndarray:
    """0 where correct, 1 where wrong, ``ignore`` where the label is ignored."""
    pred = np.asarray(pred)
    label = np.asarray(label)
    _check_pair(pred, label)
    out = (pred != label).astype(np.uint8)
    out[label == ignore] = ignore
    return out


def evaluate_planes(pred, label, scheme: str, spacing_m: float = 80.0) -> MetricsReport:
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    k = len(SCHEMES[scheme])
    report = summarize(confusion(pred, label, k))
    if scheme == "ice_water":
        report.edge = ice_edge_errors(pred, label, pixel_area_km2(spacing_m))
    return report


# ---------------------------------------------------------------------------
# flat rows
# ---------------------------------------------------------------------------

def report_header(scheme: str) -> List[str]:
    k = len(SCHEMES[scheme])
    cols = ["scene_id", "group", "seed", "scheme", "pixels", "accuracy", "macro_f1", "weighted_f1",
            "macro_iou", "weighted_iou", "kappa", "kappa_degenerate"]
    cols += [f"f1_{i}" for i in range(k)] + [f"iou_{i}" for i in range(k)]
    if scheme == "ice_water":
        cols += ["over_km2", "under_km2", "iiee_km2"]
    return cols


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def report_row(report: MetricsReport, scheme: str, scene_id: str, group: str = "", seed: object = "") -> List[str]:
    vals = [scene_id, group, seed, scheme, report.total, report.accuracy, report.macro_f1, report.weighted_f1,
            report.macro_iou, report.weighted_iou, report.kappa, report.kappa_degenerate]
    vals += [c.f1 for c in report.per_class] + [c.iou for c in report.per_class]
    if scheme == "ice_water":
        edge = report.edge or {"over_km2": 0.0, "under_km2": 0.0, "iiee_km2": 0.0}
        vals += [edge["over_km2"], edge["under_km2"], edge["iiee_km2"]]
    return [_fmt(v) for v in vals]


def aggregate(values: Sequence[float]) -> Dict[str, float]:
    """Min / median / max summary over repetitions."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("nothing to aggregate")
    return {"min": float(arr.min()), "median": float(np.median(arr)), "max": float(arr.max())}
