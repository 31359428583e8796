"""Multi-seed training runs, prediction files, evaluation products and the U-Net timing comparison."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .config import RunConfig, dump_json
from .errors import CheckpointError, SceneFormatError
from .inference import PredictionProduct, predict_scene
from .metrics import aggregate, error_map, evaluate_planes, report_header, report_row
from .model import ModelConfig, SegModel, build_model, load_checkpoint
from .raster import IGNORE, SCHEMES, NormStats, RasterScene, load_scene
from .render import PALETTES, render_map
from .sampler import resolve_units
from .trainer import train, write_history

log = logging.getLogger(__name__)

PRED_META = "prediction.json"
CLASSES_FILE = "classes.u8"
PROBS_FILE = "probs.f32"


# ---------------------------------------------------------------------------
# scenes and predictions on disk
# ---------------------------------------------------------------------------

def load_scenes(scenes_dir, scene_ids: Sequence[str]) -> Dict[str, RasterScene]:
    root = Path(scenes_dir)
    missing = [s for s in scene_ids if not (root / s / "header").exists()]
    if missing:
        raise SceneFormatError(f"scene id(s) not found under {root}: {', '.join(missing)}")
    return {s: load_scene(root / s) for s in scene_ids}


def write_prediction(product: PredictionProduct, path, scene_id: str, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    h, w = product.classes.shape
    product.classes.astype(np.uint8).tofile(path / CLASSES_FILE)
    files = {"classes": CLASSES_FILE}
    if product.probabilities is not None:
        product.probabilities.astype("<f4").tofile(path / PROBS_FILE)
        files["probabilities"] = PROBS_FILE
    elif (path / PROBS_FILE).exists():
        (path / PROBS_FILE).unlink()
    meta = {"scene_id": scene_id, "height": h, "width": w, "ignore": IGNORE, "files": files,
            "timing": product.timing, "provenance": product.provenance, **(extra or {})}
    dump_json(meta, path / PRED_META)
    return path


def read_prediction(path) -> Tuple[np.ndarray, Optional[np.ndarray], dict]:
    path = Path(path)
    try:
        with open(path / PRED_META, encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError as exc:
        raise SceneFormatError(f"{path}: not a prediction directory") from exc
    h, w = meta["height"], meta["width"]
    classes = np.fromfile(path / CLASSES_FILE, dtype=np.uint8)
    if classes.size != h * w:
        raise SceneFormatError(f"{path}: class plane has {classes.size} pixels, expected {h * w}")
    probs = None
    if "probabilities" in meta["files"]:
        raw = np.fromfile(path / PROBS_FILE, dtype="<f4")
        k = raw.size // (h * w)
        probs = raw.reshape(k, h, w).astype(np.float32)
    return classes.reshape(h, w), probs, meta


def evaluate_prediction(classes: np.ndarray, scene: RasterScene, scheme: str, out_dir=None,
                        group: str = "", seed: object = "", num_classes: Optional[int] = None
                        ) -> Tuple[dict, List[str], List[str]]:
    """Metrics report + flat row; with ``out_dir`` also writes the error map raster and image."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    k = len(SCHEMES[scheme])
    if num_classes is not None and num_classes != k:
        raise ValueError(f"prediction has {num_classes} classes but scheme {scheme} has {k}")
    if scene.labels is None:
        raise SceneFormatError(f"scene {scene.scene_id} has no labels to evaluate against")
    if classes.shape != scene.shape:
        raise ValueError(f"prediction {classes.shape} and scene {scene.shape} dimensions differ")
    present = np.unique(scene.labels[scene.labels != IGNORE])
    if present.size and present.max() >= k:
        raise ValueError(f"scene labels use codes up to {int(present.max())}; scheme {scheme} has {k} classes")
    report = evaluate_planes(classes, scene.labels, scheme, scene.pixel_spacing_m)
    header = report_header(scheme)
    row = report_row(report, scheme, scene.scene_id, group, seed)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        emap = error_map(classes, scene.labels)
        emap.tofile(out / "error_map.u8")
        render_map(emap, PALETTES["error"], out / "error_map.ppm")
        dump_json(report.to_dict(), out / "report.json")
        with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(header)
            wr.writerow(row)
    return report.to_dict(), header, row


# ---------------------------------------------------------------------------
# repetitions
# ---------------------------------------------------------------------------

def run_dir(cfg: RunConfig, workdir: Path, architecture: str) -> Path:
    return Path(workdir) / cfg.output_dir / architecture


def train_one(cfg: RunConfig, scenes: Mapping[str, RasterScene], seed: int, out: Path,
              model_config: Optional[ModelConfig] = None):
    mc = replace(model_config or cfg.model, seed=int(seed))
    model = build_model(mc)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(cfg.to_dict(), out / "config.json")
    result = train(model, scenes, cfg.plan, cfg.patch, cfg.train, run_seed=int(seed),
                   checkpoint_path=out / "checkpoint",
                   manifest_extra={"run_config": cfg.to_dict(), "scheme": cfg.scheme})
    write_history(result.history, out / "history.csv")
    return model, result


def run_repetitions(cfg: RunConfig, scenes: Mapping[str, RasterScene], workdir, seeds: Optional[Sequence[int]] = None,
                    architecture: Optional[str] = None) -> dict:
    """One independent training per seed, then test-scene metrics and a min/median/max table."""
    arch = architecture or cfg.model.architecture
    mc = replace(cfg.model, architecture=arch)
    base = run_dir(cfg, workdir, arch)
    base.mkdir(parents=True, exist_ok=True)
    seeds = list(cfg.seeds if seeds is None else seeds)
    tests = resolve_units(scenes, cfg.plan, "test", 0)
    rows: List[List[str]] = []
    failures: Dict[int, str] = {}
    header = report_header(cfg.scheme)
    for seed in seeds:
        try:
            model, result = train_one(cfg, scenes, seed, base / f"seed_{seed}", mc)
            for unit in tests:
                prod = predict_scene(model, unit, result.stats)
                _, _, row = evaluate_prediction(prod.classes, unit, cfg.scheme, group=cfg.group, seed=seed)
                rows.append(row)
        except Exception as exc:  # one failed seed must not sink the others
            log.exception("seed %s failed", seed)
            failures[int(seed)] = f"{type(exc).__name__}: {exc}"
    with open(base / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)
    summary = aggregate_rows(header, rows)
    write_aggregate(summary, base / "aggregate.csv")
    dump_json({"seeds": seeds, "failures": failures}, base / "repetitions.json")
    return {"header": header, "rows": rows, "aggregate": summary, "failures": failures}


AGG_METRICS = ("accuracy", "macro_f1", "weighted_f1", "macro_iou", "weighted_iou", "kappa")


def aggregate_rows(header: List[str], rows: List[List[str]]) -> List[dict]:
    """Min / median / max of each metric per test scene over seeds."""
    idx = {c: i for i, c in enumerate(header)}
    by_scene: Dict[str, List[List[str]]] = {}
    for r in rows:
        by_scene.setdefault(r[idx["scene_id"]], []).append(r)
    out = []
    for scene_id, rs in by_scene.items():
        entry = {"scene_id": scene_id, "n_seeds": len(rs)}
        for m in AGG_METRICS:
            entry[m] = aggregate([float(r[idx[m]]) for r in rs])
        out.append(entry)
    return out


def write_aggregate(summary: List[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["scene_id", "n_seeds"] + [f"{m}_{s}" for m in AGG_METRICS for s in ("min", "median", "max")])
        for e in summary:
            wr.writerow([e["scene_id"], e["n_seeds"]] +
                        [repr(float(e[m][s])) for m in AGG_METRICS for s in ("min", "median", "max")])


# ---------------------------------------------------------------------------
# U-Net comparison
# ---------------------------------------------------------------------------

def _stats_from_manifest(manifest: dict) -> NormStats:
    if "norm_stats" not in manifest:
        raise CheckpointError("checkpoint manifest carries no normalization statistics")
    return NormStats.from_dict(manifest["norm_stats"])


def time_predictions(model: SegModel, stats: NormStats, scenes: Sequence[RasterScene], n: int) -> List[Tuple[str, float, np.ndarray]]:
    out = []
    for i in range(n):
        s = scenes[i % len(scenes)]
        t0 = time.perf_counter()
        prod = predict_scene(model, s, stats)
        out.append((s.scene_id, time.perf_counter() - t0, prod.classes))
    return out


def counterpart_checkpoints(cfg: RunConfig, workdir) -> Dict[str, Path]:
    """First-seed checkpoints of both architectures; both must exist."""
    seed = cfg.seeds[0]
    ckpts = {arch: run_dir(cfg, workdir, arch) / f"seed_{seed}" / "checkpoint" for arch in ("aspp", "unet")}
    missing = [str(p) for p in ckpts.values() if not (p / "manifest.json").exists()]
    if missing:
        raise CheckpointError(f"missing counterpart checkpoint(s): {', '.join(missing)}")
    return ckpts


def compare_unet(cfg: RunConfig, scenes: Mapping[str, RasterScene], workdir, min_predictions: int = 16) -> dict:
    ckpts = counterpart_checkpoints(cfg, workdir)
    scene_ids = cfg.compare.get("scenes")
    units = [scenes[s] for s in scene_ids] if scene_ids else resolve_units(scenes, cfg.plan, "test", 0)
    if not units:
        raise SceneFormatError("no scenes to compare on")
    n = max(int(cfg.compare.get("min_predictions", min_predictions)), len(units))
    table = []
    timings: Dict[str, List[float]] = {}
    for arch, path in ckpts.items():
        model, manifest = load_checkpoint(path)
        stats = _stats_from_manifest(manifest)
        for scene_id, secs, classes in time_predictions(model, stats, units, n):
            unit = next(u for u in units if u.scene_id == scene_id)
            wf1 = ""
            if unit.labels is not None:
                rep = evaluate_planes(classes, unit.labels, cfg.scheme, unit.pixel_spacing_m)
                wf1 = rep.weighted_f1
            table.append({"scene_id": scene_id, "model": arch, "seconds": secs, "weighted_f1": wf1})
            timings.setdefault(arch, []).append(secs)
    summary = {arch: {"mean_s": float(np.mean(v)), "std_s": float(np.std(v, ddof=1)) if len(v) > 1 else 0.0,
                      "n": len(v)} for arch, v in timings.items()}
    summary["speed_ratio_unet_over_aspp"] = summary["unet"]["mean_s"] / summary["aspp"]["mean_s"]
    out = Path(workdir) / cfg.output_dir / "compare"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "comparison.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["scene_id", "model", "seconds", "weighted_f1"])
        for r in table:
            wr.writerow([r["scene_id"], r["model"], repr(float(r["seconds"])), r["weighted_f1"]])
    dump_json(summary, out / "summary.json")
    return {"table": table, "summary": summary}
