"""Command line entry point: ``seaseg <command> ...``.

Every command ends with one machine-parsable line ``status=ok|error elapsed_s=<float>``.
Relative paths resolve against ``--workdir``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from .config import dump_json, load_run_config
from .errors import SegError
from .inference import predict_scene
from .model import load_checkpoint
from .pipeline import (compare_unet, counterpart_checkpoints, evaluate_prediction, load_scenes, read_prediction, run_repetitions,
                       write_prediction)
from .raster import CHANNELS, NormStats, compute_norm_stats, load_scene
from .render import PALETTES, load_palette, render_map
from .simsar import SimSceneSpec, generate_scene, write_sim_scene

log = logging.getLogger("seaseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _status(ok: bool, t0: float) -> None:
    print(f"status={'ok' if ok else 'error'} elapsed_s={time.perf_counter() - t0:.3f}", flush=True)


def _path(args, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(args.workdir) / p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> None:
    with open(_path(args, args.spec), encoding="utf-8") as fh:
        raw = json.load(fh)
    count = int(raw.pop("count", 1))
    if args.count is not None:
        count = args.count
    prefix = raw.pop("scene_prefix", "sim")
    spec = SimSceneSpec.from_dict(raw)
    out = _path(args, args.out)
    for i in range(count):
        seed = args.seed + i
        sid = args.scene_id or prefix if count == 1 else f"{prefix}_{i:03d}"
        sim = generate_scene(spec, seed=seed, scene_id=sid)
        dest = out if count == 1 else out / sid
        write_sim_scene(sim, dest)
        print(f"scene={sid} seed={seed} path={dest}")


def cmd_stats(args) -> None:
    scenes = [load_scene(_path(args, s)) for s in args.scenes]
    stats = compute_norm_stats(scenes, tuple(args.channels))
    dump_json(stats.to_dict(), _path(args, args.out))
    for name, m, s in zip(stats.channels, stats.mean, stats.std):
        print(f"channel={name} mean={float(m)!r} std={float(s)!r}")


def cmd_train(args) -> None:
    cfg = load_run_config(_path(args, args.config))
    if args.arch:
        cfg.model = replace(cfg.model, architecture=args.arch)
        cfg.model.validate()
    scenes = load_scenes(_path(args, cfg.scenes_dir), cfg.plan.scene_ids())
    seeds = [args.seed] if args.seed is not None else cfg.seeds
    res = run_repetitions(cfg, scenes, args.workdir, seeds=seeds)
    for row in res["rows"]:
        print(",".join(row))
    if res["failures"]:
        raise SegError("; ".join(f"seed {s}: {m}" for s, m in res["failures"].items()))


def cmd_predict(args) -> None:
    model, manifest = load_checkpoint(_path(args, args.ckpt))
    if "norm_stats" not in manifest:
        raise SegError("checkpoint carries no normalization statistics")
    stats = NormStats.from_dict(manifest["norm_stats"])
    scene = load_scene(_path(args, args.scene))
    prod = predict_scene(model, scene, stats, probs=args.probs, tile=args.tile)
    out = _path(args, args.out or f"predictions/{scene.scene_id}")
    write_prediction(prod, out, scene.scene_id, {"checkpoint": str(args.ckpt), "run_config": manifest.get("run_config")})
    print(f"prediction={out} forward_s={prod.timing['forward_s']:.3f}")


def cmd_evaluate(args) -> None:
    classes, _, meta = read_prediction(_path(args, args.pred))
    scene = load_scene(_path(args, args.scene))
    out = _path(args, args.out) if args.out else _path(args, args.pred) / "evaluation"
    k = meta.get("provenance", {}).get("num_classes")
    _, header, row = evaluate_prediction(classes, scene, args.scheme, out, num_classes=k)
    print(",".join(header))
    print(",".join(row))


def cmd_render(args) -> None:
    classes, _, _ = read_prediction(_path(args, args.pred))
    palette = PALETTES[args.palette] if args.palette in PALETTES else load_palette(_path(args, args.palette))
    out = _path(args, args.out) if args.out else _path(args, args.pred) / "classes.ppm"
    render_map(classes, palette, out)
    print(f"image={out}")


def cmd_compare_unet(args) -> None:
    cfg = load_run_config(_path(args, args.config))
    counterpart_checkpoints(cfg, args.workdir)
    ids = list(cfg.compare.get("scenes") or cfg.plan.scene_ids())
    scenes = load_scenes(_path(args, cfg.scenes_dir), ids)
    res = compare_unet(cfg, scenes, args.workdir)
    print("scene_id,model,seconds,weighted_f1")
    for r in res["table"]:
        print(f"{r['scene_id']},{r['model']},{r['seconds']:.4f},{r['weighted_f1']}")
    s = res["summary"]
    for arch in ("aspp", "unet"):
        print(f"{arch}: {s[arch]['mean_s']:.3f} +- {s[arch]['std_s']:.3f} s over {s[arch]['n']} predictions")
    print(f"speed_ratio={s['speed_ratio_unet_over_aspp']:.3f}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="seaseg", description="Sea-ice segmentation of SAR scenes.")
    p.add_argument("--workdir", default=".", help="base directory for relative paths")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate synthetic SAR scene(s)")
    s.add_argument("--spec", required=True, help="JSON scene spec")
    s.add_argument("--out", required=True, help="output scene directory")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=None, help="number of scenes (seeds seed, seed+1, ...)")
    s.add_argument("--scene-id", default=None)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("stats", help="normalization statistics over training scenes")
    s.add_argument("--scenes", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--channels", nargs="+", default=list(CHANNELS))
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("train", help="train one run per seed and evaluate the test scenes")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int, default=None, help="train only this seed")
    s.add_argument("--arch", choices=("aspp", "unet"), default=None, help="override the configured architecture")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="full-scene prediction")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--probs", action="store_true", help="also write per-class probability planes")
    s.add_argument("--tile", action="store_true", help="overlapping-tile fallback instead of one forward pass")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="metrics and error map of a prediction")
    s.add_argument("--pred", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--scheme", required=True, choices=("ice_water", "oldest_type", "dominant_type"))
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("render", help="render a class raster to PPM")
    s.add_argument("--pred", required=True)
    s.add_argument("--palette", required=True, help="JSON palette file or built-in name")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("compare-unet", help="timing and metric comparison against the U-Net baseline")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_compare_unet)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    t0 = time.perf_counter()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        _status(False, t0)
        return 2
    except SystemExit as exc:  # --help
        _status(exc.code in (0, None), t0)
        return 0 if exc.code in (0, None) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (SegError, ValueError, OSError, KeyError, MemoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        _status(False, t0)
        return 1
    except Exception:
        log.exception("unexpected failure in %s", args.command)
        _status(False, t0)
        return 1
    _status(True, t0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
