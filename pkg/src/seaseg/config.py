"""Run configuration document (JSON) shared by the CLI commands."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from .errors import ConfigError
from .model import ModelConfig
from .raster import ICE_THRESHOLD_PCT, SCHEMES
from .sampler import PRESETS, PatchSpec, SplitPlan
from .trainer import TrainConfig


@dataclass
class RunConfig:
    scheme: str
    plan: SplitPlan
    model: ModelConfig
    train: TrainConfig
    patch: PatchSpec
    scenes_dir: str = "scenes"
    output_dir: str = "runs"
    ice_threshold_pct: float = ICE_THRESHOLD_PCT
    compare: Dict[str, Any] = field(default_factory=dict)
    raw: Dict[str, Any] = field(default_factory=dict, repr=False)

    @property
    def group(self) -> str:
        return self.plan.group

    @property
    def seeds(self) -> List[int]:
        return list(self.train.seeds)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "RunConfig":
        raw = copy.deepcopy(d)
        known = {"scheme", "group", "plan", "model", "train", "patch", "paths", "seeds", "ice_threshold_pct",
                 "compare"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run config field(s): {sorted(unknown)}")
        scheme = d.get("scheme", "ice_water")
        if scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {scheme!r}; expected one of {sorted(SCHEMES)}")
        plan_d = d.get("plan")
        if plan_d is None:
            raise ConfigError("run config needs a 'plan'")
        if "preset" in plan_d:
            if plan_d["preset"] not in PRESETS:
                raise ConfigError(f"unknown split preset {plan_d['preset']!r}")
            plan = PRESETS[plan_d["preset"]](plan_d.get("group", d.get("group", "all")))
        elif "entries" in plan_d:
            plan = SplitPlan.from_dict({"group": d.get("group", plan_d.get("group", "custom")), **plan_d})
        else:
            plan = SplitPlan.simple(plan_d.get("train", ()), plan_d.get("validation", ()), plan_d.get("test", ()),
                                    d.get("group", plan_d.get("group", "custom")))
        model_d = dict(d.get("model", {}))
        model_d.setdefault("num_classes", len(SCHEMES[scheme]))
        model = ModelConfig.from_dict(model_d)
        if model.num_classes != len(SCHEMES[scheme]):
            raise ConfigError(f"scheme {scheme} has {len(SCHEMES[scheme])} classes, model has {model.num_classes}")
        train_d = dict(d.get("train", {}))
        if "seeds" in d:
            train_d["seeds"] = list(d["seeds"])
        try:
            train = TrainConfig(**train_d)
            patch = PatchSpec(**d.get("patch", {}))
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        paths = d.get("paths", {})
        return cls(scheme, plan, model, train, patch, paths.get("scenes_dir", "scenes"),
                   paths.get("output_dir", "runs"), float(d.get("ice_threshold_pct", ICE_THRESHOLD_PCT)),
                   dict(d.get("compare", {})), raw)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scheme": self.scheme,
            "group": self.group,
            "plan": self.plan.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "patch": asdict(self.patch),
            "paths": {"scenes_dir": self.scenes_dir, "output_dir": self.output_dir},
            "ice_threshold_pct": self.ice_threshold_pct,
            "compare": self.compare,
        }


def load_run_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return RunConfig.from_dict(data)


def _plain(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def dump_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=False, default=_plain)
        fh.write("\n")
