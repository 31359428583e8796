"""Adam, plateau learning-rate decay, early stopping and the epoch loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, EmptyLossError, NonFiniteError
from .metrics import ConfusionMatrix, confusion, summarize
from .model import SegModel, save_checkpoint
from .raster import IGNORE, NormStats, RasterScene, compute_norm_stats
from .sampler import PatchSpec, SplitPlan, batches, make_epoch, make_validation, resolve_units

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "lr", "train_loss", "val_loss", "val_weighted_f1", "checkpoint_flag"]


@dataclass
class TrainConfig:
    lr0: float = 1e-5
    lr_factor: float = 0.1
    lr_patience: int = 5
    lr_min: float = 1e-8
    stop_patience: int = 20
    batch_size: int = 32
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    max_epochs: int = 500

    def __post_init__(self):
        if not 0 < self.lr_min <= self.lr0:
            raise ConfigError(f"need 0 < lr_min <= lr0, got lr_min={self.lr_min}, lr0={self.lr0}")
        if self.lr_patience < 1 or self.stop_patience < 1:
            raise ConfigError("patiences must be positive")
        if not 0 < self.lr_factor < 1:
            raise ConfigError("lr_factor must be in (0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be positive")
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class TrainState:
    epoch: int = 0
    lr: float = 1e-5
    best_val_loss: float = math.inf
    best_epoch: int = 0
    epochs_since_best: int = 0
    epochs_since_lr_drop: int = 0
    adam: AdamState = field(default_factory=AdamState)
    history: List[dict] = field(default_factory=list)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, Optional[np.ndarray]], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place. Parameters without a gradient are left alone."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        dt = p.data.dtype
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= dt.type(beta1)
        m += dt.type(1 - beta1) * g
        v *= dt.type(beta2)
        v += dt.type(1 - beta2) * (g * g)
        denom = np.sqrt(v / dt.type(c2))
        denom += dt.type(eps)
        p.data -= dt.type(lr / c1) * m / denom


def plateau_step(state: TrainState, val_loss: float, cfg: TrainConfig) -> bool:
    """Track the best loss; decay lr after ``lr_patience`` non-improving epochs. Returns True on improvement."""
    if not math.isfinite(val_loss):
        raise NonFiniteError(f"validation loss is not finite: {val_loss}")
    if val_loss < state.best_val_loss:
        state.best_val_loss = val_loss
        state.best_epoch = state.epoch
        state.epochs_since_best = 0
        state.epochs_since_lr_drop = 0
        return True
    state.epochs_since_best += 1
    state.epochs_since_lr_drop += 1
    if state.epochs_since_lr_drop >= cfg.lr_patience:
        state.lr = max(state.lr * cfg.lr_factor, cfg.lr_min)
        state.epochs_since_lr_drop = 0
    return False


def early_stop_check(state: TrainState, cfg: TrainConfig) -> str:
    return "stop" if state.epochs_since_best >= cfg.stop_patience else "continue"


@dataclass
class TrainResult:
    history: List[dict]
    best_epoch: int
    best_val_loss: float
    stats: NormStats
    checkpoint: Optional[Path]
    skipped_batches: int
    elapsed_s: float


def epoch_tag(run_seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([int(run_seed), int(epoch)]).generate_state(1, np.uint64)[0] >> 1)


def _evaluate(model: SegModel, patches, batch_size: int, k: int):
    loss_sum = 0.0
    n = 0
    cm = ConfusionMatrix(np.zeros((k, k), dtype=np.int64))
    with ad.no_grad():
        for x, y in batches(patches, batch_size):
            logits = model(Tensor(x), mode="eval")
            try:
                lv = ad.softmax_cross_entropy(logits, y)
            except EmptyLossError:
                continue
            loss_sum += lv.value * lv.valid_pixel_count
            n += lv.valid_pixel_count
            cm = cm + confusion(np.argmax(logits.data, axis=1), y, k)
    if n == 0:
        raise EmptyLossError("validation stream has no labelled pixels")
    return loss_sum / n, summarize(cm).weighted_f1


def _snapshot(model: SegModel) -> Dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.state().items()}


def _restore(model: SegModel, snap: Dict[str, np.ndarray]) -> None:
    live = model.state()
    for k, v in snap.items():
        live[k][...] = v


def write_history(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(HISTORY_COLUMNS)
        for row in history:
            vals = [repr(float(row[k])) for k in ("lr", "train_loss", "val_loss", "val_weighted_f1")]
            wr.writerow([row["epoch"]] + vals + [int(row["checkpoint_flag"])])


def train(model: SegModel, scenes: Mapping[str, RasterScene], plan: SplitPlan, spec: PatchSpec,
          cfg: TrainConfig, run_seed: int = 0, stats: Optional[NormStats] = None,
          checkpoint_path=None, manifest_extra: Optional[dict] = None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train until early stopping (or ``max_epochs``); the model ends holding the best weights."""
    t0 = time.perf_counter()
    if stats is None:
        stats = compute_norm_stats(resolve_units(scenes, plan, "train", spec.patch_px))
    k = model.config.num_classes
    val = make_validation(scenes, plan, spec, stats)
    if not val:
        raise ConfigError("plan has no validation scenes")
    for p in val:
        bad = (p.labels != IGNORE) & (p.labels >= k)
        if bad.any():
            raise ConfigError(f"validation labels exceed num_classes={k}")
    state = TrainState(lr=cfg.lr0)
    params = dict(model.named_parameters())
    best = _snapshot(model)
    skipped = 0

    def manifest() -> dict:
        extra = {
            "norm_stats": stats.to_dict(),
            "best_epoch": state.best_epoch,
            "best_val_loss": state.best_val_loss,
            "epochs_run": state.epoch,
            "run_seed": int(run_seed),
            "history": state.history,
            "train_config": cfg.to_dict(),
            "patch_spec": asdict(spec),
            "split_plan": plan.to_dict(),
        }
        extra.update(manifest_extra or {})
        return extra

    while state.epoch < cfg.max_epochs:
        state.epoch += 1
        lr_used = state.lr
        patches = make_epoch(scenes, plan, spec, epoch_tag(run_seed, state.epoch), stats)
        loss_sum = 0.0
        n_pix = 0
        n_ok = 0
        for x, y in batches(patches, cfg.batch_size):
            model.zero_grad()
            logits = model(Tensor(x), mode="train")
            try:
                lv = ad.softmax_cross_entropy(logits, y)
            except EmptyLossError:
                skipped += 1
                continue
            lv.backward()
            adam_step(params, {n: t.grad for n, t in params.items()}, state.adam, state.lr,
                      cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            loss_sum += lv.value * lv.valid_pixel_count
            n_pix += lv.valid_pixel_count
            n_ok += 1
        if n_ok == 0:
            raise EmptyLossError(f"epoch {state.epoch}: every batch was empty")
        train_loss = loss_sum / n_pix
        val_loss, val_f1 = _evaluate(model, val, cfg.batch_size, k)
        improved = plateau_step(state, val_loss, cfg)
        row = {"epoch": state.epoch, "lr": lr_used, "train_loss": train_loss, "val_loss": val_loss,
               "val_weighted_f1": val_f1, "checkpoint_flag": bool(improved)}
        state.history.append(row)
        if improved:
            best = _snapshot(model)
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path, manifest())
        log.info("epoch %d lr=%.2e train=%.4f val=%.4f f1=%.4f%s", state.epoch, lr_used, train_loss,
                 val_loss, val_f1, " *" if improved else "")
        if on_epoch is not None:
            on_epoch(row)
        if early_stop_check(state, cfg) == "stop":
            break
    model.zero_grad()
    _restore(model, best)
    ckpt = None
    if checkpoint_path is not None:
        # same weights as the last improvement; the manifest gains the full history
        ckpt = save_checkpoint(model, checkpoint_path, manifest())
    return TrainResult(state.history, state.best_epoch, state.best_val_loss, stats, ckpt, skipped,
                       time.perf_counter() - t0)
