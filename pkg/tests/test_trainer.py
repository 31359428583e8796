import csv
import math

import numpy as np
import pytest
from scipy.stats import spearmanr

from seaseg.autodiff import Tensor
from seaseg.config import RunConfig
from seaseg.errors import ConfigError, EmptyLossError, NonFiniteError
from seaseg.metrics import aggregate
from seaseg.model import ModelConfig, build_model, load_checkpoint
from seaseg.pipeline import run_repetitions
from seaseg.raster import IGNORE
from seaseg.sampler import Patch, PatchSpec, SplitPlan
from seaseg.simsar import SimSceneSpec, generate_scene
from seaseg.trainer import (
    AdamState,
    TrainConfig,
    TrainState,
    adam_step,
    early_stop_check,
    plateau_step,
    train,
    write_history,
)

# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_scalar_oracle():
    p = Tensor(np.zeros(1))
    st = AdamState()
    adam_step({"w": p}, {"w": np.ones(1)}, st, 1e-5)
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 1e-5
    m = (1 - b1) * 1.0
    v = (1 - b2) * 1.0
    mhat = m / (1 - b1)
    vhat = v / (1 - b2)
    expected = 0.0 - lr * mhat / (math.sqrt(vhat) + eps)
    assert abs(p.data[0] - expected) <= 1e-12
    assert p.data[0] == pytest.approx(-9.99999e-6, rel=1e-6)
    assert st.step == 1


def test_adam_multi_step_oracle():
    rng = np.random.default_rng(0)
    grads = rng.standard_normal((6, 3))
    p = Tensor(np.array([0.5, -1.0, 2.0]))
    st = AdamState()
    ref = p.data.copy()
    m = np.zeros(3)
    v = np.zeros(3)
    for t, g in enumerate(grads, 1):
        adam_step({"w": p}, {"w": g.copy()}, st, 1e-3)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 1e-3 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=0, atol=1e-12)


def test_adam_zero_gradient_leaves_params_and_decays_moments():
    p = Tensor(np.array([1.0, 2.0]))
    st = AdamState()
    adam_step({"w": p}, {"w": np.array([1.0, -1.0])}, st, 1e-3)
    after_one = p.data.copy()
    m1, v1 = st.m["w"].copy(), st.v["w"].copy()
    for _ in range(3):
        adam_step({"w": p}, {"w": np.zeros(2)}, st, 0.0)
    assert np.array_equal(p.data, after_one)
    assert np.allclose(st.m["w"], m1 * 0.9 ** 3) and np.allclose(st.v["w"], v1 * 0.999 ** 3)
    q = Tensor(np.array([3.0]))
    adam_step({"q": q}, {"q": np.zeros(1)}, AdamState(), 1e-3)
    assert q.data[0] == 3.0


def test_adam_nan_gradient_names_parameter():
    p = Tensor(np.zeros(2))
    with pytest.raises(NonFiniteError, match="decoder.classifier.weight"):
        adam_step({"decoder.classifier.weight": p}, {"decoder.classifier.weight": np.array([0.0, np.nan])},
                  AdamState(), 1e-3)
    assert not p.data.any()


def test_adam_skips_params_without_grad():
    a, b = Tensor(np.ones(1)), Tensor(np.ones(1))
    adam_step({"a": a, "b": b}, {"a": np.ones(1), "b": None}, AdamState(), 1e-2)
    assert a.data[0] < 1 and b.data[0] == 1


# ---------------------------------------------------------------------------
# plateau schedule and early stopping
# ---------------------------------------------------------------------------


def _run(losses, cfg=None, lr=1e-5):
    cfg = cfg or TrainConfig()
    st = TrainState(lr=lr)
    lrs = []
    for loss in losses:
        st.epoch += 1
        plateau_step(st, loss, cfg)
        lrs.append(st.lr)
    return st, lrs


def test_plateau_drop_after_five_stagnant_epochs():
    _, lrs = _run([1.0, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9])
    assert lrs[:6] == [1e-5] * 6
    assert lrs[6] == pytest.approx(1e-6)


def test_plateau_continuous_improvement_keeps_lr():
    st, lrs = _run([1.0 - 0.01 * i for i in range(30)])
    assert lrs == [1e-5] * 30
    assert st.best_epoch == 30


def test_plateau_floor():
    _, lrs = _run([1.0] * 12, lr=1e-8)
    assert lrs == [1e-8] * 12


def test_lr_trajectory_is_floored_step_function():
    st, lrs = _run([1.0] + [2.0] * 80)
    allowed = {1e-5 * 10.0 ** -k for k in range(4)}
    assert all(any(math.isclose(x, a, rel_tol=1e-9) for a in allowed) for x in lrs)
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert lrs[-1] == 1e-8


def test_improvement_is_strict():
    st, _ = _run([1.0, 1.0])
    assert st.epochs_since_best == 1 and st.best_epoch == 1


def test_non_finite_validation_loss():
    with pytest.raises(NonFiniteError):
        plateau_step(TrainState(), float("nan"), TrainConfig())


def test_early_stop_boundaries():
    cfg = TrainConfig()
    st, _ = _run([1.0] + [1.0] * 19, cfg)
    assert st.epochs_since_best == 19 and early_stop_check(st, cfg) == "continue"
    plateau_step(st, 1.0, cfg)
    assert early_stop_check(st, cfg) == "stop"
    st2, _ = _run([1.0] + [1.0] * 19 + [0.5], cfg)
    assert st2.epochs_since_best == 0 and early_stop_check(st2, cfg) == "continue"


@pytest.mark.parametrize("bad", [dict(lr_min=1e-3), dict(lr_patience=0), dict(stop_patience=0), dict(lr_factor=1.0),
                                 dict(batch_size=0), dict(seeds=[])])
def test_train_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


# ---------------------------------------------------------------------------
# the epoch loop on a small synthetic task
# ---------------------------------------------------------------------------

SPEC = PatchSpec(patch_px=64, patches_per_scene=1, seed=0)
PLAN = SplitPlan.simple([f"s{i}" for i in range(8)], ["s8"], ["s9"])


@pytest.fixture(scope="module")
def tiny_scenes():
    spec = SimSceneSpec(width=64, height=64, n_regions=4, speckle_looks=5.0)
    return {f"s{i}": generate_scene(spec, seed=i, scene_id=f"s{i}").scene for i in range(10)}


def _cfg(**kw):
    base = dict(lr0=1e-3, batch_size=4, max_epochs=50, stop_patience=50, lr_patience=50)
    base.update(kw)
    return TrainConfig(**base)


def _train(scenes, seed=0, ckpt=None, **kw):
    m = build_model(ModelConfig(width=0.125, seed=seed))
    r = train(m, scenes, PLAN, PatchSpec(patch_px=64, patches_per_scene=1, seed=seed), _cfg(**kw),
              run_seed=seed, checkpoint_path=ckpt)
    return m, r


@pytest.fixture(scope="module")
def tiny_run(tiny_scenes, tmp_path_factory):
    ckpt = tmp_path_factory.mktemp("run") / "checkpoint"
    m, r = _train(tiny_scenes, ckpt=ckpt)
    return m, r, ckpt


def test_tiny_task_reaches_low_train_loss(tiny_run):
    _, r, _ = tiny_run
    assert len(r.history) <= 50
    assert min(h["train_loss"] for h in r.history) < 0.1


def test_history_and_checkpoint_bookkeeping(tiny_run, tmp_path):
    model, r, ckpt = tiny_run
    hist = r.history
    assert [h["epoch"] for h in hist] == list(range(1, len(hist) + 1))
    vals = [h["val_loss"] for h in hist]
    best = int(np.argmin(vals)) + 1
    loaded, manifest = load_checkpoint(ckpt)
    assert manifest["best_epoch"] == best == r.best_epoch
    assert manifest["best_val_loss"] == min(vals) == r.best_val_loss
    assert manifest["epochs_run"] == len(hist)
    assert set(manifest["norm_stats"]["provenance"]) == {f"s{i}" for i in range(8)}
    flags = [h["checkpoint_flag"] for h in hist]
    running = np.minimum.accumulate(vals)
    assert flags == [i == 0 or vals[i] < running[i - 1] for i in range(len(vals))]
    a, b = model.state(), loaded.state()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    write_history(hist, tmp_path / "h.csv")
    with open(tmp_path / "h.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "lr", "train_loss", "val_loss", "val_weighted_f1", "checkpoint_flag"]
    assert len(rows) == len(hist) + 1
    assert [float(x[3]) for x in rows[1:]] == vals
    assert [float(x[4]) for x in rows[1:]] == [h["val_weighted_f1"] for h in hist]


def test_rerun_is_bitwise_identical(tiny_scenes):
    m1, r1 = _train(tiny_scenes, seed=3, max_epochs=3)
    m2, r2 = _train(tiny_scenes, seed=3, max_epochs=3)
    assert r1.history == r2.history
    a, b = m1.state(), m2.state()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_loss_trend_over_first_epochs(tiny_scenes):
    epochs, losses = [], []
    for seed in range(5):
        _, r = _train(tiny_scenes, seed=seed, max_epochs=10)
        tl = [h["train_loss"] for h in r.history]
        assert spearmanr(range(10), tl).statistic < 0
        epochs += list(range(10))
        losses += tl
    res = spearmanr(epochs, losses)
    assert res.statistic < 0 and res.pvalue < 0.05


def test_early_stopping_ends_the_loop(tiny_scenes):
    _, r = _train(tiny_scenes, seed=1, max_epochs=50, stop_patience=1, lr0=1e-8, lr_min=1e-8)
    assert len(r.history) < 50
    assert r.history[-1]["epoch"] - r.best_epoch == 1


def test_empty_batches_skipped_then_epoch_abort(tiny_scenes, monkeypatch):
    import seaseg.trainer as tr

    real = tr.make_epoch

    def half_empty(*a, **kw):
        ps = real(*a, **kw)
        blank = np.full_like(ps[0].labels, IGNORE)
        return [Patch(p.inputs, blank, p.origin, 1.0) if i < 4 else p for i, p in enumerate(ps)]

    monkeypatch.setattr(tr, "make_epoch", half_empty)
    _, r = _train(tiny_scenes, max_epochs=2)
    assert r.skipped_batches == 2

    def all_empty(*a, **kw):
        return [Patch(p.inputs, np.full_like(p.labels, IGNORE), p.origin, 1.0) for p in real(*a, **kw)]

    monkeypatch.setattr(tr, "make_epoch", all_empty)
    with pytest.raises(EmptyLossError, match="every batch"):
        _train(tiny_scenes, max_epochs=1)


def test_validation_labels_checked_against_classes(tiny_scenes):
    bad = dict(tiny_scenes)
    s8 = bad["s8"]
    labels = s8.labels.copy()
    labels[0, 0] = 4
    bad["s8"] = type(s8)(s8.scene_id, s8.channels, s8.valid_mask, labels, s8.pixel_spacing_m, s8.provenance)
    with pytest.raises(ConfigError, match="num_classes"):
        _train(bad, max_epochs=1)


# ---------------------------------------------------------------------------
# repetitions
# ---------------------------------------------------------------------------


def test_aggregate_examples():
    assert aggregate([0.6, 0.7, 0.8, 0.9, 1.0]) == {"min": 0.6, "median": 0.8, "max": 1.0}
    assert aggregate([0.42]) == {"min": 0.42, "median": 0.42, "max": 0.42}
    with pytest.raises(ValueError):
        aggregate([])


def test_run_repetitions_isolates_failures(tiny_scenes, tmp_path):
    cfg = RunConfig.from_dict({
        "scheme": "ice_water",
        "plan": {"train": [f"s{i}" for i in range(8)], "validation": ["s8"], "test": ["s9"]},
        "model": {"width": 0.125},
        "train": {"lr0": 1e-3, "batch_size": 4, "max_epochs": 2},
        "patch": {"patch_px": 64, "patches_per_scene": 1},
    })
    out = run_repetitions(cfg, tiny_scenes, tmp_path, seeds=[0, -1, 2])
    assert set(out["failures"]) == {-1}
    assert len(out["rows"]) == 2
    agg = out["aggregate"][0]
    assert agg["scene_id"] == "s9" and agg["n_seeds"] == 2
    base = tmp_path / "runs" / "aspp"
    for name in ("metrics.csv", "aggregate.csv", "repetitions.json"):
        assert (base / name).exists()
    assert (base / "seed_0" / "checkpoint" / "manifest.json").exists()
    assert (base / "seed_2" / "history.csv").exists()
