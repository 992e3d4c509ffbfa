import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusionattn import tensor as T
from fusionattn.data import fold_splits, make_folds, model_dims
from fusionattn.models import build_model, config_for, forward, load_checkpoint
from fusionattn.tensor import Tensor
from fusionattn.training import (
    OptimizerState,
    PlateauScheduler,
    TrainConfig,
    adam_step,
    checkpoint_path,
    config_label,
    cross_entropy,
    grid_jobs,
    lr_schedule_step,
    run_grid,
    run_seed,
    train_one,
)

SMALL = dict(gru_hidden=4, heads=2, classifier_hidden=6, dropout=0.1)


def test_cross_entropy_value_and_clamp():
    p = Tensor([[0.5, 0.25, 0.25], [0.1, 0.1, 0.8]])
    assert cross_entropy(p, [0, 2]).item() == pytest.approx(-(math.log(0.5) + math.log(0.8)) / 2)
    assert cross_entropy(Tensor([[1.0, 0.0]]), [1]).item() == pytest.approx(-math.log(1e-12))
    with pytest.raises(ValueError):
        cross_entropy(p, [0, 3])


def test_adam_matches_hand_computation():
    p = Tensor([1.0, -2.0], requires_grad=True)
    state = OptimizerState.for_params([p])
    grads = [np.array([0.5, -1.0]), np.array([0.2, 0.0])]
    m = np.zeros(2)
    v = np.zeros(2)
    expected = np.array([1.0, -2.0])
    for step, g in enumerate(grads, start=1):
        adam_step([p], [g], state, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        expected = expected - 0.01 * (m / (1 - 0.9**step)) / (np.sqrt(v / (1 - 0.999**step)) + 1e-8)
        np.testing.assert_allclose(p.data, expected, rtol=1e-15)
    assert state.step == 2


def test_adam_first_step_is_lr_sized():
    p = Tensor([3.0], requires_grad=True)
    adam_step([p], [np.array([123.0])], OptimizerState.for_params([p]), lr=0.001)
    assert p.data[0] == pytest.approx(3.0 - 0.001, rel=1e-9)


def test_adam_validation():
    p = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError):
        adam_step([p], [np.ones(2)], OptimizerState.for_params([p]), 0.1)
    with pytest.raises(ValueError):
        adam_step([p], [], OptimizerState.for_params([p]), 0.1)


def test_lr_reduced_on_tenth_bad_epoch():
    hist = [1.0] + [1.0] * 9
    assert lr_schedule_step(0.001, hist) == 0.001
    hist.append(1.0)
    assert lr_schedule_step(0.001, hist) == pytest.approx(0.0001)
    # counter restarts after a reduction
    assert lr_schedule_step(0.0001, hist + [1.0]) == 0.0001
    # strict improvement resets
    assert lr_schedule_step(0.001, [1.0] * 9 + [0.5] + [0.6] * 9) == 0.001
    with pytest.raises(ValueError):
        lr_schedule_step(0.1, [])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 2), min_size=1, max_size=40), st.integers(1, 5))
def test_incremental_scheduler_agrees_with_history_form(losses, patience):
    sched = PlateauScheduler(1.0, patience, 0.5)
    lr = 1.0
    for i, loss in enumerate(losses):
        new = sched.step(loss)
        assert new == lr_schedule_step(lr, losses[: i + 1], patience, 0.5)
        lr = new


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_factor=1.5)
    with pytest.raises(ValueError):
        TrainConfig(lr_patience=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


@pytest.fixture(scope="module")
def small_splits(synth_small):
    fold = make_folds(synth_small, k=3, seed=0)[0]
    return synth_small, fold_splits(synth_small, fold)


def test_train_one_learns_and_is_deterministic(small_splits):
    manifest, splits = small_splits
    cfg = config_for("self", "tva", model_dims(manifest.schema), **SMALL)
    tc = TrainConfig(max_epochs=8, early_stop_patience=3, seed=5)
    a = train_one(build_model(cfg, 1), splits, tc)
    b = train_one(build_model(cfg, 1), splits, tc)
    assert (a.test_wa, a.test_uwa, a.epochs) == (b.test_wa, b.test_uwa, b.epochs)
    assert a.confusion.sum() == len(splits["test"])
    assert a.history[0]["train_loss"] > a.history[-1]["train_loss"]
    assert a.val_uwa == max(h["dev_uwa"] for h in a.history)


def test_early_stopping_stops(small_splits):
    manifest, splits = small_splits
    cfg = config_for("self", "t", model_dims(manifest.schema), **SMALL)
    r = train_one(build_model(cfg, 0), splits, TrainConfig(max_epochs=50, early_stop_patience=1, learning_rate=1e-9))
    assert r.epochs <= 3


def test_train_one_rejects_bad_splits(small_splits):
    manifest, splits = small_splits
    cfg = config_for("self", "t", model_dims(manifest.schema), **SMALL)
    with pytest.raises(ValueError, match="overlap"):
        train_one(build_model(cfg), dict(splits, dev=splits["train"]), TrainConfig(max_epochs=1))
    with pytest.raises(ValueError, match="missing"):
        train_one(build_model(cfg), {"train": splits["train"]}, TrainConfig(max_epochs=1))


def test_seeds_and_labels():
    assert run_seed(0, 1, 2) == run_seed(0, 1, 2)
    assert len({run_seed(0, f, r) for f in range(5) for r in range(10)}) == 50
    cfg = config_for("cross-nosp", "va")
    assert config_label(cfg) == "cross-nosp:va"
    jobs = grid_jobs([cfg], 5, 10, 0)
    assert len(jobs) == 50 and len({(j.fold, j.seed) for j in jobs}) == 50


def test_run_grid_parallel_matches_serial(synth_small, tmp_path):
    dims = model_dims(synth_small.schema)
    cfgs = [config_for("self", "ta", dims, **SMALL), config_for("cross", "ta", dims, **SMALL)]
    tc = TrainConfig(max_epochs=2)
    serial = run_grid(cfgs, synth_small, folds=2, seeds_per_fold=1, base_seed=3, train_cfg=tc, checkpoint_dir=tmp_path)
    parallel = run_grid(cfgs, synth_small, folds=2, seeds_per_fold=1, base_seed=3, train_cfg=tc, jobs=2)
    key = lambda r: (r.config_name, r.fold, r.seed, r.epochs, r.test_wa, r.test_uwa, r.val_uwa)  # noqa: E731
    assert [key(r) for r in serial] == [key(r) for r in parallel]
    assert len(serial) == 4
    r = serial[0]
    ck = load_checkpoint(checkpoint_path(tmp_path, r.config_name, r.fold, r.seed))
    assert ck.config.name == "self"


def test_run_grid_skip(synth_small):
    dims = model_dims(synth_small.schema)
    cfg = config_for("self", "t", dims, **SMALL)
    out = run_grid([cfg], synth_small, folds=2, seeds_per_fold=2, train_cfg=TrainConfig(max_epochs=1), skip=lambda j: j.fold == 0)
    assert {r.fold for r in out} == {1} and len(out) == 2


def test_gradients_flow_to_every_parameter(small_splits):
    manifest, splits = small_splits
    model = build_model(config_for("cross+self", "tva", model_dims(manifest.schema), **SMALL), 0)
    batch = splits["train"].batch(np.arange(4))
    with T.Tape() as tape:
        loss = cross_entropy(forward(model, batch, training=True, rng=np.random.default_rng(0)), splits["train"].labels[:4])
    tape.backward(loss)
    for name, p in model.named_parameters():
        assert p.grad is not None and np.any(p.grad != 0), name
