"""Cross-entropy training with Adam, plateau LR decay, early stopping on dev
UWA, and the fold x seed experiment grid."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import DatasetManifest, Fold, SplitArrays, fold_splits, make_folds
from .models import FusionModel, ModelConfig, build_model, forward, save_checkpoint
from .stats import confusion_matrix, unweighted_accuracy, weighted_accuracy
from .tensor import Tensor

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    lr_factor: float = 0.1
    lr_patience: int = 10
    early_stop_patience: int = 10
    max_epochs: int = 200
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if not 0.0 < self.lr_factor < 1.0:
            raise ValueError(f"lr_factor must be in (0, 1), got {self.lr_factor}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")


@dataclass
class RunResult:
    config_name: str
    fold: int
    seed: int
    epochs: int
    val_uwa: float
    test_wa: float
    test_uwa: float
    confusion: np.ndarray
    history: list[dict] = field(default_factory=list, repr=False)


def cross_entropy(probabilities: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-probability of the true class (probabilities clamped at 1e-12)."""
    labels = np.asarray(labels, dtype=np.intp)
    n_classes = probabilities.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in 0..{n_classes - 1}, got {labels.tolist()}")
    picked = T.log(T.pick(probabilities, labels), floor=PROB_FLOOR)
    return T.scale(T.mean(picked), -1.0)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> OptimizerState:
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ValueError("adam_step: params, grads and optimizer state differ in length")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != parameter shape {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# LR on plateau


def lr_schedule_step(current_lr: float, val_loss_history: Sequence[float], patience: int = 10, factor: float = 0.1) -> float:
    """LR after the latest epoch: multiplied by ``factor`` when that epoch completes
    ``patience`` consecutive epochs without strict improvement on the best loss.
    The counter restarts after each reduction."""
    if not val_loss_history:
        raise ValueError("lr_schedule_step: empty validation-loss history")
    best = math.inf
    bad = 0
    reduce_now = False
    for loss in val_loss_history:
        reduce_now = False
        if loss < best:
            best = loss
            bad = 0
        else:
            bad += 1
            if bad >= patience:
                reduce_now = True
                bad = 0
    return current_lr * factor if reduce_now else current_lr


class PlateauScheduler:
    """Incremental form of :func:`lr_schedule_step`."""

    def __init__(self, lr: float, patience: int = 10, factor: float = 0.1):
        self.lr, self.patience, self.factor = lr, patience, factor
        self.best = math.inf
        self.bad = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr *= self.factor
                self.bad = 0
        return self.lr


# ---------------------------------------------------------------------------


def predict(model: FusionModel, split: SplitArrays, batch_size: int = 64) -> tuple[np.ndarray, float]:
    """Argmax predictions and mean cross-entropy over ``split`` (eval mode, no tape)."""
    preds = np.empty(len(split), dtype=np.int64)
    loss_sum = 0.0
    for start in range(0, len(split), batch_size):
        idx = np.arange(start, min(start + batch_size, len(split)))
        probs = forward(model, split.batch(idx), training=False).data
        preds[idx] = probs.argmax(axis=1)
        p_true = np.maximum(probs[np.arange(idx.size), split.labels[idx]], PROB_FLOOR)
        loss_sum -= float(np.log(p_true).sum())
    return preds, loss_sum / len(split)


def evaluate(model: FusionModel, split: SplitArrays, n_classes: int = 7) -> tuple[np.ndarray, float]:
    preds, loss = predict(model, split)
    return confusion_matrix(split.labels, preds, n_classes), loss


def snapshot(model: FusionModel) -> list[np.ndarray]:
    return [p.data.copy() for p in model.parameters()]


def restore(model: FusionModel, params: Sequence[np.ndarray]) -> None:
    for p, saved in zip(model.parameters(), params):
        p.data = saved.copy()


def train_step(model: FusionModel, batch: Mapping[str, np.ndarray], labels: np.ndarray, state: OptimizerState,
               lr: float, cfg: TrainConfig, rng: np.random.Generator) -> float:
    params = model.parameters()
    for p in params:
        p.grad = None
    with T.Tape() as tape:
        loss = cross_entropy(forward(model, batch, training=True, rng=rng), labels)
    tape.backward(loss)
    adam_step(params, [p.grad for p in params], state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return loss.item()


def train_one(
    model: FusionModel,
    datasets: Mapping[str, SplitArrays],
    cfg: TrainConfig,
    config_name: str | None = None,
    fold: int = 0,
) -> RunResult:
    """Train until dev UWA stalls for ``early_stop_patience`` epochs, then test the best checkpoint."""
    for name in ("train", "dev", "test"):
        if name not in datasets or len(datasets[name]) == 0:
            raise ValueError(f"train_one: split {name!r} is empty or missing")
    train, dev, test = datasets["train"], datasets["dev"], datasets["test"]
    overlap = (set(train.ids) & set(dev.ids)) | (set(train.ids) & set(test.ids)) | (set(dev.ids) & set(test.ids))
    if overlap:
        raise ValueError(f"train_one: splits overlap on {sorted(overlap)[:5]}")
    n_classes = model.config.n_classes
    shuffle_rng = np.random.default_rng([cfg.seed, 0])
    dropout_rng = np.random.default_rng([cfg.seed, 1])
    state = OptimizerState.for_params(model.parameters())
    sched = PlateauScheduler(cfg.learning_rate, cfg.lr_patience, cfg.lr_factor)
    lr = cfg.learning_rate

    best_uwa = -1.0
    best_params = snapshot(model)
    best_epoch = 0
    stale = 0
    history = []
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            losses.append(train_step(model, train.batch(idx), train.labels[idx], state, lr, cfg, dropout_rng) * idx.size)
        cm, dev_loss = evaluate(model, dev, n_classes)
        dev_uwa = unweighted_accuracy(cm)
        history.append({"epoch": epoch, "lr": lr, "train_loss": float(np.sum(losses) / len(train)), "dev_loss": dev_loss, "dev_uwa": dev_uwa})
        log.debug("epoch %d lr %.2g train %.4f dev %.4f uwa %.3f", epoch, lr, history[-1]["train_loss"], dev_loss, dev_uwa)
        if dev_uwa > best_uwa:
            best_uwa, best_epoch, stale = dev_uwa, epoch, 0
            best_params = snapshot(model)
        else:
            stale += 1
        lr = sched.step(dev_loss)
        if stale >= cfg.early_stop_patience:
            break

    restore(model, best_params)
    cm, _ = evaluate(model, test, n_classes)
    return RunResult(
        config_name=config_name or model.config.name,
        fold=fold,
        seed=cfg.seed,
        epochs=epoch,
        val_uwa=best_uwa,
        test_wa=weighted_accuracy(cm),
        test_uwa=unweighted_accuracy(cm),
        confusion=cm,
        history=history,
    )


# ---------------------------------------------------------------------------
# experiment grid


def run_seed(base_seed: int, fold: int, repetition: int) -> int:
    return int(np.random.SeedSequence([base_seed, fold, repetition]).generate_state(1)[0])


def config_label(config: ModelConfig) -> str:
    """e.g. ``cross-nosp:tva`` (family, then text/vision/audio letters)."""
    code = "".join(c for c, m in (("t", "text"), ("v", "vision"), ("a", "audio")) if m in config.modalities)
    return f"{config.name}:{code}"


@dataclass(frozen=True)
class GridJob:
    config: ModelConfig
    fold: int
    repetition: int
    seed: int


_SPLIT_CACHE: dict = {}


def _job_splits(manifest: DatasetManifest, folds: Sequence[Fold], fold: int, modalities) -> dict[str, SplitArrays]:
    f = folds[fold]
    key = (str(manifest.path), len(manifest.records), fold, tuple(modalities), tuple(f.train), tuple(f.test))
    if key not in _SPLIT_CACHE:
        if len(_SPLIT_CACHE) > 8:
            _SPLIT_CACHE.clear()
        _SPLIT_CACHE[key] = fold_splits(manifest, folds[fold], modalities)
    return _SPLIT_CACHE[key]


def checkpoint_path(root: str | Path, label: str, fold: int, seed: int) -> Path:
    safe = label.replace("+", "plus").replace(":", "_")
    return Path(root) / safe / f"fold{fold}_seed{seed}"


def _run_job(
    job: GridJob, manifest: DatasetManifest, folds: Sequence[Fold], train_cfg: TrainConfig, checkpoint_dir=None
) -> RunResult:
    splits = _job_splits(manifest, folds, job.fold, job.config.modalities)
    model = build_model(job.config, job.seed)
    cfg = TrainConfig(**{**train_cfg.__dict__, "seed": job.seed})
    label = config_label(job.config)
    result = train_one(model, splits, cfg, label, job.fold)
    result.history = []
    if checkpoint_dir is not None:
        save_checkpoint(model, checkpoint_path(checkpoint_dir, label, job.fold, job.seed))
    return result


def grid_jobs(configs: Iterable[ModelConfig], folds: int, repeats: int, base_seed: int) -> list[GridJob]:
    return [
        GridJob(c, f, r, run_seed(base_seed, f, r))
        for c in configs
        for f in range(folds)
        for r in range(repeats)
    ]


def run_grid(
    model_configs: Sequence[ModelConfig],
    dataset: DatasetManifest,
    folds: int = 5,
    seeds_per_fold: int = 10,
    base_seed: int = 0,
    train_cfg: TrainConfig = TrainConfig(),
    jobs: int = 1,
    skip: Callable[[GridJob], bool] | None = None,
    on_result: Callable[[RunResult], None] | None = None,
    checkpoint_dir: str | Path | None = None,
) -> list[RunResult]:
    """Train every (config, fold, repetition) cell; results come back in job order."""
    fold_list = make_folds(dataset, k=folds, seed=base_seed)
    todo = [j for j in grid_jobs(model_configs, folds, seeds_per_fold, base_seed) if not (skip and skip(j))]
    results: list[RunResult] = []
    if jobs <= 1:
        for job in todo:
            r = _run_job(job, dataset, fold_list, train_cfg, checkpoint_dir)
            if on_result:
                on_result(r)
            results.append(r)
        return results
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_run_job, job, dataset, fold_list, train_cfg, checkpoint_dir) for job in todo]
        # collect in submission order so output is independent of completion order
        for fut in futures:
            r = fut.result()
            if on_result:
                on_result(r)
            results.append(r)
    return results
