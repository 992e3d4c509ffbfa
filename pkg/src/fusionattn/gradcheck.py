"""Finite-difference verification of every differentiable op, layer and a tiny model."""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .layers import BiGRU, Classifier, MultiHeadAttention, TimeConv, classify, gru_recurrence, temporal_average
from .models import ModalityDims, build_model, config_for, forward
from .tensor import Tensor
from .training import cross_entropy

DEFAULT_STEP = 1e-4
DEFAULT_TOLERANCE = 1e-5

TINY_DIMS = {
    "audio": ModalityDims(6, 8, 4),
    "vision": ModalityDims(4, 8, 3),
    "text": ModalityDims(5, 8, None),
}


@dataclass
class CheckResult:
    name: str
    rel_error: float
    tolerance: float
    seconds: float
    n_values: int

    @property
    def passed(self) -> bool:
        return bool(self.rel_error < self.tolerance)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.name:<22} rel_err={self.rel_error:.3e} tol={self.tolerance:.0e} n={self.n_values} ({self.seconds:.2f}s)"


def check_gradients(f: Callable[[], Tensor], leaves: list[Tensor], h: float = DEFAULT_STEP) -> tuple[float, int]:
    """Worst per-leaf relative error between tape gradients and central differences."""
    for leaf in leaves:
        leaf.grad = None
    with T.Tape() as tape:
        out = f()
    tape.backward(out)
    worst = 0.0
    n = 0
    for leaf in leaves:
        auto = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        numeric = T.finite_diff_grad(lambda _: f(), leaf, h).data
        worst = max(worst, T.relative_error(auto, numeric))
        n += leaf.size
    return worst, n


def _projected(out_fn: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    # scalarize through fixed random weights so every output element matters
    cache: dict[str, Tensor] = {}

    def f() -> Tensor:
        y = out_fn()
        if "w" not in cache:
            cache["w"] = Tensor(rng.standard_normal(y.shape))
        return T.sum(T.hadamard(y, cache["w"]))

    return f


def _param(rng, *shape, scale=1.0, positive=False) -> Tensor:
    data = rng.standard_normal(shape) * scale
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data, requires_grad=True)


def _cases(seed: int) -> dict[str, Callable[[], tuple[Callable[[], Tensor], list[Tensor]]]]:
    def op_case(name, build):
        def make():
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            out_fn, leaves = build(rng)
            return _projected(out_fn, rng), leaves

        return make

    cases = {}

    def register(name):
        def deco(build):
            cases[name] = op_case(name, build)
            return build

        return deco

    @register("matmul")
    def _mm(rng):
        a, b = _param(rng, 3, 4), _param(rng, 4, 2)
        return (lambda: T.matmul(a, b)), [a, b]

    @register("matmul_batched")
    def _mmb(rng):
        a, b, c = _param(rng, 2, 3, 4), _param(rng, 4, 5), _param(rng, 2, 5, 3)
        return (lambda: T.matmul(T.matmul(a, b), c)), [a, b, c]

    @register("matmul_left")
    def _mml(rng):
        a, b = _param(rng, 3, 4), _param(rng, 2, 4, 5)
        return (lambda: T.matmul(a, b)), [a, b]

    @register("add")
    def _add(rng):
        a, b = _param(rng, 3, 4), _param(rng, 3, 4)
        return (lambda: T.add(a, b)), [a, b]

    @register("sub")
    def _sub(rng):
        a, b = _param(rng, 3, 4), _param(rng, 3, 4)
        return (lambda: T.sub(a, b)), [a, b]

    @register("add_bias")
    def _bias(rng):
        a, b, c = _param(rng, 2, 3, 4), _param(rng, 4), _param(rng, 3, 1)
        return (lambda: T.add_bias(T.add_bias(a, b), c)), [a, b, c]

    @register("hadamard")
    def _had(rng):
        a, b = _param(rng, 3, 4), _param(rng, 3, 4)
        return (lambda: T.hadamard(a, b)), [a, b]

    @register("scale")
    def _scale(rng):
        a = _param(rng, 3, 4)
        return (lambda: T.scale(a, -1.7)), [a]

    @register("sigmoid")
    def _sig(rng):
        a = _param(rng, 3, 4)
        return (lambda: T.sigmoid(a)), [a]

    @register("tanh")
    def _tanh(rng):
        a = _param(rng, 3, 4)
        return (lambda: T.tanh(a)), [a]

    @register("log")
    def _log(rng):
        a = _param(rng, 3, 4, positive=True)
        return (lambda: T.log(a)), [a]

    @register("softmax")
    def _softmax(rng):
        a = _param(rng, 2, 3, 5)
        return (lambda: T.softmax(a, axis=-1)), [a]

    @register("mean")
    def _mean(rng):
        a = _param(rng, 2, 5, 3)
        return (lambda: T.mean(a, axis=1)), [a]

    @register("mean_std")
    def _mean_std(rng):
        a = _param(rng, 6, 12)
        return (lambda: T.concat(list(T.mean_std(a, axis=0)), axis=0)), [a]

    @register("concat")
    def _concat(rng):
        a, b = _param(rng, 3, 2), _param(rng, 3, 4)
        return (lambda: T.concat([a, b], axis=1)), [a, b]

    @register("stack")
    def _stack(rng):
        a, b = _param(rng, 3, 2), _param(rng, 3, 2)
        return (lambda: T.stack([a, b], axis=1)), [a, b]

    @register("reshape_transpose")
    def _rt(rng):
        a = _param(rng, 2, 3, 4)
        return (lambda: T.transpose(T.reshape(a, (2, 3, 2, 2)), (0, 2, 1, 3))), [a]

    @register("getitem")
    def _gi(rng):
        a = _param(rng, 4, 5)
        return (lambda: T.getitem(a, (slice(1, 3), slice(None, None, 2)))), [a]

    @register("pick")
    def _pick(rng):
        a = _param(rng, 3, 4)
        return (lambda: T.pick(a, [0, 3, 1])), [a]

    @register("time_conv")
    def _conv(rng):
        layer = TimeConv(8, 4, seed=seed)
        x = _param(rng, 2, 8, 3)
        return (lambda: layer(x)), [x] + layer.parameters()

    @register("gru_recurrence")
    def _gru_rec(rng):
        xp, w, b = _param(rng, 2, 5, 9), _param(rng, 9, 3, scale=0.5), _param(rng, 9, scale=0.5)
        return (lambda: T.concat([gru_recurrence(xp, w, b), gru_recurrence(xp, w, b, reverse=True)], axis=-1)), [xp, w, b]

    @register("bigru")
    def _bigru(rng):
        layer = BiGRU(3, 4, seed=seed)
        for p in layer.parameters():
            p.data += rng.normal(scale=0.1, size=p.shape)
        x = _param(rng, 2, 5, 3)
        return (lambda: layer(x)), [x] + layer.parameters()

    @register("mha")
    def _mha(rng):
        layer = MultiHeadAttention(4, 2, dropout=0.0, seed=seed)
        q, kv = _param(rng, 2, 2, 4), _param(rng, 2, 3, 4)
        return (lambda: layer(q, kv)), [q, kv] + layer.parameters()

    @register("temporal_average")
    def _tavg(rng):
        x = _param(rng, 2, 5, 3)
        return (lambda: temporal_average(x)), [x]

    @register("classifier_head")
    def _head(rng):
        layer = Classifier(8, 5, 7, seed=seed)
        v = _param(rng, 2, 3, 4)
        return (lambda: classify(layer, v)), [v] + layer.parameters()

    def _ce(rng):
        logits = _param(rng, 4, 7)
        labels = [0, 6, 3, 3]
        return (lambda: cross_entropy(T.softmax(logits), labels)), [logits]

    def ce_case():
        fn, leaves = _ce(np.random.default_rng(seed))
        return fn, leaves

    cases["cross_entropy"] = ce_case

    for family in ("self", "cross"):
        cases[f"model:{family}"] = _model_case(family, seed)
    return cases


def _model_case(family: str, seed: int):
    def make():
        cfg = config_for(family, "tva", TINY_DIMS, gru_hidden=4, heads=2, classifier_hidden=4, dropout=0.0)
        model = build_model(cfg, seed)
        rng = np.random.default_rng([seed, 99])
        batch = {m: rng.standard_normal((2, d.seq_len, d.width)) for m, d in TINY_DIMS.items()}
        labels = [1, 5]
        return (lambda: cross_entropy(forward(model, batch), labels)), model.parameters()

    return make


CHECK_NAMES = tuple(_cases(0))


def run_checks(
    tolerance: float = DEFAULT_TOLERANCE, h: float = DEFAULT_STEP, seed: int = 0, only: list[str] | None = None
) -> list[CheckResult]:
    results = []
    for name, make in _cases(seed).items():
        if only and name not in only:
            continue
        t0 = time.perf_counter()
        fn, leaves = make()
        err, n = check_gradients(fn, leaves, h)
        results.append(CheckResult(name, err, tolerance, time.perf_counter() - t0, n))
    return results
