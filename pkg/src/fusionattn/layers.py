"""Differentiable building blocks: time-axis convolution, bi-GRU, multi-head
attention, temporal averaging and the statistical-pooling classifier head.

Every layer accepts either a single sequence ``(t, d)`` or a batch ``(B, t, d)``.
"""

from __future__ import annotations

import math
import zlib
from pathlib import Path
from typing import Iterator

import numpy as np

from . import ftns
from . import tensor as T
from ._kernels import gru_backward, gru_forward
from .tensor import ShapeError, Tensor


def module_rng(seed: int, path: str) -> np.random.Generator:
    """Independent generator per parameter path, so ablated models match sub-graphs exactly."""
    return np.random.default_rng([seed, zlib.crc32(path.encode())])


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Module:
    """Minimal parameter container: ordered parameters plus ordered children."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, t: Tensor) -> Tensor:
        t.name = name
        self._params[name] = t
        return t

    def add_child(self, name: str, m: Module) -> Module:
        self._children[name] = m
        return m

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise ShapeError(f"expected (t, d) or (B, t, d), got {x.shape}")
    return x, False


def _unbatched(x: Tensor, squeeze: bool) -> Tensor:
    return T.reshape(x, x.shape[1:]) if squeeze else x


# ---------------------------------------------------------------------------


class TimeConv(Module):
    """Kernel-size-1 convolution whose channels are time steps.

    ``out[t'] = b[t'] + sum_k W[t', k] * x[k]``: a learned linear map over the
    time axis; the feature width is unchanged.
    """

    def __init__(self, t_in: int, t_out: int, seed: int = 0, path: str = "conv"):
        super().__init__()
        rng = module_rng(seed, path)
        self.t_in, self.t_out = t_in, t_out
        self.weight = self.add_param("weight", uniform_init(rng, (t_out, t_in), t_in))
        self.bias = self.add_param("bias", zeros_param((t_out, 1)))

    def __call__(self, x: Tensor) -> Tensor:
        return time_conv(self, x)


def time_conv(p: TimeConv, x: Tensor) -> Tensor:
    if x.ndim not in (2, 3) or x.shape[-2] != p.t_in:
        raise ShapeError(f"time_conv: expected sequence length {p.t_in}, got input {x.shape}")
    return T.add_bias(T.matmul(p.weight, x), p.bias)


# ---------------------------------------------------------------------------


def gru_recurrence(xp: Tensor, w_hh: Tensor, b_hh: Tensor, reverse: bool = False) -> Tensor:
    """Hidden states (B, T, H) of a GRU given input projections ``xp`` (B, T, 3H)."""
    hs, cache = gru_forward(np.ascontiguousarray(xp.data), w_hh.data, b_hh.data, reverse)
    return T.record_op("gru_recurrence", hs, (xp, w_hh, b_hh), (cache, reverse))


@T.backward_rule("gru_recurrence")
def _gru_recurrence_backward(ctx, inputs, out, g):
    cache, reverse = ctx
    _, w_hh, _ = inputs
    dxp, dw, db = gru_backward(np.ascontiguousarray(g), w_hh.data, out.data, cache, reverse)
    return dxp, dw, db


class GruDirection(Module):
    """One GRU direction.  Input-side weights are stored stacked as rows
    (reset, update, new), i.e. ``w_ih = [W_ir; W_iz; W_in]``, likewise ``w_hh``."""

    def __init__(self, d_in: int, hidden: int, seed: int, path: str):
        super().__init__()
        self.hidden = hidden
        self.d_in = d_in
        self.w_ih = self.add_param("w_ih", uniform_init(module_rng(seed, path + ".w_ih"), (3 * hidden, d_in), d_in))
        self.w_hh = self.add_param("w_hh", uniform_init(module_rng(seed, path + ".w_hh"), (3 * hidden, hidden), hidden))
        self.b_ih = self.add_param("b_ih", zeros_param((3 * hidden,)))
        self.b_hh = self.add_param("b_hh", zeros_param((3 * hidden,)))

    def gate(self, name: str, which: str = "i") -> np.ndarray:
        """View of one gate's weights, e.g. ``gate("r", "h")`` is W_hr."""
        k = "rzn".index(name)
        w = self.w_ih if which == "i" else self.w_hh
        return w.data[k * self.hidden : (k + 1) * self.hidden]

    def __call__(self, x: Tensor, reverse: bool = False) -> Tensor:
        xp = T.linear(x, self.w_ih, self.b_ih)
        return gru_recurrence(xp, self.w_hh, self.b_hh, reverse)


class BiGRU(Module):
    def __init__(self, d_in: int, hidden: int, seed: int = 0, path: str = "gru"):
        super().__init__()
        self.d_in, self.hidden = d_in, hidden
        self.fwd = self.add_child("fwd", GruDirection(d_in, hidden, seed, path + ".fwd"))
        self.bwd = self.add_child("bwd", GruDirection(d_in, hidden, seed, path + ".bwd"))

    @property
    def out_width(self) -> int:
        return 2 * self.hidden

    def __call__(self, x: Tensor) -> Tensor:
        return bigru(self, x)


def bigru(p: BiGRU, x: Tensor) -> Tensor:
    """Forward and backward hidden states concatenated per step: (.., t, 2*hidden)."""
    if x.ndim not in (2, 3) or x.shape[-1] != p.d_in:
        raise ShapeError(f"bigru: expected feature width {p.d_in}, got input {x.shape}")
    if x.shape[-2] == 0:
        raise ShapeError("bigru: empty sequence")
    xb, squeeze = _batched(x)
    out = T.concat([p.fwd(xb), p.bwd(xb, reverse=True)], axis=-1)
    return _unbatched(out, squeeze)


def gru_direction_reference(p: GruDirection, x: Tensor, reverse: bool = False) -> Tensor:
    """Step-by-step GRU from primitive tape ops; slow, used to check the fused kernel."""
    xb, squeeze = _batched(x)
    B, steps, _ = xb.shape
    H = p.hidden
    w = {g: (T.getitem(p.w_ih, slice(k * H, (k + 1) * H)), T.getitem(p.w_hh, slice(k * H, (k + 1) * H))) for k, g in enumerate("rzn")}
    b = {g: (T.getitem(p.b_ih, slice(k * H, (k + 1) * H)), T.getitem(p.b_hh, slice(k * H, (k + 1) * H))) for k, g in enumerate("rzn")}
    h = Tensor(np.zeros((B, H)))
    outs: list[Tensor | None] = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        x_t = T.getitem(xb, (slice(None), t))

        def pre(g):
            return T.linear(x_t, w[g][0], b[g][0])

        def hid(g):
            return T.linear(h, w[g][1], b[g][1])

        r = T.sigmoid(T.add(pre("r"), hid("r")))
        z = T.sigmoid(T.add(pre("z"), hid("z")))
        n = T.tanh(T.add(pre("n"), T.hadamard(r, hid("n"))))
        h = T.add(n, T.hadamard(z, T.sub(h, n)))
        outs[t] = h
    return _unbatched(T.stack(outs, axis=1), squeeze)


# ---------------------------------------------------------------------------


class MultiHeadAttention(Module):
    """Multi-head scaled dot-product attention with an output projection.

    The per-head projections are fused: rows ``h*d_k:(h+1)*d_k`` of ``w_q``
    form head ``h``'s query projection (same for keys and values).
    """

    def __init__(self, d_model: int, heads: int, dropout: float = 0.1, seed: int = 0, path: str = "mha"):
        super().__init__()
        if heads < 1 or d_model % heads:
            raise ShapeError(f"mha: {heads} heads do not divide width {d_model}")
        self.d_model, self.heads, self.dropout = d_model, heads, dropout
        self.d_k = d_model // heads
        for role in ("w_q", "w_k", "w_v", "w_o"):
            setattr(self, role, self.add_param(role, uniform_init(module_rng(seed, f"{path}.{role}"), (d_model, d_model), d_model)))
        self.b_o = self.add_param("b_o", zeros_param((d_model,)))
        self.last_attention: np.ndarray | None = None

    def __call__(self, query_seq: Tensor, key_value_seq: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return mha(self, query_seq, key_value_seq, training, rng)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, t, d = x.shape
    return T.transpose(T.reshape(x, (B, t, heads, d // heads)), (0, 2, 1, 3))


def mha(p: MultiHeadAttention, query_seq: Tensor, key_value_seq: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    if query_seq.shape[-1] != p.d_model or key_value_seq.shape[-1] != p.d_model:
        raise ShapeError(f"mha: widths {query_seq.shape[-1]}/{key_value_seq.shape[-1]} do not match model width {p.d_model}")
    q_in, squeeze = _batched(query_seq)
    kv_in, _ = _batched(key_value_seq)
    if q_in.shape[0] != kv_in.shape[0]:
        raise ShapeError(f"mha: batch sizes differ {query_seq.shape} vs {key_value_seq.shape}")
    B, t_q, d = q_in.shape
    q = _split_heads(T.linear(q_in, p.w_q), p.heads)
    k = _split_heads(T.linear(kv_in, p.w_k), p.heads)
    v = _split_heads(T.linear(kv_in, p.w_v), p.heads)
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(p.d_k))
    weights = T.softmax(scores, axis=-1)
    p.last_attention = weights.data
    if training and p.dropout > 0.0:
        if rng is None:
            raise ValueError("mha: dropout in training mode needs an rng")
        keep = (rng.random(weights.shape) >= p.dropout) / (1.0 - p.dropout)
        weights = T.hadamard(weights, Tensor._from_array(keep))
    ctx = T.matmul(weights, v)
    merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, t_q, d))
    return _unbatched(T.linear(merged, p.w_o, p.b_o), squeeze)


# ---------------------------------------------------------------------------


def temporal_average(x: Tensor) -> Tensor:
    """Mean over the time axis: (t, d) -> (d,), (B, t, d) -> (B, d)."""
    if x.ndim not in (2, 3) or x.shape[-2] == 0:
        raise ShapeError(f"temporal_average: need a nonempty sequence, got {x.shape}")
    return T.mean(x, axis=-2)


def statistical_pooling(vectors: Tensor) -> Tensor:
    """``mean || std`` over the N stacked vectors: (N, d) -> (2d,), (B, N, d) -> (B, 2d)."""
    mu, sigma = T.mean_std(vectors, axis=-2)
    return T.concat([mu, sigma], axis=-1)


class Classifier(Module):
    """Two fully connected layers followed by softmax."""

    def __init__(self, in_width: int, hidden: int = 60, n_classes: int = 7, seed: int = 0, path: str = "classifier"):
        super().__init__()
        self.in_width, self.hidden, self.n_classes = in_width, hidden, n_classes
        self.fc1_w = self.add_param("fc1_w", uniform_init(module_rng(seed, path + ".fc1_w"), (hidden, in_width), in_width))
        self.fc1_b = self.add_param("fc1_b", zeros_param((hidden,)))
        self.fc2_w = self.add_param("fc2_w", uniform_init(module_rng(seed, path + ".fc2_w"), (n_classes, hidden), hidden))
        self.fc2_b = self.add_param("fc2_b", zeros_param((n_classes,)))

    def __call__(self, features: Tensor) -> Tensor:
        if features.shape[-1] != self.in_width:
            raise ShapeError(f"classifier: expected input width {self.in_width}, got {features.shape}")
        h = T.linear(features, self.fc1_w, self.fc1_b)
        return T.softmax(T.linear(h, self.fc2_w, self.fc2_b), axis=-1)


def classify(p: Classifier, pooled_vectors: Tensor) -> Tensor:
    """Statistical pooling over N vectors, then the classifier: (N, d) -> (n_classes,)."""
    if pooled_vectors.ndim not in (2, 3) or pooled_vectors.shape[-2] == 0:
        raise ShapeError(f"classify: need at least one pooled vector, got {pooled_vectors.shape}")
    return p(statistical_pooling(pooled_vectors))


# ---------------------------------------------------------------------------
# parameter bundles

INDEX_FILE = "index.txt"


def save_parameters(module: Module, directory: str | Path) -> None:
    """Write every parameter as an FTNS (float64) file plus a ``path<TAB>file`` index."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (name, p) in enumerate(module.named_parameters()):
        fname = f"p{i:04d}.ftns"
        ftns.write_tensor(directory / fname, p.data, version=ftns.VERSION_F64)
        lines.append(f"{name}\t{fname}")
    (directory / INDEX_FILE).write_text("\n".join(lines) + "\n")


def load_parameters(module: Module, directory: str | Path) -> None:
    directory = Path(directory)
    entries = {}
    for line in (directory / INDEX_FILE).read_text().splitlines():
        if line.strip():
            name, fname = line.split("\t")
            entries[name] = fname
    params = dict(module.named_parameters())
    if set(entries) != set(params):
        missing = sorted(set(params) - set(entries))
        extra = sorted(set(entries) - set(params))
        raise ValueError(f"parameter bundle mismatch: missing {missing}, unexpected {extra}")
    for name, p in params.items():
        arr = ftns.read_tensor(directory / entries[name])
        if arr.shape != p.shape:
            raise ShapeError(f"{name}: bundle shape {arr.shape} != parameter shape {p.shape}")
        p.data = np.array(arr, dtype=np.float64)
