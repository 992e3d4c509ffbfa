"""Self-attention, cross-attention, no-pooling and combined fusion models."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .layers import (
    BiGRU,
    Classifier,
    Module,
    MultiHeadAttention,
    TimeConv,
    load_parameters,
    save_parameters,
    statistical_pooling,
    temporal_average,
)
from .tensor import ShapeError, Tensor

MODALITIES = ("audio", "vision", "text")
SHORT = {"audio": "a", "vision": "v", "text": "t"}
FROM_SHORT = {v: k for k, v in SHORT.items()}
ATTENTION_MODES = ("self", "cross", "combined")
N_CLASSES = 7


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModalityDims:
    seq_len: int
    width: int
    conv_len: int | None = None  # None: no time-axis convolution in the encoder


PAPER_DIMS = {
    "audio": ModalityDims(1000, 120, 500),
    "vision": ModalityDims(32, 2048, 25),
    "text": ModalityDims(128, 300, None),
}


@dataclass(frozen=True)
class ModelConfig:
    modalities: tuple[str, ...] = MODALITIES
    attention_mode: str = "self"
    use_statistical_pooling: bool = True
    dims: Mapping[str, ModalityDims] = field(default_factory=lambda: dict(PAPER_DIMS))
    gru_hidden: int = 60
    heads: int = 6
    classifier_hidden: int = 60
    n_classes: int = N_CLASSES
    dropout: float = 0.1

    def __post_init__(self):
        mods = tuple(m for m in MODALITIES if m in self.modalities)
        unknown = set(self.modalities) - set(MODALITIES)
        if unknown:
            raise ConfigError(f"unknown modalities {sorted(unknown)}")
        if not mods:
            raise ConfigError("at least one modality is required")
        object.__setattr__(self, "modalities", mods)
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"attention_mode must be one of {ATTENTION_MODES}, got {self.attention_mode!r}")
        if self.attention_mode in ("cross", "combined") and len(mods) < 2:
            raise ConfigError(f"{self.attention_mode} attention needs at least 2 modalities, got {mods}")
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f"{self.heads} heads do not divide attention width {self.d_model}")
        missing = [m for m in mods if m not in self.dims]
        if missing:
            raise ConfigError(f"no dimensions given for {missing}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def d_model(self) -> int:
        return 2 * self.gru_hidden

    def encoded_len(self, modality: str) -> int:
        d = self.dims[modality]
        return d.conv_len if d.conv_len is not None else d.seq_len

    def cross_pairs(self) -> list[tuple[str, str]]:
        """Ordered (target, source) pairs: a<-v, a<-t, v<-a, v<-t, t<-a, t<-v."""
        return [(tgt, src) for tgt in self.modalities for src in self.modalities if src != tgt]

    def branch_modes(self) -> tuple[str, ...]:
        return ("self", "cross") if self.attention_mode == "combined" else (self.attention_mode,)

    def n_attention_outputs(self, mode: str) -> int:
        m = len(self.modalities)
        return m if mode == "self" else m * (m - 1)

    def classifier_width(self) -> int:
        width = 0
        for mode in self.branch_modes():
            width += 2 * self.d_model if self.use_statistical_pooling else self.n_attention_outputs(mode) * self.d_model
        return width

    @property
    def name(self) -> str:
        base = {"self": "self", "cross": "cross", "combined": "cross+self"}[self.attention_mode]
        if not self.use_statistical_pooling:
            base += "-nosp"
        return base

    def with_modalities(self, modalities) -> ModelConfig:
        return replace(self, modalities=tuple(modalities))

    # plain-text key=value form used by checkpoints and --config files
    def to_text(self) -> str:
        lines = [
            f"modalities={','.join(self.modalities)}",
            f"attention_mode={self.attention_mode}",
            f"use_statistical_pooling={int(self.use_statistical_pooling)}",
            f"gru_hidden={self.gru_hidden}",
            f"heads={self.heads}",
            f"classifier_hidden={self.classifier_hidden}",
            f"n_classes={self.n_classes}",
            f"dropout={self.dropout!r}",
        ]
        for m in MODALITIES:
            if m in self.dims:
                d = self.dims[m]
                conv = "" if d.conv_len is None else str(d.conv_len)
                lines.append(f"dims.{m}={d.seq_len},{d.width},{conv}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> ModelConfig:
        kv = parse_key_values(text)
        dims = {}
        for m in MODALITIES:
            if f"dims.{m}" in kv:
                seq, width, conv = kv.pop(f"dims.{m}").split(",")
                dims[m] = ModalityDims(int(seq), int(width), int(conv) if conv else None)
        return cls(
            modalities=tuple(kv["modalities"].split(",")),
            attention_mode=kv["attention_mode"],
            use_statistical_pooling=bool(int(kv["use_statistical_pooling"])),
            dims=dims,
            gru_hidden=int(kv["gru_hidden"]),
            heads=int(kv["heads"]),
            classifier_hidden=int(kv["classifier_hidden"]),
            n_classes=int(kv["n_classes"]),
            dropout=float(kv["dropout"]),
        )


def parse_key_values(text: str) -> dict[str, str]:
    kv = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"malformed config line {raw!r}")
        k, v = line.split("=", 1)
        kv[k.strip()] = v.strip()
    return kv


MODEL_FAMILIES = {
    "self": ("self", True),
    "cross": ("cross", True),
    "self-nosp": ("self", False),
    "cross-nosp": ("cross", False),
    "cross+self": ("combined", True),
}


def config_for(family: str, modalities, dims: Mapping[str, ModalityDims] | None = None, **kwargs) -> ModelConfig:
    """Build a :class:`ModelConfig` from a family name such as ``"cross-nosp"``."""
    try:
        mode, sp = MODEL_FAMILIES[family]
    except KeyError:
        raise ConfigError(f"unknown model family {family!r}; choose from {sorted(MODEL_FAMILIES)}") from None
    if isinstance(modalities, str):
        modalities = parse_modalities(modalities)
    return ModelConfig(
        modalities=tuple(modalities),
        attention_mode=mode,
        use_statistical_pooling=sp,
        dims=dict(dims) if dims is not None else dict(PAPER_DIMS),
        **kwargs,
    )


def parse_modalities(code: str) -> tuple[str, ...]:
    """``"tva"`` -> ("audio", "vision", "text")."""
    try:
        mods = {FROM_SHORT[c] for c in code}
    except KeyError as exc:
        raise ConfigError(f"bad modality code {code!r}; use letters from 't', 'v', 'a'") from exc
    if not mods:
        raise ConfigError("empty modality code")
    return tuple(m for m in MODALITIES if m in mods)


# ---------------------------------------------------------------------------


class Encoder(Module):
    """Optional time-axis convolution followed by a bi-GRU."""

    def __init__(self, dims: ModalityDims, hidden: int, seed: int, path: str):
        super().__init__()
        self.dims = dims
        self.conv = None
        if dims.conv_len is not None:
            self.conv = self.add_child("conv", TimeConv(dims.seq_len, dims.conv_len, seed, path + ".conv"))
        self.gru = self.add_child("gru", BiGRU(dims.width, hidden, seed, path + ".gru"))

    def __call__(self, x: Tensor) -> Tensor:
        if self.conv is not None:
            x = self.conv(x)
        return self.gru(x)


def attention_key(mode: str, target: str, source: str | None = None) -> str:
    return target if mode == "self" else f"{target}<-{source}"


class Branch(Module):
    """Encoders plus the attention modules of one attention mode."""

    def __init__(self, config: ModelConfig, mode: str, seed: int, path: str):
        super().__init__()
        self.config, self.mode = config, mode
        self.encoders: dict[str, Encoder] = {}
        self.attention: dict[str, MultiHeadAttention] = {}
        enc_root = self.add_child("encoders", Module())
        for m in config.modalities:
            self.encoders[m] = enc_root.add_child(m, Encoder(config.dims[m], config.gru_hidden, seed, f"{path}.encoders.{m}"))
        att_root = self.add_child("attention", Module())
        keys = [attention_key(mode, m) for m in config.modalities] if mode == "self" else [attention_key(mode, t, s) for t, s in config.cross_pairs()]
        for key in keys:
            self.attention[key] = att_root.add_child(
                key, MultiHeadAttention(config.d_model, config.heads, config.dropout, seed, f"{path}.attention.{key}")
            )

    def attended(self, batch: Mapping[str, Tensor], training: bool, rng) -> list[Tensor]:
        """Attention output sequences, in module order."""
        encoded = {m: self.encoders[m](batch[m]) for m in self.config.modalities}
        if self.mode == "self":
            return [self.attention[m](encoded[m], encoded[m], training, rng) for m in self.config.modalities]
        return [self.attention[attention_key("cross", t, s)](encoded[t], encoded[s], training, rng) for t, s in self.config.cross_pairs()]

    def features(self, batch: Mapping[str, Tensor], training: bool, rng) -> Tensor:
        averages = [temporal_average(seq) for seq in self.attended(batch, training, rng)]
        if self.config.use_statistical_pooling:
            return statistical_pooling(T.stack(averages, axis=-2))
        return T.concat(averages, axis=-1)


class FusionModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config, self.seed = config, seed
        self.branches = [self.add_child(mode, Branch(config, mode, seed, mode)) for mode in config.branch_modes()]
        self.classifier = self.add_child(
            "classifier",
            Classifier(config.classifier_width(), config.classifier_hidden, config.n_classes, seed, f"classifier.{config.name}"),
        )

    def attention_modules(self) -> list[MultiHeadAttention]:
        return [m for b in self.branches for m in b.attention.values()]

    def classifier_input(self, batch: Mapping[str, Tensor], training: bool = False, rng=None) -> Tensor:
        feats = [b.features(batch, training, rng) for b in self.branches]
        return feats[0] if len(feats) == 1 else T.concat(feats, axis=-1)

    def __call__(self, batch: Mapping, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return forward(self, batch, training, rng)


def build_model(config: ModelConfig, seed: int = 0) -> FusionModel:
    """Instantiate ``config`` with parameters drawn deterministically from ``seed``."""
    return FusionModel(config, seed)


def _check_batch(config: ModelConfig, batch: Mapping) -> dict[str, Tensor]:
    missing = [m for m in config.modalities if m not in batch]
    if missing:
        raise ShapeError(f"batch lacks modalities {missing} needed by the model ({list(config.modalities)})")
    out = {}
    sizes = set()
    for m in config.modalities:
        x = batch[m] if isinstance(batch[m], Tensor) else Tensor(batch[m])
        d = config.dims[m]
        if x.ndim != 3 or x.shape[1:] != (d.seq_len, d.width):
            raise ShapeError(f"{m}: expected (B, {d.seq_len}, {d.width}), got {x.shape}")
        sizes.add(x.shape[0])
        out[m] = x
    if len(sizes) != 1:
        raise ShapeError(f"batch sizes differ across modalities: {sorted(sizes)}")
    return out


def forward(model: FusionModel, batch: Mapping, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Class probabilities (B, n_classes) for a batch of padded sequences per modality."""
    xs = _check_batch(model.config, batch)
    return model.classifier(model.classifier_input(xs, training, rng))


def parameter_count(model: Module) -> int:
    return model.parameter_count()


def parameter_shapes(model: Module) -> dict[str, tuple[int, ...]]:
    return {name: p.shape for name, p in model.named_parameters()}


# ---------------------------------------------------------------------------
# checkpoints

CONFIG_FILE = "config.txt"


def save_checkpoint(model: FusionModel, directory: str | Path) -> None:
    directory = Path(directory)
    save_parameters(model, directory / "params")
    (directory / CONFIG_FILE).write_text(model.config.to_text() + f"seed={model.seed}\n")


def load_checkpoint(directory: str | Path) -> FusionModel:
    directory = Path(directory)
    text = (directory / CONFIG_FILE).read_text()
    seed = int(parse_key_values(text).get("seed", 0))
    config = ModelConfig.from_text("\n".join(l for l in text.splitlines() if not l.startswith("seed=")))
    model = build_model(config, seed)
    load_parameters(model, directory / "params")
    return model
