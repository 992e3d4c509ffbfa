"""Feature-file datasets: manifest I/O, padding, audio standardization, folds,
and a synthetic generator for desk-scale experiments."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import ftns
from .models import MODALITIES, PAPER_DIMS, ModalityDims

CLASS_NAMES = ("angry", "excited", "happy", "sad", "frustrated", "surprise", "neutral")
N_CLASSES = len(CLASS_NAMES)
MANIFEST_HEADER = ["id", "label", "fold", "audio_path", "vision_path", "text_path"]
SCHEMA_SUFFIX = ".schema"
SCALER_STD_FLOOR = 1e-8


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ModalitySchema:
    width: int
    max_len: int


PAPER_SCHEMA = {m: ModalitySchema(PAPER_DIMS[m].width, PAPER_DIMS[m].seq_len) for m in MODALITIES}
DESK_SCHEMA = {
    "audio": ModalitySchema(20, 100),
    "vision": ModalitySchema(32, 16),
    "text": ModalitySchema(30, 24),
}
SCHEMAS = {"paper": PAPER_SCHEMA, "desk": DESK_SCHEMA}

# conv output length relative to input length (1000 -> 500 audio, 32 -> 25 vision)
CONV_RATIO = {"audio": 500 / 1000, "vision": 25 / 32}


def model_dims(schema: Mapping[str, ModalitySchema]) -> dict[str, ModalityDims]:
    """Model input dims for a data schema; text has no convolution."""
    dims = {}
    for m, s in schema.items():
        conv = None
        if m in CONV_RATIO:
            conv = max(1, int(round(s.max_len * CONV_RATIO[m])))
        dims[m] = ModalityDims(s.max_len, s.width, conv)
    return dims


@dataclass
class UtteranceRecord:
    id: str
    label: int
    fold: int | None
    paths: dict[str, Path]
    lengths: dict[str, int] = field(default_factory=dict)


@dataclass
class DatasetManifest:
    schema: dict[str, ModalitySchema]
    records: list[UtteranceRecord]
    path: Path | None = None

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITIES if m in self.schema)

    def by_id(self) -> dict[str, UtteranceRecord]:
        return {r.id: r for r in self.records}

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def load_features(self, record: UtteranceRecord, modality: str) -> np.ndarray:
        return ftns.read_tensor(record.paths[modality])


# ---------------------------------------------------------------------------
# manifest I/O


def _schema_text(schema: Mapping[str, ModalitySchema]) -> str:
    lines = []
    for m in MODALITIES:
        if m in schema:
            lines.append(f"{m}.width={schema[m].width}")
            lines.append(f"{m}.max_len={schema[m].max_len}")
    return "\n".join(lines) + "\n"


def _parse_schema(text: str, source: Path) -> dict[str, ModalitySchema]:
    kv = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        kv[k.strip()] = v.strip()
    schema = {}
    for m in MODALITIES:
        if f"{m}.width" in kv:
            w, n = int(kv[f"{m}.width"]), int(kv[f"{m}.max_len"])
            if w <= 0 or n <= 0:
                raise DataError(f"{source}: non-positive width/max_len for {m}")
            schema[m] = ModalitySchema(w, n)
    return schema


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write the manifest CSV (paths relative to its directory) and the schema sidecar."""
    path = Path(path)
    base = path.parent
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            row = [r.id, r.label, "" if r.fold is None else r.fold]
            for m in MODALITIES:
                p = r.paths.get(m)
                row.append("" if p is None else _relpath(p, base))
            w.writerow(row)
    Path(str(path) + SCHEMA_SUFFIX).write_text(_schema_text(manifest.schema))


def _relpath(p: Path, base: Path) -> str:
    try:
        return Path(p).resolve().relative_to(base.resolve()).as_posix()
    except ValueError:
        return str(p)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and validate a manifest; feature-file headers are checked eagerly."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    schema_path = Path(str(path) + SCHEMA_SUFFIX)
    declared = _parse_schema(schema_path.read_text(), schema_path) if schema_path.exists() else dict(PAPER_SCHEMA)
    records: list[UtteranceRecord] = []
    seen: set[str] = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise DataError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
            rid, label_s, fold_s = row[0], row[1], row[2]
            if not rid:
                raise DataError(f"{path}:{lineno}: empty id")
            if rid in seen:
                raise DataError(f"record {rid}: duplicate id")
            seen.add(rid)
            try:
                label = int(label_s)
            except ValueError:
                raise DataError(f"record {rid}: label {label_s!r} is not an integer") from None
            if not 0 <= label < N_CLASSES:
                raise DataError(f"record {rid}: label {label} outside 0..{N_CLASSES - 1}")
            fold = None
            if fold_s.strip():
                fold = int(fold_s)
                if not 0 <= fold <= 4:
                    raise DataError(f"record {rid}: fold {fold} outside 0..4")
            paths = {}
            for m, p in zip(MODALITIES, row[3:]):
                if p:
                    paths[m] = (path.parent / p) if not Path(p).is_absolute() else Path(p)
            records.append(UtteranceRecord(rid, label, fold, paths))
    present = {m for r in records for m in r.paths}
    schema = {m: declared[m] for m in MODALITIES if m in present and m in declared}
    for m in present - set(schema):
        raise DataError(f"{path}: modality {m} has files but no schema entry")
    for r in records:
        if set(r.paths) != set(schema):
            raise DataError(f"record {r.id}: has modalities {sorted(r.paths)}, expected {sorted(schema)}")
        for m, p in r.paths.items():
            if not p.is_file():
                raise DataError(f"record {r.id}: {m} feature file missing: {p}")
            try:
                _, shape = ftns.read_header(p)
            except ftns.FormatError as exc:
                raise DataError(f"record {r.id}: {exc}") from None
            if len(shape) != 2 or shape[1] != schema[m].width or shape[0] < 1:
                raise DataError(f"record {r.id}: {m} features have shape {shape}, expected (t, {schema[m].width})")
            r.lengths[m] = shape[0]
    return DatasetManifest(schema, records, path)


# ---------------------------------------------------------------------------
# sequence preparation


def pad_or_truncate(x: np.ndarray, target_len: int, width: int | None = None) -> np.ndarray:
    """Keep the first ``target_len`` rows; zero-pad at the end when shorter."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise DataError(f"expected a (t, d) sequence, got shape {x.shape}")
    if width is not None and x.shape[1] != width:
        raise DataError(f"feature width {x.shape[1]} does not match schema width {width}")
    out = np.zeros((target_len, x.shape[1]), dtype=np.float64)
    n = min(target_len, x.shape[0])
    out[:n] = x[:n]
    return out


class StandardScaler:
    """Per-column standardization fitted on real (pre-padding) training frames."""

    def __init__(self) -> None:
        self.mean: np.ndarray | None = None
        self.std: np.ndarray | None = None
        self.fitted_on: frozenset[str] = frozenset()

    @property
    def fitted(self) -> bool:
        return self.mean is not None

    def fit(self, sequences: Iterable[np.ndarray], ids: Iterable[str] = ()) -> StandardScaler:
        total = None
        count = 0
        sq = None
        seqs = [np.asarray(s, dtype=np.float64) for s in sequences]
        if not seqs:
            raise DataError("cannot fit scaler on no sequences")
        # two-pass for accuracy
        for s in seqs:
            total = s.sum(axis=0) if total is None else total + s.sum(axis=0)
            count += s.shape[0]
        mean = total / count
        for s in seqs:
            c = ((s - mean) ** 2).sum(axis=0)
            sq = c if sq is None else sq + c
        self.mean = mean
        self.std = np.maximum(np.sqrt(sq / count), SCALER_STD_FLOOR)
        self.fitted_on = frozenset(ids)
        return self

    def transform(self, x: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise DataError("scaler used before fit")
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def check_not_fitted_on(self, ids: Iterable[str]) -> None:
        leaked = self.fitted_on & set(ids)
        if leaked:
            raise DataError(f"scaler statistics include held-out utterances: {sorted(leaked)[:5]}")


def fit_scaler(manifest: DatasetManifest, train_ids: Sequence[str], modality: str = "audio") -> StandardScaler:
    recs = manifest.by_id()
    seqs = [manifest.load_features(recs[i], modality) for i in train_ids]
    return StandardScaler().fit(seqs, train_ids)


def apply_scaler(scaler: StandardScaler, x: np.ndarray) -> np.ndarray:
    return scaler.transform(x)


# ---------------------------------------------------------------------------
# folds


@dataclass
class Fold:
    index: int
    train: list[str]
    dev: list[str]
    test: list[str]


def make_folds(
    manifest: DatasetManifest, k: int = 5, ratios: Sequence[float] = (8, 0.5, 1.5), seed: int = 0
) -> list[Fold]:
    """k disjoint test partitions, stratified by label; per fold the remainder
    is split train:dev by ``ratios[0]:ratios[1]``, also stratified.

    Fold ids carried by the manifest take precedence over random assignment.
    """
    if len(ratios) != 3 or not math.isclose(sum(ratios), 10.0):
        raise DataError(f"ratios must be three numbers summing to 10, got {tuple(ratios)}")
    if k < 2:
        raise DataError(f"need k >= 2 folds, got {k}")
    rng = np.random.default_rng(seed)
    ids = [r.id for r in manifest.records]
    labels = {r.id: r.label for r in manifest.records}
    by_class: dict[int, list[str]] = {}
    for rid in ids:
        by_class.setdefault(labels[rid], []).append(rid)

    if all(r.fold is not None for r in manifest.records):
        if k != 5 and max(r.fold for r in manifest.records) >= k:
            raise DataError(f"manifest fold ids exceed k={k}")
        test_sets = [[r.id for r in manifest.records if r.fold == f] for f in range(k)]
    else:
        test_sets = [[] for _ in range(k)]
        offset = 0
        for c in sorted(by_class):
            members = list(by_class[c])
            rng.shuffle(members)
            if len(members) < k:
                warnings.warn(f"class {c} has {len(members)} < {k} samples; it cannot appear in every test fold", stacklevel=2)
            # continue the round-robin across classes so tiny classes still spread out
            for j, rid in enumerate(members):
                test_sets[(offset + j) % k].append(rid)
            offset += len(members)

    dev_frac = ratios[1] / (ratios[0] + ratios[1])
    folds = []
    for f in range(k):
        test = set(test_sets[f])
        train, dev = [], []
        for c in sorted(by_class):
            rest = [rid for rid in by_class[c] if rid not in test]
            rng.shuffle(rest)
            n_dev = int(round(len(rest) * dev_frac))
            if len(rest) >= 2:
                n_dev = max(n_dev, 1)
            dev.extend(rest[:n_dev])
            train.extend(rest[n_dev:])
        folds.append(Fold(f, sorted(train), sorted(dev), sorted(test_sets[f])))
    return folds


# ---------------------------------------------------------------------------
# arrays for training


@dataclass
class SplitArrays:
    ids: list[str]
    features: dict[str, np.ndarray]  # modality -> (N, max_len, width) float32
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def batch(self, index: np.ndarray) -> dict[str, np.ndarray]:
        return {m: a[index].astype(np.float64) for m, a in self.features.items()}


def build_split(
    manifest: DatasetManifest,
    ids: Sequence[str],
    scaler: StandardScaler | None = None,
    modalities: Sequence[str] | None = None,
    cache: dict | None = None,
) -> SplitArrays:
    """Load, standardize (audio) and pad each utterance of ``ids``."""
    recs = manifest.by_id()
    mods = tuple(modalities) if modalities is not None else manifest.modalities
    feats = {}
    for m in mods:
        s = manifest.schema[m]
        arr = np.zeros((len(ids), s.max_len, s.width), dtype=np.float32)
        for i, rid in enumerate(ids):
            key = (rid, m)
            if cache is not None and key in cache:
                x = cache[key]
            else:
                x = manifest.load_features(recs[rid], m)
                if cache is not None:
                    cache[key] = x
            if m == "audio" and scaler is not None:
                x = scaler.transform(x)
            arr[i] = pad_or_truncate(x, s.max_len, s.width)
        feats[m] = arr
    labels = np.array([recs[rid].label for rid in ids], dtype=np.int64)
    return SplitArrays(list(ids), feats, labels)


def fold_splits(manifest: DatasetManifest, fold: Fold, modalities=None, cache=None) -> dict[str, SplitArrays]:
    """Train/dev/test arrays for one fold, with the audio scaler fitted on train only."""
    scaler = None
    mods = tuple(modalities) if modalities is not None else manifest.modalities
    if "audio" in mods:
        scaler = fit_scaler(manifest, fold.train)
        scaler.check_not_fitted_on(fold.dev)
        scaler.check_not_fitted_on(fold.test)
    return {
        name: build_split(manifest, ids, scaler, mods, cache)
        for name, ids in (("train", fold.train), ("dev", fold.dev), ("test", fold.test))
    }


# ---------------------------------------------------------------------------
# synthetic data


def synth_generate(
    out_dir: str | Path,
    n_per_class: int,
    separation: float,
    seed: int = 0,
    schema: Mapping[str, ModalitySchema] | str = "desk",
) -> DatasetManifest:
    """Balanced synthetic dataset: every frame is ``separation * class_direction + N(0, I)``.

    Class directions are random unit vectors per (class, modality); sequence
    lengths are uniform over [25%, 100%] of the modality's max length.
    """
    if separation < 0:
        raise DataError(f"separation must be >= 0, got {separation}")
    if n_per_class < 1:
        raise DataError(f"n_per_class must be >= 1, got {n_per_class}")
    if isinstance(schema, str):
        try:
            schema = SCHEMAS[schema]
        except KeyError:
            raise DataError(f"unknown schema {schema!r}; choose from {sorted(SCHEMAS)}") from None
    schema = {m: schema[m] for m in MODALITIES if m in schema}
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    directions = {}
    for m, s in schema.items():
        d = rng.standard_normal((N_CLASSES, s.width))
        directions[m] = d / np.linalg.norm(d, axis=1, keepdims=True)
    records = []
    for c in range(N_CLASSES):
        for j in range(n_per_class):
            rid = f"c{c}_{j:04d}"
            paths = {}
            for m, s in schema.items():
                lo = max(1, int(math.ceil(0.25 * s.max_len)))
                t = int(rng.integers(lo, s.max_len + 1))
                x = separation * directions[m][c] + rng.standard_normal((t, s.width))
                p = out / "features" / f"{rid}_{m}.ftns"
                ftns.write_tensor(p, x)
                paths[m] = p
            records.append(UtteranceRecord(rid, c, None, paths))
    manifest = DatasetManifest(dict(schema), records, out / "manifest.csv")
    write_manifest(manifest, out / "manifest.csv")
    return load_manifest(out / "manifest.csv")
