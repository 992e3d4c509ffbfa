"""Append-only results CSV with per-run confusion sidecars."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable

import numpy as np

from .data import DataError
from .training import RunResult

SCHEMA_LINE = "# fusionattn-results v1"
RESULTS_HEADER = ["config_name", "fold", "seed", "epochs", "val_uwa", "test_wa", "test_uwa"]
CONFUSION_DIR = "confusions"


def _safe(label: str) -> str:
    return label.replace("+", "plus").replace(":", "_")


def confusion_path(results_csv: str | Path, config_name: str, fold: int, seed: int) -> Path:
    return Path(results_csv).parent / CONFUSION_DIR / _safe(config_name) / f"fold{fold}_seed{seed}.csv"


def _check_head(path: Path, lines: list[str]) -> None:
    if len(lines) < 2 or lines[0].strip() != SCHEMA_LINE:
        raise DataError(f"{path}: not a results file (first line must be {SCHEMA_LINE!r})")
    if lines[1].strip() != ",".join(RESULTS_HEADER):
        raise DataError(f"{path}: unexpected header {lines[1].strip()!r}")


def read_results(path: str | Path, with_confusion: bool = True) -> list[RunResult]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"results file not found: {path}")
    lines = path.read_text().splitlines()
    _check_head(path, lines)
    out = []
    for lineno, row in enumerate(csv.reader(lines[2:]), start=3):
        if not row:
            continue
        if len(row) != len(RESULTS_HEADER):
            raise DataError(f"{path}:{lineno}: expected {len(RESULTS_HEADER)} fields, got {len(row)}")
        try:
            r = RunResult(
                config_name=row[0], fold=int(row[1]), seed=int(row[2]), epochs=int(row[3]),
                val_uwa=float(row[4]), test_wa=float(row[5]), test_uwa=float(row[6]), confusion=None,
            )
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        if with_confusion:
            cp = confusion_path(path, r.config_name, r.fold, r.seed)
            if cp.is_file():
                r.confusion = np.loadtxt(cp, delimiter=",", dtype=np.int64, ndmin=2)
        out.append(r)
    return out


class ResultsWriter:
    """Single writer appending rows; creates the file (with schema line) on first use."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if self.path.exists() and self.path.stat().st_size > 0:
            _check_head(self.path, self.path.read_text().splitlines()[:2])
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                fh.write(SCHEMA_LINE + "\n")
                csv.writer(fh, lineterminator="\n").writerow(RESULTS_HEADER)

    def completed(self) -> set[tuple[str, int, int]]:
        return {(r.config_name, r.fold, r.seed) for r in read_results(self.path, with_confusion=False)}

    def append(self, r: RunResult) -> None:
        if r.confusion is not None:
            cp = confusion_path(self.path, r.config_name, r.fold, r.seed)
            cp.parent.mkdir(parents=True, exist_ok=True)
            np.savetxt(cp, np.asarray(r.confusion, dtype=np.int64), fmt="%d", delimiter=",")
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(
                [r.config_name, r.fold, r.seed, r.epochs, repr(r.val_uwa), repr(r.test_wa), repr(r.test_uwa)]
            )


def group_confusions(results: Iterable[RunResult]) -> dict[str, list[np.ndarray]]:
    groups: dict[str, list[np.ndarray]] = {}
    for r in results:
        if r.confusion is not None:
            groups.setdefault(r.config_name, []).append(r.confusion)
    return groups
