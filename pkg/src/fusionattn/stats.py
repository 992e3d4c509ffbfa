"""Accuracy metrics, run aggregation, Welch's t-test and result rendering."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import CLASS_NAMES, N_CLASSES

ALPHA = 0.05
CF_TOL = 1e-12
CF_MAX_ITER = 10_000


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int = N_CLASSES) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.intp), np.asarray(y_pred, dtype=np.intp)), 1)
    return cm


def weighted_accuracy(cm: np.ndarray) -> float:
    """Overall fraction correct."""
    cm = np.asarray(cm)
    total = cm.sum()
    if total <= 0:
        raise ValueError("weighted_accuracy: empty confusion matrix")
    return float(np.trace(cm) / total)


def unweighted_accuracy(cm: np.ndarray) -> float:
    """Mean per-class recall over classes that have at least one true sample."""
    cm = np.asarray(cm)
    rows = cm.sum(axis=1)
    present = rows > 0
    if not present.any():
        raise ValueError("unweighted_accuracy: every class row is empty")
    recalls = np.diag(cm)[present] / rows[present]
    return float(recalls.mean())


def aggregate(values: Iterable[float]) -> tuple[float, float]:
    """Sample mean and sample (n-1) standard deviation; std is 0 for a single run."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("aggregate: no values")
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1))


# ---------------------------------------------------------------------------
# Student t distribution


def _betacf(a: float, b: float, x: float) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < CF_TOL:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc: a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"betainc: x={x} outside [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    ln_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_tailed(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    return min(1.0, max(0.0, betainc(df / 2.0, 0.5, df / (df + t * t))))


def t_cdf(t: float, df: float) -> float:
    tail = 0.5 * t_sf_two_tailed(t, df)
    return 1.0 - tail if t >= 0 else tail


def t_pdf(t: float, df: float) -> float:
    ln = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    return math.exp(ln - (df + 1) / 2 * math.log1p(t * t / df))


@dataclass(frozen=True)
class TTestResult:
    mean_a: float
    std_a: float
    n_a: int
    mean_b: float
    std_b: float
    n_b: int
    t: float
    df: float
    p: float

    @property
    def significant(self) -> bool:
        return self.p < ALPHA


def t_test_two_tailed(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Welch's unequal-variance two-sample t-test (unpaired)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError(f"t-test needs at least 2 samples per side, got {a.size} and {b.size}")
    ma, mb = float(a.mean()), float(b.mean())
    va, vb = float(a.var(ddof=1)), float(b.var(ddof=1))
    se2 = va / a.size + vb / b.size
    if se2 == 0.0:
        if ma == mb:
            t, df, p = 0.0, float(a.size + b.size - 2), 1.0
        else:
            t, df, p = math.copysign(math.inf, ma - mb), float(a.size + b.size - 2), 0.0
    else:
        t = (ma - mb) / math.sqrt(se2)
        df = se2**2 / ((va / a.size) ** 2 / (a.size - 1) + (vb / b.size) ** 2 / (b.size - 1))
        p = t_sf_two_tailed(t, df)
    return TTestResult(ma, math.sqrt(va), int(a.size), mb, math.sqrt(vb), int(b.size), t, df, p)


# ---------------------------------------------------------------------------
# rendering

TABLE_HEADER = ["config", "wa_mean", "wa_std", "uwa_mean", "uwa_std", "n_runs"]
COMPARISON_HEADER = [
    "metric", "config_a", "config_b", "mean_a", "std_a", "n_a", "mean_b", "std_b", "n_b", "t", "df", "p", "significant",
]


def aggregate_table(results: Iterable) -> list[list]:
    by_config: dict[str, list] = {}
    for r in results:
        by_config.setdefault(r.config_name, []).append(r)
    rows = []
    for name, rs in by_config.items():
        wa = aggregate(r.test_wa for r in rs)
        uwa = aggregate(r.test_uwa for r in rs)
        rows.append([name, wa[0], wa[1], uwa[0], uwa[1], len(rs)])
    return rows


def comparison_rows(name_a: str, runs_a: Sequence, name_b: str, runs_b: Sequence) -> list[list]:
    rows = []
    for metric in ("test_wa", "test_uwa"):
        res = t_test_two_tailed([getattr(r, metric) for r in runs_a], [getattr(r, metric) for r in runs_b])
        rows.append([
            metric.removeprefix("test_"), name_a, name_b, res.mean_a, res.std_a, res.n_a,
            res.mean_b, res.std_b, res.n_b, res.t, res.df, res.p, int(res.significant),
        ])
    return rows


def normalize_rows(cm: np.ndarray) -> np.ndarray:
    cm = np.asarray(cm, dtype=np.float64)
    rows = cm.sum(axis=1, keepdims=True)
    return np.divide(cm, rows, out=np.zeros_like(cm), where=rows > 0)


def format_confusion(cm_normalized: np.ndarray) -> str:
    """Class-name header, then one comma-separated row per true class (4 decimals)."""
    lines = [",".join(n[:3] for n in CLASS_NAMES)]
    for row in cm_normalized:
        lines.append(",".join(f"{v:.4f}" for v in row))
    return "\n".join(lines) + "\n"


def _write_csv(path: Path, header: list[str], rows: Iterable[list]) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def render_outputs(
    results: Sequence,
    out_dir: str | Path,
    confusions: Mapping[str, Sequence[np.ndarray]] | None = None,
    plot: bool = False,
) -> dict[str, Path]:
    """Write ``summary.csv``, ``comparisons.csv`` and per-config confusion files.

    ``confusions`` maps config name to its runs' count matrices; each
    config's matrices are row-normalized and averaged.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    written = {}
    summary = out / "summary.csv"
    _write_csv(summary, TABLE_HEADER, aggregate_table(results))
    written["summary"] = summary

    by_config: dict[str, list] = {}
    for r in results:
        by_config.setdefault(r.config_name, []).append(r)
    comp_rows = []
    for a, b in combinations(sorted(by_config), 2):
        if len(by_config[a]) >= 2 and len(by_config[b]) >= 2:
            comp_rows.extend(comparison_rows(a, by_config[a], b, by_config[b]))
    comparisons = out / "comparisons.csv"
    _write_csv(comparisons, COMPARISON_HEADER, comp_rows)
    written["comparisons"] = comparisons

    for name, cms in (confusions or {}).items():
        if not cms:
            continue
        avg = np.mean([normalize_rows(cm) for cm in cms], axis=0)
        path = out / f"confusion_{_safe(name)}.txt"
        path.write_text(format_confusion(avg))
        written[f"confusion:{name}"] = path
        if plot:
            written[f"plot:{name}"] = _plot_confusion(avg, name, out / f"confusion_{_safe(name)}.png")
    return written


def _safe(name: str) -> str:
    return name.replace("+", "plus").replace("/", "_").replace(":", "_")


def _plot_confusion(cm: np.ndarray, title: str, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = [n[:3] for n in CLASS_NAMES]
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.imshow(cm, cmap="Blues", vmin=0, vmax=1)
    ax.set_xticks(range(len(labels)), labels, rotation=45)
    ax.set_yticks(range(len(labels)), labels)
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(j, i, f"{cm[i, j]:.2f}", ha="center", va="center", fontsize=6)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
