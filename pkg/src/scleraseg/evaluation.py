"""Pixel-level metrics, mean/std aggregation, report tables and FP/FN overlays."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .dataset import (DatasetError, ImageSample, SensorTag, database_label, read_image,
                      read_mask, resolve, write_image)
from .errors import EvaluationError

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("Database", "Approach", "Recall %", "Precision %", "F-score %")
APPROACH_LABELS = {"fcn": "FCN", "segnet": "SegNet", "gan": "GAN"}


@dataclass(frozen=True)
class PixelCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricsRecord:
    sample_id: str
    precision: float
    recall: float
    f_score: float


@dataclass(frozen=True)
class Stat:
    mean: float
    std: float


@dataclass(frozen=True)
class ReportRow:
    database: str
    approach: str
    recall: Stat
    precision: Stat
    f_score: Stat
    n_images: int = 0


def _as_mask(m) -> np.ndarray:
    m = np.asarray(m, dtype=bool)
    if m.ndim == 3:
        m = m[..., 0]
    return m


def pixel_counts(pred, gt) -> PixelCounts:
    """Confusion counts with sclera as the positive class."""
    pred, gt = _as_mask(pred), _as_mask(gt)
    if pred.shape != gt.shape:
        raise EvaluationError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    return PixelCounts(*kernels.pixel_counts(pred, gt))


def metrics(counts: PixelCounts, sample_id: str = "") -> MetricsRecord:
    """Precision, recall and F-score with fixed conventions for empty denominators.

    No predicted positives: precision is 1 if nothing was missed, else 0.
    No actual positives: recall is 1 if nothing was falsely predicted, else 0.
    F is 0 whenever precision + recall is 0.
    """
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    if tp + fp == 0:
        precision = 1.0 if fn == 0 else 0.0
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall = 1.0 if fp == 0 else 0.0
    else:
        recall = tp / (tp + fn)
    f = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return MetricsRecord(sample_id, precision, recall, f)


def _stat(values: Sequence[float]) -> Stat:
    arr = np.asarray(values, dtype=np.float64)
    # population std (divide by N)
    return Stat(float(arr.mean()), float(arr.std(ddof=0)))


def aggregate(records: Sequence[MetricsRecord], database: str, approach: str) -> ReportRow:
    """Mean and population std of each metric over images, in percent."""
    if not records:
        raise EvaluationError("no per-image records to aggregate")
    pct = lambda attr: _stat([100.0 * getattr(r, attr) for r in records])  # noqa: E731
    return ReportRow(database, approach, pct("recall"), pct("precision"), pct("f_score"),
                     len(records))


# --------------------------------------------------------------------------
# rendering

def fmt_percent(x: float) -> str:
    """Two decimals, half-up, at least two integer digits (``3.9`` -> ``03.90``)."""
    d = Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return f"{d:05.2f}"


def fmt_stat(s: Stat) -> str:
    return f"{fmt_percent(s.mean)} ± {fmt_percent(s.std)}"


def _cells(row: ReportRow) -> list[str]:
    return [row.database, row.approach, fmt_stat(row.recall), fmt_stat(row.precision),
            fmt_stat(row.f_score)]


def report_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow(_cells(r))
    return buf.getvalue()


def report_text(rows: Sequence[ReportRow]) -> str:
    table = [list(REPORT_COLUMNS)] + [_cells(r) for r in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(REPORT_COLUMNS))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def emit_report(rows: Sequence[ReportRow], path: str | Path | None = None,
                fmt: str = "text") -> str:
    if not rows:
        raise EvaluationError("a report needs at least one row")
    if fmt == "csv":
        text = report_csv(rows)
    elif fmt == "text":
        text = report_text(rows)
    else:
        raise EvaluationError(f"unknown report format {fmt!r}")
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def write_metrics_csv(path: str | Path, records: Iterable[MetricsRecord],
                      database: str = "", approach: str = "") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# database={database}\n# approach={approach}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("id", "precision", "recall", "f_score"))
        for r in records:
            w.writerow((r.sample_id, repr(r.precision), repr(r.recall), repr(r.f_score)))


def read_metrics_csv(path: str | Path) -> tuple[list[MetricsRecord], str, str]:
    """Return ``(records, database, approach)``."""
    meta = {}
    rows = []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            k, _, v = line[1:].strip().partition("=")
            meta[k] = v
        else:
            body.append(line)
    for rec in csv.DictReader(body):
        rows.append(MetricsRecord(rec["id"], float(rec["precision"]), float(rec["recall"]),
                                  float(rec["f_score"])))
    return rows, meta.get("database", ""), meta.get("approach", "")


# --------------------------------------------------------------------------
# overlays

def render_error_overlay(pred, gt, base: np.ndarray) -> np.ndarray:
    """Paint false positives green and false negatives red on ``base``."""
    pred, gt = _as_mask(pred), _as_mask(gt)
    base = np.asarray(base)
    if base.ndim == 2:
        base = np.repeat(base[..., None], 3, axis=2)
    if pred.shape != gt.shape or base.shape[:2] != pred.shape:
        raise EvaluationError(
            f"overlay inputs differ in size: pred {pred.shape}, gt {gt.shape}, base {base.shape[:2]}")
    return kernels.overlay(base.astype(np.uint8), pred, gt)


# --------------------------------------------------------------------------
# evaluation runs

# predictor(image, gt) -> (pred, gt_at_same_resolution)
Predictor = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


def evaluate(predictor: Predictor, samples: Sequence[ImageSample], root: str | Path,
             database: str, approach: str, overlay_dir: str | Path | None = None,
             workers: int = 1) -> tuple[list[MetricsRecord], ReportRow]:
    """Per-image metrics over ``samples`` plus their mean/std row.

    Samples without a ground-truth mask are skipped with a warning.
    """
    usable = []
    for s in samples:
        if s.mask_path is None:
            log.warning("excluding %s: no ground-truth mask", s.id)
        else:
            usable.append(s)
    if not usable:
        raise EvaluationError("no test samples with ground truth")

    def one(sample: ImageSample) -> MetricsRecord:
        image_path, mask_path = resolve(root, sample)
        image = read_image(image_path)
        gt = read_mask(mask_path)
        pred, ref = predictor(image, gt)
        if overlay_dir is not None:
            base = image if ref.shape == gt.shape else _resize_base(image, ref.shape)
            target = Path(overlay_dir) / f"{sample.id}_overlay.png"
            target.parent.mkdir(parents=True, exist_ok=True)
            write_image(target, render_error_overlay(pred, ref, base))
        return metrics(pixel_counts(pred, ref), sample.id)

    if overlay_dir is not None:
        Path(overlay_dir).mkdir(parents=True, exist_ok=True)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(one, usable))
    else:
        records = [one(s) for s in usable]
    return records, aggregate(records, database, approach)


def _resize_base(image: np.ndarray, shape) -> np.ndarray:
    from PIL import Image
    return np.asarray(Image.fromarray(image).resize((shape[1], shape[0]), Image.BILINEAR))


def cross_sensor_evaluate(train_db: Iterable[SensorTag], test_db: Iterable[SensorTag],
                          predictor: Predictor, samples: Sequence[ImageSample],
                          root: str | Path, approach: str,
                          overlay_dir: str | Path | None = None
                          ) -> tuple[list[MetricsRecord], ReportRow]:
    """Evaluate a model trained on ``train_db`` over the ``test_db`` samples given."""
    train_db, test_db = frozenset(train_db), frozenset(test_db)
    if not train_db or not test_db:
        raise DatasetError("cross-sensor evaluation needs non-empty train and test databases")
    if train_db & test_db:
        raise DatasetError(
            f"train database {database_label(train_db)} overlaps test database "
            f"{database_label(test_db)}")
    chosen = [s for s in samples if s.sensor in test_db]
    if not chosen:
        raise EvaluationError(f"no samples from {database_label(test_db)} in the test split")
    label = f"{database_label(train_db)} -> {database_label(test_db)}"
    return evaluate(predictor, chosen, root, label, approach, overlay_dir)

