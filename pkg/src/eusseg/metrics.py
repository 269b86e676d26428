"""Pixel-level confusion counts, per-image metrics and bootstrap intervals."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

METRIC_NAMES = ("dsc", "iou", "sensitivity", "specificity", "accuracy")
CI_METRICS = ("dsc", "iou", "sensitivity", "specificity")
PER_IMAGE_COLUMNS = ("image_id", "image_path") + METRIC_NAMES + ("component_count",)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricResult:
    dsc: float
    iou: float
    sensitivity: float
    specificity: float
    accuracy: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class BootstrapCI:
    point: float
    lower: float
    upper: float
    level: float = 0.95
    n_resamples: int = 2000
    seed: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def _check_binary(name: str, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype != np.bool_:
        if not np.isin(mask, (0, 1)).all():
            raise ValueError(f"{name} mask must be binary")
        mask = mask.astype(bool)
    return mask


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    pred = _check_binary("pred", pred)
    gt = _check_binary("gt", gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=int(pred.size - tp - fp - fn))


def _ratio(num: int, den: int) -> float:
    # empty denominator means nothing to get wrong
    return 1.0 if den == 0 else num / den


def compute_metrics(counts: ConfusionCounts) -> MetricResult:
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    return MetricResult(
        dsc=_ratio(2 * tp, 2 * tp + fp + fn),
        iou=_ratio(tp, tp + fp + fn),
        sensitivity=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp),
        accuracy=_ratio(tp + tn, counts.total),
    )


def aggregate_mean(per_image: Sequence[MetricResult]) -> MetricResult:
    """Macro (per-image) mean of every metric."""
    if not per_image:
        raise ValueError("cannot aggregate an empty list of results")
    return MetricResult(**{m: float(np.mean([getattr(r, m) for r in per_image])) for m in METRIC_NAMES})


def bootstrap_ci(values: Iterable[float], level: float = 0.95, n_resamples: int = 2000,
                 seed: int = 0) -> BootstrapCI:
    """Percentile bootstrap interval for the mean of ``values``."""
    values = np.sort(np.asarray(list(values), dtype=np.float64))
    if values.size < 2:
        raise ValueError("bootstrap needs at least 2 values")
    if n_resamples < 100:
        raise ValueError("n_resamples must be >= 100")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, values.size, size=(n_resamples, values.size))
    means = values[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lower, upper = np.percentile(means, [100 * alpha, 100 * (1 - alpha)])
    point = float(values.mean())
    # percentile interpolation can land a hair past the mean for degenerate samples
    return BootstrapCI(point=point, lower=float(min(lower, point)), upper=float(max(upper, point)),
                       level=level, n_resamples=n_resamples, seed=seed)


# ---------------------------------------------------------------- dataset evaluation


@dataclass
class ImageEvaluation:
    image_id: str
    image_path: str
    metrics: MetricResult
    component_count: int

    def row(self) -> dict:
        return {"image_id": self.image_id, "image_path": self.image_path,
                **self.metrics.as_dict(), "component_count": self.component_count}


@dataclass
class EvaluationReport:
    per_image: list[ImageEvaluation]
    aggregate: MetricResult
    cis: dict[str, BootstrapCI]
    failures: list[dict] = field(default_factory=list)

    @property
    def n_images(self) -> int:
        return len(self.per_image)

    def summary(self) -> dict:
        return {
            "n_images": self.n_images,
            "n_failed": len(self.failures),
            "failures": self.failures,
            "metrics": {
                m: {"mean": getattr(self.aggregate, m),
                    **({"ci_lower": self.cis[m].lower, "ci_upper": self.cis[m].upper,
                        "ci_level": self.cis[m].level, "n_resamples": self.cis[m].n_resamples,
                        "seed": self.cis[m].seed} if m in self.cis else {})}
                for m in METRIC_NAMES
            },
        }


def image_id_for(index: int, image_path: str | Path) -> str:
    return f"{index:05d}_{Path(image_path).stem}"


def evaluate_dataset(segment: Callable[[np.ndarray], np.ndarray], samples: Iterable,
                     n_resamples: int = 2000, seed: int = 0,
                     on_prediction: Callable | None = None) -> EvaluationReport:
    """Score a segmenter over preprocessed samples.

    ``segment`` maps a 2-D image to a binary mask of the same shape.
    ``samples`` yields ``(image_id, image_path, SegSample)`` tuples, or the
    exception raised while producing that sample in place of the sample;
    failed images are recorded in ``failures`` and excluded from the means.
    ``on_prediction(image_id, sample, pred)`` is called for every scored image.
    """
    from .analysis import connected_components

    per_image, failures = [], []
    for image_id, image_path, sample in samples:
        try:
            if isinstance(sample, Exception):
                raise sample
            pred = np.asarray(segment(sample.image)).astype(np.uint8)
            metrics = compute_metrics(confusion(pred, sample.mask))
        except Exception as exc:  # noqa: BLE001 - recorded, never silently dropped
            log.warning("evaluation failed for %s: %s", image_path, exc)
            failures.append({"image_id": image_id, "image_path": str(image_path), "error": str(exc)})
            continue
        per_image.append(ImageEvaluation(image_id, str(image_path), metrics,
                                         connected_components(pred).component_count))
        if on_prediction is not None:
            on_prediction(image_id, sample, pred)
    if not per_image:
        raise RuntimeError(f"no image could be evaluated ({len(failures)} failures)")
    results = [e.metrics for e in per_image]
    aggregate = aggregate_mean(results)
    cis = {}
    if len(results) >= 2:
        cis = {m: bootstrap_ci([getattr(r, m) for r in results], n_resamples=n_resamples, seed=seed)
               for m in CI_METRICS}
    return EvaluationReport(per_image=per_image, aggregate=aggregate, cis=cis, failures=failures)


def write_per_image(report: EvaluationReport, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=PER_IMAGE_COLUMNS)
        writer.writeheader()
        for e in report.per_image:
            row = e.row()
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path


def read_per_image(path: str | Path) -> list[dict]:
    rows = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            for m in METRIC_NAMES:
                row[m] = float(row[m])
            row["component_count"] = int(row["component_count"])
            rows.append(row)
    return rows


def write_aggregate(report: EvaluationReport, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report.summary(), indent=2) + "\n", encoding="utf-8")
    return path
