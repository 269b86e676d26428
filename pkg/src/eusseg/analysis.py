"""Failure analysis: DSC buckets, multi-component predictions, overlay panels."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

COMPLETE_FAILURE_DSC = 0.1
POOR_DSC = 0.5
OVERLAY_ALPHA = 0.5
OVERLAY_COLOR = (1.0, 0.0, 0.0)
HEADER_HEIGHT = 14

_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


@dataclass
class ComponentStats:
    component_count: int
    component_sizes: list[int]


@dataclass
class FailureReport:
    complete_failures: list[str]
    poor_cases: list[str]
    multi_prediction_rate: float
    n_images: int
    thresholds: tuple[float, float] = (COMPLETE_FAILURE_DSC, POOR_DSC)
    annotations: dict[str, dict] = field(default_factory=dict)

    @property
    def multi_prediction_percent(self) -> str:
        return format_rate(self.multi_prediction_rate)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["thresholds"] = list(self.thresholds)
        out["multi_prediction_percent"] = self.multi_prediction_percent
        out["n_complete_failures"] = len(self.complete_failures)
        out["n_poor_cases"] = len(self.poor_cases)
        return out


def format_rate(rate: float) -> str:
    return f"{100 * rate:.1f}%"


def connected_components(mask: np.ndarray, connectivity: int = 8) -> ComponentStats:
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must be binary")
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    labels, count = ndimage.label(mask, structure=_STRUCTURES[connectivity])
    sizes = np.bincount(labels.ravel())[1:] if count else np.zeros(0, dtype=np.int64)
    return ComponentStats(component_count=int(count), component_sizes=sorted((int(s) for s in sizes), reverse=True))


def bucket_failures(per_image: Sequence[tuple[str, float, ComponentStats]],
                    complete_below: float = COMPLETE_FAILURE_DSC,
                    poor_below: float = POOR_DSC) -> FailureReport:
    """Sort images into complete failures (dsc < 0.1) and poor cases (0.1 <= dsc < 0.5)."""
    complete, poor, annotations = [], [], {}
    multi = 0
    for image_id, dsc, stats in per_image:
        if not 0.0 <= dsc <= 1.0:
            raise ValueError(f"{image_id}: dsc {dsc} outside [0, 1]")
        if dsc < complete_below:
            bucket = "complete_failure"
            complete.append(image_id)
        elif dsc < poor_below:
            bucket = "poor"
            poor.append(image_id)
        else:
            bucket = "acceptable"
        multi += stats.component_count > 1
        annotations[image_id] = {"dsc": dsc, "bucket": bucket,
                                 "component_count": stats.component_count,
                                 "component_sizes": stats.component_sizes}
    n = len(per_image)
    return FailureReport(complete_failures=complete, poor_cases=poor,
                         multi_prediction_rate=multi / n if n else 0.0, n_images=n,
                         thresholds=(complete_below, poor_below), annotations=annotations)


def overlay_caption(dsc: float | None) -> str:
    return "DSC: n/a" if dsc is None else f"DSC: {dsc:.3f}"


def render_overlay(image: np.ndarray, gt: np.ndarray, pred: np.ndarray,
                   dsc: float | None = None) -> np.ndarray:
    """Three panels (input | ground truth | red prediction overlay) under a DSC caption strip.

    Returns an RGB uint8 array of shape (HEADER_HEIGHT + H) x 3W x 3.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape != np.shape(gt) or image.shape != np.shape(pred):
        raise ValueError(f"shape mismatch: image {image.shape}, gt {np.shape(gt)}, pred {np.shape(pred)}")
    gray = np.repeat(np.clip(image, 0.0, 1.0)[..., None], 3, axis=2)
    gt_panel = np.repeat(np.asarray(gt, dtype=np.float64)[..., None], 3, axis=2)
    over = gray.copy()
    sel = np.asarray(pred).astype(bool)
    over[sel] = (1 - OVERLAY_ALPHA) * gray[sel] + OVERLAY_ALPHA * np.asarray(OVERLAY_COLOR)
    panels = np.concatenate([gray, gt_panel, over], axis=1)
    panels = np.round(panels * 255).astype(np.uint8)

    h, w3 = panels.shape[:2]
    header = Image.new("RGB", (w3, HEADER_HEIGHT), (0, 0, 0))
    ImageDraw.Draw(header).text((2, 1), overlay_caption(dsc), fill=(255, 255, 255))
    return np.concatenate([np.asarray(header), panels], axis=0)


def split_panels(raster: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    body = raster[HEADER_HEIGHT:]
    w = body.shape[1] // 3
    return body[:, :w], body[:, w:2 * w], body[:, 2 * w:]


def save_overlay(raster: np.ndarray, out_dir: str | Path, image_id: str) -> Path:
    path = Path(out_dir) / f"{image_id}_overlay.png"
    Image.fromarray(raster).save(path)
    return path


def write_failure_report(report: FailureReport, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    return path
