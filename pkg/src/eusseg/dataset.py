"""Manifest ingestion, EUS frame preprocessing and group-aware fold generation.

Frames go through the same chain regardless of source: crop the periphery
(where scanners burn in text and scale bars), convert to grayscale, and
bicubic-resize to the model resolution. Masks follow the same crop and are
resized with nearest-neighbour sampling so they stay binary.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

MIN_CROPPED_SIZE = 32
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
BICUBIC_A = -0.5
MASK_THRESHOLD = 128
KNOWN_SOURCES = ("pancreatic_video", "gist514", "lep")


class ManifestError(ValueError):
    """Raised for a manifest that cannot be loaded or fails validation."""


@dataclass(frozen=True)
class CropSpec:
    left: int = 0
    top: int = 0
    right: int = 0
    bottom: int = 0

    def __post_init__(self):
        for name in ("left", "top", "right", "bottom"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 0:
                raise ValueError(f"crop offset {name} must be a non-negative integer, got {value!r}")

    def __add__(self, other: "CropSpec") -> "CropSpec":
        return CropSpec(self.left + other.left, self.top + other.top,
                        self.right + other.right, self.bottom + other.bottom)

    def as_list(self) -> list[int]:
        return [int(self.left), int(self.top), int(self.right), int(self.bottom)]


@dataclass(frozen=True)
class ImageRecord:
    image_path: Path
    mask_path: Path
    case_id: str
    source_id: str = "unknown"
    crop_spec: CropSpec | None = None

    @property
    def crop(self) -> CropSpec:
        return self.crop_spec or CropSpec()


@dataclass
class DatasetManifest:
    records: list[ImageRecord]
    root: Path = field(default_factory=Path.cwd)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ImageRecord]:
        return iter(self.records)

    def __getitem__(self, idx):
        return self.records[idx]

    @property
    def case_ids(self) -> list[str]:
        return sorted({r.case_id for r in self.records})


@dataclass
class SegSample:
    image: np.ndarray  # float32, H x W, values in [0, 1]
    mask: np.ndarray  # uint8, H x W, values in {0, 1}
    record: ImageRecord | None = None

    def __post_init__(self):
        if self.image.ndim != 2 or self.image.shape != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} must be equal 2-D shapes")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask must contain only 0 and 1")


@dataclass
class FoldAssignment:
    fold_index: int
    train_records: list[ImageRecord]
    val_records: list[ImageRecord]


# ---------------------------------------------------------------- manifest


def _parse_record(entry: dict, root: Path, where: str) -> ImageRecord:
    if not isinstance(entry, dict):
        raise ManifestError(f"{where}: expected an object, got {type(entry).__name__}")
    missing = [k for k in ("image_path", "mask_path", "case_id") if k not in entry]
    if missing:
        raise ManifestError(f"{where}: missing keys {missing}")
    case_id = str(entry["case_id"]).strip()
    if not case_id:
        raise ManifestError(f"{where}: case_id is empty")
    crop = entry.get("crop")
    crop_spec = None
    if crop is not None:
        if not isinstance(crop, (list, tuple)) or len(crop) != 4:
            raise ManifestError(f"{where}: crop must be four integers [left, top, right, bottom]")
        try:
            crop_spec = CropSpec(*crop)
        except ValueError as exc:
            raise ManifestError(f"{where}: {exc}") from None
    image_path = (root / entry["image_path"]).resolve()
    mask_path = (root / entry["mask_path"]).resolve()
    for label, path in (("image", image_path), ("mask", mask_path)):
        if not path.is_file():
            raise ManifestError(f"{where}: {label} file not found: {path}")
    return ImageRecord(
        image_path=image_path,
        mask_path=mask_path,
        case_id=case_id,
        source_id=str(entry.get("source_id", "unknown")),
        crop_spec=crop_spec,
    )


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load a JSON-lines manifest; paths inside are relative to its directory.

    Blank lines and lines starting with ``#`` are skipped. Errors name the
    1-based line number of the offending entry.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent.resolve()
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        where = f"{path.name}:{lineno}"
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{where}: malformed entry ({exc.msg})") from None
        records.append(_parse_record(entry, root, where))
    seen = set()
    for rec in records:
        if rec.image_path in seen:
            raise ManifestError(f"duplicate image_path in manifest: {rec.image_path}")
        seen.add(rec.image_path)
    log.info("loaded %d records from %s", len(records), path)
    return DatasetManifest(records=records, root=root)


def write_manifest(records: Sequence[ImageRecord], path: str | Path) -> Path:
    """Write records as a JSON-lines manifest with paths relative to it."""
    path = Path(path)
    root = path.parent.resolve()
    lines = []
    for rec in records:
        entry = {
            "image_path": _relpath(rec.image_path, root),
            "mask_path": _relpath(rec.mask_path, root),
            "case_id": rec.case_id,
            "source_id": rec.source_id,
        }
        if rec.crop_spec is not None:
            entry["crop"] = rec.crop_spec.as_list()
        lines.append(json.dumps(entry))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _relpath(p: Path, root: Path) -> str:
    p = Path(p).resolve()
    try:
        return p.relative_to(root).as_posix()
    except ValueError:
        return str(p)


# ---------------------------------------------------------------- raster io


def read_image(path: str | Path) -> np.ndarray:
    """Read a raster as float64 in [0, 1]; 2-D for grayscale, H x W x 3 for colour."""
    with Image.open(path) as im:
        if im.mode in ("P", "RGBA", "LA", "CMYK", "YCbCr"):
            im = im.convert("RGB" if im.mode != "LA" else "L")
        arr = np.asarray(im)
    if arr.dtype == np.bool_:
        return arr.astype(np.float64)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype in (np.uint16, np.int32) or im.mode.startswith("I"):
        # PIL exposes 16-bit PNGs as int32 in mode "I"
        return np.clip(arr.astype(np.float64) / 65535.0, 0.0, 1.0)
    raise ValueError(f"unsupported raster dtype {arr.dtype} in {path}")


def read_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("1", "L", "I", "I;16", "P"):
            im = im.convert("L")
        arr = np.asarray(im)
    return binarize_mask(arr)


def binarize_mask(mask: np.ndarray) -> np.ndarray:
    """Masks already in {0, 1} are kept; anything else is thresholded at 128 (8-bit scale)."""
    mask = np.asarray(mask)
    if mask.dtype == np.bool_:
        return mask.astype(np.uint8)
    if np.isin(mask, (0, 1)).all():
        return mask.astype(np.uint8)
    scale = 65535.0 if mask.max() > 255 else 255.0
    return (mask.astype(np.float64) * (255.0 / scale) >= MASK_THRESHOLD).astype(np.uint8)


# ---------------------------------------------------------------- preprocessing


def crop_periphery(image: np.ndarray, spec: CropSpec) -> np.ndarray:
    h, w = image.shape[:2]
    out_h = h - spec.top - spec.bottom
    out_w = w - spec.left - spec.right
    if out_h < MIN_CROPPED_SIZE or out_w < MIN_CROPPED_SIZE:
        raise ValueError(
            f"crop {spec.as_list()} leaves {out_h}x{out_w} of a {h}x{w} image; "
            f"at least {MIN_CROPPED_SIZE}x{MIN_CROPPED_SIZE} is required"
        )
    return image[spec.top:h - spec.bottom, spec.left:w - spec.right].copy()


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """BT.601 luma for 3-channel input; single-channel input is returned as is."""
    image = np.asarray(image)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[2] == 1:
        return image[..., 0]
    if image.ndim == 3 and image.shape[2] == 3:
        r, g, b = (image[..., c].astype(np.float64) for c in range(3))
        return LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b
    raise ValueError(f"unsupported image shape {image.shape}; expected H x W or H x W x 3")


def cubic_kernel(x: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _bicubic_weights(in_size: int, out_size: int) -> np.ndarray:
    # Half-pixel-centre alignment; out-of-range taps are folded onto the edge pixel.
    scale = in_size / out_size
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    base = np.floor(src).astype(np.int64)
    weights = np.zeros((out_size, in_size))
    rows = np.arange(out_size)
    for offset in (-1, 0, 1, 2):
        tap = base + offset
        w = cubic_kernel(src - tap)
        np.add.at(weights, (rows, np.clip(tap, 0, in_size - 1)), w)
    return weights


def resize_bicubic(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if out_h < 4 or out_w < 4:
        raise ValueError(f"target size {out_h}x{out_w} is degenerate (minimum 4x4)")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {image.shape}")
    wy = _bicubic_weights(image.shape[0], out_h)
    wx = _bicubic_weights(image.shape[1], out_w)
    return np.clip(wy @ image @ wx.T, 0.0, 1.0)


def resize_mask_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must be binary (values 0 and 1)")
    h, w = mask.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return mask[np.ix_(rows, cols)].astype(np.uint8)


def preprocess_arrays(image: np.ndarray, mask: np.ndarray, crop: CropSpec,
                      target: tuple[int, int] = (512, 512)) -> tuple[np.ndarray, np.ndarray]:
    out_h, out_w = target
    gray = to_grayscale(crop_periphery(image, crop))
    if gray.shape != (out_h, out_w):
        gray = resize_bicubic(gray, out_h, out_w)
    mask = crop_periphery(binarize_mask(mask), crop)
    if mask.shape != (out_h, out_w):
        mask = resize_mask_nearest(mask, out_h, out_w)
    return gray.astype(np.float32), mask.astype(np.uint8)


def preprocess_sample(record: ImageRecord, target: tuple[int, int] = (512, 512)) -> SegSample:
    try:
        image = read_image(record.image_path)
        mask = read_mask(record.mask_path)
    except (OSError, ValueError) as exc:
        raise ManifestError(f"cannot read {record.image_path} / {record.mask_path}: {exc}") from exc
    try:
        image, mask = preprocess_arrays(image, mask, record.crop, target)
    except ValueError as exc:
        raise ManifestError(f"{record.image_path}: {exc}") from exc
    return SegSample(image=image, mask=mask, record=record)


# ---------------------------------------------------------------- folds


def make_folds(manifest: DatasetManifest | Sequence[ImageRecord], k: int = 5, seed: int = 0,
               group_by_case: bool = True) -> list[FoldAssignment]:
    """Split records into ``k`` train/val folds.

    With ``group_by_case`` the distinct case ids are shuffled by ``seed`` and
    dealt round-robin, so every frame of a case lands in the same fold.
    Without it, individual records are shuffled and dealt the same way.
    """
    records = list(manifest)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    rng = np.random.default_rng(seed)
    if group_by_case:
        cases = sorted({r.case_id for r in records})
        if len(cases) < k:
            raise ValueError(f"{len(cases)} distinct cases cannot fill {k} folds")
        order = rng.permutation(len(cases))
        fold_of_case = {cases[c]: i % k for i, c in enumerate(order)}
        fold_of = [fold_of_case[r.case_id] for r in records]
    else:
        if len(records) < k:
            raise ValueError(f"{len(records)} records cannot fill {k} folds")
        order = rng.permutation(len(records))
        fold_of = [0] * len(records)
        for i, idx in enumerate(order):
            fold_of[idx] = i % k
    folds = []
    for f in range(k):
        val = [r for r, g in zip(records, fold_of) if g == f]
        train = [r for r, g in zip(records, fold_of) if g != f]
        folds.append(FoldAssignment(fold_index=f, train_records=train, val_records=val))
    return folds


def save_folds(folds: Sequence[FoldAssignment], path: str | Path, root: str | Path | None = None) -> Path:
    path = Path(path)
    root = Path(root).resolve() if root is not None else path.parent.resolve()
    payload = {
        "k": len(folds),
        "folds": [
            {
                "fold_index": f.fold_index,
                "train": [_relpath(r.image_path, root) for r in f.train_records],
                "val": [_relpath(r.image_path, root) for r in f.val_records],
            }
            for f in folds
        ],
    }
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return path


def load_folds(path: str | Path, manifest: DatasetManifest, root: str | Path | None = None) -> list[FoldAssignment]:
    """Rebuild fold assignments from a saved file against ``manifest`` records."""
    path = Path(path)
    root = Path(root).resolve() if root is not None else path.parent.resolve()
    by_path = {r.image_path: r for r in manifest}
    payload = json.loads(path.read_text(encoding="utf-8"))
    folds = []
    for entry in payload["folds"]:
        def lookup(rel):
            p = (root / rel).resolve()
            if p not in by_path:
                raise ManifestError(f"{path.name}: fold {entry['fold_index']} references unknown record {rel}")
            return by_path[p]
        folds.append(FoldAssignment(
            fold_index=int(entry["fold_index"]),
            train_records=[lookup(p) for p in entry["train"]],
            val_records=[lookup(p) for p in entry["val"]],
        ))
    return folds
