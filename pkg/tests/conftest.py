import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from eusseg.dataset import SegSample


def blob_sample(seed: int, size: int = 64) -> SegSample:
    """Dark elliptical lesion on a brighter speckled background."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    cy, cx = rng.uniform(0.28 * size, 0.72 * size, 2)
    ry, rx = rng.uniform(0.12 * size, 0.25 * size, 2)
    mask = ((((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) <= 1).astype(np.uint8)
    image = np.clip(0.6 - 0.35 * mask + rng.normal(0, 0.05, (size, size)), 0, 1).astype(np.float32)
    return SegSample(image=image, mask=mask)


def write_dataset(root: Path, cases: dict[str, int], size: int = 80, seed: int = 0,
                  color: bool = False, crop=None, name: str = "manifest.jsonl") -> Path:
    """Write PNG frames + masks for ``{case_id: n_frames}`` and a manifest next to them."""
    root.mkdir(parents=True, exist_ok=True)
    (root / "images").mkdir(exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    lines = []
    k = 0
    for case_id, n in cases.items():
        for j in range(n):
            sample = blob_sample(seed * 100000 + k, size)
            pixels = np.round(sample.image * 255).astype(np.uint8)
            if color:
                pixels = np.stack([pixels] * 3, axis=-1)
            stem = f"{case_id}_{j:03d}"
            Image.fromarray(pixels).save(root / "images" / f"{stem}.png")
            Image.fromarray(sample.mask * 255).save(root / "masks" / f"{stem}.png")
            entry = {"image_path": f"images/{stem}.png", "mask_path": f"masks/{stem}.png",
                     "case_id": case_id, "source_id": "pancreatic_video"}
            if crop is not None:
                entry["crop"] = list(crop)
            lines.append(json.dumps(entry))
            k += 1
    path = root / name
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def small_dataset(tmp_path):
    return write_dataset(tmp_path / "data", {f"case{i:02d}": 1 + i % 2 for i in range(10)}, size=72)


# acceptance criteria report: filled by tests/test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
