"""On-disk dataset format: loading, validation, and preprocessing.

A dataset directory holds per-split image/label PNGs plus a root
manifest.json; see synthetic.generate for the writer. Loading validates the
manifest schema field by field and returns in-memory samples.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import zoom

from .synthetic import MANIFEST_NAME, MANIFEST_VERSION

DOMAINS = ("source", "target")
SPLITS = ("source_train", "source_val", "target_train", "target_val", "target_test")


class DataError(ValueError):
    """Malformed dataset directory or manifest."""


@dataclass
class Sample:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    label: np.ndarray | None  # (H, W) int64, None for unlabeled
    domain: str
    split: str
    subject_id: str
    spacing_mm: tuple[float, float]

    def __post_init__(self):
        if self.image.min() < -1e-6 or self.image.max() > 1 + 1e-6:
            raise DataError(f"{self.subject_id}: image not normalized to [0, 1]")
        if self.domain not in DOMAINS:
            raise DataError(f"{self.subject_id}: unknown domain {self.domain!r}")


def _require(record: dict, fld: str, idx: int):
    if fld not in record or record[fld] is None:
        raise DataError(f"manifest sample #{idx}: missing field {fld!r}")
    return record[fld]


def load_image(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.dtype == np.uint16 or arr.dtype == np.int32:
        return (arr.astype(np.float32) / 65535.0).clip(0.0, 1.0)
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    raise DataError(f"unsupported image dtype {arr.dtype} in {path}")


def load_label(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path)).astype(np.int64)


def load_dataset(root: str | Path, num_classes: int | None = None) -> list[Sample]:
    """Load and validate every sample listed in the manifest.

    An empty directory yields an empty list with a warning; a directory with
    content but no manifest, or a malformed manifest, raises DataError naming
    the offending field. Source samples must carry labels.
    """
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        if not root.exists() or not any(root.iterdir()):
            warnings.warn(f"no dataset at {root}; returning no samples")
            return []
        raise DataError(f"{root} has content but no {MANIFEST_NAME}")

    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"manifest is not valid JSON: {e}") from e
    for fld in ("format_version", "image_size", "num_classes", "samples"):
        if fld not in manifest:
            raise DataError(f"manifest: missing field {fld!r}")
    if manifest["format_version"] != MANIFEST_VERSION:
        raise DataError(f"manifest: unsupported format_version {manifest['format_version']}")
    k = int(manifest["num_classes"]) if num_classes is None else num_classes

    samples = []
    for idx, rec in enumerate(manifest["samples"]):
        sid = _require(rec, "id", idx)
        domain = _require(rec, "domain", idx)
        split = _require(rec, "split", idx)
        spacing = _require(rec, "spacing_mm", idx)
        if not isinstance(spacing, (list, tuple)) or len(spacing) != 2:
            raise DataError(f"manifest sample #{idx}: field 'spacing_mm' must be a [row, col] pair")
        image_rel = _require(rec, "image", idx)
        image_path = root / image_rel
        if not image_path.exists():
            raise DataError(f"manifest sample #{idx}: field 'image' points to missing file {image_rel}")

        label = None
        if rec.get("label") is not None:
            label_path = root / rec["label"]
            if not label_path.exists():
                raise DataError(f"manifest sample #{idx}: field 'label' points to missing file {rec['label']}")
            label = load_label(label_path)
            if label.max() > k:
                raise DataError(f"{sid}: label class {label.max()} exceeds num_classes={k}")
        elif domain == "source":
            raise DataError(f"{sid}: source sample without a label")

        samples.append(
            Sample(
                image=load_image(image_path),
                label=label,
                domain=domain,
                split=split,
                subject_id=sid,
                spacing_mm=(float(spacing[0]), float(spacing[1])),
            )
        )
    return samples


def split_samples(samples: list[Sample], split: str) -> list[Sample]:
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}; expected one of {SPLITS}")
    return [s for s in samples if s.split == split]


def preprocess(
    image: np.ndarray,
    spacing_mm: tuple[float, float],
    target_spacing_mm: float,
    crop_size: tuple[int, int],
) -> np.ndarray:
    """Resample to isotropic target spacing, center crop/pad, min-max normalize."""
    if spacing_mm[0] <= 0 or spacing_mm[1] <= 0 or target_spacing_mm <= 0:
        raise ValueError("spacings must be positive")
    factors = (spacing_mm[0] / target_spacing_mm, spacing_mm[1] / target_spacing_mm)
    out = image.astype(np.float64)
    if factors != (1.0, 1.0):
        out = zoom(out, factors, order=1)

    th, tw = crop_size
    h, w = out.shape
    if h < th or w < tw:
        pad_r, pad_c = max(th - h, 0), max(tw - w, 0)
        out = np.pad(
            out,
            ((pad_r // 2, pad_r - pad_r // 2), (pad_c // 2, pad_c - pad_c // 2)),
            mode="edge",
        )
        h, w = out.shape
    r0, c0 = (h - th) // 2, (w - tw) // 2
    out = out[r0 : r0 + th, c0 : c0 + tw]

    lo, hi = out.min(), out.max()
    if hi - lo < 1e-12:
        warnings.warn("constant image; normalizing to zeros")
        return np.zeros_like(out, dtype=np.float32)
    return ((out - lo) / (hi - lo)).astype(np.float32)
