"""Seedable two-domain 2-D segmentation benchmark.

Anatomy is a family of nested ellipse/annulus structures (a ring, an inner
disk, and an adjacent blob) with discrete presence/absence topology variants,
randomized affine pose, and smooth elastic perturbation. Both domains share
the anatomy family; they differ in appearance: the target domain applies a
gamma remap and optional intensity inversion, plus its own noise level and
smooth multiplicative bias field.

Randomness is counter-based (Philox keyed by SeedSequence(seed, stream, index))
so a fixed seed yields byte-identical datasets regardless of generation order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

# stream ids for per-sample RNG derivation
_ANATOMY_STREAM = 0
_APPEARANCE_STREAM_SOURCE = 1
_APPEARANCE_STREAM_TARGET = 2

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

# (ring, disk, blob) presence patterns; >= 4 distinct topologies so several
# bases are needed to cover the family.
TOPOLOGY_PATTERNS = [
    (1, 1, 1),
    (1, 1, 0),
    (1, 0, 1),
    (1, 0, 0),
    (0, 1, 1),
]


@dataclass
class GeneratorConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 3  # ring, disk, blob
    topology_variants: int = 5
    n_source_train: int = 200
    n_source_val: int = 25
    n_target_train: int = 200
    n_target_val: int = 25
    n_target_test: int = 50
    spacing_mm: float = 1.0
    seed: int = 0
    # appearance: per-class base intensities (background first)
    source_levels: tuple[float, ...] = (0.15, 0.75, 0.45, 0.6)
    target_levels: tuple[float, ...] = (0.15, 0.75, 0.45, 0.6)
    level_jitter: float = 0.05
    edge_blur: float = 0.7
    # domain shift knobs
    target_gamma: float = 1.6
    target_invert: bool = True
    noise_source: float = 0.02
    noise_target: float = 0.04
    bias_source: float = 0.1
    bias_target: float = 0.3
    # geometry
    elastic_px: float = 1.5
    max_rotation_deg: float = 15.0
    max_shift_px: float = 3.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    # anatomy ids for the target domain start here; 0 pairs them with source
    target_anatomy_offset: int = 100_000

    def validate(self) -> list[str]:
        errors = []
        for name in ("n_source_train", "n_source_val", "n_target_train", "n_target_val", "n_target_test"):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be >= 1")
        if self.num_classes != 3:
            errors.append("generator anatomy family is defined for exactly 3 foreground classes")
        if not 2 <= self.topology_variants <= len(TOPOLOGY_PATTERNS):
            errors.append(f"topology_variants must be in 2..{len(TOPOLOGY_PATTERNS)}")
        if len(self.source_levels) != self.num_classes + 1 or len(self.target_levels) != self.num_classes + 1:
            errors.append("intensity level tuples must have num_classes + 1 entries")
        if self.height < 32 or self.width < 32:
            errors.append("images smaller than 32 px are not supported")
        if self.spacing_mm <= 0:
            errors.append("spacing_mm must be positive")
        return errors


def _rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, stream, index))))


def _sample_anatomy(cfg: GeneratorConfig, anatomy_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Label map for one subject plus its per-class brightness jitter."""
    rng = _rng(cfg.seed, _ANATOMY_STREAM, anatomy_id)
    h, w = cfg.height, cfg.width
    pattern = TOPOLOGY_PATTERNS[int(rng.integers(0, cfg.topology_variants))]

    # pose
    angle = np.deg2rad(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
    scale = rng.uniform(*cfg.scale_range)
    shift = rng.uniform(-cfg.max_shift_px, cfg.max_shift_px, size=2)

    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    # elastic perturbation of the sampling coordinates
    if cfg.elastic_px > 0:
        disp = gaussian_filter(rng.standard_normal((2, h, w)), sigma=(0, 8, 8))
        peak = np.abs(disp).max()
        if peak > 0:
            disp *= cfg.elastic_px / peak
        rr = rr + disp[0]
        cc = cc + disp[1]

    cy, cx = (h - 1) / 2.0 + shift[0], (w - 1) / 2.0 + shift[1]
    ca, sa = np.cos(angle), np.sin(angle)
    u = (ca * (rr - cy) + sa * (cc - cx)) / scale
    v = (-sa * (rr - cy) + ca * (cc - cx)) / scale

    # base shapes in canonical pose, sized for a 64px frame and scaled with it
    unit = min(h, w) / 64.0
    r_out = (17.0 + rng.uniform(-2.0, 2.0)) * unit
    aspect = rng.uniform(0.75, 1.0)
    inner_frac = rng.uniform(0.55, 0.7)
    ring = (u / r_out) ** 2 + (v / (r_out * aspect)) ** 2 <= 1.0
    disk = (u / (r_out * inner_frac)) ** 2 + (v / (r_out * aspect * inner_frac)) ** 2 <= 1.0

    blob_angle = rng.uniform(0, 2 * np.pi)
    blob_dist = r_out * rng.uniform(1.35, 1.6)
    bu, bv = blob_dist * np.cos(blob_angle), blob_dist * np.sin(blob_angle) * aspect
    r_blob = (7.0 + rng.uniform(-1.5, 1.5)) * unit
    blob = ((u - bu) ** 2 + (v - bv) ** 2) <= r_blob**2

    label = np.zeros((h, w), dtype=np.uint8)
    if pattern[0]:
        label[ring & ~disk] = 1
    if pattern[1]:
        label[disk] = 2
    elif pattern[0]:
        label[disk] = 1  # no inner disk: the ring fills in
    if pattern[2]:
        label[blob & (label == 0)] = 3

    jitter = rng.uniform(-cfg.level_jitter, cfg.level_jitter, size=cfg.num_classes + 1)
    return label, jitter


def _render(cfg: GeneratorConfig, label: np.ndarray, jitter: np.ndarray, domain: str, index: int) -> np.ndarray:
    rng = _rng(cfg.seed, _APPEARANCE_STREAM_SOURCE if domain == "source" else _APPEARANCE_STREAM_TARGET, index)
    levels = np.asarray(cfg.source_levels if domain == "source" else cfg.target_levels, dtype=np.float64)
    img = (levels + jitter)[label]
    if cfg.edge_blur > 0:
        img = gaussian_filter(img, sigma=cfg.edge_blur)
    img = np.clip(img, 0.0, 1.0)

    if domain == "target":
        img = img ** cfg.target_gamma
        if cfg.target_invert:
            img = 1.0 - img

    bias_amp = cfg.bias_source if domain == "source" else cfg.bias_target
    if bias_amp > 0:
        bias = gaussian_filter(rng.standard_normal(label.shape), sigma=16)
        peak = np.abs(bias).max()
        if peak > 0:
            img = img * (1.0 + bias_amp * bias / peak)

    noise = cfg.noise_source if domain == "source" else cfg.noise_target
    if noise > 0:
        img = img + rng.normal(0.0, noise, size=label.shape)

    img = np.clip(img, 0.0, None)
    lo, hi = img.min(), img.max()
    if hi - lo < 1e-12:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def _save_image(path: Path, img: np.ndarray) -> None:
    arr = np.round(np.clip(img, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(path)


def _save_label(path: Path, label: np.ndarray) -> None:
    Image.fromarray(label.astype(np.uint8), mode="L").save(path)


def generate(cfg: GeneratorConfig, out_dir: str | Path) -> Path:
    """Write the benchmark to `out_dir` and return the manifest path.

    Layout: <split>/images/<id>.png (16-bit grayscale), <split>/labels/<id>.png
    (8-bit class ids; omitted for the unlabeled target train split), plus a
    root manifest.json indexing every sample.
    """
    errors = cfg.validate()
    if errors:
        raise ValueError("; ".join(errors))
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {root}: {e}") from e

    splits = [
        ("source_train", "source", cfg.n_source_train, True, 0),
        ("source_val", "source", cfg.n_source_val, True, cfg.n_source_train),
        ("target_train", "target", cfg.n_target_train, False, cfg.target_anatomy_offset),
        ("target_val", "target", cfg.n_target_val, True, cfg.target_anatomy_offset + cfg.n_target_train),
        (
            "target_test",
            "target",
            cfg.n_target_test,
            True,
            cfg.target_anatomy_offset + cfg.n_target_train + cfg.n_target_val,
        ),
    ]

    records = []
    for split, domain, count, labeled, id_base in splits:
        img_dir = root / split / "images"
        lab_dir = root / split / "labels"
        img_dir.mkdir(parents=True, exist_ok=True)
        if labeled:
            lab_dir.mkdir(parents=True, exist_ok=True)
        for k in range(count):
            anatomy_id = id_base + k
            sid = f"{split}_{k:04d}"
            label, jitter = _sample_anatomy(cfg, anatomy_id)
            img = _render(cfg, label, jitter, domain, anatomy_id)
            img_rel = f"{split}/images/{sid}.png"
            _save_image(root / img_rel, img)
            lab_rel = None
            if labeled:
                lab_rel = f"{split}/labels/{sid}.png"
                _save_label(root / lab_rel, label)
            records.append(
                {
                    "id": sid,
                    "domain": domain,
                    "split": split,
                    "image": img_rel,
                    "label": lab_rel,
                    "spacing_mm": [cfg.spacing_mm, cfg.spacing_mm],
                }
            )

    manifest = {
        "format_version": MANIFEST_VERSION,
        "image_size": [cfg.height, cfg.width],
        "num_classes": cfg.num_classes,
        "generator": asdict(cfg),
        "samples": records,
    }
    manifest_path = root / MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return manifest_path
