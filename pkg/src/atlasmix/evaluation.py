"""Metrics (DSC, ASSD), checkpoint evaluation, manifold traversal, latent export."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch
from scipy.spatial.distance import cdist

from .bases import mix_posterior
from .data import Sample
from .networks import AdaptiveSegmenter
from .simplex import fisher_rao_distance, geodesic_interpolate

ACTIVATION_THRESHOLD = 1e-3


def dsc(pred: np.ndarray, true: np.ndarray, k: int) -> float:
    """Dice overlap of class k; both masks empty scores 1, exactly one empty 0."""
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {true.shape}")
    a = pred == k
    b = true == k
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return 2.0 * float((a & b).sum()) / (na + nb)


def _surface_points(mask: np.ndarray) -> np.ndarray:
    """Coordinates of mask pixels with a background 4-neighbor (image edge counts)."""
    padded = np.pad(mask, 1, mode="constant", constant_values=False)
    inner = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return np.argwhere(mask & ~inner)


def assd(
    pred: np.ndarray,
    true: np.ndarray,
    k: int,
    spacing_mm: tuple[float, float] = (1.0, 1.0),
) -> tuple[float, bool]:
    """Average symmetric surface distance of class k in mm.

    Returns (value, degenerate). Both masks empty -> 0; exactly one empty ->
    image diagonal in mm with the degenerate flag set, so empty predictions
    penalize the mean instead of silently vanishing.
    """
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {true.shape}")
    a = pred == k
    b = true == k
    if not a.any() and not b.any():
        return 0.0, False
    if not a.any() or not b.any():
        h, w = pred.shape
        diag = math.hypot(h * spacing_mm[0], w * spacing_mm[1])
        return diag, True
    pa = _surface_points(a) * np.asarray(spacing_mm)
    pb = _surface_points(b) * np.asarray(spacing_mm)
    d = cdist(pa, pb)
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean()), False


@dataclass
class MetricReport:
    """Per-subject and aggregate DSC (%) / ASSD (mm) over a labeled split."""

    class_names: list[str]
    rows: list[dict] = field(default_factory=list)  # one per subject

    def aggregate(self) -> dict:
        agg = {}
        for key in ("dsc", "assd"):
            per_class = {
                name: np.array([r[f"{key}_{name}"] for r in self.rows]) for name in self.class_names
            }
            avg = np.array([r[f"{key}_avg"] for r in self.rows])
            agg[key] = {
                "avg": (float(avg.mean()), float(avg.std())),
                **{n: (float(v.mean()), float(v.std())) for n, v in per_class.items()},
            }
        return agg

    def mean_dsc(self) -> float:
        return float(np.mean([r["dsc_avg"] for r in self.rows]))

    def write_csv(self, path: Path) -> None:
        keys = list(self.rows[0].keys())
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            writer.writerows(self.rows)

    def to_text(self) -> str:
        agg = self.aggregate()
        lines = [f"{'':12s} {'DSC (%)':>16s} {'ASSD (mm)':>16s}"]
        for name in ["avg"] + self.class_names:
            d_m, d_s = agg["dsc"][name]
            a_m, a_s = agg["assd"][name]
            lines.append(f"{name:12s} {d_m:7.1f}±{d_s:5.2f}   {a_m:7.2f}±{a_s:5.2f}")
        n_flagged = sum(r["flagged"] for r in self.rows)
        if n_flagged:
            lines.append(f"[{n_flagged} subject(s) had empty predictions; ASSD fell back to the image diagonal]")
        return "\n".join(lines)


def evaluate(
    model: AdaptiveSegmenter,
    samples: list[Sample],
    out_dir: str | Path | None = None,
) -> MetricReport:
    """Expectation-mode inference and per-subject metrics over a labeled split."""
    from .training import predict_labels, to_arrays

    if any(s.label is None for s in samples):
        raise ValueError("evaluation split must be fully labeled")
    split = to_arrays(samples)
    preds = predict_labels(model, split.images).numpy()

    k_fg = model.cfg.num_classes
    class_names = [f"class{k}" for k in range(1, k_fg + 1)]
    report = MetricReport(class_names=class_names)
    for i, s in enumerate(samples):
        row = {"subject_id": s.subject_id, "domain": s.domain}
        dscs, assds, flagged = [], [], False
        for k, name in zip(range(1, k_fg + 1), class_names):
            d = 100.0 * dsc(preds[i], s.label, k)
            a, degenerate = assd(preds[i], s.label, k, s.spacing_mm)
            flagged |= degenerate
            row[f"dsc_{name}"] = d
            row[f"assd_{name}"] = a
            dscs.append(d)
            assds.append(a)
        row["dsc_avg"] = float(np.mean(dscs))
        row["assd_avg"] = float(np.mean(assds))
        row["flagged"] = int(flagged)
        report.rows.append(row)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.write_csv(out_dir / "metrics.csv")
        (out_dir / "metrics.txt").write_text(report.to_text() + "\n")
    return report


@torch.no_grad()
def decode_weight_path(model: AdaptiveSegmenter, weights: torch.Tensor) -> torch.Tensor:
    """Decode template-space segmentations for a (N, M) path of weights.

    Templates use posterior means (no sampling, no deformation), which is the
    canonical-shape view of the manifold.
    """
    model.eval()
    z = [mix_posterior(model.basis_bank, weights, l).mean for l in range(model.cfg.levels)]
    return model.seg_decoder(z)


@torch.no_grad()
def infer_weights(model: AdaptiveSegmenter, images: torch.Tensor, batch: int = 64) -> torch.Tensor:
    model.eval()
    out = []
    for i in range(0, images.shape[0], batch):
        content = model.content_encoder(images[i : i + batch])
        out.append(model.weight_head(content[0]))
    return torch.cat(out)


def _save_traversal_grid(path: Path, maps: torch.Tensor, alphas: np.ndarray, title: str) -> None:
    n = maps.shape[0]
    labels = maps.argmax(dim=1).numpy()
    fig, axes = plt.subplots(1, n, figsize=(1.6 * n, 2.0))
    for ax, lab, a in zip(np.atleast_1d(axes), labels, alphas):
        ax.imshow(lab, cmap="viridis", vmin=0, vmax=maps.shape[1] - 1, interpolation="nearest")
        ax.set_title(f"a={a:.2f}", fontsize=8)
        ax.axis("off")
    fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _write_weight_path(path: Path, alphas: np.ndarray, weights: torch.Tensor) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha"] + [f"w{m}" for m in range(weights.shape[1])])
        for a, row in zip(alphas, weights.numpy()):
            writer.writerow([repr(float(a))] + [repr(float(x)) for x in row])


def traverse_path(
    model: AdaptiveSegmenter, w_start: torch.Tensor, w_end: torch.Tensor, n_steps: int
) -> tuple[np.ndarray, torch.Tensor, torch.Tensor]:
    """Geodesic weight path and its decoded template segmentations.

    The path is computed in float64: arccos is ill-conditioned near identical
    endpoints at single precision.
    """
    if n_steps < 2:
        raise ValueError("n_steps must be >= 2")
    alphas = np.linspace(0.0, 1.0, n_steps)
    # renormalize in double: single-precision softmax leaves |sum-1| ~ 1e-7,
    # which arccos near 1 would blow up into ~1e-4 of spurious distance
    w_start = w_start.double() / w_start.double().sum()
    w_end = w_end.double() / w_end.double().sum()
    path = torch.stack([geodesic_interpolate(w_start, w_end, float(a)) for a in alphas])
    maps = decode_weight_path(model, path)
    return alphas, path, maps


def traverse_inter_image(
    model: AdaptiveSegmenter,
    x1: torch.Tensor,
    x2: torch.Tensor,
    n_steps: int,
    out_dir: str | Path | None = None,
    tag: str = "pair",
) -> tuple[np.ndarray, torch.Tensor, torch.Tensor]:
    """Interpolate between the weights inferred for two images and decode."""
    w = infer_weights(model, torch.stack([x1, x2]))
    alphas, path, maps = traverse_path(model, w[0], w[1], n_steps)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _save_traversal_grid(out_dir / f"inter_image_{tag}.png", maps, alphas, "inter-image traversal")
        _write_weight_path(out_dir / f"inter_image_{tag}_weights.csv", alphas, path)
    return alphas, path, maps


def traverse_inter_basis(
    model: AdaptiveSegmenter,
    i: int,
    j: int,
    n_steps: int,
    out_dir: str | Path | None = None,
) -> tuple[np.ndarray, torch.Tensor, torch.Tensor]:
    """Interpolate between one-hot weights selecting bases i and j (1-indexed)."""
    m = model.cfg.num_bases
    if not (1 <= i <= m and 1 <= j <= m):
        raise ValueError(f"basis indices must lie in 1..{m}, got ({i}, {j})")
    e_i = torch.zeros(m)
    e_j = torch.zeros(m)
    e_i[i - 1] = 1.0
    e_j[j - 1] = 1.0
    if i == j:
        alphas = np.linspace(0.0, 1.0, max(n_steps, 2))
        path = e_i.repeat(len(alphas), 1)
        maps = decode_weight_path(model, path)
    else:
        alphas, path, maps = traverse_path(model, e_i, e_j, n_steps)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _save_traversal_grid(out_dir / f"inter_basis_{i}_{j}.png", maps, alphas, f"bases {i} -> {j}")
        _write_weight_path(out_dir / f"inter_basis_{i}_{j}_weights.csv", alphas, path)
    return alphas, path, maps


def pca_2d(x: np.ndarray) -> tuple[np.ndarray, float]:
    """First two principal components and their explained-variance fraction."""
    centered = x - x.mean(axis=0, keepdims=True)
    u, s, _ = np.linalg.svd(centered, full_matrices=False)
    coords = u[:, :2] * s[:2]
    total = float((s**2).sum())
    explained = float((s[:2] ** 2).sum() / total) if total > 0 else 1.0
    return coords, explained


def export_latents(
    model: AdaptiveSegmenter,
    samples: list[Sample],
    out_dir: str | Path,
) -> tuple[Path, Path, torch.Tensor]:
    """Write per-image composition weights to CSV plus a 2-D PCA scatter."""
    from .training import to_arrays

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    split = to_arrays(samples)
    w = infer_weights(model, split.images)

    csv_path = out_dir / "latents.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "domain"] + [f"w{m}" for m in range(w.shape[1])])
        for s, row in zip(samples, w.numpy()):
            writer.writerow([s.subject_id, s.domain] + [repr(float(x)) for x in row])

    coords, explained = pca_2d(w.numpy().astype(np.float64))
    plot_path = out_dir / "latents_pca.png"
    fig, ax = plt.subplots(figsize=(5, 4))
    for domain, color in (("source", "tab:blue"), ("target", "tab:red")):
        idx = [k for k, s in enumerate(samples) if s.domain == domain]
        if idx:
            ax.scatter(coords[idx, 0], coords[idx, 1], s=12, alpha=0.7, label=domain, c=color)
    ax.legend()
    ax.set_title(f"composition weights, 2-component PCA ({100 * explained:.1f}% var)")
    fig.tight_layout()
    fig.savefig(plot_path, dpi=120)
    plt.close(fig)
    return csv_path, plot_path, w


def basis_activation_report(
    model: AdaptiveSegmenter,
    images: torch.Tensor,
    threshold: float = ACTIVATION_THRESHOLD,
) -> tuple[int, np.ndarray, np.ndarray]:
    """(number of activated bases, per-basis mean usage, per-basis max usage).

    A basis counts as activated when some image gives it weight > threshold.
    """
    w = infer_weights(model, images).numpy()
    max_usage = w.max(axis=0)
    mean_usage = w.mean(axis=0)
    return int((max_usage > threshold).sum()), mean_usage, max_usage


def fr_path_is_geodesic(path: torch.Tensor, atol: float = 1e-5) -> bool:
    """Check traversal rows stay on the simplex and space linearly in FR distance."""
    sums_ok = bool(torch.all((path.sum(dim=1) - 1.0).abs() < 1e-6))
    full = fisher_rao_distance(path[0], path[-1], validate=False).item()
    n = path.shape[0]
    lin_ok = all(
        abs(fisher_rao_distance(path[0], path[k], validate=False).item() - full * k / (n - 1)) < atol
        for k in range(n)
    )
    return sums_ok and lin_ok
