"""Objective terms and stage objectives for joint and two-stage training.

Per-observation evidence terms (segmentation and reconstruction likelihoods,
velocity KL) are averaged per pixel and per sample so the term weights keep
their meaning across image sizes. The manifold-structuring terms (basis usage
hinge, pairwise structural dispersion, surrogate template KL) follow their
defining sums exactly.

The joint objective over a source and a target batch decomposes exactly into
the two single-domain stage objectives:

    sa(l1..l5) == 0.5 * [ sf1(l1, l2, l3, 2*l4, 2*l5) + sf2(l2, l3) ]

given identical forward products, which is what unifies the two protocols.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import torch
from torch import Tensor

from .simplex import fisher_rao_distance

DICE_SMOOTH = 1e-5


@dataclass
class LossWeights:
    """Term weights lam_seg..lam_struct (the paper-style lambda_1..lambda_5)."""

    lam_seg: float = 1.0
    lam_recon: float = 15.0
    lam_vel: float = 65.0
    lam_tem: float = 0.5
    lam_struct: float = 1.0
    tau: float = 0.05  # minimum batch-mean usage per basis
    usage_weight: float = 1.0  # ablation switch; 1 in all published settings

    def validate(self, num_bases: int | None = None) -> list[str]:
        errors = []
        for f in ("lam_seg", "lam_recon", "lam_vel", "lam_tem", "lam_struct", "usage_weight"):
            if getattr(self, f) < 0:
                errors.append(f"{f} must be >= 0")
        if not 0.0 < self.tau:
            errors.append("tau must be positive")
        if num_bases is not None and self.tau > 1.0 / num_bases + 1e-12:
            errors.append(f"tau={self.tau} exceeds 1/M={1.0 / num_bases:.4g}; hinge is unsatisfiable")
        return errors


@dataclass
class BatchTerms:
    """Per-batch evidence terms computed from one forward pass.

    seg/recon/vel are batch means; w is the (B, M) weight matrix; warped_onehot
    holds forward-warped ground-truth class maps for labeled source batches.
    """

    recon: Tensor
    vel: Tensor
    w: Tensor
    seg: Tensor | None = None
    warped_onehot: Tensor | None = None


@dataclass
class LossReport:
    """Scalar stage-formula aggregates plus the assembled objective.

    Fields hold each term's contribution before its weight, with the stage's
    batch-averaging folded in, so that for every stage

        total == lam_seg*seg + lam_recon*recon + lam_vel*vel
                 + lam_tem*tem + lam_struct*struct + usage_s + usage_t

    (usage fields are stored post-weight since usage carries no lambda).
    """

    stage: str
    total: float
    recon: float = 0.0
    seg: float = 0.0
    vel: float = 0.0
    tem: float = 0.0
    usage_s: float = 0.0
    usage_t: float = 0.0
    struct: float = 0.0
    step: int = -1

    def reassemble_total(self, lw: "LossWeights") -> float:
        return (
            lw.lam_seg * self.seg
            + lw.lam_recon * self.recon
            + lw.lam_vel * self.vel
            + lw.lam_tem * self.tem
            + lw.lam_struct * self.struct
            + self.usage_s
            + self.usage_t
        )

    @staticmethod
    def csv_header() -> list[str]:
        return ["step", "stage", "total", "recon", "seg", "vel", "tem", "usage_s", "usage_t", "struct"]

    def csv_row(self) -> list[str]:
        vals = [self.step, self.stage] + [
            repr(getattr(self, k)) for k in self.csv_header()[2:]
        ]
        return [str(v) for v in vals]

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def recon_nll(x: Tensor, mu: Tensor, b: Tensor) -> Tensor:
    """Laplacian negative log-likelihood |x - mu|/b + log(2b), pixel mean per sample.

    x, mu, b: (B, C, H, W). Returns (B,).
    """
    if (b <= 0).any():
        raise FloatingPointError("Laplacian scale must be positive")
    nll = (x - mu).abs() / b + torch.log(2.0 * b)
    return nll.mean(dim=(1, 2, 3))


def soft_dice_per_class(probs: Tensor, target_onehot: Tensor, smooth: float = DICE_SMOOTH) -> Tensor:
    """Soft Dice per foreground class, (B, K). Channel 0 is background.

    The smoothing constant makes a class empty in both maps score 1 and a
    class empty in exactly one score ~0.
    """
    p = probs[:, 1:]
    t = target_onehot[:, 1:]
    inter = (p * t).sum(dim=(2, 3))
    denom = p.sum(dim=(2, 3)) + t.sum(dim=(2, 3))
    return (2.0 * inter + smooth) / (denom + smooth)


def one_hot_labels(y: Tensor, num_classes: int) -> Tensor:
    """(B, H, W) int labels -> (B, K+1, H, W) float one-hot."""
    if y.min() < 0 or y.max() >= num_classes:
        raise ValueError(f"label out of range [0, {num_classes - 1}]: ({y.min()}, {y.max()})")
    return torch.nn.functional.one_hot(y.long(), num_classes).permute(0, 3, 1, 2).to(torch.get_default_dtype())


def seg_loss(probs: Tensor, y: Tensor, eps: float = 1e-8) -> Tensor:
    """Cross-entropy plus (1 - mean foreground soft Dice), per sample.

    probs: (B, K+1, H, W) categorical probabilities; y: (B, H, W) int labels.
    Returns (B,).
    """
    onehot = one_hot_labels(y, probs.shape[1])
    ce = -(onehot * torch.log(probs.clamp_min(eps))).sum(dim=1).mean(dim=(1, 2))
    dice = soft_dice_per_class(probs, onehot).mean(dim=1)
    return ce + (1.0 - dice)


def usage_loss(w: Tensor, tau: float = 0.05) -> Tensor:
    """Hinge sum_m max(0, tau - batch-mean w_m); keeps every basis in use."""
    if w.dim() != 2:
        raise ValueError(f"expected (B, M) weights, got {tuple(w.shape)}")
    mean_usage = w.mean(dim=0)
    return (tau - mean_usage).clamp_min(0.0).sum()


# Must stay representable at single precision (1 - eps != 1), or the clamp
# is a no-op and coincident pairs still blow up.
ARCCOS_GRAD_EPS = 1e-7


def struct_loss(warped_onehot: Tensor, w: Tensor) -> Tensor:
    """Pairwise [Dice(warped labels) - FR similarity of weights]^2 over a batch.

    warped_onehot: (B, K+1, H, W) forward-warped ground-truth maps;
    w: (B, M). Batches with fewer than two samples contribute 0.

    The Bhattacharyya coefficient is clamped just inside [-1, 1]: arccos has an
    unbounded derivative at the endpoints, and coincident weight pairs (the
    norm early in training) would otherwise produce infinite gradients. The
    clamp biases an identical pair's contribution by at most ~1e-7.
    """
    b = warped_onehot.shape[0]
    if b != w.shape[0]:
        raise ValueError("batch size mismatch between labels and weights")
    if b < 2:
        import warnings

        warnings.warn("struct loss needs at least two labeled samples; returning 0")
        return w.new_zeros(())
    total = w.new_zeros(())
    for i in range(b):
        for j in range(i + 1, b):
            dice = soft_dice_per_class(warped_onehot[i : i + 1], warped_onehot[j : j + 1]).mean()
            coeff = (w[i].clamp_min(0) * w[j].clamp_min(0)).sqrt().sum()
            coeff = coeff.clamp(-1.0 + ARCCOS_GRAD_EPS, 1.0 - ARCCOS_GRAD_EPS)
            sim = 1.0 - 2.0 * torch.arccos(coeff) / torch.pi
            total = total + (dice - sim).square()
    return total


def elbo_source(terms: BatchTerms, lw: LossWeights) -> Tensor:
    """Evidence bound for a labeled batch: l1*L_seg + l2*L_recon - l3*L_vel.

    Likelihood terms enter as negated losses, so larger is better.
    """
    if terms.seg is None:
        raise ValueError("source ELBO needs segmentation terms")
    return -lw.lam_seg * terms.seg - lw.lam_recon * terms.recon - lw.lam_vel * terms.vel


def elbo_target(terms: BatchTerms, lw: LossWeights) -> Tensor:
    """Evidence bound for an unlabeled batch (segmentation term omitted)."""
    return -lw.lam_recon * terms.recon - lw.lam_vel * terms.vel


def _usage(terms: BatchTerms, lw: LossWeights) -> Tensor:
    return lw.usage_weight * usage_loss(terms.w, lw.tau)


def _struct(terms: BatchTerms) -> Tensor:
    if terms.warped_onehot is None:
        raise ValueError("struct loss needs warped ground-truth maps")
    return struct_loss(terms.warped_onehot, terms.w)


def stage_loss_sa(
    src: BatchTerms, tgt: BatchTerms, tem: Tensor, lw: LossWeights, step: int = -1
) -> tuple[Tensor, LossReport]:
    """Joint objective over one source and one target batch."""
    usage_s, usage_t = _usage(src, lw), _usage(tgt, lw)
    struct = _struct(src) if lw.lam_struct > 0 else src.w.new_zeros(())
    total = (
        -0.5 * (elbo_source(src, lw) + elbo_target(tgt, lw))
        + lw.lam_tem * tem
        + lw.lam_struct * struct
        + 0.5 * (usage_s + usage_t)
    )
    report = LossReport(
        stage="sa",
        total=total.item(),
        recon=0.5 * (src.recon + tgt.recon).item(),
        seg=0.5 * src.seg.item(),
        vel=0.5 * (src.vel + tgt.vel).item(),
        tem=tem.item(),
        usage_s=0.5 * usage_s.item(),
        usage_t=0.5 * usage_t.item(),
        struct=struct.item(),
        step=step,
    )
    return total, report


def stage_loss_sf1(src: BatchTerms, tem: Tensor, lw: LossWeights, step: int = -1) -> tuple[Tensor, LossReport]:
    """Source-only first-stage objective."""
    usage_s = _usage(src, lw)
    struct = _struct(src) if lw.lam_struct > 0 else src.w.new_zeros(())
    total = -elbo_source(src, lw) + lw.lam_tem * tem + lw.lam_struct * struct + usage_s
    report = LossReport(
        stage="sf1",
        total=total.item(),
        recon=src.recon.item(),
        seg=src.seg.item(),
        vel=src.vel.item(),
        tem=tem.item(),
        usage_s=usage_s.item(),
        struct=struct.item(),
        step=step,
    )
    return total, report


def stage_loss_sf2(tgt: BatchTerms, lw: LossWeights, step: int = -1) -> tuple[Tensor, LossReport]:
    """Target-only second-stage objective; bases and segmentation decoder are
    held fixed by the trainer, not here."""
    usage_t = _usage(tgt, lw)
    total = -elbo_target(tgt, lw) + usage_t
    report = LossReport(
        stage="sf2",
        total=total.item(),
        recon=tgt.recon.item(),
        vel=tgt.vel.item(),
        usage_t=usage_t.item(),
        step=step,
    )
    return total, report
