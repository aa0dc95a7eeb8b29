"""Shared bank of learnable Gaussian anatomy bases and the simplex-weighted mixture.

Each scale l holds M diagonal-Gaussian bases over latent feature maps. A
composition weight w on the simplex selects a log-linear mixture of the bases,
which is again diagonal Gaussian with precision-weighted fusion:

    var   = 1 / sum_m w_m / var_m
    mean  = var * sum_m w_m * mean_m / var_m

The prior over the template is the uniform mixture (w = 1/M). Templates are
drawn per scale by reparameterized sampling, or taken as the fused mean during
evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

VAR_FLOOR = 1e-6

# Fresh bases start at variance 0.1: unit variance keeps sampled templates
# noise-dominated for hundreds of epochs at this scale, while 0.1 converges
# within the desk budget and still gives a near-prior start (all bases share
# the init variance, so the surrogate template KL starts equally small).
INIT_VAR = 0.1


def inv_softplus(v: float) -> float:
    import math

    return math.log(math.expm1(v))


def softplus_var(raw: Tensor) -> Tensor:
    """Positive variance from an unconstrained parameter map."""
    return F.softplus(raw) + VAR_FLOOR


@dataclass
class DiagonalGaussian:
    """Diagonal Gaussian over a feature map; mean/var share a shape.

    Finiteness is checked where parameters enter (mix_posterior), not per
    instance; this type sits on the training hot path.
    """

    mean: Tensor
    var: Tensor

    def __post_init__(self):
        if self.mean.shape != self.var.shape:
            raise ValueError(f"mean/var shape mismatch: {tuple(self.mean.shape)} vs {tuple(self.var.shape)}")


@dataclass
class AnatomyTemplate:
    """Multi-scale latent maps z^1..z^L, coarse to fine."""

    z: list[Tensor] = field(default_factory=list)
    provenance: str = "sampled"  # sampled | expectation


class BasisBank(nn.Module):
    """M learnable diagonal-Gaussian bases at each of L scales, shared globally.

    Scale l has shape (C_l, H_l, W_l); all M bases at a scale share it.
    Raw means start near zero (N(0, 0.1^2)) and all raw scales at the same
    small init variance so the surrogate template KL starts small.
    """

    def __init__(self, num_bases: int, shapes: list[tuple[int, int, int]], init_var: float = INIT_VAR):
        super().__init__()
        if num_bases < 2:
            raise ValueError(f"need at least 2 bases, got {num_bases}")
        if len(shapes) < 1:
            raise ValueError("need at least one scale")
        self.num_bases = num_bases
        self.shapes = [tuple(s) for s in shapes]
        raw_scale = inv_softplus(init_var - VAR_FLOOR)
        self.raw_means = nn.ParameterList(
            nn.Parameter(0.1 * torch.randn(num_bases, *shape)) for shape in self.shapes
        )
        self.raw_scales = nn.ParameterList(
            nn.Parameter(torch.full((num_bases, *shape), raw_scale)) for shape in self.shapes
        )

    @property
    def num_scales(self) -> int:
        return len(self.shapes)

    def basis(self, m: int, l: int) -> DiagonalGaussian:
        """Basis m at scale l (both 0-indexed)."""
        return DiagonalGaussian(self.raw_means[l][m], softplus_var(self.raw_scales[l][m]))

    def all_bases(self, l: int) -> DiagonalGaussian:
        """All M bases at scale l stacked along dim 0."""
        return DiagonalGaussian(self.raw_means[l], softplus_var(self.raw_scales[l]))


def mix_posterior(bank: BasisBank, w: Tensor, l: int) -> DiagonalGaussian:
    """Log-linear mixture of the scale-l bases weighted by w.

    w has shape (M,) or (B, M); output mean/var have shape (C,H,W) or (B,C,H,W).
    """
    if l < 0 or l >= bank.num_scales:
        raise ValueError(f"scale index {l} out of range for {bank.num_scales} scales")
    w = torch.as_tensor(w, dtype=bank.raw_means[l].dtype, device=bank.raw_means[l].device)
    if w.shape[-1] != bank.num_bases:
        raise ValueError(f"weight length {w.shape[-1]} != number of bases {bank.num_bases}")
    squeeze = w.dim() == 1
    if squeeze:
        w = w.unsqueeze(0)

    bases = bank.all_bases(l)
    if not torch.isfinite(bases.mean).all() or not torch.isfinite(bases.var).all():
        raise FloatingPointError("non-finite basis parameters")
    prec = 1.0 / bases.var  # (M, C, H, W)
    fused_prec = torch.einsum("bm,m...->b...", w, prec)
    var = 1.0 / fused_prec
    mean = var * torch.einsum("bm,m...->b...", w, prec * bases.mean)
    if squeeze:
        mean, var = mean.squeeze(0), var.squeeze(0)
    return DiagonalGaussian(mean, var)


def mix_prior(bank: BasisBank, l: int) -> DiagonalGaussian:
    """Uniform mixture over the scale-l bases (the template prior)."""
    w = torch.full(
        (bank.num_bases,),
        1.0 / bank.num_bases,
        dtype=bank.raw_means[l].dtype,
        device=bank.raw_means[l].device,
    )
    return mix_posterior(bank, w, l)


def kl_diag_gaussian(q: DiagonalGaussian, p: DiagonalGaussian) -> Tensor:
    """Closed-form KL[q || p] for diagonal Gaussians, summed over all elements."""
    if q.mean.shape != p.mean.shape:
        raise ValueError(f"shape mismatch: {tuple(q.mean.shape)} vs {tuple(p.mean.shape)}")
    ratio = q.var / p.var
    kl = 0.5 * (torch.log(p.var / q.var) + ratio + (q.mean - p.mean).square() / p.var - 1.0)
    return kl.sum()


def surrogate_template_loss(bank: BasisBank) -> Tensor:
    """Average KL from each basis to the uniform-mixture prior, summed over scales.

    Zero iff all bases coincide at every scale. Gradients flow through both
    the bases and the prior (the prior is itself a function of the bank).
    """
    total = bank.raw_means[0].new_zeros(())
    for l in range(bank.num_scales):
        prior = mix_prior(bank, l)
        bases = bank.all_bases(l)
        for m in range(bank.num_bases):
            q = DiagonalGaussian(bases.mean[m], bases.var[m])
            total = total + kl_diag_gaussian(q, prior)
    return total / bank.num_bases


def sample_template(
    posteriors: list[DiagonalGaussian],
    mode: str = "sampled",
    generator: torch.Generator | None = None,
) -> AnatomyTemplate:
    """Draw z^l from each per-scale posterior (reparameterized) or take means."""
    if mode not in ("sampled", "expectation"):
        raise ValueError(f"unknown sampling mode: {mode!r}")
    maps = []
    for g in posteriors:
        if mode == "expectation":
            maps.append(g.mean)
        else:
            eps = torch.randn(g.mean.shape, generator=generator, dtype=g.mean.dtype, device=g.mean.device)
            maps.append(g.mean + g.var.sqrt() * eps)
    return AnatomyTemplate(z=maps, provenance=mode)
