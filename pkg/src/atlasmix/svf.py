"""Stationary-velocity-field diffeomorphisms on 2-D grids.

Displacements are stored in pixel units as (B, 2, H, W) tensors with channel 0
the row offset and channel 1 the column offset. Warping samples the input at
x + d(x) with border padding, so constant fields act as exact translations in
the interior. exp(v) is computed by scaling and squaring; the inverse is
exp(-v).

Composition convention: compose(outer, inner) is the single deformation
equivalent to warping by `inner` first and `outer` second,

    d(x) = d_outer(x) + d_inner(x + d_outer(x)).

The multi-scale forward map warps images coarse scale first, so a stack
composes as fold(compose(d_finer, acc)); the inverse runs in reverse order
with negated velocities.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

DEFAULT_STEPS = 7


@dataclass
class VelocityField:
    """Gaussian over a stationary velocity field at one pyramid scale."""

    mean: Tensor  # (B, 2, H, W), pixels per unit time
    var: Tensor  # same shape, > 0
    scale: int  # pyramid level the field lives at

    def __post_init__(self):
        if self.mean.dim() != 4 or self.mean.shape[1] != 2:
            raise ValueError(f"velocity mean must be (B,2,H,W), got {tuple(self.mean.shape)}")
        if self.mean.shape != self.var.shape:
            raise ValueError("velocity mean/var shape mismatch")


@dataclass
class Deformation:
    """Dense displacement map, (B, 2, H, W) in pixels of its own grid."""

    disp: Tensor
    direction: str = "forward"  # forward | inverse

    def __post_init__(self):
        if self.disp.dim() != 4 or self.disp.shape[1] != 2:
            raise ValueError(f"displacement must be (B,2,H,W), got {tuple(self.disp.shape)}")

    @property
    def spatial(self) -> tuple[int, int]:
        return self.disp.shape[-2], self.disp.shape[-1]


@dataclass
class DeformationStack:
    """Per-scale velocities plus the composed full-resolution forward/inverse maps."""

    velocities: list[VelocityField]
    samples: list[Tensor]  # velocity values actually integrated, one per scale
    forward: Deformation
    inverse: Deformation


def identity_deformation(batch: int, h: int, w: int, dtype=torch.float32, device=None) -> Deformation:
    return Deformation(torch.zeros(batch, 2, h, w, dtype=dtype, device=device))


def _sampling_grid(disp: Tensor) -> Tensor:
    """Normalized grid_sample coordinates for sampling at x + disp(x).

    Half-pixel-center convention (align_corners=False): pixel i sits at
    normalized 2*(i + 0.5)/n - 1, so displacements scale with the raw
    resolution ratio across pyramid levels.
    """
    b, _, h, w = disp.shape
    rows = torch.arange(h, dtype=disp.dtype, device=disp.device)
    cols = torch.arange(w, dtype=disp.dtype, device=disp.device)
    base_r, base_c = torch.meshgrid(rows, cols, indexing="ij")
    r = base_r + disp[:, 0]
    c = base_c + disp[:, 1]
    x = 2.0 * (c + 0.5) / w - 1.0
    y = 2.0 * (r + 0.5) / h - 1.0
    return torch.stack([x, y], dim=-1)  # (B, H, W, 2)


def warp(image: Tensor, deformation: Deformation | Tensor, interp: str = "bilinear") -> Tensor:
    """Sample `image` (B, C, H, W) at x + displacement(x), border padding."""
    disp = deformation.disp if isinstance(deformation, Deformation) else deformation
    if interp not in ("bilinear", "nearest"):
        raise ValueError(f"unknown interpolation mode: {interp!r}")
    if image.shape[-2:] != disp.shape[-2:]:
        raise ValueError(f"resolution mismatch: image {tuple(image.shape[-2:])} vs deformation {tuple(disp.shape[-2:])}")
    grid = _sampling_grid(disp.to(image.dtype))
    return F.grid_sample(image, grid, mode=interp, padding_mode="border", align_corners=False)


def compose(outer: Deformation, inner: Deformation) -> Deformation:
    """Deformation equivalent to warping by `inner` then by `outer`."""
    if outer.spatial != inner.spatial:
        raise ValueError(f"resolution mismatch: {outer.spatial} vs {inner.spatial}")
    disp = outer.disp + warp(inner.disp, outer)
    return Deformation(disp, direction=outer.direction)


def exponentiate(v: Tensor, steps: int = DEFAULT_STEPS) -> Deformation:
    """Integrate a stationary velocity field by scaling and squaring."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if not torch.isfinite(v).all():
        raise FloatingPointError("non-finite velocity field")
    d = Deformation(v / (2.0**steps))
    for _ in range(steps):
        d = compose(d, d)
    return d


def invert(v: Tensor, steps: int = DEFAULT_STEPS) -> Deformation:
    """exp(-v); composes with exp(v) to identity up to interpolation error."""
    d = exponentiate(-v, steps=steps)
    return Deformation(d.disp, direction="inverse")


def upsample_deformation(d: Deformation, size: tuple[int, int]) -> Deformation:
    """Bilinearly upsample a displacement map, rescaling values to target-pixel units."""
    h, w = d.spatial
    th, tw = size
    if th < h or tw < w:
        raise ValueError(f"downsampling not supported: {d.spatial} -> {size}")
    if (th, tw) == (h, w):
        return Deformation(d.disp.clone(), direction=d.direction)
    disp = F.interpolate(d.disp, size=size, mode="bilinear", align_corners=False)
    disp = torch.stack([disp[:, 0] * (th / h), disp[:, 1] * (tw / w)], dim=1)
    return Deformation(disp, direction=d.direction)


def compose_pyramid(deformations: list[Deformation], size: tuple[int, int]) -> Deformation:
    """Compose per-scale deformations (coarse applied first) at resolution `size`."""
    if not deformations:
        raise ValueError("nothing to compose")
    acc = upsample_deformation(deformations[0], size)
    for d in deformations[1:]:
        acc = compose(upsample_deformation(d, size), acc)
    return acc


def velocity_kl(v: VelocityField, lam_smooth: float = 10.0, lam_mag: float = 0.01) -> Tensor:
    """KL[q(v) || N(0, Lambda^{-1})] per batch element, constants dropped.

    The prior precision is Lambda = lam_mag * I + lam_smooth * L with L the
    4-neighborhood grid Laplacian, applied independently per channel:

        0.5 * [ lam_smooth * sum_edges ||mu_i - mu_j||^2
                + lam_mag * sum ||mu||^2
                + sum_i Lambda_ii * var_i
                - sum_i log var_i ]

    Returns a (B,) tensor.
    """
    if lam_smooth <= 0 or lam_mag <= 0:
        raise ValueError("precision weights must be positive")
    mu, var = v.mean, v.var
    if (var <= 0).any():
        raise ValueError("velocity variance must be positive")
    b, _, h, w = mu.shape
    dims = (1, 2, 3)

    dr = mu[:, :, 1:, :] - mu[:, :, :-1, :]
    dc = mu[:, :, :, 1:] - mu[:, :, :, :-1]
    smooth = dr.square().sum(dims) + dc.square().sum(dims)
    mag = mu.square().sum(dims)

    degree = mu.new_zeros(h, w)
    degree[1:, :] += 1.0
    degree[:-1, :] += 1.0
    degree[:, 1:] += 1.0
    degree[:, :-1] += 1.0
    lam_ii = lam_mag + lam_smooth * degree
    trace = (lam_ii * var).sum(dims)
    logdet_q = torch.log(var).sum(dims)

    return 0.5 * (lam_smooth * smooth + lam_mag * mag + trace - logdet_q)
