"""Fisher-Rao geometry on the probability simplex.

Composition weights live on the simplex Delta^{M-1}. The square-root map
w -> sqrt(w) embeds the simplex isometrically (up to a factor 2) into the
positive orthant of the unit sphere, so distances and geodesics reduce to
spherical arc length and slerp in sqrt-coordinates.
"""

from __future__ import annotations

import torch
from torch import Tensor

SIMPLEX_ATOL = 1e-6

# Entries below this are treated as exact zeros when checking for the
# degenerate antipodal configuration.
ZERO_ENTRY = 1e-12


def check_simplex(w: Tensor | list | tuple, atol: float = SIMPLEX_ATOL) -> Tensor:
    """Validate (and return) a batch of simplex points, shape (..., M).

    Raises ValueError if any entry is negative beyond `atol`, any slice does
    not sum to 1 within `atol`, or M < 2.
    """
    w = torch.as_tensor(w)
    if not w.is_floating_point():
        w = w.double()
    if w.shape[-1] < 2:
        raise ValueError(f"simplex points need at least 2 entries, got {w.shape[-1]}")
    if w.min() < -atol:
        raise ValueError(f"negative simplex entry: min={w.min().item():.3e}")
    sums = w.sum(dim=-1)
    err = (sums - 1.0).abs().max()
    if err > atol:
        raise ValueError(f"simplex entries do not sum to 1: max |sum-1|={err.item():.3e}")
    return w


def _bhattacharyya(w: Tensor, w2: Tensor) -> Tensor:
    if w.shape[-1] != w2.shape[-1]:
        raise ValueError(f"dimension mismatch: {w.shape[-1]} vs {w2.shape[-1]}")
    coeff = (w.clamp_min(0) * w2.clamp_min(0)).sqrt().sum(dim=-1)
    # Floating-point drift can push the coefficient slightly past 1.
    return coeff.clamp(-1.0, 1.0)


def fisher_rao_distance(w: Tensor, w2: Tensor, validate: bool = True) -> Tensor:
    """Geodesic distance 2*arccos(sum_m sqrt(w_m * w2_m)), in [0, pi].

    Accepts batched inputs with broadcastable leading dims; the last dim is M.
    """
    if validate:
        w, w2 = check_simplex(w), check_simplex(w2)
    else:
        w, w2 = torch.as_tensor(w), torch.as_tensor(w2)
    return 2.0 * torch.arccos(_bhattacharyya(w, w2))


def fr_similarity(w: Tensor, w2: Tensor, validate: bool = True) -> Tensor:
    """Bounded similarity 1 - d_FR(w, w2)/pi, in [0, 1]."""
    return 1.0 - fisher_rao_distance(w, w2, validate=validate) / torch.pi


def geodesic_interpolate(w: Tensor, w2: Tensor, alpha: float, validate: bool = True) -> Tensor:
    """Point at fraction `alpha` along the Fisher-Rao geodesic from w to w2.

    Slerp between sqrt(w) and sqrt(w2) on the sphere, squared back onto the
    simplex. alpha=0 returns w, alpha=1 returns w2. Identical inputs
    (theta ~ 0) return w. A truly antipodal pair (theta = pi, impossible for
    entries >= 0 but guarded anyway) has no unique geodesic.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if validate:
        w, w2 = check_simplex(w), check_simplex(w2)
    else:
        w, w2 = torch.as_tensor(w), torch.as_tensor(w2)
    if alpha == 0.0:
        return torch.broadcast_tensors(w, w2)[0].clone()
    if alpha == 1.0:
        return torch.broadcast_tensors(w, w2)[1].clone()

    coeff = _bhattacharyya(w, w2)
    theta = torch.arccos(coeff)
    if bool((theta >= torch.pi - ZERO_ENTRY).any()):
        raise ValueError("geodesic undefined for antipodal inputs (theta = pi)")

    sin_theta = torch.sin(theta)
    a = torch.sin((1.0 - alpha) * theta) / sin_theta
    b = torch.sin(alpha * theta) / sin_theta
    mixed = a.unsqueeze(-1) * w.clamp_min(0).sqrt() + b.unsqueeze(-1) * w2.clamp_min(0).sqrt()
    out = mixed.square()
    # theta ~ 0 makes the slerp coefficients 0/0; the geodesic degenerates to w.
    degenerate = theta <= ZERO_ENTRY
    if bool(degenerate.any()):
        out = torch.where(degenerate.unsqueeze(-1), w.expand_as(out), out)
    return out
