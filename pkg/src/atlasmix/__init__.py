"""atlasmix: domain-adaptive segmentation via a shared bank of Gaussian anatomy bases.

Images are explained as a canonical anatomy template, retrieved from a
learnable basis manifold by simplex-valued composition weights, plus a
diffeomorphic deformation and a style code. The same model trains either
jointly on both domains or in a source-then-target two-stage protocol.
"""

__version__ = "0.1.0"

from .bases import (
    AnatomyTemplate,
    BasisBank,
    DiagonalGaussian,
    kl_diag_gaussian,
    mix_posterior,
    mix_prior,
    sample_template,
    surrogate_template_loss,
)
from .simplex import fisher_rao_distance, fr_similarity, geodesic_interpolate
from .svf import (
    Deformation,
    DeformationStack,
    VelocityField,
    compose,
    exponentiate,
    invert,
    upsample_deformation,
    velocity_kl,
    warp,
)

__all__ = [
    "AnatomyTemplate",
    "BasisBank",
    "Deformation",
    "DeformationStack",
    "DiagonalGaussian",
    "VelocityField",
    "compose",
    "exponentiate",
    "fisher_rao_distance",
    "fr_similarity",
    "geodesic_interpolate",
    "invert",
    "kl_diag_gaussian",
    "mix_posterior",
    "mix_prior",
    "sample_template",
    "surrogate_template_loss",
    "upsample_deformation",
    "velocity_kl",
    "warp",
]
