"""Network components: encoders, decoders, registration nets, and the full model.

The content encoder is a small attention U-Net whose gated skip features (plus
the bottleneck) provide one content map per pyramid level, projected to a
common channel width. Composition weights come from the coarsest map via
GAP + MLP + softmax. Velocities are inferred coarse to fine, conditioning each
scale on the content features warped by the deformation composed so far.
Segmentation and reconstruction are decoded from the template alone (plus a
style code for reconstruction) and warped back by the inverse deformation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .bases import AnatomyTemplate, BasisBank, DiagonalGaussian, mix_posterior, sample_template, softplus_var
from .svf import Deformation, DeformationStack, VelocityField, compose_pyramid, exponentiate, invert, warp


@dataclass
class ModelConfig:
    image_size: int = 64
    in_channels: int = 1
    num_classes: int = 3  # foreground classes; maps have num_classes + 1 channels
    levels: int = 5
    velocity_scales: tuple[int, ...] = (1, 3, 5)  # 1-indexed, ascending
    num_bases: int = 6
    latent_channels: int = 16
    base_channels: int = 16
    style_dim: int = 128
    svf_steps: int = 7
    smooth_precision: float = 10.0
    magnitude_precision: float = 0.01

    def validate(self) -> list[str]:
        errors = []
        if self.levels < 2:
            errors.append("levels must be >= 2")
        if self.num_bases < 2:
            errors.append("num_bases must be >= 2")
        if self.image_size % (2 ** (self.levels - 1)) != 0:
            errors.append(f"image_size {self.image_size} not divisible by 2^{self.levels - 1}")
        scales = tuple(self.velocity_scales)
        if list(scales) != sorted(set(scales)):
            errors.append(f"velocity_scales must be strictly ascending, got {scales}")
        if scales and (scales[0] < 1 or scales[-1] > self.levels):
            errors.append(f"velocity_scales must lie in 1..{self.levels}")
        if not scales:
            errors.append("velocity_scales must be non-empty")
        if self.num_classes < 1:
            errors.append("num_classes must be >= 1")
        return errors

    def scale_size(self, l: int) -> int:
        """Spatial side of 1-indexed scale l (l=1 coarsest, l=levels finest)."""
        return self.image_size // (2 ** (self.levels - l))

    def scale_shapes(self) -> list[tuple[int, int, int]]:
        return [(self.latent_channels, self.scale_size(l), self.scale_size(l)) for l in range(1, self.levels + 1)]


class ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.InstanceNorm2d(out_ch, affine=True),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.InstanceNorm2d(out_ch, affine=True),
            nn.LeakyReLU(0.2, inplace=True),
        )

    def forward(self, x):
        return self.net(x)


class AttentionGate(nn.Module):
    """Additive attention: the decoder signal g selects skip features x."""

    def __init__(self, x_ch, g_ch, inter_ch):
        super().__init__()
        self.wx = nn.Conv2d(x_ch, inter_ch, 1)
        self.wg = nn.Conv2d(g_ch, inter_ch, 1)
        self.psi = nn.Conv2d(inter_ch, 1, 1)

    def forward(self, x, g):
        a = torch.sigmoid(self.psi(F.leaky_relu(self.wx(x) + self.wg(g), 0.2)))
        return x * a


class ContentEncoder(nn.Module):
    """Attention U-Net producing one content map per level, coarse to fine."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        depth = cfg.levels - 1  # number of downsamplings
        widths = [min(cfg.base_channels * 2**i, 8 * cfg.base_channels) for i in range(cfg.levels)]
        self.down_blocks = nn.ModuleList()
        in_ch = cfg.in_channels
        for i in range(depth):
            self.down_blocks.append(ConvBlock(in_ch, widths[i]))
            in_ch = widths[i]
        self.bottleneck = ConvBlock(in_ch, widths[depth])

        self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        self.gates = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        dec_ch = widths[depth]
        for i in reversed(range(depth)):
            self.gates.append(AttentionGate(widths[i], dec_ch, max(widths[i] // 2, 8)))
            self.up_blocks.append(ConvBlock(dec_ch + widths[i], widths[i]))
            dec_ch = widths[i]

        # One projection per level: bottleneck first, then gated skips fine-ward.
        proj_in = [widths[depth]] + [widths[i] for i in reversed(range(depth))]
        self.proj = nn.ModuleList(nn.Conv2d(ch, cfg.latent_channels, 1) for ch in proj_in)

    def forward(self, x: Tensor) -> list[Tensor]:
        size = 2 ** (self.cfg.levels - 1)
        if x.shape[-1] % size or x.shape[-2] % size:
            raise ValueError(f"input size {tuple(x.shape[-2:])} not divisible by {size}")
        skips = []
        h = x
        for block in self.down_blocks:
            h = block(h)
            skips.append(h)
            h = F.avg_pool2d(h, 2)
        h = self.bottleneck(h)

        taps = [self.proj[0](h)]
        for k, (gate, block) in enumerate(zip(self.gates, self.up_blocks)):
            skip = skips[-(k + 1)]
            g = self.up(h)
            gated = gate(skip, g)
            taps.append(self.proj[k + 1](gated))
            h = block(torch.cat([g, gated], dim=1))
        return taps  # coarse -> fine


class StyleEncoder(nn.Module):
    """Conv-LeakyReLU-AvgPool stack ending in a linear style head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        chans = [cfg.in_channels, 16, 32, 64, 64]
        layers = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(cin, cout, 3, padding=1), nn.LeakyReLU(0.2, inplace=True), nn.AvgPool2d(2)]
        self.conv = nn.Sequential(*layers)
        self.head = nn.Linear(chans[-1], cfg.style_dim)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv(x)
        return self.head(h.mean(dim=(2, 3)))


class WeightHead(nn.Module):
    """GAP over the coarsest content map, MLP, softmax onto the simplex."""

    def __init__(self, cfg: ModelConfig, hidden: int = 64):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(cfg.latent_channels, hidden),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Linear(hidden, cfg.num_bases),
        )

    def forward(self, c_coarsest: Tensor) -> Tensor:
        return torch.softmax(self.mlp(c_coarsest.mean(dim=(2, 3))), dim=-1)


class RegistrationNet(nn.Module):
    """Four Conv-Norm-LeakyReLU blocks then a 1x1 head over (mean, raw var).

    The head weight and mean bias start at zero so the deformation starts at
    identity; the variance bias starts low so sampled velocities do too.
    """

    INIT_RAW_VAR = -4.6  # softplus(-4.6) ~ 1e-2

    def __init__(self, cfg: ModelConfig, width: int = 16):
        super().__init__()
        layers = []
        in_ch = 2 * cfg.latent_channels
        for _ in range(4):
            layers += [
                nn.Conv2d(in_ch, width, 3, padding=1),
                nn.InstanceNorm2d(width, affine=True),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            in_ch = width
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(width, 4, 1)
        nn.init.zeros_(self.head.weight)
        with torch.no_grad():
            self.head.bias[:2].zero_()
            self.head.bias[2:].fill_(self.INIT_RAW_VAR)

    def forward(self, content: Tensor, template: Tensor) -> tuple[Tensor, Tensor]:
        out = self.head(self.body(torch.cat([content, template], dim=1)))
        return out[:, :2], softplus_var(out[:, 2:])


class AdaIN(nn.Module):
    """Instance norm with scale/shift predicted from the style code."""

    def __init__(self, ch, style_dim):
        super().__init__()
        self.norm = nn.InstanceNorm2d(ch, affine=False)
        self.affine = nn.Linear(style_dim, 2 * ch)

    def forward(self, x, style):
        gamma, beta = self.affine(style).chunk(2, dim=-1)
        return self.norm(x) * (1.0 + gamma[:, :, None, None]) + beta[:, :, None, None]


class _DecoderBackbone(nn.Module):
    """U-Net style decoder over the template pyramid, optionally style-modulated.

    Fine levels run at half width: full-resolution convolutions dominate CPU
    cost and gain little from extra channels here.
    """

    def __init__(self, cfg: ModelConfig, width: int = 32, style: bool = False):
        super().__init__()
        self.cfg = cfg
        self.styled = style
        self.width = width
        self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        self.blocks = nn.ModuleList()
        self.adains = nn.ModuleList() if style else None
        in_ch = cfg.latent_channels
        for l in range(cfg.levels):
            w_l = width if l < cfg.levels - 2 else max(width // 2, cfg.latent_channels)
            self.blocks.append(ConvBlock(in_ch, w_l))
            if style:
                self.adains.append(AdaIN(w_l, cfg.style_dim))
            in_ch = w_l + cfg.latent_channels  # next block sees upsampled state + next z
        self.out_width = w_l

    def forward(self, z: list[Tensor], style: Tensor | None = None) -> Tensor:
        h = None
        for l, z_l in enumerate(z):
            h = z_l if h is None else torch.cat([self.up(h), z_l], dim=1)
            h = self.blocks[l](h)
            if self.styled:
                h = self.adains[l](h, style)
        return h


class SegDecoder(nn.Module):
    """Template pyramid -> categorical probabilities in template space."""

    def __init__(self, cfg: ModelConfig, width: int = 32):
        super().__init__()
        self.backbone = _DecoderBackbone(cfg, width, style=False)
        self.head = nn.Conv2d(self.backbone.out_width, cfg.num_classes + 1, 1)

    def forward(self, z: list[Tensor]) -> Tensor:
        return torch.softmax(self.head(self.backbone(z)), dim=1)


class ReconDecoder(nn.Module):
    """Template pyramid + style -> pixel-wise Laplacian (location, scale).

    The scale head starts at zero so the initial scale is softplus(0) ~ 0.693
    everywhere; the location head starts live so style modulation is visible
    from the first step.
    """

    B_FLOOR = 1e-6

    def __init__(self, cfg: ModelConfig, width: int = 32):
        super().__init__()
        self.backbone = _DecoderBackbone(cfg, width, style=True)
        self.head_loc = nn.Conv2d(self.backbone.out_width, cfg.in_channels, 1)
        self.head_scale = nn.Conv2d(self.backbone.out_width, cfg.in_channels, 1)
        nn.init.zeros_(self.head_scale.weight)
        nn.init.zeros_(self.head_scale.bias)

    def forward(self, z: list[Tensor], style: Tensor) -> tuple[Tensor, Tensor]:
        h = self.backbone(z, style)
        return self.head_loc(h), F.softplus(self.head_scale(h)) + self.B_FLOOR


@dataclass
class ForwardBundle:
    """Everything one forward pass produces, template space and image space."""

    content: list[Tensor]
    w: Tensor
    posteriors: list[DiagonalGaussian]
    template: AnatomyTemplate
    style: Tensor
    stack: DeformationStack
    seg_template: Tensor
    seg_final: Tensor
    recon_template: tuple[Tensor, Tensor]
    recon_final: tuple[Tensor, Tensor]


class AdaptiveSegmenter(nn.Module):
    """Full model: basis manifold, encoders, registration, and both decoders."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        errors = cfg.validate()
        if errors:
            raise ValueError("; ".join(errors))
        self.cfg = cfg
        self.content_encoder = ContentEncoder(cfg)
        self.style_encoder = StyleEncoder(cfg)
        self.weight_head = WeightHead(cfg)
        self.basis_bank = BasisBank(cfg.num_bases, cfg.scale_shapes())
        self.registration = nn.ModuleList(RegistrationNet(cfg) for _ in cfg.velocity_scales)
        self.seg_decoder = SegDecoder(cfg)
        self.recon_decoder = ReconDecoder(cfg)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "content_encoder": list(self.content_encoder.parameters()),
            "style_encoder": list(self.style_encoder.parameters()),
            "weight_head": list(self.weight_head.parameters()),
            "basis_bank": list(self.basis_bank.parameters()),
            "registration": list(self.registration.parameters()),
            "seg_decoder": list(self.seg_decoder.parameters()),
            "recon_decoder": list(self.recon_decoder.parameters()),
        }

    def infer_template(self, w: Tensor, mode: str, generator=None) -> tuple[list[DiagonalGaussian], AnatomyTemplate]:
        posteriors = [mix_posterior(self.basis_bank, w, l) for l in range(self.cfg.levels)]
        return posteriors, sample_template(posteriors, mode=mode, generator=generator)

    def infer_velocity_stack(
        self, content: list[Tensor], template: AnatomyTemplate, mode: str = "sampled", generator=None
    ) -> DeformationStack:
        cfg = self.cfg
        velocities: list[VelocityField] = []
        samples: list[Tensor] = []
        fwd_scales: list[Deformation] = []
        inv_scales: list[Deformation] = []
        for idx, l in enumerate(cfg.velocity_scales):
            c_l = content[l - 1]
            if fwd_scales:
                partial = compose_pyramid(fwd_scales, (c_l.shape[-2], c_l.shape[-1]))
                c_l = warp(c_l, partial)
            mu, var = self.registration[idx](c_l, template.z[l - 1])
            if mode == "expectation":
                v = mu
            else:
                eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
                v = mu + var.sqrt() * eps
            velocities.append(VelocityField(mean=mu, var=var, scale=l))
            samples.append(v)
            fwd_scales.append(exponentiate(v, steps=cfg.svf_steps))
            inv_scales.append(invert(v, steps=cfg.svf_steps))

        full = (cfg.image_size, cfg.image_size)
        forward = compose_pyramid(fwd_scales, full)
        inverse = compose_pyramid(list(reversed(inv_scales)), full)
        inverse.direction = "inverse"
        return DeformationStack(velocities=velocities, samples=samples, forward=forward, inverse=inverse)

    def forward(self, x: Tensor, mode: str = "sampled", generator=None) -> ForwardBundle:
        content = self.content_encoder(x)
        w = self.weight_head(content[0])
        posteriors, template = self.infer_template(w, mode, generator)
        stack = self.infer_velocity_stack(content, template, mode, generator)

        seg_template = self.seg_decoder(template.z)
        seg_final = warp(seg_template, stack.inverse)

        style = self.style_encoder(x)
        mu_t, b_t = self.recon_decoder(template.z, style)
        recon_final = (warp(mu_t, stack.inverse), warp(b_t, stack.inverse))

        return ForwardBundle(
            content=content,
            w=w,
            posteriors=posteriors,
            template=template,
            style=style,
            stack=stack,
            seg_template=seg_template,
            seg_final=seg_final,
            recon_template=(mu_t, b_t),
            recon_final=recon_final,
        )
