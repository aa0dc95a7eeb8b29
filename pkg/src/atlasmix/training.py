"""Training orchestration: joint (sa) and two-stage source-free (sf1, sf2) runs.

Each step draws fixed-size batches, runs one fused forward pass, assembles the
stage objective from shared BatchTerms, and logs every term to CSV. Model
selection: sa by target-val DSC, sf1 by source-val DSC, sf2 by target-val
reconstruction NLL by default (no target labels assumed; a DSC selector
exists for comparison). In sf2 the basis bank and segmentation decoder are
frozen: excluded from the optimizer, gradients disabled, and checksummed
before/after as a hard invariant.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig
from .data import Sample
from .losses import (
    BatchTerms,
    LossReport,
    LossWeights,
    one_hot_labels,
    recon_nll,
    seg_loss,
    stage_loss_sa,
    stage_loss_sf1,
    stage_loss_sf2,
)
from .bases import surrogate_template_loss
from .networks import AdaptiveSegmenter, ForwardBundle, ModelConfig
from .svf import velocity_kl, warp

FROZEN_GROUPS_SF2 = ("basis_bank", "seg_decoder")


class TrainingDiverged(RuntimeError):
    def __init__(self, report: LossReport):
        self.report = report
        super().__init__(f"non-finite loss at step {report.step}: {report.as_dict()}")


class FreezeViolation(RuntimeError):
    pass


@dataclass
class ArraySplit:
    """One split held in memory as tensors."""

    images: torch.Tensor  # (N, 1, H, W) float32
    labels: torch.Tensor | None  # (N, H, W) int64
    ids: list[str]
    spacing_mm: tuple[float, float]

    def __len__(self):
        return self.images.shape[0]


def to_arrays(samples: list[Sample]) -> ArraySplit:
    if not samples:
        raise ValueError("empty split")
    images = torch.tensor(np.stack([s.image for s in samples]), dtype=torch.float32).unsqueeze(1)
    labels = None
    if all(s.label is not None for s in samples):
        labels = torch.tensor(np.stack([s.label for s in samples]), dtype=torch.int64)
    return ArraySplit(
        images=images,
        labels=labels,
        ids=[s.subject_id for s in samples],
        spacing_mm=samples[0].spacing_mm,
    )


def setup_run_seeds(cfg: ExperimentConfig) -> tuple[np.random.Generator, torch.Generator]:
    """Seed global torch state (parameter init) and return data/noise generators."""
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    return np.random.default_rng(cfg.seed), torch.Generator().manual_seed(cfg.seed + 1)


def batch_terms(
    model: AdaptiveSegmenter,
    x: torch.Tensor,
    y: torch.Tensor | None,
    mode: str = "sampled",
    generator: torch.Generator | None = None,
    bundle: ForwardBundle | None = None,
) -> BatchTerms:
    """Evidence terms for one batch; velocity KL is averaged per grid point."""
    if bundle is None:
        bundle = model(x, mode=mode, generator=generator)
    cfg = model.cfg
    vel = x.new_zeros(x.shape[0])
    for f in bundle.stack.velocities:
        vel = vel + velocity_kl(f, cfg.smooth_precision, cfg.magnitude_precision) / (
            f.mean.shape[-2] * f.mean.shape[-1]
        )
    mu, b = bundle.recon_final
    terms = BatchTerms(recon=recon_nll(x, mu, b).mean(), vel=vel.mean(), w=bundle.w)
    if y is not None:
        terms.seg = seg_loss(bundle.seg_final, y).mean()
        onehot = one_hot_labels(y, cfg.num_classes + 1)
        terms.warped_onehot = warp(onehot, bundle.stack.forward)
    return terms


def _split_bundle(bundle: ForwardBundle, n: int) -> tuple[ForwardBundle, ForwardBundle]:
    """Split a fused source+target forward into per-domain views (no recompute)."""

    def cut(obj, sl):
        from .bases import AnatomyTemplate, DiagonalGaussian
        from .svf import Deformation, DeformationStack, VelocityField

        return ForwardBundle(
            content=[c[sl] for c in obj.content],
            w=obj.w[sl],
            posteriors=[DiagonalGaussian(p.mean[sl], p.var[sl]) for p in obj.posteriors],
            template=AnatomyTemplate([z[sl] for z in obj.template.z], obj.template.provenance),
            style=obj.style[sl],
            stack=DeformationStack(
                velocities=[VelocityField(v.mean[sl], v.var[sl], v.scale) for v in obj.stack.velocities],
                samples=[s[sl] for s in obj.stack.samples],
                forward=Deformation(obj.stack.forward.disp[sl], "forward"),
                inverse=Deformation(obj.stack.inverse.disp[sl], "inverse"),
            ),
            seg_template=obj.seg_template[sl],
            seg_final=obj.seg_final[sl],
            recon_template=(obj.recon_template[0][sl], obj.recon_template[1][sl]),
            recon_final=(obj.recon_final[0][sl], obj.recon_final[1][sl]),
        )

    return cut(bundle, slice(0, n)), cut(bundle, slice(n, None))


def group_checksums(model: AdaptiveSegmenter, groups=FROZEN_GROUPS_SF2) -> dict[str, str]:
    sums = {}
    for name in groups:
        h = hashlib.sha256()
        for p in model.parameter_groups()[name]:
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        sums[name] = h.hexdigest()
    return sums


@torch.no_grad()
def predict_labels(model: AdaptiveSegmenter, images: torch.Tensor, batch: int = 32) -> torch.Tensor:
    """Expectation-mode hard predictions; argmax ties go to the lowest class."""
    was_training = model.training
    model.eval()
    outs = []
    for i in range(0, images.shape[0], batch):
        bundle = model(images[i : i + batch], mode="expectation")
        outs.append(bundle.seg_final.argmax(dim=1))
    if was_training:
        model.train()
    return torch.cat(outs)


@torch.no_grad()
def mean_val_dsc(model: AdaptiveSegmenter, split: ArraySplit) -> float:
    from .evaluation import dsc

    preds = predict_labels(model, split.images)
    scores = []
    for i in range(len(split)):
        per_class = [
            dsc(preds[i].numpy(), split.labels[i].numpy(), k) for k in range(1, model.cfg.num_classes + 1)
        ]
        scores.append(float(np.mean(per_class)))
    return float(np.mean(scores))


@torch.no_grad()
def mean_val_recon_nll(model: AdaptiveSegmenter, split: ArraySplit, batch: int = 32) -> float:
    was_training = model.training
    model.eval()
    vals = []
    for i in range(0, len(split), batch):
        x = split.images[i : i + batch]
        bundle = model(x, mode="expectation")
        vals.append(recon_nll(x, *bundle.recon_final))
    if was_training:
        model.train()
    return float(torch.cat(vals).mean())


def save_checkpoint(
    path: Path,
    model: AdaptiveSegmenter,
    optimizer: torch.optim.Optimizer | None,
    cfg: ExperimentConfig,
    stage: str,
    epoch: int,
    step: int,
    best_metric: float,
    rng: np.random.Generator,
) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "model": model.state_dict(),
            "model_config": asdict(model.cfg),
            "optimizer": optimizer.state_dict() if optimizer is not None else None,
            "torch_rng": torch.get_rng_state(),
            "numpy_rng": rng.bit_generator.state,
            "config_hash": cfg.hash(),
            "config_values": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.values.items()},
            "stage": stage,
            "epoch": epoch,
            "step": step,
            "best_metric": best_metric,
        },
        path,
    )


def load_checkpoint(path: str | Path) -> tuple[AdaptiveSegmenter, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    mc = payload["model_config"]
    mc["velocity_scales"] = tuple(mc["velocity_scales"])
    model = AdaptiveSegmenter(ModelConfig(**mc))
    model.load_state_dict(payload["model"])
    model.eval()
    return model, payload


class _StepLogger:
    def __init__(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(LossReport.csv_header())

    def log(self, report: LossReport):
        self._writer.writerow(report.csv_row())

    def close(self):
        self._fh.flush()
        self._fh.close()


def _epoch_batches(rng: np.random.Generator, n: int, batch: int):
    """Shuffled full batches; a partial tail is dropped."""
    order = rng.permutation(n)
    for i in range(0, n - batch + 1, batch):
        yield order[i : i + batch]


def _draw(rng: np.random.Generator, n: int, batch: int):
    return rng.choice(n, size=batch, replace=n < batch)


def _check_finite(total: torch.Tensor, report: LossReport):
    if not torch.isfinite(total):
        raise TrainingDiverged(report)


def train_source_accessible(
    cfg: ExperimentConfig,
    source_train: ArraySplit,
    target_train: ArraySplit,
    target_val: ArraySplit,
    out_dir: str | Path,
) -> Path:
    """Single-stage joint training; returns the best-target-DSC checkpoint path."""
    rng, gen = setup_run_seeds(cfg)
    model = AdaptiveSegmenter(cfg.model_config())
    model.train()
    lw = cfg.loss_weights()
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    out_dir = Path(out_dir)
    logger = _StepLogger(out_dir / "train_log.csv")
    best_path = out_dir / "best.pt"
    bs, bt = cfg.batch_size_source, cfg.batch_size_target

    best = -np.inf
    step = 0
    try:
        for epoch in range(cfg.epochs_sa):
            for src_idx in _epoch_batches(rng, len(source_train), bs):
                tgt_idx = _draw(rng, len(target_train), bt)
                xs, ys = source_train.images[src_idx], source_train.labels[src_idx]
                xt = target_train.images[tgt_idx]

                fused = model(torch.cat([xs, xt]), mode="sampled", generator=gen)
                b_src, b_tgt = _split_bundle(fused, bs)
                src_terms = batch_terms(model, xs, ys, bundle=b_src)
                tgt_terms = batch_terms(model, xt, None, bundle=b_tgt)
                tem = surrogate_template_loss(model.basis_bank)

                total, report = stage_loss_sa(src_terms, tgt_terms, tem, lw, step=step)
                _check_finite(total, report)
                opt.zero_grad()
                total.backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                opt.step()
                logger.log(report)
                step += 1

            if (epoch + 1) % cfg.val_every == 0 or epoch == cfg.epochs_sa - 1:
                score = mean_val_dsc(model, target_val)
                if score > best:
                    best = score
                    save_checkpoint(best_path, model, opt, cfg, "sa", epoch, step, best, rng)
    finally:
        logger.close()
    save_checkpoint(out_dir / "last.pt", model, opt, cfg, "sa", cfg.epochs_sa - 1, step, best, rng)
    return best_path


def train_source_free_stage1(
    cfg: ExperimentConfig,
    source_train: ArraySplit,
    source_val: ArraySplit,
    out_dir: str | Path,
) -> Path:
    """Source-only supervised stage; returns the best-source-DSC checkpoint path."""
    rng, gen = setup_run_seeds(cfg)
    model = AdaptiveSegmenter(cfg.model_config())
    model.train()
    lw = cfg.loss_weights()
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    out_dir = Path(out_dir)
    logger = _StepLogger(out_dir / "train_log.csv")
    best_path = out_dir / "best.pt"

    best = -np.inf
    step = 0
    try:
        for epoch in range(cfg.epochs_sf1):
            for src_idx in _epoch_batches(rng, len(source_train), cfg.batch_size_source):
                xs, ys = source_train.images[src_idx], source_train.labels[src_idx]
                src_terms = batch_terms(model, xs, ys, mode="sampled", generator=gen)
                tem = surrogate_template_loss(model.basis_bank)
                total, report = stage_loss_sf1(src_terms, tem, lw, step=step)
                _check_finite(total, report)
                opt.zero_grad()
                total.backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                opt.step()
                logger.log(report)
                step += 1

            if (epoch + 1) % cfg.val_every == 0 or epoch == cfg.epochs_sf1 - 1:
                score = mean_val_dsc(model, source_val)
                if score > best:
                    best = score
                    save_checkpoint(best_path, model, opt, cfg, "sf1", epoch, step, best, rng)
    finally:
        logger.close()
    save_checkpoint(out_dir / "last.pt", model, opt, cfg, "sf1", cfg.epochs_sf1 - 1, step, best, rng)
    return best_path


def train_source_free_stage2(
    cfg: ExperimentConfig,
    target_train: ArraySplit,
    target_val: ArraySplit,
    stage1_checkpoint: str | Path,
    out_dir: str | Path,
) -> Path:
    """Target-only adaptation from a stage-1 checkpoint, bases and segmentation
    decoder frozen. Selection by target reconstruction NLL (or DSC if configured
    and labels exist). Returns the selected checkpoint path."""
    rng, gen = setup_run_seeds(cfg)
    model, payload = load_checkpoint(stage1_checkpoint)
    if payload.get("stage") not in ("sf1", "sa"):
        warnings.warn(f"stage-1 checkpoint has unexpected stage {payload.get('stage')!r}")
    model.train()
    lw = cfg.loss_weights()

    groups = model.parameter_groups()
    frozen_params = [p for name in FROZEN_GROUPS_SF2 for p in groups[name]]
    for p in frozen_params:
        p.requires_grad_(False)
    trainable = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(trainable, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    frozen_before = group_checksums(model)

    use_dsc = cfg.sf2_selector == "dsc"
    if use_dsc and target_val.labels is None:
        raise ValueError("sf2_selector='dsc' requires labels on the validation split")

    out_dir = Path(out_dir)
    logger = _StepLogger(out_dir / "train_log.csv")
    best_path = out_dir / "best.pt"

    def _verify_frozen():
        now = group_checksums(model)
        if now != frozen_before:
            bad = [k for k in now if now[k] != frozen_before[k]]
            raise FreezeViolation(f"frozen parameter groups changed during sf2: {bad}")

    best = -np.inf
    step = 0
    try:
        for epoch in range(cfg.epochs_sf2):
            for tgt_idx in _epoch_batches(rng, len(target_train), cfg.batch_size_target):
                xt = target_train.images[tgt_idx]
                tgt_terms = batch_terms(model, xt, None, mode="sampled", generator=gen)
                total, report = stage_loss_sf2(tgt_terms, lw, step=step)
                _check_finite(total, report)
                opt.zero_grad()
                total.backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(trainable, cfg.grad_clip)
                opt.step()
                logger.log(report)
                step += 1

            if (epoch + 1) % cfg.val_every == 0 or epoch == cfg.epochs_sf2 - 1:
                _verify_frozen()
                score = mean_val_dsc(model, target_val) if use_dsc else -mean_val_recon_nll(model, target_val)
                if score > best:
                    best = score
                    save_checkpoint(best_path, model, opt, cfg, "sf2", epoch, step, best, rng)
    finally:
        logger.close()
    _verify_frozen()
    save_checkpoint(out_dir / "last.pt", model, opt, cfg, "sf2", cfg.epochs_sf2 - 1, step, best, rng)
    return best_path
