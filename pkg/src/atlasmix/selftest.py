"""Quick analytic self-checks runnable from the CLI (`atlasmix selftest`).

Each check exercises one core primitive against an independent computation:
mixture fusion vs grid quadrature, closed-form KL vs Monte Carlo, geodesic
geometry, SVF integration vs matrix exponential, and the exact stage-loss
decomposition. These mirror the pytest oracles at smaller sizes.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from scipy.linalg import expm

from .bases import BasisBank, DiagonalGaussian, kl_diag_gaussian, mix_posterior
from .losses import BatchTerms, LossWeights, stage_loss_sa, stage_loss_sf1, stage_loss_sf2
from .simplex import fisher_rao_distance, geodesic_interpolate
from .svf import exponentiate


def _check_mixture() -> bool:
    rng = np.random.default_rng(0)
    m = 4
    means = rng.normal(0, 1.2, size=m)
    variances = rng.uniform(0.4, 2.0, size=m)
    w = rng.dirichlet(np.ones(m))
    bank = BasisBank(m, [(1, 1, 1)]).double()
    with torch.no_grad():
        for k in range(m):
            bank.raw_means[0][k].fill_(means[k])
            bank.raw_scales[0][k].fill_(math.log(math.expm1(variances[k] - 1e-6)))
    g = mix_posterior(bank, torch.tensor(w, dtype=torch.float64), 0)
    z = np.linspace(-12, 12, 100_001)
    logd = sum(
        wi * (-0.5 * (z - mu) ** 2 / var - 0.5 * np.log(2 * np.pi * var))
        for wi, mu, var in zip(w, means, variances)
    )
    dens = np.exp(logd)
    dens /= np.trapezoid(dens, z)
    closed = np.exp(-0.5 * (z - g.mean.item()) ** 2 / g.var.item()) / np.sqrt(2 * np.pi * g.var.item())
    return float(np.abs(dens - closed).max()) < 1e-6


def _check_kl_monte_carlo() -> bool:
    rng = np.random.default_rng(1)
    mu_q, mu_p = rng.normal(size=3), rng.normal(size=3)
    var_q, var_p = rng.uniform(0.5, 1.5, 3), rng.uniform(0.5, 1.5, 3)
    closed = kl_diag_gaussian(
        DiagonalGaussian(torch.tensor(mu_q), torch.tensor(var_q)),
        DiagonalGaussian(torch.tensor(mu_p), torch.tensor(var_p)),
    ).item()
    n = 100_000
    z = mu_q + np.sqrt(var_q) * rng.standard_normal((n, 3))
    diff = (
        (-0.5 * (z - mu_q) ** 2 / var_q - 0.5 * np.log(2 * np.pi * var_q))
        - (-0.5 * (z - mu_p) ** 2 / var_p - 0.5 * np.log(2 * np.pi * var_p))
    ).sum(1)
    return abs(closed - diff.mean()) < 3 * diff.std(ddof=1) / math.sqrt(n)


def _check_geodesic() -> bool:
    e1 = torch.tensor([1.0, 0.0], dtype=torch.float64)
    e2 = torch.tensor([0.0, 1.0], dtype=torch.float64)
    if abs(fisher_rao_distance(e1, e2).item() - math.pi) > 1e-9:
        return False
    rng = np.random.default_rng(2)
    w = torch.tensor(rng.dirichlet(np.ones(6)))
    w2 = torch.tensor(rng.dirichlet(np.ones(6)))
    full = fisher_rao_distance(w, w2).item()
    for alpha in (0.25, 0.5, 0.75):
        p = geodesic_interpolate(w, w2, alpha)
        if abs(p.sum().item() - 1.0) > 1e-6:
            return False
        if abs(fisher_rao_distance(w, p, validate=False).item() - alpha * full) > 1e-5:
            return False
    return True


def _check_svf() -> bool:
    v = torch.zeros(1, 2, 48, 48, dtype=torch.float64)
    v[:, 0], v[:, 1] = 2.0, -1.0
    d = exponentiate(v)
    if (d.disp[:, 0] - 2.0).abs().max() > 1e-6 or (d.disp[:, 1] + 1.0).abs().max() > 1e-6:
        return False
    a = np.array([[0.0, 0.1], [-0.1, 0.0]])
    h = w = 64
    rr, cc = np.meshgrid(np.arange(h) - (h - 1) / 2, np.arange(w) - (w - 1) / 2, indexing="ij")
    coords = np.stack([rr, cc])
    lin = torch.tensor(np.einsum("ij,jhw->ihw", a, coords)).unsqueeze(0)
    d = exponentiate(lin)
    expected = np.einsum("ij,jhw->ihw", expm(a) - np.eye(2), coords)
    err = np.abs(d.disp[0].numpy() - expected)[:, 8:-8, 8:-8]
    return float(err.max()) < 0.05


def _check_decomposition() -> bool:
    rng = np.random.default_rng(3)
    src = BatchTerms(
        recon=torch.tensor(rng.uniform(0.1, 1.0)),
        vel=torch.tensor(rng.uniform(0.0, 1.0)),
        w=torch.tensor(rng.dirichlet(np.ones(4), size=3)),
        seg=torch.tensor(rng.uniform(0.1, 1.0)),
        warped_onehot=torch.softmax(torch.tensor(rng.normal(size=(3, 3, 8, 8))), dim=1),
    )
    tgt = BatchTerms(
        recon=torch.tensor(rng.uniform(0.1, 1.0)),
        vel=torch.tensor(rng.uniform(0.0, 1.0)),
        w=torch.tensor(rng.dirichlet(np.ones(4), size=3)),
    )
    tem = torch.tensor(rng.uniform(0.0, 1.0))
    lw = LossWeights(lam_seg=1.0, lam_recon=15.0, lam_vel=65.0, lam_tem=0.5, lam_struct=1.0)
    doubled = LossWeights(lam_seg=1.0, lam_recon=15.0, lam_vel=65.0, lam_tem=1.0, lam_struct=2.0)
    sa, _ = stage_loss_sa(src, tgt, tem, lw)
    sf1, _ = stage_loss_sf1(src, tem, doubled)
    sf2, _ = stage_loss_sf2(tgt, lw)
    return abs(sa.item() - 0.5 * (sf1.item() + sf2.item())) <= 1e-6 * max(1.0, abs(sa.item()))


CHECKS = [
    ("mixture fusion vs grid quadrature", _check_mixture),
    ("closed-form KL vs Monte Carlo", _check_kl_monte_carlo),
    ("Fisher-Rao geodesic geometry", _check_geodesic),
    ("SVF integration vs matrix exponential", _check_svf),
    ("stage-loss decomposition identity", _check_decomposition),
]


def run_selftest(verbose: bool = True) -> bool:
    ok = True
    for name, fn in CHECKS:
        passed = fn()
        ok &= passed
        if verbose:
            print(f"[{'PASS' if passed else 'FAIL'}] {name}")
    return ok
