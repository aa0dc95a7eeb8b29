import csv
import math

import numpy as np
import pytest
import torch

from atlasmix.data import Sample
from atlasmix.evaluation import (
    assd,
    basis_activation_report,
    dsc,
    evaluate,
    export_latents,
    fr_path_is_geodesic,
    infer_weights,
    pca_2d,
    traverse_inter_basis,
    traverse_inter_image,
)
from atlasmix.networks import AdaptiveSegmenter, ModelConfig

SMALL = ModelConfig(image_size=32, levels=4, velocity_scales=(1, 3), num_bases=4, base_channels=8)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    m = AdaptiveSegmenter(SMALL)
    m.eval()
    return m


def brute_force_surface(mask):
    """Independent surface extraction: mask pixels with any out-of-mask 4-neighbor."""
    pts = []
    h, w = mask.shape
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if rr < 0 or rr >= h or cc < 0 or cc >= w or not mask[rr, cc]:
                    pts.append((r, c))
                    break
    return pts


def brute_force_assd(pred, true, k, spacing):
    a = brute_force_surface(pred == k)
    b = brute_force_surface(true == k)
    if not a and not b:
        return 0.0
    if not a or not b:
        return math.hypot(pred.shape[0] * spacing[0], pred.shape[1] * spacing[1])

    def avg_min(src, dst):
        total = 0.0
        for r, c in src:
            best = min(
                math.hypot((r - r2) * spacing[0], (c - c2) * spacing[1]) for r2, c2 in dst
            )
            total += best
        return total / len(src)

    return 0.5 * (avg_min(a, b) + avg_min(b, a))


class TestDSC:
    def test_identical(self):
        m = np.zeros((8, 8), dtype=int)
        m[2:5, 2:5] = 1
        assert dsc(m, m, 1) == 1.0

    def test_disjoint(self):
        a = np.zeros((8, 8), dtype=int)
        a[:2, :2] = 1
        b = np.zeros((8, 8), dtype=int)
        b[5:, 5:] = 1
        assert dsc(a, b, 1) == 0.0

    def test_shifted_block(self):
        a = np.zeros((8, 8), dtype=int)
        a[2:4, 2:4] = 1
        b = np.zeros((8, 8), dtype=int)
        b[3:5, 2:4] = 1  # overlap 2 of 4
        assert dsc(a, b, 1) == pytest.approx(0.5)

    def test_empty_conventions(self):
        empty = np.zeros((4, 4), dtype=int)
        full = np.ones((4, 4), dtype=int)
        assert dsc(empty, empty, 1) == 1.0
        assert dsc(full, empty, 1) == 0.0

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        a = rng.integers(0, 2, (10, 10))
        b = rng.integers(0, 2, (10, 10))
        assert dsc(a, b, 1) == dsc(b, a, 1)


class TestASSD:
    def test_identical_zero(self):
        m = np.zeros((8, 8), dtype=int)
        m[2:6, 2:6] = 1
        val, flag = assd(m, m, 1)
        assert val == 0.0 and not flag

    def test_two_points_five_apart(self):
        a = np.zeros((12, 12), dtype=int)
        a[3, 3] = 1
        b = np.zeros((12, 12), dtype=int)
        b[8, 3] = 1
        val, _ = assd(a, b, 1, (1.0, 1.0))
        assert val == pytest.approx(5.0, abs=1e-12)

    def test_empty_prediction_flagged_with_diagonal(self):
        pred = np.zeros((10, 10), dtype=int)
        true = np.zeros((10, 10), dtype=int)
        true[4:6, 4:6] = 1
        val, flag = assd(pred, true, 1, (1.0, 1.0))
        assert flag and val == pytest.approx(math.hypot(10, 10))

    def test_matches_brute_force_on_random_masks(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            a = (rng.random((9, 9)) > 0.6).astype(int)
            b = (rng.random((9, 9)) > 0.6).astype(int)
            spacing = (float(rng.uniform(0.5, 2.0)), float(rng.uniform(0.5, 2.0)))
            val, _ = assd(a, b, 1, spacing)
            assert val == pytest.approx(brute_force_assd(a, b, 1, spacing), abs=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        a = (rng.random((10, 10)) > 0.5).astype(int)
        b = (rng.random((10, 10)) > 0.5).astype(int)
        assert assd(a, b, 1)[0] == pytest.approx(assd(b, a, 1)[0], abs=1e-12)


def _samples_from_labels(labels, images=None, domain="target", split="target_test"):
    out = []
    for i, lab in enumerate(labels):
        img = images[i] if images is not None else np.zeros(lab.shape, dtype=np.float32)
        out.append(
            Sample(
                image=img.astype(np.float32),
                label=lab,
                domain=domain,
                split=split,
                subject_id=f"s{i:03d}",
                spacing_mm=(1.0, 1.0),
            )
        )
    return out


class _FixedPredictionModel(AdaptiveSegmenter):
    """Model whose final segmentation is a constant dictated per test."""

    def __init__(self, cfg, fixed_labels):
        super().__init__(cfg)
        self._fixed = fixed_labels

    def forward(self, x, mode="sampled", generator=None):
        bundle = super().forward(x, mode=mode, generator=generator)
        probs = torch.nn.functional.one_hot(self._fixed[: x.shape[0]], self.cfg.num_classes + 1)
        bundle.seg_final = probs.permute(0, 3, 1, 2).float()
        return bundle


class TestEvaluate:
    def test_perfect_prediction_scores_100_and_0(self):
        rng = np.random.default_rng(1)
        labels = [rng.integers(0, 4, (32, 32)) for _ in range(3)]
        model = _FixedPredictionModel(SMALL, torch.tensor(np.stack(labels)))
        model.eval()
        report = evaluate(model, _samples_from_labels(labels))
        agg = report.aggregate()
        assert agg["dsc"]["avg"][0] == pytest.approx(100.0)
        assert agg["assd"]["avg"][0] == pytest.approx(0.0)

    def test_all_background_prediction_scores_zero_dsc(self):
        rng = np.random.default_rng(2)
        labels = [rng.integers(1, 4, (32, 32)) for _ in range(2)]
        model = _FixedPredictionModel(SMALL, torch.zeros(2, 32, 32, dtype=torch.long))
        model.eval()
        report = evaluate(model, _samples_from_labels(labels))
        assert report.aggregate()["dsc"]["avg"][0] == pytest.approx(0.0)
        assert all(r["flagged"] for r in report.rows)

    def test_report_mean_matches_row_recomputation(self, tmp_path, model):
        rng = np.random.default_rng(3)
        labels = [rng.integers(0, 4, (32, 32)) for _ in range(4)]
        images = [rng.random((32, 32)) for _ in range(4)]
        report = evaluate(model, _samples_from_labels(labels, images), out_dir=tmp_path)
        with open(tmp_path / "metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        recomputed = np.mean([float(r["dsc_avg"]) for r in rows])
        assert report.aggregate()["dsc"]["avg"][0] == pytest.approx(recomputed, abs=1e-9)
        assert (tmp_path / "metrics.txt").exists()

    def test_unlabeled_split_rejected(self, model):
        s = _samples_from_labels([np.zeros((32, 32), dtype=int)])[0]
        s.label = None
        with pytest.raises(ValueError, match="labeled"):
            evaluate(model, [s])


class TestTraversal:
    def test_inter_image_endpoints_match_own_templates(self, model, tmp_path):
        rng = torch.Generator().manual_seed(0)
        x1 = torch.rand(1, 1, 32, 32, generator=rng)[0]
        x2 = torch.rand(1, 1, 32, 32, generator=rng)[0]
        alphas, path, maps = traverse_inter_image(model, x1, x2, 5, out_dir=tmp_path)
        w = infer_weights(model, torch.stack([x1, x2]))
        from atlasmix.evaluation import decode_weight_path

        own = decode_weight_path(model, w)
        assert torch.allclose(maps[0], own[0], atol=1e-6)
        assert torch.allclose(maps[-1], own[1], atol=1e-6)
        sums = maps.sum(dim=1)
        assert (sums - 1.0).abs().max().item() < 1e-5
        assert fr_path_is_geodesic(path)
        assert (tmp_path / "inter_image_pair.png").exists()
        assert (tmp_path / "inter_image_pair_weights.csv").exists()

    def test_inter_basis_identical_indices_constant(self, model):
        alphas, path, maps = traverse_inter_basis(model, 2, 2, 5)
        assert torch.allclose(maps, maps[0:1].expand_as(maps), atol=1e-7)

    def test_inter_basis_endpoint_decodes_single_basis(self, model):
        from atlasmix.evaluation import decode_weight_path

        _, path, maps = traverse_inter_basis(model, 1, 3, 4)
        e1 = torch.zeros(SMALL.num_bases)
        e1[0] = 1.0
        own = decode_weight_path(model, e1.unsqueeze(0))
        assert torch.allclose(maps[0], own[0], atol=1e-6)
        assert fr_path_is_geodesic(path)

    def test_inter_basis_bad_index(self, model):
        with pytest.raises(ValueError, match="1..4"):
            traverse_inter_basis(model, 0, 9, 5)

    def test_too_few_steps(self, model):
        with pytest.raises(ValueError, match="n_steps"):
            traverse_inter_image(model, torch.rand(1, 32, 32), torch.rand(1, 32, 32), 1)


class TestExportLatents:
    def test_rows_sums_and_pca(self, model, tmp_path):
        rng = np.random.default_rng(5)
        labels = [rng.integers(0, 4, (32, 32)) for _ in range(6)]
        images = [rng.random((32, 32)) for _ in range(6)]
        samples = _samples_from_labels(labels, images)
        for s in samples[:3]:
            s.domain = "source"
        csv_path, plot_path, w = export_latents(model, samples, tmp_path)
        with open(csv_path) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 6
        for row in rows:
            total = sum(float(row[f"w{m}"]) for m in range(SMALL.num_bases))
            assert total == pytest.approx(1.0, abs=1e-6)
        assert plot_path.exists()

        # PCA oracle: explained fraction from an independent eigendecomposition
        wm = w.numpy().astype(np.float64)
        _, explained = pca_2d(wm)
        cov = np.cov((wm - wm.mean(0)).T, bias=True)
        eig = np.sort(np.linalg.eigvalsh(cov))[::-1]
        assert explained == pytest.approx(eig[:2].sum() / eig.sum(), abs=1e-9)


class TestBasisActivation:
    def test_fresh_model_activates_all(self, model):
        images = torch.rand(10, 1, 32, 32)
        count, mean_usage, max_usage = basis_activation_report(model, images)
        assert count == SMALL.num_bases
        assert mean_usage.shape == (SMALL.num_bases,)

    def test_dead_basis_detected(self):
        torch.manual_seed(1)
        m = AdaptiveSegmenter(SMALL)
        m.eval()
        with torch.no_grad():
            m.weight_head.mlp[-1].weight.zero_()
            m.weight_head.mlp[-1].bias.zero_()
            m.weight_head.mlp[-1].bias[-1] = -30.0  # basis 4 never selected
        count, _, max_usage = basis_activation_report(m, torch.rand(8, 1, 32, 32))
        assert count == SMALL.num_bases - 1
        assert max_usage[-1] < 1e-3
