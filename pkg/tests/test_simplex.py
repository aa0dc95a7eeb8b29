import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from atlasmix.simplex import (
    check_simplex,
    fisher_rao_distance,
    fr_similarity,
    geodesic_interpolate,
)


def simplex_points(m=6):
    """Strategy producing one normalized point on the m-simplex."""
    return (
        st.lists(st.floats(min_value=1e-6, max_value=1.0), min_size=m, max_size=m)
        .map(lambda xs: torch.tensor(xs, dtype=torch.float64))
        .map(lambda t: t / t.sum())
    )


class TestFisherRaoDistance:
    def test_identity_is_zero(self):
        w = torch.tensor([0.2, 0.3, 0.5], dtype=torch.float64)
        assert fisher_rao_distance(w, w).item() == pytest.approx(0.0, abs=1e-9)

    def test_disjoint_one_hots(self):
        e1 = torch.tensor([1.0, 0.0], dtype=torch.float64)
        e2 = torch.tensor([0.0, 1.0], dtype=torch.float64)
        assert fisher_rao_distance(e1, e2).item() == pytest.approx(math.pi, abs=1e-9)

    def test_one_hot_vs_uniform_pair(self):
        w = torch.tensor([1.0, 0.0], dtype=torch.float64)
        w2 = torch.tensor([0.5, 0.5], dtype=torch.float64)
        assert fisher_rao_distance(w, w2).item() == pytest.approx(math.pi / 2, abs=1e-9)

    def test_length_mismatch_raises(self):
        with pytest.raises(ValueError, match="mismatch"):
            fisher_rao_distance(torch.tensor([0.5, 0.5]), torch.tensor([0.2, 0.3, 0.5]))

    def test_off_simplex_raises(self):
        with pytest.raises(ValueError, match="sum"):
            fisher_rao_distance(torch.tensor([0.7, 0.7]), torch.tensor([0.5, 0.5]))
        with pytest.raises(ValueError, match="negative"):
            check_simplex(torch.tensor([-0.2, 1.2]))

    @given(simplex_points(), simplex_points())
    @settings(max_examples=200, deadline=None)
    def test_symmetry_and_range(self, w, w2):
        d12 = fisher_rao_distance(w, w2).item()
        d21 = fisher_rao_distance(w2, w).item()
        assert d12 == pytest.approx(d21, abs=1e-12)
        assert -1e-12 <= d12 <= math.pi + 1e-12

    @given(simplex_points(4), simplex_points(4), simplex_points(4))
    @settings(max_examples=200, deadline=None)
    def test_triangle_inequality(self, a, b, c):
        dab = fisher_rao_distance(a, b).item()
        dbc = fisher_rao_distance(b, c).item()
        dac = fisher_rao_distance(a, c).item()
        assert dac <= dab + dbc + 1e-6


class TestSimilarity:
    def test_identity(self):
        w = torch.tensor([0.25, 0.25, 0.5], dtype=torch.float64)
        assert fr_similarity(w, w).item() == pytest.approx(1.0, abs=1e-12)

    def test_disjoint(self):
        e1 = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
        e2 = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
        assert fr_similarity(e1, e2).item() == pytest.approx(0.0, abs=1e-12)

    def test_half(self):
        w = torch.tensor([1.0, 0.0], dtype=torch.float64)
        w2 = torch.tensor([0.5, 0.5], dtype=torch.float64)
        assert fr_similarity(w, w2).item() == pytest.approx(0.5, abs=1e-12)


class TestGeodesic:
    def test_endpoints(self):
        w = torch.tensor([0.1, 0.2, 0.7], dtype=torch.float64)
        w2 = torch.tensor([0.6, 0.3, 0.1], dtype=torch.float64)
        assert torch.equal(geodesic_interpolate(w, w2, 0.0), w)
        assert torch.equal(geodesic_interpolate(w, w2, 1.0), w2)

    def test_midpoint_of_one_hots(self):
        e1 = torch.tensor([1.0, 0.0], dtype=torch.float64)
        e2 = torch.tensor([0.0, 1.0], dtype=torch.float64)
        mid = geodesic_interpolate(e1, e2, 0.5)
        assert torch.allclose(mid, torch.tensor([0.5, 0.5], dtype=torch.float64), atol=1e-12)

    def test_identical_inputs_degenerate(self):
        w = torch.tensor([0.3, 0.3, 0.4], dtype=torch.float64)
        out = geodesic_interpolate(w, w.clone(), 0.37)
        assert torch.allclose(out, w, atol=1e-12)

    def test_arc_length_proportionality_m6(self):
        # Frozen from an independent numeric check of geodesic proportionality.
        gen = torch.Generator().manual_seed(7)
        w = torch.rand(6, generator=gen, dtype=torch.float64)
        w2 = torch.rand(6, generator=gen, dtype=torch.float64)
        w, w2 = w / w.sum(), w2 / w2.sum()
        out = geodesic_interpolate(w, w2, 0.3)
        full = fisher_rao_distance(w, w2).item()
        assert fisher_rao_distance(out, w).item() == pytest.approx(0.3 * full, abs=1e-5)

    @given(simplex_points(), simplex_points(), st.floats(min_value=0.0, max_value=1.0))
    @settings(max_examples=300, deadline=None)
    def test_output_on_simplex(self, w, w2, alpha):
        out = geodesic_interpolate(w, w2, alpha)
        assert out.min().item() >= -1e-6
        assert out.sum().item() == pytest.approx(1.0, abs=1e-6)

    @given(simplex_points(5), simplex_points(5), st.floats(min_value=0.0, max_value=1.0))
    @settings(max_examples=200, deadline=None)
    def test_arc_length_linearity(self, w, w2, alpha):
        out = geodesic_interpolate(w, w2, alpha)
        full = fisher_rao_distance(w, w2).item()
        assert fisher_rao_distance(out, w, validate=False).item() == pytest.approx(
            alpha * full, abs=1e-5
        )

    def test_alpha_out_of_range(self):
        w = torch.tensor([0.5, 0.5])
        with pytest.raises(ValueError, match="alpha"):
            geodesic_interpolate(w, w, 1.5)
