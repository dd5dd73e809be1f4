"""Smoothing and certification checks against independent oracles.

The Gaussian CDF oracle is mpmath's arbitrary-precision normal CDF, kept
deliberately separate from the erf-based implementation under test.
"""

import mpmath
import numpy as np
import pytest

from certsr import model as M
from certsr import smoothing as S
from certsr import tensor as T
from certsr.rng import RngStream


def phi_oracle(z: float) -> float:
    return float(mpmath.ncdf(z))


class IdentityStub:
    """Returns its input unchanged (scale 1); exposes raw sample behavior."""

    scale = 1
    kind = "stub"

    def __init__(self):
        self.params = {}

    def lift_params(self, graph):
        return {}

    def apply(self, x, params=None):
        return x if isinstance(x, T.Tensor) else T.Tensor(x)


class PresetNoise:
    """Stands in for RngStream.normal with scripted draws."""

    def __init__(self, blocks):
        self.blocks = list(blocks)

    def normal(self, shape, sigma=1.0):
        block = np.asarray(self.blocks.pop(0), dtype=np.float64)
        return np.broadcast_to(block.reshape(-1, *([1] * (len(shape) - 1))), shape).copy()

    def derive(self, label, index=0):
        return self


def tiny_model(seed=61):
    return M.build_srnet(channels=8, depth=1, scale=2, rng=RngStream(seed))


class TestNormalCdf:
    def test_symmetry_at_zero(self):
        assert S.std_normal_cdf(0.0) == 0.5

    def test_matches_high_precision_oracle(self):
        for z in (-3.0, -1.0, 0.3, 1.0, 1.7, 2.0, 4.5):
            assert S.std_normal_cdf(z) == pytest.approx(phi_oracle(z), abs=1e-12)

    def test_quantile_round_trip(self):
        assert S.std_normal_quantile(S.std_normal_cdf(1.7)) == pytest.approx(1.7, abs=1e-9)

    def test_quantile_inverse_error_bound(self):
        for p in (1e-6, 0.01, 0.158, 0.5, 0.841, 0.99, 1 - 1e-6):
            assert abs(S.std_normal_cdf(S.std_normal_quantile(p)) - p) < 1e-10

    def test_quantile_domain(self):
        for p in (0.0, 1.0, -0.5, 2.0):
            with pytest.raises(T.ShapeError):
                S.std_normal_quantile(p)


class TestCertPercentiles:
    def test_zero_epsilon_is_identity(self):
        assert S.cert_percentiles(0.5, 0.0, 0.06) == (0.5, 0.5)
        assert S.cert_percentiles(0.3, 0.0, 0.0) == (0.3, 0.3)

    def test_unit_shift(self):
        lo, hi = S.cert_percentiles(0.5, 0.06, 0.06)
        assert hi == pytest.approx(phi_oracle(1.0), abs=1e-9)
        assert lo == pytest.approx(phi_oracle(-1.0), abs=1e-9)

    def test_double_shift(self):
        lo, hi = S.cert_percentiles(0.5, 0.06, 0.03)
        assert hi == pytest.approx(phi_oracle(2.0), abs=1e-9)
        assert lo == pytest.approx(phi_oracle(-2.0), abs=1e-9)

    def test_sigma_zero_with_positive_epsilon_rejected(self):
        with pytest.raises(S.CertificateSaturatedError):
            S.cert_percentiles(0.5, 0.01, 0.0)


class TestMedianSmooth:
    def test_sigma_zero_is_base_forward_bitwise(self, rng):
        m = tiny_model()
        x = rng.uniform(0, 1, (3, 8, 8))
        spec = S.SmoothingSpec(sigma=0.0, n=21, rng=RngStream(1))
        np.testing.assert_array_equal(S.median_smooth(m, x, spec),
                                      m.apply(T.Tensor(x)).data)

    def test_even_n_rejected(self, rng):
        with pytest.raises(T.ShapeError):
            S.median_smooth(tiny_model(), rng.uniform(0, 1, (3, 8, 8)),
                            S.SmoothingSpec(sigma=0.1, n=20, rng=RngStream(1)))

    def test_stubbed_noise_median(self):
        # Identity model, draws {0.4, 0.5, 0.6} around x = 0 -> median 0.5.
        spec = S.SmoothingSpec(sigma=1.0, n=3, rng=RngStream(0))
        spec.rng = PresetNoise([[0.4, 0.5, 0.6]])
        out = S.median_smooth(IdentityStub(), np.zeros((3, 2, 2)), spec)
        np.testing.assert_array_equal(out, np.full((3, 2, 2), 0.5))

    def test_deterministic_under_fixed_seed(self, rng):
        m = tiny_model()
        x = rng.uniform(0, 1, (3, 8, 8))
        a = S.median_smooth(m, x, S.SmoothingSpec(sigma=0.06, n=11, rng=RngStream(4, 2)))
        b = S.median_smooth(m, x, S.SmoothingSpec(sigma=0.06, n=11, rng=RngStream(4, 2)))
        np.testing.assert_array_equal(a, b)


class TestMeanSmooth:
    def test_single_clean_draw_is_base_forward(self, rng):
        m = tiny_model()
        x = rng.uniform(0, 1, (3, 8, 8))
        spec = S.SmoothingSpec(sigma=0.0, n=1, rng=RngStream(2))
        np.testing.assert_array_equal(S.mean_smooth(m, x, spec),
                                      m.apply(T.Tensor(x)).data)

    def test_stubbed_mean_vs_median(self):
        spec = S.SmoothingSpec(sigma=1.0, n=3, rng=RngStream(0))
        spec.rng = PresetNoise([[0.0, 0.0, 0.9]])
        mean_out = S.mean_smooth(IdentityStub(), np.zeros((3, 2, 2)), spec)
        np.testing.assert_allclose(mean_out, 0.3, atol=1e-15)
        spec2 = S.SmoothingSpec(sigma=1.0, n=3, rng=RngStream(0))
        spec2.rng = PresetNoise([[0.0, 0.0, 0.9]])
        med_out = S.median_smooth(IdentityStub(), np.zeros((3, 2, 2)), spec2)
        np.testing.assert_array_equal(med_out, 0.0)

    def test_outlier_sensitivity_of_mean_vs_median(self):
        # Criterion: corrupting 1 of 21 in-range samples by an arbitrary
        # amount moves the mean by exactly delta/n but leaves the median
        # inside the original sample range.
        stream = RngStream(505)
        stack = stream.uniform(0.2, 0.8, (21, 4, 4))
        corrupted = stack.copy()
        old = corrupted[7].copy()
        corrupted[7] = 10.0
        mean_shift = S.sample_mean(corrupted) - S.sample_mean(stack)
        np.testing.assert_allclose(mean_shift, (10.0 - old) / 21.0, atol=1e-12)
        med = S.sample_median(corrupted)
        assert np.all(med >= stack.min(axis=0)) and np.all(med <= stack.max(axis=0))

    def test_median_shift_bounded_by_adjacent_gap(self):
        stream = RngStream(506)
        stack = stream.uniform(0, 1, (21, 3, 3))
        ordered = np.sort(stack, axis=0)
        gaps = np.diff(ordered, axis=0).max(axis=0)
        corrupted = stack.copy()
        corrupted[3] = -50.0  # arbitrary corruption of one sample
        shift = np.abs(S.sample_median(corrupted) - S.sample_median(stack))
        assert np.all(shift <= gaps + 1e-15)


class TestPercentileBounds:
    def test_reference_ranks(self, rng):
        m = tiny_model()
        x = rng.uniform(0, 1, (3, 8, 8))
        spec = S.SmoothingSpec(sigma=0.06, n=21, rng=RngStream(5))
        bound = S.percentile_bounds_mc(m, x, spec, epsilon=0.06)
        assert bound.rank_lower == 4 and bound.rank_upper == 18

    def test_zero_epsilon_collapses_to_sample_median(self, rng):
        m = tiny_model()
        x = rng.uniform(0, 1, (3, 8, 8))
        spec = S.SmoothingSpec(sigma=0.06, n=21, rng=RngStream(6))
        bound = S.percentile_bounds_mc(m, x, spec, epsilon=0.0)
        assert bound.rank_lower == bound.rank_upper == 11
        np.testing.assert_array_equal(bound.lower_image, bound.upper_image)

    def test_lower_below_upper_elementwise(self, rng):
        m = tiny_model()
        for i in range(3):
            x = rng.uniform(0, 1, (3, 8, 8))
            spec = S.SmoothingSpec(sigma=0.05, n=15, rng=RngStream(7, i))
            bound = S.percentile_bounds_mc(m, x, spec, epsilon=0.03)
            assert np.all(bound.lower_image <= bound.upper_image)
            assert 1 <= bound.rank_lower <= bound.rank_upper <= spec.n

    def test_saturation_raises_with_advice(self, rng):
        m = tiny_model()
        x = rng.uniform(0, 1, (3, 8, 8))
        spec = S.SmoothingSpec(sigma=0.01, n=21, rng=RngStream(8))
        with pytest.raises(S.CertificateSaturatedError, match="larger n|more samples"):
            S.percentile_bounds_mc(m, x, spec, epsilon=0.2)

    def test_preconditions(self, rng):
        m = tiny_model()
        x = rng.uniform(0, 1, (3, 8, 8))
        with pytest.raises(T.ShapeError):
            S.percentile_bounds_mc(m, x, S.SmoothingSpec(sigma=0.0, n=21, rng=RngStream(9)), 0.0)
        with pytest.raises(T.ShapeError):
            S.percentile_bounds_mc(m, x, S.SmoothingSpec(sigma=0.1, n=5, rng=RngStream(9)), 0.0)


class TestContainment:
    def test_zero_epsilon_rate_is_exactly_one(self, rng):
        m = tiny_model()
        x = rng.uniform(0, 1, (3, 8, 8))
        spec = S.SmoothingSpec(sigma=0.06, n=21, rng=RngStream(10))
        assert S.certify_containment(m, x, spec, epsilon=0.0, trials=3) == 1.0

    def test_small_certificate_mostly_contained(self, rng):
        m = tiny_model()
        x = rng.uniform(0, 1, (3, 8, 8))
        spec = S.SmoothingSpec(sigma=0.06, n=201, rng=RngStream(11))
        rate = S.certify_containment(m, x, spec, epsilon=0.03, trials=4)
        assert rate >= 0.95

    def test_oversized_delta_lowers_rate(self, rng):
        m = tiny_model()
        x = rng.uniform(0, 1, (3, 8, 8))
        eps = 0.06
        spec1 = S.SmoothingSpec(sigma=0.06, n=101, rng=RngStream(12))
        matched = S.certify_containment(m, x, spec1, eps, trials=4)
        spec2 = S.SmoothingSpec(sigma=0.06, n=101, rng=RngStream(12))
        oversized = S.certify_containment(m, x, spec2, eps, trials=4,
                                          delta_epsilon=2.0 * eps)
        assert oversized <= matched

    def test_plug_compatible_with_bicubic_model(self, rng):
        m = M.build_bicubic_model(scale=2)
        x = rng.uniform(0, 1, (3, 8, 8))
        spec = S.SmoothingSpec(sigma=0.05, n=21, rng=RngStream(13))
        out = S.median_smooth(m, x, spec)
        assert out.shape == (3, 16, 16)
        rate = S.certify_containment(
            m, x, S.SmoothingSpec(sigma=0.05, n=21, rng=RngStream(14)),
            epsilon=0.0, trials=2)
        assert rate == 1.0
