import numpy as np
import pytest

from edgeflow3d.errors import DegenerateInputError, UsageError
from edgeflow3d.refine import (
    RefineConfig,
    grad_mi,
    grad_ncc,
    kde_histogram,
    mutual_information,
    ncc,
    refine,
    refine_mi,
    refine_ncc,
)
from edgeflow3d.volume import Volume3D

import reference


def smooth_pair(rng, n=8, corr=0.8):
    from scipy.ndimage import gaussian_filter

    a = gaussian_filter(rng.standard_normal((n, n, n)), 1.2)
    b = corr * a + (1 - corr) * gaussian_filter(rng.standard_normal((n, n, n)), 1.2)
    a = (a - a.min()) / (a.max() - a.min())
    b = (b - b.min()) / (b.max() - b.min())
    return a, b


class TestNcc:
    def test_self_correlation(self, rng):
        v = rng.random((5, 5, 5))
        assert ncc(v, v) == pytest.approx(1.0)

    def test_anti_correlation(self, rng):
        v = rng.random((5, 5, 5))
        assert ncc(v, -v) == pytest.approx(-1.0)

    def test_affine_invariance(self, rng):
        v = rng.random((5, 5, 5))
        w = rng.random((5, 5, 5))
        assert ncc(v, 2.0 * w + 3.0) == pytest.approx(ncc(v, w), abs=1e-12)
        assert ncc(0.5 * v + 1.0, w) == pytest.approx(ncc(v, w), abs=1e-12)

    def test_matches_plain_formula(self, rng):
        a, b = rng.random((4, 4, 4)), rng.random((4, 4, 4))
        assert ncc(a, b) == pytest.approx(reference.ncc_plain(a, b), abs=1e-13)

    def test_masked(self, rng):
        a, b = rng.random((6, 6, 6)), rng.random((6, 6, 6))
        mask = rng.random((6, 6, 6)) > 0.4
        assert ncc(a, b, mask) == pytest.approx(reference.ncc_plain(a[mask], b[mask]), abs=1e-13)

    def test_constant_volume_rejected(self, rng):
        with pytest.raises(DegenerateInputError):
            ncc(np.full((3, 3, 3), 0.4), rng.random((3, 3, 3)))

    def test_accepts_volume3d(self, rng):
        a = Volume3D((4, 4, 4), (1, 1, 1), rng.random((4, 4, 4)))
        assert ncc(a, a) == pytest.approx(1.0)


class TestGradNcc:
    def test_matches_finite_differences(self, rng):
        for _ in range(3):
            x = rng.random((4, 4, 4))
            s = rng.random((4, 4, 4))
            g = grad_ncc(x, s)
            h = 1e-6
            for idx in [(0, 0, 0), (1, 2, 3), (3, 3, 3), (2, 0, 1)]:
                xp = x.copy()
                xp[idx] += h
                xm = x.copy()
                xm[idx] -= h
                fd = (ncc(xp, s) - ncc(xm, s)) / (2 * h)
                assert g[idx] == pytest.approx(fd, rel=1e-5)

    def test_stationary_at_affine_image(self, rng):
        s = rng.random((4, 4, 4))
        x = 2.5 * s + 0.3
        assert np.abs(grad_ncc(x, s)).max() == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_to_ones(self, rng):
        x, s = rng.random((5, 5, 5)), rng.random((5, 5, 5))
        g = grad_ncc(x, s)
        assert float(g.sum()) == pytest.approx(0.0, abs=1e-12)

    def test_masked_gradient_zero_outside(self, rng):
        x, s = rng.random((5, 5, 5)), rng.random((5, 5, 5))
        mask = rng.random((5, 5, 5)) > 0.5
        g = grad_ncc(x, s, mask)
        assert np.count_nonzero(g[~mask]) == 0


class TestRefineNcc:
    def test_zero_iterations_identity(self, rng):
        x, s = smooth_pair(rng)
        out = refine_ncc(x, s, RefineConfig(iterations=0))
        assert np.array_equal(out, x)

    def test_monotone_improvement(self, rng):
        for seed in range(5):
            x, s = smooth_pair(np.random.default_rng(seed))
            out, trace = refine_ncc(x, s, RefineConfig(), return_trace=True)
            assert all(b >= a - 1e-12 for a, b in zip(trace, trace[1:]))
            assert ncc(out, s) >= ncc(x, s)

    def test_stationary_source_returns_input(self, rng):
        x, _ = smooth_pair(rng)
        out = refine_ncc(x, x.copy(), RefineConfig())
        assert np.array_equal(out, x)

    def test_volume_carrier_roundtrip(self, rng):
        x, s = smooth_pair(rng)
        vx = Volume3D(x.shape, (1, 1, 1), x)
        vs = Volume3D(s.shape, (1, 1, 1), s)
        out = refine_ncc(vx, vs, RefineConfig(iterations=2))
        assert isinstance(out, Volume3D)
        assert out.dims == vx.dims

    def test_raw_gradient_mode(self, rng):
        x, s = smooth_pair(rng)
        cfg = RefineConfig(grad_normalize="none", iterations=3)
        out = refine_ncc(x, s, cfg)
        assert ncc(out, s) >= ncc(x, s) - 1e-12


class TestKdeHistogram:
    def test_sums_to_one(self, rng):
        p = kde_histogram(rng.random((6, 6, 6)), bins=64)
        assert p.sum() == pytest.approx(1.0, abs=1e-12)
        assert (p >= 0).all()

    def test_constant_half_peaked_and_symmetric(self):
        p = kde_histogram(np.full((4, 4, 4), 0.5), bins=64, sigma=0.01)
        # 0.5 sits exactly between centers 31/63 and 32/63
        top = np.argsort(p)[-2:]
        assert set(top) == {31, 32}
        np.testing.assert_allclose(p, p[::-1], atol=1e-12)

    def test_ramp_near_uniform_interior(self):
        vals = np.linspace(0, 1, 4096).reshape(16, 16, 16)
        bins = 64
        p = kde_histogram(vals, bins=bins, sigma=0.01)
        interior = p[4:-4]
        assert np.abs(interior - 1.0 / bins).max() < 0.02 / bins * 4  # within 2% of 1/bins

    def test_matches_bruteforce(self, rng):
        vals = rng.random(40)
        p = kde_histogram(vals.reshape(2, 4, 5), bins=16, sigma=0.05)
        q = reference.kde_histogram_loops(vals, 16, 0.05)
        np.testing.assert_allclose(p, q, atol=1e-12)

    def test_empty_mask_rejected(self, rng):
        with pytest.raises(DegenerateInputError):
            kde_histogram(rng.random((3, 3, 3)), mask=np.zeros((3, 3, 3), bool))


class TestMutualInformation:
    def test_self_beats_shuffled(self, rng):
        v, _ = smooth_pair(rng, n=8)
        shuffled = rng.permutation(v.ravel()).reshape(v.shape)
        assert mutual_information(v, v, bins=64) >= mutual_information(v, shuffled, bins=64)

    def test_grad_matches_finite_differences(self, rng):
        x, s = smooth_pair(rng, n=4)
        g = grad_mi(x, s, bins=32, sigma=0.05)
        h = 1e-6
        for idx in [(0, 0, 0), (1, 2, 3), (3, 1, 2)]:
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            fd = (
                mutual_information(xp, s, bins=32, sigma=0.05)
                - mutual_information(xm, s, bins=32, sigma=0.05)
            ) / (2 * h)
            assert g[idx] == pytest.approx(fd, rel=1e-4, abs=1e-10)


class TestRefineMi:
    def test_zero_iterations_identity(self, rng):
        x, s = smooth_pair(rng)
        out = refine_mi(x, s, RefineConfig(metric="mi", iterations=0))
        assert np.array_equal(out, x)

    def test_monotone_improvement_on_smooth_inputs(self, rng):
        x, s = smooth_pair(np.random.default_rng(2), n=8)
        cfg = RefineConfig(metric="mi", mi_bins=64, mi_sigma=0.02)
        out, trace = refine_mi(x, s, cfg, return_trace=True)
        assert trace[-1] >= trace[0]


class TestDispatch:
    def test_none_metric_identity(self, rng):
        x, s = smooth_pair(rng)
        assert refine(x, s, RefineConfig(metric="none")) is x

    def test_bad_metric_rejected(self):
        with pytest.raises(UsageError):
            RefineConfig(metric="ssim")
