import numpy as np
import pytest

from edgeflow3d.edges import EdgeMap
from edgeflow3d.errors import DataError
from edgeflow3d.patches import (
    PatchSamplerConfig,
    TrainingPatch,
    coord_channels,
    sample_batch,
    sample_multistride_patch,
    sample_simple_patch,
)
from edgeflow3d.volume import Volume3D


def make_volume_and_edges(dims, seed=0):
    rng = np.random.default_rng(seed)
    v = Volume3D(dims, (1, 1, 1), rng.random(dims).astype(np.float32))
    e = EdgeMap.from_bits(rng.random(dims) > 0.9, 0.5)
    return v, e


class TestCoordChannels:
    def test_full_volume_spans_endpoints(self):
        ci, cj, ck = coord_channels((16, 16, 16), (0, 0, 0), (1, 1, 1), 16)
        assert ci[0, 0, 0] == -1.0 and ci[-1, 0, 0] == 1.0
        assert cj[0, 0, 0] == -1.0 and cj[0, -1, 0] == 1.0
        assert ck[0, 0, 0] == -1.0 and ck[0, 0, -1] == 1.0

    def test_center_voxel_zero_for_odd_dim(self):
        ci, _, _ = coord_channels((9, 9, 9), (0, 0, 0), (1, 1, 1), 9)
        assert ci[4, 0, 0] == 0.0

    def test_strided_formula(self):
        # origin 2, stride 3, P 4, dim 64: values 2*{2,5,8,11}/63 - 1
        ci, _, _ = coord_channels((64, 64, 64), (2, 2, 2), (3, 3, 3), 4)
        expected = [2 * i / 63 - 1 for i in (2, 5, 8, 11)]
        np.testing.assert_allclose(ci[:, 0, 0], expected, rtol=1e-6)

    def test_out_of_bounds_rejected(self):
        with pytest.raises(DataError):
            coord_channels((16, 16, 16), (10, 0, 0), (2, 1, 1), 4)


class TestSimplePatch:
    def test_patch_equals_volume_when_sizes_match(self):
        v, e = make_volume_and_edges((8, 8, 8))
        cfg = PatchSamplerConfig(patch_size=8)
        patch = sample_simple_patch(v, e, cfg, np.random.default_rng(0))
        assert patch.origin == (0, 0, 0)
        assert np.array_equal(patch.data, v.data)
        assert np.array_equal(patch.edge, e.bits)

    def test_reproducible_origins(self):
        v, e = make_volume_and_edges((16, 16, 16))
        cfg = PatchSamplerConfig(patch_size=4)
        a = [sample_simple_patch(v, e, cfg, np.random.default_rng(7)).origin for _ in (0,)]
        b = [sample_simple_patch(v, e, cfg, np.random.default_rng(7)).origin for _ in (0,)]
        assert a == b

    def test_provenance_exact(self):
        v, e = make_volume_and_edges((20, 14, 17))
        cfg = PatchSamplerConfig(patch_size=5)
        rng = np.random.default_rng(3)
        for _ in range(25):
            p = sample_simple_patch(v, e, cfg, rng)
            o = p.origin
            for m in [(0, 0, 0), (1, 2, 3), (4, 4, 4)]:
                assert p.data[m] == v.data[o[0] + m[0], o[1] + m[1], o[2] + m[2]]

    def test_volume_too_small(self):
        v, e = make_volume_and_edges((4, 8, 8))
        with pytest.raises(DataError):
            sample_simple_patch(v, e, PatchSamplerConfig(patch_size=8), np.random.default_rng(0))


class TestMultistridePatch:
    def test_reduces_to_simple_when_multiple_one(self):
        v, e = make_volume_and_edges((8, 8, 8))
        cfg = PatchSamplerConfig(patch_size=8)  # max multiple = 1 on every axis
        p = sample_multistride_patch(v, e, cfg, np.random.default_rng(0))
        assert p.stride == (1, 1, 1)
        assert np.array_equal(p.data, v.data)

    def test_strides_follow_subvolume_multiples(self):
        # Dims allowing multiples (2,3,1) of an 8-voxel patch.
        v, e = make_volume_and_edges((16, 24, 8))
        cfg = PatchSamplerConfig(patch_size=8)
        rng = np.random.default_rng(0)
        seen = set()
        for _ in range(50):
            p = sample_multistride_patch(v, e, cfg, rng)
            assert p.data.shape == (8, 8, 8)
            assert 1 <= p.stride[0] <= 2 and 1 <= p.stride[1] <= 3 and p.stride[2] == 1
            seen.add(p.stride)
        assert (2, 3, 1) in seen

    def test_provenance_exact(self):
        v, e = make_volume_and_edges((32, 24, 16))
        cfg = PatchSamplerConfig(patch_size=8)
        rng = np.random.default_rng(11)
        for _ in range(25):
            p = sample_multistride_patch(v, e, cfg, rng)
            o, s = p.origin, p.stride
            for m in [(0, 0, 0), (3, 1, 2), (7, 7, 7)]:
                assert p.data[m] == v.data[o[0] + s[0] * m[0], o[1] + s[1] * m[1], o[2] + s[2] * m[2]]
                assert p.edge[m] == e.bits[o[0] + s[0] * m[0], o[1] + s[1] * m[1], o[2] + s[2] * m[2]]

    def test_coords_match_sampled_positions(self):
        v, e = make_volume_and_edges((32, 32, 32))
        cfg = PatchSamplerConfig(patch_size=8)
        rng = np.random.default_rng(5)
        p = sample_multistride_patch(v, e, cfg, rng)
        o, s = p.origin, p.stride
        for m in range(8):
            want = 2 * (o[0] + s[0] * m) / 31 - 1
            assert p.coords[0][m, 0, 0] == pytest.approx(want, rel=1e-6)

    def test_edge_stays_binary(self):
        v, e = make_volume_and_edges((32, 32, 32))
        cfg = PatchSamplerConfig(patch_size=8)
        p = sample_multistride_patch(v, e, cfg, np.random.default_rng(2))
        assert p.edge.dtype == bool


class TestSampleBatch:
    def test_rho_zero_all_simple(self):
        v, e = make_volume_and_edges((16, 16, 16))
        cfg = PatchSamplerConfig(patch_size=4, multistride_ratio=0.0, random_flip=False)
        batch = sample_batch([v], [e], cfg, np.random.default_rng(0), 32)
        assert all(p.stride == (1, 1, 1) for p in batch)

    def test_rho_one_all_multistride(self):
        v, e = make_volume_and_edges((16, 16, 16))
        cfg = PatchSamplerConfig(patch_size=4, multistride_ratio=1.0, random_flip=False)
        batch = sample_batch([v], [e], cfg, np.random.default_rng(0), 64)
        assert any(p.stride != (1, 1, 1) for p in batch)

    def test_rho_fraction_monte_carlo(self, monkeypatch):
        import edgeflow3d.patches as patches_mod

        v, e = make_volume_and_edges((8, 8, 8))
        cfg = PatchSamplerConfig(patch_size=4, multistride_ratio=0.2, random_flip=False)
        calls = {"multi": 0}
        real = patches_mod.sample_multistride_patch

        def counting(*args, **kwargs):
            calls["multi"] += 1
            return real(*args, **kwargs)

        monkeypatch.setattr(patches_mod, "sample_multistride_patch", counting)
        sample_batch([v], [e], cfg, np.random.default_rng(123), 10_000)
        assert abs(calls["multi"] / 10_000 - 0.2) < 0.02

    def test_flip_consistency(self):
        # Whatever flips were applied, data[m] must equal the volume at the
        # full-volume index named by the coordinates, up to one global sign
        # per axis (the flip negation). Exactly one of the 8 sign patterns
        # must explain every probed voxel.
        v, e = make_volume_and_edges((16, 16, 16))
        cfg = PatchSamplerConfig(patch_size=8, multistride_ratio=0.5, random_flip=True)
        rng = np.random.default_rng(17)
        batch = sample_batch([v], [e], cfg, rng, 40)
        probes = [(0, 0, 0), (1, 5, 2), (7, 7, 7), (3, 0, 6)]
        for p in batch:
            ok_patterns = 0
            for sx in (1, -1):
                for sy in (1, -1):
                    for sz in (1, -1):
                        good = True
                        for m in probes:
                            idx = []
                            for axis, s in enumerate((sx, sy, sz)):
                                c = s * float(p.coords[axis][m])
                                i = (c + 1.0) * (v.dims[axis] - 1) / 2.0
                                i_round = int(round(i))
                                if abs(i - i_round) > 1e-3:
                                    good = False
                                    break
                                idx.append(i_round)
                            if not good or p.data[m] != v.data[tuple(idx)]:
                                good = False
                                break
                        ok_patterns += good
            assert ok_patterns >= 1

    def test_empty_volume_list(self):
        with pytest.raises(DataError):
            sample_batch([], [], PatchSamplerConfig(patch_size=4), np.random.default_rng(0), 1)


class TestFlipSemantics:
    def test_flip_negates_coordinate_and_mirrors_data(self):
        from edgeflow3d.patches import _flip_patch

        v, e = make_volume_and_edges((12, 12, 12))
        cfg = PatchSamplerConfig(patch_size=6)
        p = sample_simple_patch(v, e, cfg, np.random.default_rng(8))
        f = _flip_patch(p, (True, False, False))
        assert np.array_equal(f.data, p.data[::-1])
        np.testing.assert_allclose(f.coords[0], -p.coords[0][::-1])
        np.testing.assert_allclose(f.coords[1], p.coords[1][::-1])
        # pairing intact: flipped data voxel m came from full-volume index
        # encoded by the mirrored coordinate magnitude
        m = 2
        orig_m = 5 - m
        assert f.data[m, 0, 0] == p.data[orig_m, 0, 0]
        assert f.coords[0][m, 0, 0] == -p.coords[0][orig_m, 0, 0]
