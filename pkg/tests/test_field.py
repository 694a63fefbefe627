import numpy as np
import pytest

from edgeflow3d.errors import DataError, FormatError, UsageError
from edgeflow3d.field import (
    FieldArch,
    VelocityField,
    init_params,
    n_params,
    param_spec,
)

SMALL = FieldArch(base_width=3, channel_mults=(1, 2), time_dim=4, dtype="float64")


def make_inputs(rng, batch=2, size=8, dtype=np.float64):
    x_t = rng.standard_normal((batch, 1, size, size, size)).astype(dtype)
    e = (rng.random((batch, 1, size, size, size)) > 0.8).astype(dtype)
    coords = tuple(
        rng.uniform(-1, 1, (batch, 1, size, size, size)).astype(dtype) for _ in range(3)
    )
    t = rng.uniform(0, 1, batch)
    return x_t, t, e, coords


class TestConstruction:
    def test_zero_final_layer_gives_zero_output(self, rng):
        f = VelocityField.create(SMALL, rng)
        x_t, t, e, coords = make_inputs(rng)
        out = f.forward(x_t, t, e, coords, keep_cache=False)
        assert np.count_nonzero(out) == 0

    def test_forward_deterministic(self, rng):
        f = VelocityField(SMALL, rng.standard_normal(n_params(SMALL)) * 0.2)
        x_t, t, e, coords = make_inputs(rng)
        a = f.forward(x_t, t, e, coords, keep_cache=False)
        b = f.forward(x_t, t, e, coords, keep_cache=False)
        assert np.array_equal(a, b)

    def test_init_deterministic(self):
        a = init_params(SMALL, np.random.default_rng(9))
        b = init_params(SMALL, np.random.default_rng(9))
        assert np.array_equal(a, b)

    def test_param_count_matches_analytic(self):
        arch = FieldArch(base_width=2, channel_mults=(1, 2), time_dim=4)
        k3 = 27
        w0, w1 = 2, 4
        tdim = 4

        def block(cin, cout):
            return (
                cout * cin * k3 + cout  # conv1
                + cout  # norm1 gain
                + 2 * cout * tdim + 2 * cout  # film1
                + cout * cout * k3 + cout  # conv2
                + cout  # norm2 gain
                + 2 * cout * tdim + 2 * cout  # film2
            )

        expected = (
            tdim * tdim + tdim  # time mlp
            + w0 * 5 * k3 + w0  # conv_in
            + block(w0, w0)  # enc0
            + block(8 * w0, w1)  # enc1
            + w0 * w1 * k3 + w0  # up0
            + block(2 * w0, w0)  # dec0
            + 1 * w0 * k3 + 1  # conv_out
        )
        assert n_params(arch) == expected

    def test_output_shape_and_channel(self, rng):
        f = VelocityField.create(SMALL, rng)
        x_t, t, e, coords = make_inputs(rng, batch=3, size=4)
        out = f.forward(x_t, t, e, coords, keep_cache=False)
        assert out.shape == (3, 1, 4, 4, 4)

    def test_shape_mismatch_rejected(self, rng):
        f = VelocityField.create(SMALL, rng)
        x_t, t, e, coords = make_inputs(rng, size=4)
        with pytest.raises(DataError):
            f.forward(x_t, t, e[:, :, :2], coords, keep_cache=False)

    def test_time_out_of_range_rejected(self, rng):
        f = VelocityField.create(SMALL, rng)
        x_t, _, e, coords = make_inputs(rng, size=4)
        with pytest.raises(DataError):
            f.forward(x_t, 1.5, e, coords, keep_cache=False)

    def test_odd_dims_rejected_with_two_levels(self, rng):
        f = VelocityField.create(SMALL, rng)
        x_t, t, e, coords = make_inputs(rng, size=5)
        with pytest.raises(DataError):
            f.forward(x_t, t, e, coords, keep_cache=False)


class TestTinyNetworkOracle:
    def test_single_voxel_closed_form(self):
        # levels=1, width=1: at 1x1x1 only kernel centers contribute, so the
        # whole forward pass collapses to scalar arithmetic we can write out.
        arch = FieldArch(base_width=1, channel_mults=(1,), time_dim=2, dtype="float64")
        f = VelocityField(arch)
        rng = np.random.default_rng(5)
        f.theta[:] = rng.normal(0, 0.5, f.n_params)

        x_val, e_val, ci, cj, ck, t_val = 0.7, 1.0, -0.2, 0.4, 0.9, 0.3
        out = f.forward(
            np.full((1, 1, 1, 1, 1), x_val),
            t_val,
            np.full((1, 1, 1, 1, 1), e_val),
            tuple(np.full((1, 1, 1, 1, 1), c) for c in (ci, cj, ck)),
            keep_cache=False,
        )

        def silu(v):
            return v / (1.0 + np.exp(-v))

        p = f.params
        emb = np.array([np.sin(t_val), np.cos(t_val)])
        temb = silu(p["time.w"] @ emb + p["time.b"])

        feats = np.array([x_val, e_val, ci, cj, ck])
        h = float(p["conv_in.w"][0, :, 1, 1, 1] @ feats + p["conv_in.b"][0])

        def stage(val, norm_g, film_w, film_b):
            u = 1.0 / np.sqrt(val * val + 1e-8)
            normed = val * u * norm_g[0]
            sb = film_w @ temb + film_b
            return silu(normed * (1.0 + sb[0]) + sb[1])

        h = float(p["enc0.conv1.w"][0, 0, 1, 1, 1]) * h + float(p["enc0.conv1.b"][0])
        h = stage(h, p["enc0.norm1.g"], p["enc0.film1.w"], p["enc0.film1.b"])
        h = float(p["enc0.conv2.w"][0, 0, 1, 1, 1]) * h + float(p["enc0.conv2.b"][0])
        h = stage(h, p["enc0.norm2.g"], p["enc0.film2.w"], p["enc0.film2.b"])
        expected = float(p["conv_out.w"][0, 0, 1, 1, 1]) * h + float(p["conv_out.b"][0])

        assert out[0, 0, 0, 0, 0] == pytest.approx(expected, rel=1e-12)


class TestGradients:
    def test_backward_matches_finite_differences(self, rng):
        f = VelocityField(SMALL, rng.normal(0, 0.3, n_params(SMALL)))
        x_t, t, e, coords = make_inputs(rng, batch=2, size=8)
        probe = rng.standard_normal((2, 1, 8, 8, 8))

        f.forward(x_t, t, e, coords)
        grads = f.backward(probe).values

        idx = rng.choice(f.n_params, size=20, replace=False)
        for i in idx:
            h = 1e-6 * max(1.0, abs(f.theta[i]))
            orig = f.theta[i]
            f.theta[i] = orig + h
            lp = float(np.sum(f.forward(x_t, t, e, coords, keep_cache=False) * probe))
            f.theta[i] = orig - h
            lm = float(np.sum(f.forward(x_t, t, e, coords, keep_cache=False) * probe))
            f.theta[i] = orig
            fd = (lp - lm) / (2 * h)
            scale = max(abs(fd), abs(grads[i]), 1e-8)
            assert abs(grads[i] - fd) / scale < 1e-3, f"param {i}: {grads[i]} vs {fd}"

    def test_zero_loss_grad_gives_zero_param_grads(self, rng):
        f = VelocityField(SMALL, rng.normal(0, 0.3, n_params(SMALL)))
        x_t, t, e, coords = make_inputs(rng, size=4)
        f.forward(x_t, t, e, coords)
        grads = f.backward(np.zeros((2, 1, 4, 4, 4)))
        assert np.count_nonzero(grads.values) == 0

    def test_backward_linear_in_loss_grad(self, rng):
        f = VelocityField(SMALL, rng.normal(0, 0.3, n_params(SMALL)))
        x_t, t, e, coords = make_inputs(rng, size=4)
        probe = rng.standard_normal((2, 1, 4, 4, 4))
        f.forward(x_t, t, e, coords)
        g1 = f.backward(probe).values
        f.forward(x_t, t, e, coords)
        g2 = f.backward(2.0 * probe).values
        np.testing.assert_allclose(g2, 2.0 * g1, rtol=1e-12)

    def test_backward_without_forward_rejected(self, rng):
        f = VelocityField.create(SMALL, rng)
        with pytest.raises(UsageError):
            f.backward(np.zeros((1, 1, 4, 4, 4)))


class TestLipschitz:
    def test_two_point_slope_bound(self, rng):
        # Output change is O(delta) in theta: halving delta roughly halves it.
        f = VelocityField(SMALL, rng.normal(0, 0.3, n_params(SMALL)))
        x_t, t, e, coords = make_inputs(rng, size=4)
        base = f.forward(x_t, t, e, coords, keep_cache=False)
        direction = rng.standard_normal(f.n_params)
        direction /= np.linalg.norm(direction)

        diffs = []
        for delta in (1e-3, 5e-4):
            f2 = VelocityField(SMALL, f.theta + delta * direction)
            out = f2.forward(x_t, t, e, coords, keep_cache=False)
            diffs.append(np.linalg.norm(out - base) / delta)
        ratio = diffs[0] / diffs[1]
        assert 0.1 < ratio < 10.0


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, rng):
        f = VelocityField(SMALL, rng.normal(0, 0.3, n_params(SMALL)))
        p = tmp_path / "field.ckpt"
        f.save(p)
        g = VelocityField.load(p)
        assert g.arch == f.arch
        assert np.array_equal(g.theta, f.theta)

    def test_mismatched_descriptor_rejected(self, tmp_path, rng):
        f = VelocityField.create(SMALL, rng)
        p = tmp_path / "field.ckpt"
        f.save(p)
        other = VelocityField.create(FieldArch(base_width=4, channel_mults=(1, 2)), rng)
        with pytest.raises(FormatError):
            other.load_params(p)

    def test_load_params_into_matching_field(self, tmp_path, rng):
        f = VelocityField(SMALL, rng.normal(0, 0.3, n_params(SMALL)))
        p = tmp_path / "field.ckpt"
        f.save(p)
        g = VelocityField.create(SMALL, rng)
        g.load_params(p)
        assert np.array_equal(g.theta, f.theta)

    def test_garbage_rejected(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"NOTACKPT" + b"\x00" * 32)
        with pytest.raises(FormatError):
            VelocityField.load(p)


def test_spec_names_are_unique():
    names = [name for name, _, _ in param_spec(SMALL)]
    assert len(names) == len(set(names))
