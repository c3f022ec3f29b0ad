import numpy as np
import pytest

import retouchlab.tensor as tc
from retouchlab.errors import InvalidInputError, ShapeError
from retouchlab.guidance import ClickSet
from retouchlab.model import (RetouchNet, correspondence_matrix, propagate,
                              REGION_CHANNELS)
from retouchlab.tensor import Tensor

from oracles import cosine_matrix_naive, propagate_naive

F64 = np.float64


@pytest.fixture(scope="module")
def net64():
    return RetouchNet(seed=3, dtype=F64)


def image(rng, n=1, size=64):
    return Tensor(rng.uniform(0, 1, size=(n, 3, size, size)), dtype=F64)


class TestCorrespondenceMatrix:
    def test_self_cosine_diagonal(self, rng):
        f = Tensor(rng.normal(size=(4, 3, 3)), dtype=F64)
        s = correspondence_matrix(f, f)
        np.testing.assert_allclose(np.diag(s.data), 1.0, atol=1e-6)

    def test_orthogonal_columns_zero(self):
        f_r = np.zeros((2, 1, 2))
        att = np.zeros((2, 1, 2))
        f_r[:, 0, 0] = [1.0, 0.0]
        f_r[:, 0, 1] = [0.0, 1.0]
        att[:, 0, 0] = [0.0, 2.0]
        att[:, 0, 1] = [3.0, 0.0]
        s = correspondence_matrix(Tensor(f_r, dtype=F64), Tensor(att, dtype=F64))
        assert abs(s.data[0, 0]) <= 1e-6
        assert abs(s.data[1, 1]) <= 1e-6

    def test_matches_naive_oracle_100_instances(self):
        rng = np.random.default_rng(42)
        worst = 0.0
        for _ in range(100):
            f_r = rng.normal(size=(4, 3, 3))
            att = rng.normal(size=(4, 3, 3))
            s = correspondence_matrix(Tensor(f_r, dtype=F64),
                                      Tensor(att, dtype=F64))
            worst = max(worst, np.abs(s.data - cosine_matrix_naive(f_r, att)).max())
        assert worst <= 1e-6

    def test_zero_norm_guard(self, rng):
        f_r = rng.normal(size=(3, 2, 2))
        att = rng.normal(size=(3, 2, 2))
        f_r[:, 0, 0] = 0.0
        s = correspondence_matrix(Tensor(f_r, dtype=F64), Tensor(att, dtype=F64))
        np.testing.assert_allclose(s.data[0], 0.0, atol=1e-6)

    def test_range_bound(self, rng):
        f_r = rng.normal(size=(6, 4, 4)) * 5
        att = rng.normal(size=(6, 4, 4)) * 5
        s = correspondence_matrix(Tensor(f_r, dtype=F64), Tensor(att, dtype=F64))
        assert s.data.min() >= -1 - 1e-6 and s.data.max() <= 1 + 1e-6

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            correspondence_matrix(Tensor(rng.normal(size=(3, 2, 2)), dtype=F64),
                                  Tensor(rng.normal(size=(3, 2, 3)), dtype=F64))


class TestPropagate:
    def test_constant_matrix_gives_mean(self, rng):
        z = rng.normal(size=(6, 4))
        s = np.full((6, 6), 0.37)
        out = propagate(Tensor(s, dtype=F64), Tensor(z, dtype=F64))
        np.testing.assert_allclose(out.data, np.tile(z.mean(axis=0), (6, 1)),
                                   atol=1e-9)

    def test_identical_rows_constant_output(self, rng):
        row = rng.normal(size=4)
        z = np.tile(row, (5, 1))
        s = rng.normal(size=(5, 5))
        out = propagate(Tensor(s, dtype=F64), Tensor(z, dtype=F64))
        np.testing.assert_allclose(out.data, np.tile(row, (5, 1)), atol=1e-9)

    def test_matches_naive_oracle_100_instances(self):
        rng = np.random.default_rng(43)
        worst = 0.0
        for _ in range(100):
            s = rng.normal(size=(9, 9))
            z = rng.normal(size=(9, 4))
            tau = float(rng.uniform(0.5, 2.0))
            out = propagate(Tensor(s, dtype=F64), Tensor(z, dtype=F64), tau)
            worst = max(worst, np.abs(out.data - propagate_naive(s, z, tau)).max())
        assert worst <= 1e-6

    def test_bad_temperature(self, rng):
        with pytest.raises(ValueError):
            propagate(Tensor(np.zeros((4, 4)), dtype=F64),
                      Tensor(np.zeros((4, 2)), dtype=F64), temperature=-1.0)


class TestEncode:
    def test_shapes_at_64(self, net64, rng):
        b = net64.encode(image(rng))
        assert b.f_en[2].shape == (1, 64, 8, 8)
        assert b.f_r.shape == (1, REGION_CHANNELS, 8, 8)
        assert b.attention.shape == b.f_r.shape
        assert [f.shape[2] for f in b.scales] == [32, 16, 8, 4]

    def test_deterministic(self, net64, rng):
        x = image(rng)
        a = net64.encode(x)
        b = net64.encode(x)
        np.testing.assert_array_equal(a.f_r.data, b.f_r.data)

    def test_zero_input_finite(self, net64):
        b = net64.encode(Tensor(np.zeros((1, 3, 64, 64)), dtype=F64))
        assert np.isfinite(b.f_r.data).all()

    def test_out_of_range_rejected(self, net64, rng):
        x = rng.uniform(0, 1, size=(1, 3, 64, 64))
        x[0, 0, 0, 0] = 1.5
        with pytest.raises(InvalidInputError):
            net64.encode(Tensor(x, dtype=F64))

    def test_gradient_reaches_all_fusion_inputs(self, rng):
        net = RetouchNet(seed=5, dtype=F64)
        x = image(rng, size=32)
        b = net.encode(x)
        tc.backward(tc.tsum(b.f_r))
        for name in ("fusion.proj2.weight", "fusion.proj16.weight",
                     "fusion.proj_sem.weight", "extractor.stem.weight",
                     "encoder.block3.conv2.weight"):
            p = dict(net.named_parameters())[name]
            assert p.grad is not None and np.abs(p.grad).sum() > 0, name
            p.grad = None
        for _, p in net.named_parameters():
            p.grad = None

    def test_fusion_zero_projection_gives_bias_map(self, rng):
        net = RetouchNet(seed=6, dtype=F64)
        net.fusion.out.weight.data[:] = 0.0
        net.fusion.out.bias.data[:] = 0.25
        b = net.encode(image(rng, size=32))
        np.testing.assert_allclose(b.f_r.data, 0.25, atol=1e-9)


class TestDecodeAndBranches:
    def test_zero_residual_weights_identity(self, rng):
        net = RetouchNet(seed=7, dtype=F64)
        net.decoder.residual.weight.data[:] = 0.0
        net.decoder.residual.bias.data[:] = 0.0
        x = image(rng)
        out = net.forward_automatic(x)
        np.testing.assert_array_equal(out.image.data, x.data)

    def test_mask_forced_zero_suppresses_content(self, rng):
        net = RetouchNet(seed=8, dtype=F64)
        net.maskhead.weight.data[:] = 0.0
        net.maskhead.bias.data[:] = -60.0  # sigmoid -> ~0
        x = image(rng)
        out = net.forward_automatic(x)
        # residual head sees zeroed features: only its bias remains
        residual = out.image.data - np.clip(
            x.data + net.decoder.residual.bias.data.reshape(1, 3, 1, 1), 0, 1)
        assert np.abs(residual).max() <= 1e-6

    def test_output_shape_and_range(self, net64, rng):
        x = image(rng, n=2)
        out = net64.forward_automatic(x)
        assert out.image.shape == x.shape
        assert out.mask.shape == (2, 1, 64, 64)
        assert out.image.data.min() >= 0.0 and out.image.data.max() <= 1.0
        assert (out.mask.data > 0).all() and (out.mask.data < 1).all()

    def test_untrained_output_finite(self, net64, rng):
        out = net64.forward_automatic(image(rng))
        assert np.isfinite(out.image.data).all()

    def test_missing_ft_rejected(self, net64, rng):
        b = net64.encode(image(rng))
        with pytest.raises(ValueError):
            net64.decode(b.f_r, None, image(rng))

    def test_empty_clickset_is_legal(self, net64, rng):
        out = net64.forward_interactive(image(rng), ClickSet())
        assert np.isfinite(out.image.data).all()
        assert out.bundle.f_s is not None

    def test_interactive_shapes(self, net64, rng):
        clicks = ClickSet(positive=[(5, 5)], negative=[(40, 41), (10, 50)])
        out = net64.forward_interactive(image(rng), clicks)
        assert out.image.shape == (1, 3, 64, 64)
        assert out.bundle.z.shape == (1, 64, REGION_CHANNELS)
        assert out.bundle.f_s.shape == out.bundle.f_r.shape

    def test_click_position_changes_selection(self, net64, rng):
        x = image(rng)
        a = net64.forward_interactive(x, ClickSet(positive=[(8, 8)]))
        b = net64.forward_interactive(x, ClickSet(positive=[(50, 52)]))
        assert not np.array_equal(a.bundle.f_s.data, b.bundle.f_s.data)

    def test_interactive_params_do_not_affect_automatic(self, rng):
        net = RetouchNet(seed=9, dtype=F64)
        x = image(rng)
        before = net.forward_automatic(x).image.data.copy()
        for name, p in net.named_parameters():
            if name.startswith("it."):
                p.data = p.data + 13.0
        after = net.forward_automatic(x).image.data
        np.testing.assert_array_equal(before, after)

    def test_encoder_shared_between_branches(self, rng):
        net = RetouchNet(seed=10, dtype=F64)
        x = image(rng)
        auto0 = net.forward_automatic(x).image.data.copy()
        it0 = net.forward_interactive(x, ClickSet(positive=[(5, 5)])).image.data.copy()
        net.stem.weight.data[:] += 0.05
        assert not np.array_equal(auto0, net.forward_automatic(x).image.data)
        assert not np.array_equal(
            it0, net.forward_interactive(x, ClickSet(positive=[(5, 5)])).image.data)


class TestGuidanceEncoding:
    def test_no_clicks_interior_rows_identical(self, rng):
        net = RetouchNet(seed=11, dtype=F64)
        zeros = Tensor(np.zeros((1, 1, 64, 64)), dtype=F64)
        z = net.encode_guidance(zeros, zeros).data[0].reshape(8, 8, -1)
        interior = z[2:-2, 2:-2].reshape(-1, z.shape[-1])
        assert np.abs(interior - interior[0]).max() <= 1e-9

    def test_row_count_matches_latent(self, net64, rng):
        b = net64.encode(image(rng))
        zeros = Tensor(np.zeros((1, 1, 64, 64)), dtype=F64)
        z = net64.encode_guidance(zeros, zeros)
        assert z.shape[1] == b.f_r.shape[2] * b.f_r.shape[3]

    def test_non_binary_rejected(self, net64):
        bad = Tensor(np.full((1, 1, 64, 64), 0.5), dtype=F64)
        with pytest.raises(InvalidInputError):
            net64.encode_guidance(bad, bad)

    def test_deterministic(self, net64):
        g = np.zeros((1, 1, 64, 64))
        g[0, 0, 10:13, 20:23] = 1.0
        a = net64.encode_guidance(Tensor(g, dtype=F64),
                                  Tensor(np.zeros_like(g), dtype=F64))
        b = net64.encode_guidance(Tensor(g, dtype=F64),
                                  Tensor(np.zeros_like(g), dtype=F64))
        np.testing.assert_array_equal(a.data, b.data)


class TestCheckpointRoundTrip:
    def test_state_dict_round_trip(self, rng, tmp_path):
        from retouchlab.checkpoint import load_tensors, save_tensors
        net = RetouchNet(seed=12)
        path = tmp_path / "model.rtlb"
        save_tensors(path, net.state_dict())
        other = RetouchNet(seed=99)
        other.load_state_dict(load_tensors(path))
        x = Tensor(np.random.default_rng(0).uniform(0, 1, (1, 3, 64, 64)).astype(np.float32))
        with tc.no_grad():
            a = net.forward_automatic(x).image.data
            b = other.forward_automatic(x).image.data
        np.testing.assert_array_equal(a, b)

    def test_mismatched_checkpoint_rejected(self, tmp_path):
        from retouchlab.checkpoint import save_tensors, load_tensors
        net = RetouchNet(seed=13)
        state = net.state_dict()
        state.pop(sorted(state)[0])
        path = tmp_path / "bad.rtlb"
        save_tensors(path, state)
        with pytest.raises(ShapeError):
            RetouchNet(seed=0).load_state_dict(load_tensors(path))
