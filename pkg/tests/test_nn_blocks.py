"""Tests for attention gating, scale-space volumes, warping, and decoders."""

import math

import numpy as np
import pytest
import torch

from rvjscc.nn_blocks import (
    AFModule,
    ContextualDecoder,
    FeatureExtractor,
    ScaleSpaceConfig,
    SnrContext,
    SsfEstimator,
    build_scale_space_volume,
    fsw,
    gaussian_blur,
)

SNR10 = SnrContext.from_snr(10.0)


def _force_identity_gate(af: AFModule) -> None:
    """Saturate the gate so g == 1 exactly and the module passes through."""
    torch.nn.init.zeros_(af.fc2.weight)
    torch.nn.init.constant_(af.fc2.bias, 40.0)


def _oracle_blur(f: np.ndarray, sigma: float, kernel_radius: int = 3) -> np.ndarray:
    """Independent direct separable Gaussian with reflective padding."""
    radius = math.ceil(kernel_radius * sigma)
    xs = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel = kernel / kernel.sum()
    c_ch, h, w = f.shape
    padded = np.pad(f, ((0, 0), (radius, radius), (radius, radius)), mode="reflect")
    out = np.zeros_like(f)
    for c in range(c_ch):
        horiz = np.zeros((h + 2 * radius, w))
        for i in range(h + 2 * radius):
            for j in range(w):
                horiz[i, j] = sum(
                    padded[c, i, j + radius + t] * kernel[t + radius]
                    for t in range(-radius, radius + 1)
                )
        for i in range(h):
            for j in range(w):
                out[c, i, j] = sum(
                    horiz[i + radius + t, j] * kernel[t + radius]
                    for t in range(-radius, radius + 1)
                )
    return out


def _oracle_fsw(volume: np.ndarray, ssf: np.ndarray) -> np.ndarray:
    """Independent per-pixel trilinear gather over (x, y, scale)."""
    n_slices, c_ch, h, w = volume.shape
    levels = n_slices - 1
    out = np.zeros((c_ch, h, w))
    for y in range(h):
        for x in range(w):
            sx = min(max(x + ssf[0, y, x], 0.0), w - 1)
            sy = min(max(y + ssf[1, y, x], 0.0), h - 1)
            sz = min(max(levels / (1.0 + math.exp(-ssf[2, y, x])), 0.0), float(levels))
            x0, y0, z0 = int(math.floor(sx)), int(math.floor(sy)), int(math.floor(sz))
            x1, y1, z1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1), min(z0 + 1, levels)
            wx, wy, wz = sx - x0, sy - y0, sz - z0
            for c in range(c_ch):
                front = (
                    volume[z0, c, y0, x0] * (1 - wy) * (1 - wx)
                    + volume[z0, c, y0, x1] * (1 - wy) * wx
                    + volume[z0, c, y1, x0] * wy * (1 - wx)
                    + volume[z0, c, y1, x1] * wy * wx
                )
                back = (
                    volume[z1, c, y0, x0] * (1 - wy) * (1 - wx)
                    + volume[z1, c, y0, x1] * (1 - wy) * wx
                    + volume[z1, c, y1, x0] * wy * (1 - wx)
                    + volume[z1, c, y1, x1] * wy * wx
                )
                out[c, y, x] = front * (1 - wz) + back * wz
    return out


def _directional_fd(fn, x0: torch.Tensor, direction: torch.Tensor, h: float = 1e-6) -> float:
    return float((fn(x0 + h * direction) - fn(x0 - h * direction)) / (2 * h))


class TestAFModule:
    def test_shape_contract(self):
        for shape in [(4, 8, 8), (16, 5, 7), (2, 1, 1)]:
            af = AFModule(shape[0])
            x = torch.randn(*shape)
            assert af(x, SNR10).shape == x.shape

    def test_identity_gate_passthrough(self):
        af = AFModule(6)
        _force_identity_gate(af)
        x = torch.randn(6, 8, 8)
        assert torch.equal(af(x, SNR10), x)

    def test_snr_changes_output(self):
        torch.manual_seed(0)
        af = AFModule(8)
        x = torch.randn(8, 8, 8)
        with torch.no_grad():
            low = af(x, SnrContext.from_snr(0.0))
            high = af(x, SnrContext.from_snr(20.0))
        assert float((low - high).abs().max()) > 0

    def test_identity_gate_preserves_argmax(self):
        """With the identity gate the per-pixel argmax channel is unchanged."""
        torch.manual_seed(1)
        af = AFModule(5)
        _force_identity_gate(af)
        x = torch.randn(5, 6, 6)
        out = af(x, SNR10)
        assert torch.equal(out.argmax(dim=0), x.argmax(dim=0))

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(2)
        af = AFModule(3).double()
        x0 = torch.randn(3, 8, 8, dtype=torch.float64)
        direction = torch.randn_like(x0)

        def scalar(x):
            return (af(x, SNR10) * torch.sin(x)).sum()

        x = x0.clone().requires_grad_(True)
        scalar(x).backward()
        analytic = float((x.grad * direction).sum())
        fd = _directional_fd(scalar, x0, direction)
        assert abs(fd - analytic) / max(abs(fd), 1e-12) < 1e-3


class TestSsfEstimator:
    def test_output_shape(self):
        est = SsfEstimator(width=8)
        flow = est(torch.rand(3, 16, 16), torch.rand(3, 16, 16))
        assert flow.shape == (3, 16, 16)

    def test_zero_init_gives_zero_flow(self):
        est = SsfEstimator(width=8)
        x = torch.rand(3, 12, 12)
        assert torch.equal(est(x, x), torch.zeros(3, 12, 12))

    def test_rejects_mismatched_frames(self):
        est = SsfEstimator(width=8)
        with pytest.raises(ValueError):
            est(torch.rand(3, 16, 16), torch.rand(3, 8, 8))

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(3)
        est = SsfEstimator(width=6).double()
        # Randomize the zero-initialized head so gradients are generic.
        torch.nn.init.normal_(est.head.weight, std=0.1)
        x0 = torch.rand(3, 8, 8, dtype=torch.float64)
        ref = torch.rand(3, 8, 8, dtype=torch.float64)
        direction = torch.randn_like(x0)

        def scalar(x):
            return est(x, ref).mean()

        x = x0.clone().requires_grad_(True)
        scalar(x).backward()
        analytic = float((x.grad * direction).sum())
        fd = _directional_fd(scalar, x0, direction)
        assert abs(fd - analytic) / max(abs(fd), 1e-12) < 1e-3


class TestFeatureExtractor:
    def test_resolution_preserved(self):
        fx = FeatureExtractor(16, width=8)
        out = fx(torch.rand(3, 24, 20))
        assert out.shape == (16, 24, 20)

    def test_deterministic(self):
        fx = FeatureExtractor(8, width=8)
        frame = torch.rand(3, 16, 16)
        assert torch.equal(fx(frame), fx(frame.clone()))

    def test_channel_count_follows_config(self):
        for c_f in (4, 16, 24):
            assert FeatureExtractor(c_f, width=8)(torch.rand(3, 8, 8)).shape[0] == c_f


class TestScaleSpaceVolume:
    def test_slice_zero_is_input(self):
        cfg = ScaleSpaceConfig(levels=3, base_sigma=1.5)
        f = torch.randn(4, 16, 16, dtype=torch.float64)
        vol = build_scale_space_volume(f, cfg)
        assert vol.shape == (4, 4, 16, 16)
        assert torch.equal(vol[0], f)

    def test_constant_map_stays_constant(self):
        cfg = ScaleSpaceConfig(levels=3, base_sigma=1.5)
        f = torch.full((2, 12, 12), 0.7, dtype=torch.float64)
        vol = build_scale_space_volume(f, cfg)
        assert torch.allclose(vol, torch.full_like(vol, 0.7), atol=1e-12)

    def test_impulse_monotone_spread(self):
        """Blur variance widens with each level on an impulse input."""
        cfg = ScaleSpaceConfig(levels=2, base_sigma=1.0)
        f = torch.zeros(1, 17, 17, dtype=torch.float64)
        f[0, 8, 8] = 1.0
        vol = build_scale_space_volume(f, cfg)
        peaks = [float(vol[v, 0, 8, 8]) for v in range(3)]
        assert peaks[0] > peaks[1] > peaks[2]

    @pytest.mark.parametrize("levels,sigma0,size", [(2, 1.0, 12), (3, 1.5, 16), (1, 0.6, 7)])
    def test_matches_direct_convolution(self, levels, sigma0, size):
        """Every slice equals the brute-force separable Gaussian filter."""
        rng = np.random.default_rng(42)
        f_np = rng.standard_normal((3, size, size))
        cfg = ScaleSpaceConfig(levels=levels, base_sigma=sigma0)
        vol = build_scale_space_volume(torch.from_numpy(f_np), cfg).numpy()
        np.testing.assert_allclose(vol[0], f_np, atol=1e-12)
        for v in range(1, levels + 1):
            expected = _oracle_blur(f_np, (2.0 ** (v - 1)) * sigma0)
            np.testing.assert_allclose(vol[v], expected, atol=1e-5)

    def test_blur_radius_exceeding_size(self):
        """Reflective padding must fold repeatedly when radius > map size."""
        rng = np.random.default_rng(1)
        f_np = rng.standard_normal((1, 6, 6))
        out = gaussian_blur(torch.from_numpy(f_np), 4.0).numpy()
        np.testing.assert_allclose(out, _oracle_blur(f_np, 4.0), atol=1e-5)


class TestFsw:
    def test_zero_flow_level_zero_identity(self):
        """dx=dy=0 and a very negative scale logit reproduce slice 0."""
        torch.manual_seed(4)
        vol = torch.randn(4, 3, 10, 10, dtype=torch.float64)
        ssf = torch.zeros(3, 10, 10, dtype=torch.float64)
        ssf[2] = -30.0
        out = fsw(vol, ssf)
        assert float((out - vol[0]).abs().max()) < 1e-4

    def test_constant_volume(self):
        vol = torch.full((3, 2, 8, 8), 1.3, dtype=torch.float64)
        ssf = torch.randn(3, 8, 8, dtype=torch.float64) * 3
        out = fsw(vol, ssf)
        assert torch.allclose(out, torch.full_like(out, 1.3), atol=1e-12)

    def test_integer_shift_with_clamped_border(self):
        """dx=1 shifts one column left; the last column clamps to the edge."""
        torch.manual_seed(5)
        vol = torch.randn(3, 2, 6, 6, dtype=torch.float64)
        ssf = torch.zeros(3, 6, 6, dtype=torch.float64)
        ssf[0] = 1.0
        ssf[2] = -30.0
        out = fsw(vol, ssf)
        expected = torch.cat([vol[0][:, :, 1:], vol[0][:, :, -1:]], dim=-1)
        assert float((out - expected).abs().max()) < 1e-4
        oracle = _oracle_fsw(vol.numpy(), ssf.numpy())
        np.testing.assert_allclose(out.numpy(), oracle, atol=1e-12)

    def test_exhaustive_oracle_16x16(self):
        """Vectorized warp equals the per-pixel gather on 16x16, 3 levels."""
        rng = np.random.default_rng(7)
        vol_np = rng.standard_normal((4, 4, 16, 16))
        ssf_np = np.stack(
            [
                rng.uniform(-20, 20, (16, 16)),  # strong shifts exercise clamping
                rng.uniform(-20, 20, (16, 16)),
                rng.uniform(-6, 6, (16, 16)),  # scale logits across the range
            ]
        )
        out = fsw(torch.from_numpy(vol_np), torch.from_numpy(ssf_np)).numpy()
        np.testing.assert_allclose(out, _oracle_fsw(vol_np, ssf_np), atol=1e-5)

    def test_rejects_mismatched_shapes(self):
        with pytest.raises(ValueError):
            fsw(torch.zeros(3, 2, 8, 8), torch.zeros(3, 4, 4))

    def test_gradients_flow_to_volume_and_flow(self):
        torch.manual_seed(6)
        vol = torch.randn(3, 2, 8, 8, dtype=torch.float64, requires_grad=True)
        ssf = (0.3 * torch.randn(3, 8, 8, dtype=torch.float64)).requires_grad_(True)
        fsw(vol, ssf).square().sum().backward()
        assert float(vol.grad.abs().sum()) > 0
        assert float(ssf.grad.abs().sum()) > 0

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(8)
        vol0 = torch.randn(3, 2, 8, 8, dtype=torch.float64)
        # keep sample points away from integer lattice kinks
        ssf0 = 0.3 + 0.2 * torch.rand(3, 8, 8, dtype=torch.float64)
        probe = torch.randn(2, 8, 8, dtype=torch.float64)

        def scalar_of_ssf(s):
            return (fsw(vol0, s) * probe).sum()

        s = ssf0.clone().requires_grad_(True)
        scalar_of_ssf(s).backward()
        direction = torch.randn_like(ssf0)
        analytic = float((s.grad * direction).sum())
        fd = _directional_fd(scalar_of_ssf, ssf0, direction)
        assert abs(fd - analytic) / max(abs(fd), 1e-12) < 1e-3

        def scalar_of_vol(v):
            return (fsw(v, ssf0) * probe).sum()

        v = vol0.clone().requires_grad_(True)
        scalar_of_vol(v).backward()
        vdir = torch.randn_like(vol0)
        analytic_v = float((v.grad * vdir).sum())
        fd_v = _directional_fd(scalar_of_vol, vol0, vdir)
        assert abs(fd_v - analytic_v) / max(abs(fd_v), 1e-12) < 1e-3


class TestContextualDecoder:
    def test_shape_and_range(self):
        dec = ContextualDecoder(repr_channels=4, context_channels=6, width=8)
        out = dec(torch.randn(4, 16, 16), torch.randn(6, 16, 16), torch.randn(6, 16, 16))
        assert out.shape == (3, 16, 16)
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0

    def test_all_inputs_receive_gradient(self):
        torch.manual_seed(9)
        dec = ContextualDecoder(repr_channels=4, context_channels=6, width=8)
        d = torch.randn(4, 8, 8, requires_grad=True)
        cm = torch.randn(6, 8, 8, requires_grad=True)
        cp = torch.randn(6, 8, 8, requires_grad=True)
        dec(d, cm, cp).square().sum().backward()
        for t in (d, cm, cp):
            assert float(t.grad.abs().sum()) > 0

    def test_deterministic(self):
        dec = ContextualDecoder(repr_channels=2, context_channels=3, width=8)
        args = (torch.randn(2, 8, 8), torch.randn(3, 8, 8), torch.randn(3, 8, 8))
        assert torch.equal(dec(*args), dec(*args))

    def test_rejects_mismatched_dims(self):
        dec = ContextualDecoder(repr_channels=2, context_channels=3, width=8)
        with pytest.raises(ValueError):
            dec(torch.randn(2, 8, 8), torch.randn(3, 4, 4), torch.randn(3, 8, 8))
