"""Tests for the multipath fading channel and its power-delay profile."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from rvjscc.channel import (
    NoiseSpec,
    apply_channel,
    identity_taps,
    make_pdp,
    sample_taps,
    snr_to_sigma2,
)


def _expected_exponential_profile(num_paths: int, gamma: float) -> list[float]:
    """Independent oracle: per-tap variances from the explicit geometric sum."""
    raw = [math.exp(-l / gamma) for l in range(num_paths)]
    total = sum(raw)
    return [r / total for r in raw]


class TestPowerDelayProfile:
    def test_single_path_is_unit(self):
        """L=1 forces the lone variance to 1 by normalization."""
        pdp = make_pdp(1, 4.0)
        assert pdp.variances.tolist() == [1.0]

    def test_paper_profile_first_tap(self):
        """L=8, gamma=4: leading variance equals 1 / sum_l exp(-l/4) ~ 0.2558."""
        pdp = make_pdp(8, 4.0)
        expected = _expected_exponential_profile(8, 4.0)
        assert pdp.variances[0] == pytest.approx(expected[0], abs=1e-12)
        assert pdp.variances[0] == pytest.approx(0.2558, abs=5e-5)
        np.testing.assert_allclose(pdp.variances, expected, rtol=0, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(
        num_paths=st.integers(min_value=1, max_value=24),
        gamma=st.floats(min_value=0.1, max_value=50.0, allow_nan=False),
    )
    def test_normalized_and_decreasing(self, num_paths, gamma):
        """Any profile sums to one and decays strictly with tap index."""
        pdp = make_pdp(num_paths, gamma)
        assert abs(pdp.variances.sum() - 1.0) < 1e-9
        assert all(a > b for a, b in zip(pdp.variances, pdp.variances[1:]))

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            make_pdp(0, 4.0)
        with pytest.raises(ValueError):
            make_pdp(4, 0.0)
        with pytest.raises(ValueError):
            make_pdp(4, -1.0)


class TestSampleTaps:
    def test_same_seed_identical(self):
        pdp = make_pdp(8, 4.0)
        a = sample_taps(pdp, torch.Generator().manual_seed(3)).taps
        b = sample_taps(pdp, torch.Generator().manual_seed(3)).taps
        assert torch.equal(a, b)

    def test_unit_variance_monte_carlo(self):
        """Single-path profile: mean |h|^2 over 1e5 draws is 1 within 0.02."""
        pdp = make_pdp(1, 4.0)
        gen = torch.Generator().manual_seed(0)
        total = 0.0
        n = 100_000
        std = math.sqrt(0.5)
        re = torch.randn(n, generator=gen) * std
        im = torch.randn(n, generator=gen) * std
        total = (re.square() + im.square()).mean()
        assert abs(float(total) - 1.0) < 0.02
        # and through the public API on a smaller batch
        gen = torch.Generator().manual_seed(1)
        vals = torch.stack([sample_taps(pdp, gen).taps.abs().square() for _ in range(20_000)])
        assert abs(float(vals.mean()) - 1.0) < 0.02

    def test_per_tap_variance_within_three_standard_errors(self):
        """L=8, gamma=4 Monte Carlo per-tap variances vs the profile."""
        pdp = make_pdp(8, 4.0)
        gen = torch.Generator().manual_seed(7)
        n = 100_000
        std = torch.sqrt(torch.from_numpy(pdp.variances / 2.0)).float()
        re = torch.randn(n, 8, generator=gen) * std
        im = torch.randn(n, 8, generator=gen) * std
        emp = (re.square() + im.square()).mean(dim=0).double()
        # |h|^2 is exponential with mean v and std v: SE of the mean is v/sqrt(n)
        se = pdp.variances / math.sqrt(n)
        z = (emp.numpy() - pdp.variances) / se
        assert np.all(np.abs(z) < 3.0), f"z-scores {z}"

    def test_rayleigh_magnitude_distribution(self):
        """|h_l| follows Rayleigh(sqrt(v/2)); KS at 1e5 samples, alpha=0.01."""
        pdp = make_pdp(8, 4.0)
        gen = torch.Generator().manual_seed(11)
        n = 100_000
        tap = 2
        std = math.sqrt(pdp.variances[tap] / 2.0)
        re = torch.randn(n, generator=gen) * std
        im = torch.randn(n, generator=gen) * std
        mags = torch.sqrt(re.square() + im.square()).numpy()
        result = stats.kstest(mags, "rayleigh", args=(0, std))
        assert result.pvalue > 0.01, f"KS rejected: p={result.pvalue}"


class TestApplyChannel:
    def test_identity_channel(self):
        """Unit tap, zero noise: output equals input exactly."""
        x = torch.randn(64, dtype=torch.complex128)
        y = apply_channel(x, identity_taps(torch.complex128), NoiseSpec(0.0, math.inf), torch.Generator())
        assert torch.equal(y, x)

    def test_pure_delay(self):
        """taps=[0, 1]: one-sample delay, first output sample zero."""
        from rvjscc.channel import ChannelTaps

        x = torch.randn(32, dtype=torch.complex128)
        taps = ChannelTaps(taps=torch.tensor([0.0, 1.0], dtype=torch.complex128))
        y = apply_channel(x, taps, NoiseSpec(0.0, math.inf), torch.Generator())
        assert y[0] == 0
        assert torch.allclose(y[1:], x[:-1])

    def test_noise_power_monte_carlo(self):
        """Zero signal, sigma2=0.5: empirical noise power 0.5 within 0.01."""
        x = torch.zeros(100_000, dtype=torch.complex128)
        gen = torch.Generator().manual_seed(5)
        y = apply_channel(x, identity_taps(torch.complex128), NoiseSpec(0.5, 3.0), gen)
        assert abs(float(y.abs().square().mean()) - 0.5) < 0.01

    def test_linearity(self):
        """a*x + b*y maps to a*out(x) + b*out(y) for fixed taps, zero noise."""
        gen = torch.Generator().manual_seed(9)
        pdp = make_pdp(4, 4.0)
        taps = sample_taps(pdp, gen, dtype=torch.complex128)
        quiet = NoiseSpec(0.0, math.inf)
        x = torch.randn(40, dtype=torch.complex128)
        y = torch.randn(40, dtype=torch.complex128)
        a, b = 1.7 - 0.3j, -0.4 + 2.1j
        lhs = apply_channel(a * x + b * y, taps, quiet, gen)
        rhs = a * apply_channel(x, taps, quiet, gen) + b * apply_channel(y, taps, quiet, gen)
        assert torch.allclose(lhs, rhs, atol=1e-12)

    def test_rejects_empty_signal(self):
        with pytest.raises(ValueError):
            apply_channel(
                torch.zeros(0, dtype=torch.complex64),
                identity_taps(),
                NoiseSpec(0.0, math.inf),
                torch.Generator(),
            )

    def test_gradient_matches_finite_differences(self):
        """d(smooth scalar)/d(input) vs central differences, fixed noise draw."""
        pdp = make_pdp(4, 4.0)
        gen = torch.Generator().manual_seed(13)
        taps = sample_taps(pdp, gen, dtype=torch.complex128)
        noise_draw = torch.randn(24, dtype=torch.complex128, generator=gen) * 0.1
        x0 = torch.randn(24, dtype=torch.complex128, generator=gen)

        def scalar(x):
            out = apply_channel(x, taps, NoiseSpec(0.0, math.inf), gen) + noise_draw
            return out.abs().square().sum()

        x = x0.clone().requires_grad_(True)
        scalar(x).backward()
        # torch complex grads satisfy grad = dL/d(re) + i * dL/d(im)
        grad = torch.view_as_real(x.grad).reshape(-1)

        h = 1e-6
        flat0 = torch.view_as_real(x0).reshape(-1)
        for idx in range(0, flat0.numel(), 7):
            e = torch.zeros_like(flat0)
            e[idx] = h
            xp = torch.view_as_complex((flat0 + e).reshape(-1, 2))
            xm = torch.view_as_complex((flat0 - e).reshape(-1, 2))
            fd = (scalar(xp) - scalar(xm)) / (2 * h)
            rel = abs(float(fd) - float(grad[idx])) / max(abs(float(fd)), 1e-9)
            assert rel < 1e-3, f"component {idx}: fd {fd} vs grad {grad[idx]}"


class TestSnrToSigma2:
    @pytest.mark.parametrize(
        "snr_db,power,expected",
        [(0.0, 1.0, 1.0), (10.0, 1.0, 0.1), (20.0, 1.0, 0.01), (3.0, 2.0, 2.0 * 10 ** -0.3)],
    )
    def test_values(self, snr_db, power, expected):
        assert snr_to_sigma2(snr_db, power) == pytest.approx(expected, rel=1e-12)

    def test_rejects_nonpositive_power(self):
        with pytest.raises(ValueError):
            snr_to_sigma2(10.0, 0.0)
