"""Multipath Rayleigh fading channel with exponential power-delay profile.

The channel applies a tapped-delay-line impulse response to the transmit
signal (linear convolution truncated to the input length; the OFDM cyclic
prefix added upstream turns this into circular convolution per symbol) and
adds circularly-symmetric complex Gaussian noise. One tap realization is
drawn per transmitted video frame and held constant over that frame's
packets; realizations are independent across frames.

All operations are pure functions of (inputs, generator state) and are
differentiable with respect to the signal for fixed taps and a fixed noise
realization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class PowerDelayProfile:
    """Exponentially decaying per-tap variance profile, normalized to sum 1."""

    num_paths: int
    gamma: float
    variances: np.ndarray  # shape (num_paths,), float64, sums to 1

    def __post_init__(self):
        if self.variances.shape != (self.num_paths,):
            raise ValueError("variances length must equal num_paths")


@dataclass(frozen=True)
class ChannelTaps:
    """One realization of the sample-space impulse response."""

    taps: torch.Tensor  # complex, shape (num_paths,)

    def __len__(self) -> int:
        return self.taps.shape[0]


@dataclass(frozen=True)
class NoiseSpec:
    """AWGN variance per complex sample and the SNR it corresponds to."""

    sigma2: float
    snr_db: float

    @classmethod
    def from_snr(cls, snr_db: float, power: float = 1.0) -> "NoiseSpec":
        return cls(sigma2=snr_to_sigma2(snr_db, power), snr_db=snr_db)


def make_pdp(num_paths: int, gamma: float) -> PowerDelayProfile:
    """Build the exponential power-delay profile with unit total power.

    Tap l gets variance proportional to exp(-l / gamma); the common
    normalizer makes the variances sum to exactly 1.
    """
    if num_paths < 1:
        raise ValueError(f"num_paths must be >= 1, got {num_paths}")
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    raw = np.exp(-np.arange(num_paths, dtype=np.float64) / gamma)
    return PowerDelayProfile(num_paths=num_paths, gamma=float(gamma), variances=raw / raw.sum())


def sample_taps(
    pdp: PowerDelayProfile,
    gen: torch.Generator,
    dtype: torch.dtype = torch.complex64,
) -> ChannelTaps:
    """Draw one Rayleigh-fading realization, tap l ~ CN(0, variances[l])."""
    real_dtype = torch.float64 if dtype == torch.complex128 else torch.float32
    std = torch.sqrt(torch.from_numpy(pdp.variances / 2.0)).to(real_dtype)
    re = torch.randn(pdp.num_paths, generator=gen, dtype=real_dtype) * std
    im = torch.randn(pdp.num_paths, generator=gen, dtype=real_dtype) * std
    return ChannelTaps(taps=torch.complex(re, im).to(dtype))


def identity_taps(dtype: torch.dtype = torch.complex64) -> ChannelTaps:
    """Single unit tap: no fading (pure AWGN channel)."""
    return ChannelTaps(taps=torch.ones(1, dtype=dtype))


def snr_to_sigma2(snr_db: float, power: float) -> float:
    """Noise variance for a given SNR in dB at average signal power `power`."""
    if power <= 0:
        raise ValueError(f"power must be positive, got {power}")
    return power * 10.0 ** (-snr_db / 10.0)


def sample_noise(
    shape: tuple[int, ...],
    sigma2: float,
    gen: torch.Generator,
    dtype: torch.dtype = torch.complex64,
) -> torch.Tensor:
    """I.i.d. CN(0, sigma2) samples (unit draw scaled by sigma, so the scale
    stays on the differentiable path when sigma2 comes from a tensor)."""
    real_dtype = torch.float64 if dtype == torch.complex128 else torch.float32
    re = torch.randn(shape, generator=gen, dtype=real_dtype)
    im = torch.randn(shape, generator=gen, dtype=real_dtype)
    return (sigma2 / 2.0) ** 0.5 * torch.complex(re, im).to(dtype)


def apply_channel(
    signal: torch.Tensor,
    taps: ChannelTaps,
    noise: NoiseSpec,
    gen: torch.Generator,
) -> torch.Tensor:
    """Pass a complex signal through the tapped-delay-line channel plus AWGN.

    Returns the linear convolution of signal with the taps, truncated to the
    input length, plus CN(0, sigma2) noise. Differentiable w.r.t. `signal`;
    taps and the noise draw are treated as constants.
    """
    if signal.ndim != 1 or signal.numel() == 0:
        raise ValueError("signal must be a non-empty 1-D complex vector")
    n = signal.shape[0]
    h = taps.taps.to(signal.dtype)
    out = h[0] * signal
    for l in range(1, min(len(h), n)):
        shifted = torch.cat([signal.new_zeros(l), signal[: n - l]])
        out = out + h[l] * shifted
    if noise.sigma2 > 0:
        out = out + sample_noise((n,), noise.sigma2, gen, dtype=signal.dtype)
    return out
