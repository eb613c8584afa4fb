"""Receiver-side latent recovery from the OFDM grid.

Two alternatives feed the frame decoders:

* ``Denoiser`` — the decoupled stage: least-squares channel estimation from
  the pilots, epsilon-regularized zero-forcing equalization, then a small
  residual network that refines the equalized symbols into the clean latent.
  Its output is supervised against the transmitted latent during training.
* ``UnifiedFrontEnd`` — the conventional single-chain alternative used by the
  ablation variants: the decoder-side network receives the raw data symbols
  together with the pilot-derived channel estimate and must learn
  equalization itself. Unsupervised.

Both consume per-frame receiver outputs and emit a latent of the full padded
length; stripping the padding is left to the decoders.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .nn_blocks import SnrContext, init_relu_stack
from .ofdm import Latent

ZF_EPS = 1e-6


@dataclass
class ChannelEstimate:
    """Frequency response estimate, one value per subcarrier."""

    h_freq: torch.Tensor  # complex (n_c,)
    per_packet: torch.Tensor | None = None  # complex (m, n_c)


def ls_channel_estimate(y_p_hat: torch.Tensor, y_p: torch.Tensor) -> ChannelEstimate:
    """Least-squares estimate: average of received/known pilot ratios.

    Averages over all packets and pilot symbols, so one estimate per
    subcarrier per frame (taps are constant within a frame).
    """
    if y_p_hat.shape != y_p.shape or y_p_hat.ndim != 3:
        raise ValueError(f"pilot shapes differ: {tuple(y_p_hat.shape)} vs {tuple(y_p.shape)}")
    if (y_p.abs() == 0).any():
        raise ValueError("pilot grid contains zero entries; LS ratio undefined")
    ratios = y_p_hat / y_p
    return ChannelEstimate(h_freq=ratios.mean(dim=(0, 1)), per_packet=ratios.mean(dim=1))


def equalize(y_hat: torch.Tensor, est: ChannelEstimate, eps: float = ZF_EPS) -> torch.Tensor:
    """Regularized zero-forcing: Y * conj(H) / (|H|^2 + eps), per subcarrier."""
    h = est.h_freq
    return y_hat * h.conj() / (h.abs().square() + eps)


class _GridRefiner(nn.Module):
    """Small conv stack on the (packets*symbols, subcarriers) grid image.

    Input channels: (re, im) of the symbol grid, (re, im) of the broadcast
    channel estimate, and the noise-power map. Output: a 2-channel (re, im)
    residual, zero-initialized so the stage starts as a pure pass-through.
    """

    def __init__(self, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(5, width, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, 2, 3, padding=1),
        )
        init_relu_stack(self)
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(
        self, symbols: torch.Tensor, h_freq: torch.Tensor, sigma2: float
    ) -> torch.Tensor:
        """symbols: complex (m, n_s, n_c); h_freq: complex (n_c,). Returns the
        refined complex grid flattened to a vector."""
        m, n_s, n_c = symbols.shape
        grid = symbols.reshape(m * n_s, n_c)
        h_map = h_freq.unsqueeze(0).expand(m * n_s, n_c)
        image = torch.stack(
            [
                grid.real,
                grid.imag,
                h_map.real,
                h_map.imag,
                torch.full_like(grid.real, sigma2),
            ],
            dim=0,
        )
        res = self.net(image)
        return torch.complex(grid.real + res[0], grid.imag + res[1]).reshape(-1)


def _check_grid_shapes(y_hat: torch.Tensor, y_p_hat: torch.Tensor, y_p: torch.Tensor) -> None:
    if y_hat.ndim != 3 or y_p_hat.shape != y_p.shape or y_hat.shape[0] != y_p.shape[0] or y_hat.shape[2] != y_p.shape[2]:
        raise ValueError(
            f"inconsistent grid shapes: data {tuple(y_hat.shape)}, pilots {tuple(y_p_hat.shape)}"
        )


class Denoiser(nn.Module):
    """Decoupled denoising stage: LS estimate, zero-forcing, residual refiner."""

    def __init__(self, width: int = 32):
        super().__init__()
        self.refiner = _GridRefiner(width)

    def forward(
        self,
        y_hat: torch.Tensor,
        y_p_hat: torch.Tensor,
        y_p: torch.Tensor,
        snr: SnrContext,
    ) -> Latent:
        _check_grid_shapes(y_hat, y_p_hat, y_p)
        est = ls_channel_estimate(y_p_hat, y_p)
        y_eq = equalize(y_hat, est)
        z_tilde = self.refiner(y_eq, est.h_freq, snr.sigma2_hat)
        return Latent(symbols=z_tilde, valid_len=z_tilde.shape[0])


class UnifiedFrontEnd(nn.Module):
    """Single-chain receiver input: raw data symbols plus the pilot-derived
    channel estimate go straight into a learned stage with no classical
    equalization. Starts as a pass-through of the raw (still faded) symbols."""

    def __init__(self, width: int = 32):
        super().__init__()
        self.refiner = _GridRefiner(width)

    def forward(
        self,
        y_hat: torch.Tensor,
        y_p_hat: torch.Tensor,
        y_p: torch.Tensor,
        snr: SnrContext,
    ) -> Latent:
        _check_grid_shapes(y_hat, y_p_hat, y_p)
        est = ls_channel_estimate(y_p_hat, y_p)
        z_in = self.refiner(y_hat, est.h_freq, snr.sigma2_hat)
        return Latent(symbols=z_in, valid_len=z_in.shape[0])
