"""OFDM framing: latent packing, pilots, IDFT/CP transmit and receive.

One video frame occupies `m` OFDM packets. Each packet carries `n_p` pilot
symbols followed by `n_s` data symbols; every symbol spans `n_c` subcarriers
and gets a cyclic prefix of `l_cp` time samples. DFTs use the unitary
convention (1/sqrt(n_c) both ways) so per-symbol energy is identical in time
and frequency; the channel frequency response is therefore the plain
(unnormalized) DFT of the taps, and with zero noise and at most l_cp+1 taps
the receive grid satisfies Y_hat[j, m] = H[m] * Y[j, m] per subcarrier.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import torch

from .channel import ChannelTaps


@dataclass(frozen=True)
class OfdmConfig:
    """Per-frame-type OFDM parameters (m differs for key vs interpolation)."""

    m: int  # OFDM packets per frame
    n_p: int  # pilot symbols per packet
    n_s: int  # data symbols per packet
    n_c: int  # subcarriers per symbol
    l_cp: int  # cyclic prefix length in samples
    power: float = 1.0
    pilot_seed: int = 0

    def __post_init__(self):
        for name in ("m", "n_p", "n_s", "n_c"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.l_cp < 0:
            raise ValueError("l_cp must be non-negative")
        if self.power <= 0:
            raise ValueError("power must be positive")

    @property
    def data_capacity(self) -> int:
        """Complex data symbols per frame (the padded latent length k)."""
        return self.m * self.n_s * self.n_c

    @property
    def tx_len(self) -> int:
        """Time samples per transmitted frame."""
        return self.m * (self.n_s + self.n_p) * (self.n_c + self.l_cp)


@dataclass
class OfdmGrid:
    """Frequency-domain pilot and data symbols for one frame."""

    pilots: torch.Tensor  # complex (m, n_p, n_c)
    data: torch.Tensor  # complex (m, n_s, n_c)


@dataclass
class Latent:
    """Complex compressed representation of one frame, zero-padded to capacity."""

    symbols: torch.Tensor  # complex (k,)
    valid_len: int  # pre-padding length

    def __post_init__(self):
        if self.valid_len > self.symbols.shape[0]:
            raise ValueError("valid_len exceeds symbol count")


@lru_cache(maxsize=16)
def _pilot_grid(m: int, n_p: int, n_c: int, pilot_seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(pilot_seed)
    quadrant = torch.randint(0, 4, (m, n_p, n_c), generator=gen)
    angles = (2.0 * quadrant + 1.0) * (torch.pi / 4.0)
    return torch.polar(torch.ones_like(angles, dtype=torch.float64), angles.double())


def make_pilots(cfg: OfdmConfig, dtype: torch.dtype = torch.complex64) -> torch.Tensor:
    """Deterministic unit-modulus QPSK pilot grid, known to both ends."""
    return _pilot_grid(cfg.m, cfg.n_p, cfg.n_c, cfg.pilot_seed).to(dtype)


def normalize_power(data: torch.Tensor, power: float) -> torch.Tensor:
    """Scale so the mean squared magnitude is exactly `power`.

    The scale factor is computed in float64 regardless of the input dtype so
    the constraint holds to within element rounding even for float32 grids.
    """
    current = data.abs().square().double().mean()
    if current == 0:
        raise ValueError("cannot normalize an all-zero grid")
    return data * torch.sqrt(power / current).to(data.real.dtype)


def pack_latent(z_raw: torch.Tensor, cfg: OfdmConfig) -> tuple[Latent, torch.Tensor]:
    """Zero-pad a complex vector to capacity and reshape row-major to the grid.

    Returns the padded latent and the (m, n_s, n_c) data grid view of it.
    """
    k_raw = z_raw.shape[0]
    k = cfg.data_capacity
    if k_raw < 1:
        raise ValueError("latent must contain at least one symbol")
    if k_raw > k:
        raise ValueError(f"latent length {k_raw} exceeds bandwidth budget {k}")
    padded = torch.cat([z_raw, z_raw.new_zeros(k - k_raw)])
    return Latent(symbols=padded, valid_len=k_raw), padded.reshape(cfg.m, cfg.n_s, cfg.n_c)


def unpack_latent(data: torch.Tensor, valid_len: int) -> torch.Tensor:
    """Inverse of pack_latent: flatten the grid and drop the zero padding."""
    flat = data.reshape(-1)
    if valid_len > flat.shape[0]:
        raise ValueError("valid_len exceeds grid capacity")
    return flat[:valid_len]


def tx(grid: OfdmGrid, cfg: OfdmConfig) -> torch.Tensor:
    """Transmit: unitary IDFT per symbol, cyclic prefix, pilots before data."""
    symbols = torch.cat([grid.pilots, grid.data], dim=1)  # (m, n_p + n_s, n_c)
    time = torch.fft.ifft(symbols, dim=-1, norm="ortho")
    if cfg.l_cp > 0:
        time = torch.cat([time[..., -cfg.l_cp :], time], dim=-1)
    return time.reshape(-1)


def rx(received: torch.Tensor, cfg: OfdmConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Receive: strip the cyclic prefix, unitary DFT, split pilots from data."""
    if received.shape != (cfg.tx_len,):
        raise ValueError(f"received length {tuple(received.shape)} != expected ({cfg.tx_len},)")
    time = received.reshape(cfg.m, cfg.n_p + cfg.n_s, cfg.n_c + cfg.l_cp)
    time = time[..., cfg.l_cp :]
    freq = torch.fft.fft(time, dim=-1, norm="ortho")
    return freq[:, : cfg.n_p, :], freq[:, cfg.n_p :, :]


def freq_response(taps: ChannelTaps, n_c: int) -> torch.Tensor:
    """Channel frequency response: DFT of the taps zero-padded to n_c."""
    if len(taps) > n_c:
        raise ValueError("more taps than subcarriers")
    return torch.fft.fft(taps.taps, n=n_c)


def bandwidth_ratio(cfg: OfdmConfig, frame_h: int, frame_w: int) -> float:
    """Channel uses per source dimension: m(n_s+n_p)(n_c+l_cp) / (3 H W)."""
    if frame_h < 1 or frame_w < 1:
        raise ValueError("frame dimensions must be positive")
    return cfg.tx_len / (3.0 * frame_h * frame_w)
