"""Key and interpolation frame codecs with GoP orchestration.

A group of pictures holds N frames; the last one is the key frame and is
coded standalone. The others are coded against two already-decoded reference
frames found by recursive bisection: for N=4 the decode order is key(4),
then 2 with references (0, 4), then 1 with (0, 2) and 3 with (2, 4), where
index 0 is the previous GoP's decoded key frame. References are always
receiver-side reconstructions, so the conditions computed at the encoder and
at the decoder are identical.

The transceiver owns all learned parts (both codecs, the flow estimator, the
feature extractor, the contextual fusion decoder, and the receiver stage)
plus the OFDM/channel wiring, and can be built in ablation variants that
drop OFDM, the contextual coder, or the decoupled denoiser.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .channel import (
    ChannelTaps,
    NoiseSpec,
    apply_channel,
    identity_taps,
    make_pdp,
    sample_taps,
)
from .config import ExperimentConfig, config_from_dict, config_to_dict
from .denoiser import Denoiser, UnifiedFrontEnd
from .nn_blocks import (
    AFModule,
    ContextualDecoder,
    FeatureExtractor,
    ScaleSpaceConfig,
    SnrContext,
    SsfEstimator,
    build_scale_space_volume,
    fsw,
    init_relu_stack,
)
from .ofdm import (
    Latent,
    OfdmConfig,
    OfdmGrid,
    make_pilots,
    normalize_power,
    pack_latent,
    rx,
    tx,
)

CHECKPOINT_VERSION = 1


@dataclass
class GopBatch:
    """N consecutive frames; the last one is the key frame."""

    frames: torch.Tensor  # (N, 3, H, W) in [0, 1]
    gop_index: int = 1

    @property
    def key_index(self) -> int:
        return self.frames.shape[0]


@dataclass
class ReferencePair:
    """Two decoded frames bracketing an interpolation frame at offset t."""

    ref_minus: torch.Tensor
    ref_plus: torch.Tensor
    offset: int


@dataclass
class FrameTransmission:
    """Bookkeeping for one frame's trip through the channel."""

    display_index: int
    is_key: bool
    packets: int
    z: torch.Tensor  # transmitted latent, padded length k
    z_tilde: torch.Tensor  # receiver-stage output fed to the decoder


@dataclass
class GopResult:
    frames_hat: torch.Tensor  # (N, 3, H, W) in display order
    records: list[FrameTransmission]


@dataclass
class SequenceResult:
    bootstrap_hat: torch.Tensor
    gops: list[GopResult]

    @property
    def frames_hat(self) -> torch.Tensor:
        return torch.cat([g.frames_hat for g in self.gops], dim=0)


def decode_schedule(n: int) -> list[tuple[int, int, int]]:
    """(frame, earlier ref, later ref) triples in decode order, key excluded.

    Index 0 stands for the previous GoP's key frame, index n for this GoP's.
    """
    if n < 2 or n & (n - 1):
        raise ValueError("GoP length must be a power of two >= 2")
    order: list[tuple[int, int, int]] = []

    def bisect(lo: int, hi: int) -> None:
        if hi - lo < 2:
            return
        mid = (lo + hi) // 2
        order.append((mid, lo, hi))
        bisect(lo, mid)
        bisect(mid, hi)

    bisect(0, n)
    return order


class FrameEncoder(nn.Module):
    """Strided conv encoder with SNR-adaptive gates, emitting a latent map."""

    def __init__(self, in_channels: int, c_lat: int, width: int, stages: int):
        super().__init__()
        self.convs = nn.ModuleList()
        self.gates = nn.ModuleList()
        ch = in_channels
        for _ in range(stages):
            self.convs.append(nn.Conv2d(ch, width, 3, stride=2, padding=1))
            self.gates.append(AFModule(width))
            ch = width
        self.proj = nn.Conv2d(width, c_lat, 3, padding=1)
        init_relu_stack(self.convs)
        init_relu_stack(self.proj)

    def forward(self, x: torch.Tensor, snr: SnrContext) -> torch.Tensor:
        h = x
        for conv, gate in zip(self.convs, self.gates):
            h = gate(torch.relu(conv(h)), snr)
        return self.proj(h)


class _DecoderTrunk(nn.Module):
    """Mirror of FrameEncoder: nearest-neighbor upsampling plus convolution
    per stage brings the latent map back to full resolution."""

    def __init__(self, c_lat: int, width: int, stages: int):
        super().__init__()
        self.head = nn.Conv2d(c_lat, width, 3, padding=1)
        self.head_gate = AFModule(width)
        self.ups = nn.ModuleList(
            nn.Conv2d(width, width, 3, padding=1) for _ in range(stages)
        )
        self.gates = nn.ModuleList(AFModule(width) for _ in range(stages))
        init_relu_stack(self.head)
        init_relu_stack(self.ups)

    def forward(self, z_map: torch.Tensor, snr: SnrContext) -> torch.Tensor:
        h = self.head_gate(torch.relu(self.head(z_map)), snr)
        for up, gate in zip(self.ups, self.gates):
            h = F.interpolate(h.unsqueeze(0), scale_factor=2, mode="nearest").squeeze(0)
            h = gate(torch.relu(up(h)), snr)
        return h


class FrameDecoder(nn.Module):
    """Trunk plus a single output head (frames via sigmoid, residuals via tanh)."""

    def __init__(self, c_lat: int, width: int, stages: int, out_channels: int, activation: str):
        super().__init__()
        self.trunk = _DecoderTrunk(c_lat, width, stages)
        self.out = nn.Conv2d(width, out_channels, 3, padding=1)
        init_relu_stack(self.out)
        if activation not in ("sigmoid", "tanh"):
            raise ValueError(f"unsupported activation {activation!r}")
        self.activation = activation

    def forward(self, z_map: torch.Tensor, snr: SnrContext) -> torch.Tensor:
        h = self.out(self.trunk(z_map, snr))
        return torch.sigmoid(h) if self.activation == "sigmoid" else torch.tanh(h)


class InterpDecoder(nn.Module):
    """Shared trunk with three heads: preliminary representation and two
    scaled-space flows (flow heads zero-initialized, starting at zero flow)."""

    def __init__(self, c_lat: int, width: int, stages: int, c_d: int):
        super().__init__()
        self.trunk = _DecoderTrunk(c_lat, width, stages)
        self.repr_head = nn.Conv2d(width, c_d, 3, padding=1)
        init_relu_stack(self.repr_head)
        self.flow_minus = nn.Conv2d(width, 3, 3, padding=1)
        self.flow_plus = nn.Conv2d(width, 3, 3, padding=1)
        for head in (self.flow_minus, self.flow_plus):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(
        self, z_map: torch.Tensor, snr: SnrContext
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        h = self.trunk(z_map, snr)
        return self.repr_head(h), self.flow_minus(h), self.flow_plus(h)


class VideoTransceiver(nn.Module):
    """End-to-end system: codecs, OFDM framing, channel, receiver stage."""

    def __init__(self, cfg: ExperimentConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.variant = cfg.system
        codec, ofdm_cfg = cfg.codec, cfg.ofdm

        self.ofdm_key = OfdmConfig(
            m=ofdm_cfg.m_key, n_p=ofdm_cfg.n_p, n_s=ofdm_cfg.n_s, n_c=ofdm_cfg.n_c,
            l_cp=ofdm_cfg.l_cp, power=ofdm_cfg.power, pilot_seed=ofdm_cfg.pilot_seed,
        )
        self.ofdm_interp = OfdmConfig(
            m=ofdm_cfg.m_interp, n_p=ofdm_cfg.n_p, n_s=ofdm_cfg.n_s, n_c=ofdm_cfg.n_c,
            l_cp=ofdm_cfg.l_cp, power=ofdm_cfg.power, pilot_seed=ofdm_cfg.pilot_seed,
        )

        stages = int(math.log2(codec.downsample))
        hw = cfg.data.frame_size // codec.downsample
        self.latent_hw = hw
        self.k_raw = hw * hw * codec.c_lat // 2
        if hw * hw * codec.c_lat % 2:
            raise ValueError("latent map must hold an even number of reals")
        for name, fcfg in (("key", self.ofdm_key), ("interpolation", self.ofdm_interp)):
            if self.k_raw > fcfg.data_capacity:
                raise ValueError(
                    f"latent length {self.k_raw} exceeds the {name}-frame bandwidth "
                    f"budget {fcfg.data_capacity}; shrink c_lat or grow the OFDM grid"
                )

        self.key_encoder = FrameEncoder(3, codec.c_lat, codec.width, stages)
        self.key_decoder = FrameDecoder(codec.c_lat, codec.width, stages, 3, "sigmoid")

        if self.variant.use_context:
            self.scale_cfg = ScaleSpaceConfig(levels=codec.levels, base_sigma=codec.sigma0)
            self.feature_extractor = FeatureExtractor(codec.c_f, width=codec.width // 2)
            self.flow_estimator = SsfEstimator(width=codec.width // 2)
            self.context_decoder = ContextualDecoder(codec.c_d, codec.c_f, width=codec.width // 2)
            self.interp_encoder = FrameEncoder(3 + 2 * codec.c_f, codec.c_lat, codec.width, stages)
            self.interp_decoder = InterpDecoder(codec.c_lat, codec.width, stages, codec.c_d)
        else:
            # Residual interpolation coding: the frame minus the average of
            # its two references is coded like a standalone image.
            self.interp_encoder = FrameEncoder(3, codec.c_lat, codec.width, stages)
            self.interp_decoder = FrameDecoder(codec.c_lat, codec.width, stages, 3, "tanh")

        if self.variant.use_denoiser:
            self.receiver_stage = Denoiser(width=codec.width // 2)
        elif self.variant.use_ofdm:
            self.receiver_stage = UnifiedFrontEnd(width=codec.width // 2)
        else:
            self.receiver_stage = None

        self.pdp = make_pdp(cfg.channel.num_paths, cfg.channel.gamma)

    # ---------------------------------------------------------------- dtype

    def _cdtype(self) -> torch.dtype:
        real = next(self.parameters()).dtype
        return torch.complex128 if real == torch.float64 else torch.complex64

    # ------------------------------------------------------------- latents

    def _map_to_latent(self, feat: torch.Tensor) -> Latent:
        z = torch.view_as_complex(feat.reshape(-1, 2).contiguous())
        z = normalize_power(z, self.cfg.ofdm.power)
        return Latent(symbols=z, valid_len=z.shape[0])

    def _latent_to_map(self, z_tilde: torch.Tensor | Latent, expected_len: int) -> torch.Tensor:
        z = z_tilde.symbols if isinstance(z_tilde, Latent) else z_tilde
        if z.shape[0] != expected_len:
            raise ValueError(f"latent length {z.shape[0]} != expected {expected_len}")
        # The grid power constraint concentrates the budget on the live
        # symbols (padding is zero), boosting them by sqrt(k / k_raw); undo
        # that fixed factor so decoder inputs stay O(1).
        boost = math.sqrt(expected_len / self.k_raw)
        reals = torch.view_as_real(z[: self.k_raw]).reshape(-1) / boost
        return reals.reshape(self.cfg.codec.c_lat, self.latent_hw, self.latent_hw)

    # -------------------------------------------------------------- codecs

    def encode_key(self, frame: torch.Tensor, snr: SnrContext) -> Latent:
        return self._map_to_latent(self.key_encoder(frame, snr))

    def decode_key(self, z_tilde: torch.Tensor | Latent, snr: SnrContext) -> torch.Tensor:
        return self.key_decoder(self._latent_to_map(z_tilde, self.ofdm_key.data_capacity), snr)

    def reference_volume(self, ref: torch.Tensor) -> torch.Tensor:
        """Scale-space volume of a reference frame's features. Depends only on
        the reference and the parameters, so transmitter and receiver builds
        of the same reference are identical and may be shared."""
        return build_scale_space_volume(self.feature_extractor(ref), self.scale_cfg)

    def make_context(
        self, ref: torch.Tensor, ssf: torch.Tensor, volume: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Feature-domain context: extract, build the scale-space volume, warp.

        A precomputed `reference_volume(ref)` may be passed to avoid
        rebuilding it; the result is unchanged.
        """
        if volume is None:
            volume = self.reference_volume(ref)
        return fsw(volume, ssf)

    def encode_interp(
        self,
        x_i: torch.Tensor,
        ctx_minus: torch.Tensor,
        ctx_plus: torch.Tensor,
        snr: SnrContext,
    ) -> Latent:
        if not self.variant.use_context:
            raise RuntimeError("contextual coding disabled in this variant")
        stacked = torch.cat([x_i, ctx_minus, ctx_plus], dim=0)
        return self._map_to_latent(self.interp_encoder(stacked, snr))

    def decode_interp(
        self, z_tilde: torch.Tensor | Latent, snr: SnrContext
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        if not self.variant.use_context:
            raise RuntimeError("contextual coding disabled in this variant")
        z_map = self._latent_to_map(z_tilde, self.ofdm_interp.data_capacity)
        return self.interp_decoder(z_map, snr)

    def reconstruct_interp(
        self,
        d_hat: torch.Tensor,
        ssf_minus: torch.Tensor,
        ssf_plus: torch.Tensor,
        ref_minus: torch.Tensor,
        ref_plus: torch.Tensor,
        volumes: tuple[torch.Tensor, torch.Tensor] | None = None,
    ) -> torch.Tensor:
        """Receiver-side reconstruction: rebuild both contexts from the decoded
        references with the decoded flows, then fuse. `volumes` may carry the
        two precomputed reference volumes (identical to rebuilding them)."""
        vol_minus, vol_plus = volumes if volumes is not None else (None, None)
        ctx_minus = self.make_context(ref_minus, ssf_minus, vol_minus)
        ctx_plus = self.make_context(ref_plus, ssf_plus, vol_plus)
        return self.context_decoder(d_hat, ctx_minus, ctx_plus)

    # -------------------------------------------------------------- channel

    def _through_channel(
        self,
        z_raw: torch.Tensor,
        fcfg: OfdmConfig,
        taps: ChannelTaps | None,
        snr: SnrContext,
        gen: torch.Generator,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Pack, meet the grid power constraint, transmit, recover.

        Returns (z, z_tilde): the padded latent that entered the channel and
        the receiver-stage output of the same length. taps=None bypasses the
        physical channel entirely (used for channel-free reference passes).
        """
        _, grid_data = pack_latent(z_raw, fcfg)
        grid_data = normalize_power(grid_data, fcfg.power)
        z_ref = grid_data.reshape(-1)
        noise = NoiseSpec(sigma2=snr.sigma2_hat, snr_db=snr.snr_db)

        if self.variant.use_ofdm:
            pilots = make_pilots(fcfg, dtype=z_ref.dtype)
            if taps is None:
                y_p_hat, y_d_hat = pilots, grid_data
            else:
                y_time = tx(OfdmGrid(pilots=pilots, data=grid_data), fcfg)
                y_hat_time = apply_channel(y_time, taps, noise, gen)
                y_p_hat, y_d_hat = rx(y_hat_time, fcfg)
            z_tilde = self.receiver_stage(y_d_hat, y_p_hat, pilots, snr).symbols
        else:
            z_tilde = z_ref if taps is None else apply_channel(z_ref, taps, noise, gen)
        return z_ref, z_tilde

    def draw_taps(self, gen: torch.Generator) -> ChannelTaps:
        """One per-frame channel realization according to the variant."""
        if self.variant.fading:
            return sample_taps(self.pdp, gen, dtype=self._cdtype())
        return identity_taps(dtype=self._cdtype())

    # ----------------------------------------------------------------- GoP

    def transmit_key(
        self,
        frame: torch.Tensor,
        taps: ChannelTaps | None,
        snr: SnrContext,
        gen: torch.Generator,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (decoded frame, z, z_tilde) for a standalone key transmission."""
        z_raw = self.encode_key(frame, snr)
        z_ref, z_tilde = self._through_channel(z_raw.symbols, self.ofdm_key, taps, snr, gen)
        return self.decode_key(z_tilde, snr), z_ref, z_tilde

    def transmit_gop(
        self,
        gop: GopBatch,
        prev_key: torch.Tensor | None,
        taps_per_frame: list[ChannelTaps | None],
        snr: SnrContext,
        gen: torch.Generator,
    ) -> GopResult:
        n = self.cfg.data.gop_len
        if gop.frames.shape[0] != n:
            raise ValueError(f"GoP holds {gop.frames.shape[0]} frames, expected {n}")
        if len(taps_per_frame) != n:
            raise ValueError(f"need {n} channel realizations, got {len(taps_per_frame)}")
        if prev_key is None:
            raise ValueError("missing reference: previous decoded key frame is required")

        decoded: dict[int, torch.Tensor] = {0: prev_key}
        records: list[FrameTransmission] = []
        volumes: dict[int, torch.Tensor] = {}  # reference volumes, shared tx/rx

        def volume_of(ref_idx: int) -> torch.Tensor:
            if ref_idx not in volumes:
                volumes[ref_idx] = self.reference_volume(decoded[ref_idx])
            return volumes[ref_idx]

        x_hat, z_ref, z_tilde = self.transmit_key(gop.frames[n - 1], taps_per_frame[n - 1], snr, gen)
        decoded[n] = x_hat
        records.append(FrameTransmission(n, True, self.ofdm_key.m, z_ref, z_tilde))

        for idx, lo, hi in decode_schedule(n):
            refs = ReferencePair(decoded[lo], decoded[hi], offset=idx - lo)
            x_i = gop.frames[idx - 1]
            taps = taps_per_frame[idx - 1]

            if self.variant.use_context:
                ssf_minus, ssf_plus = self.flow_estimator.forward_pair(
                    x_i, refs.ref_minus, refs.ref_plus
                )
                ctx_minus = self.make_context(refs.ref_minus, ssf_minus, volume_of(lo))
                ctx_plus = self.make_context(refs.ref_plus, ssf_plus, volume_of(hi))
                z_raw = self.encode_interp(x_i, ctx_minus, ctx_plus, snr)
                z_ref, z_tilde = self._through_channel(
                    z_raw.symbols, self.ofdm_interp, taps, snr, gen
                )
                d_hat, ssf_m_hat, ssf_p_hat = self.decode_interp(z_tilde, snr)
                x_hat = self.reconstruct_interp(
                    d_hat, ssf_m_hat, ssf_p_hat, refs.ref_minus, refs.ref_plus,
                    volumes=(volume_of(lo), volume_of(hi)),
                )
            else:
                prediction = 0.5 * (refs.ref_minus + refs.ref_plus)
                residual = x_i - prediction
                z_raw = self._map_to_latent(self.interp_encoder(residual, snr))
                z_ref, z_tilde = self._through_channel(
                    z_raw.symbols, self.ofdm_interp, taps, snr, gen
                )
                z_map = self._latent_to_map(z_tilde, self.ofdm_interp.data_capacity)
                residual_hat = self.interp_decoder(z_map, snr)
                x_hat = (prediction + residual_hat).clamp(0.0, 1.0)

            decoded[idx] = x_hat
            records.append(FrameTransmission(idx, False, self.ofdm_interp.m, z_ref, z_tilde))

        frames_hat = torch.stack([decoded[i] for i in range(1, n + 1)], dim=0)
        return GopResult(frames_hat=frames_hat, records=records)

    def transmit_sequence(
        self,
        frames: torch.Tensor,
        snr: SnrContext,
        gen: torch.Generator,
        channel_free: bool = False,
    ) -> SequenceResult:
        """Send a whole clip: frame 0 bootstraps the reference chain, then the
        remaining frames are processed GoP by GoP. Trailing frames that do not
        fill a GoP must have been dropped by the loader."""
        n = self.cfg.data.gop_len
        total = frames.shape[0]
        if total < n + 1 or (total - 1) % n:
            raise ValueError(f"clip length {total} != 1 bootstrap + multiple of {n}")

        def draw() -> ChannelTaps | None:
            return None if channel_free else self.draw_taps(gen)

        bootstrap_hat, _, _ = self.transmit_key(frames[0], draw(), snr, gen)
        prev_key = bootstrap_hat
        gops = []
        for g in range((total - 1) // n):
            gop = GopBatch(frames=frames[1 + g * n : 1 + (g + 1) * n], gop_index=g + 1)
            taps = [draw() for _ in range(n)]
            result = self.transmit_gop(gop, prev_key, taps, snr, gen)
            prev_key = result.frames_hat[-1]
            gops.append(result)
        return SequenceResult(bootstrap_hat=bootstrap_hat, gops=gops)

    # ------------------------------------------------------------ metadata

    def parameter_groups(self) -> dict[str, nn.Module]:
        groups: dict[str, nn.Module] = {
            "key_encoder": self.key_encoder,
            "key_decoder": self.key_decoder,
            "interp_encoder": self.interp_encoder,
            "interp_decoder": self.interp_decoder,
        }
        if self.variant.use_context:
            groups["flow_estimator"] = self.flow_estimator
            groups["feature_extractor"] = self.feature_extractor
            groups["context_decoder"] = self.context_decoder
        if self.receiver_stage is not None:
            groups["receiver_stage"] = self.receiver_stage
        return groups

    def parameter_counts(self) -> dict[str, int]:
        counts = {
            name: sum(p.numel() for p in module.parameters())
            for name, module in self.parameter_groups().items()
        }
        counts["total"] = sum(p.numel() for p in self.parameters())
        return counts


def save_checkpoint(model: VideoTransceiver, path: str | Path) -> None:
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "config": config_to_dict(model.cfg),
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_checkpoint(path: str | Path) -> VideoTransceiver:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint version {version!r} does not match supported version "
            f"{CHECKPOINT_VERSION}; refusing to load {path}"
        )
    model = VideoTransceiver(config_from_dict(payload["config"]))
    model.load_state_dict(payload["state_dict"], strict=True)
    return model
