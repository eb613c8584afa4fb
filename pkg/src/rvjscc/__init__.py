"""Robust OFDM-based deep joint source-channel coding for video transmission
over multipath fading channels."""

from .channel import (
    ChannelTaps,
    NoiseSpec,
    PowerDelayProfile,
    apply_channel,
    make_pdp,
    sample_taps,
    snr_to_sigma2,
)
from .config import ExperimentConfig, desk_preset, load_config, paper_preset, save_config
from .denoiser import ChannelEstimate, Denoiser, equalize, ls_channel_estimate
from .nn_blocks import (
    AFModule,
    ScaleSpaceConfig,
    SnrContext,
    build_scale_space_volume,
    fsw,
)
from .ofdm import (
    Latent,
    OfdmConfig,
    OfdmGrid,
    bandwidth_ratio,
    freq_response,
    make_pilots,
    normalize_power,
    pack_latent,
    rx,
    tx,
    unpack_latent,
)
from .trainer import build_model, evaluate, joint_loss, lr_step, ms_ssim, psnr, run_ablation, train
from .video_codec import (
    GopBatch,
    VideoTransceiver,
    decode_schedule,
    load_checkpoint,
    save_checkpoint,
)

__version__ = "0.1.0"
