"""Experiment configuration: presets, YAML serialization, system variants.

Two presets exist. "paper" pins the full-scale parameter set (N_p=2, N_s=12,
N_c=256, L_cp=16, L=8, gamma=4, P=1, GoP of 4, 6/2 packets for key and
interpolation frames, lambda=0.7). "desk" shrinks the physical layer and
frames (N_c=32, L_cp=4, L=4, 32x32) so the whole system trains and tests on
a CPU in minutes.

A config file is a YAML mapping with an optional top-level ``preset`` key;
all other keys override the preset's sections field by field.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml


@dataclass
class OfdmSettings:
    m_key: int = 6
    m_interp: int = 2
    n_p: int = 2
    n_s: int = 12
    n_c: int = 256
    l_cp: int = 16
    power: float = 1.0
    pilot_seed: int = 7


@dataclass
class ChannelSettings:
    num_paths: int = 8
    gamma: float = 4.0


@dataclass
class CodecSettings:
    c_f: int = 16  # feature-extractor channels
    levels: int = 3  # scale-space levels above the unblurred slice
    sigma0: float = 1.5  # base Gaussian std
    c_d: int = 16  # preliminary decoded representation channels
    c_lat: int = 16  # latent map channels (must be even)
    width: int = 64  # conv width of encoders/decoders
    downsample: int = 16  # spatial reduction factor (power of two)


@dataclass
class TrainSettings:
    lam: float = 0.7
    init_lr: float = 1e-4
    lr_factor: float = 0.8
    patience: int = 4
    stop_patience: int = 8
    batch_size: int = 1
    snr_train_db: tuple[float, float] = (0.0, 20.0)
    epochs_max: int = 30
    seed: int = 0


@dataclass
class DataSettings:
    source: str = "synthetic"  # "synthetic" or a frame-folder root path
    frame_size: int = 256
    gop_len: int = 4
    seed: int = 0
    train_clips: int = 6
    val_clips: int = 2
    frames_per_clip: int = 9  # bootstrap frame + two GoPs by default


@dataclass(frozen=True)
class SystemVariant:
    """Which subsystems a model uses, and whether evaluation channels fade."""

    use_ofdm: bool
    use_context: bool
    use_denoiser: bool
    fading: bool


VARIANTS: dict[str, SystemVariant] = {
    "baseline_awgn": SystemVariant(False, False, False, False),
    "baseline_fading": SystemVariant(False, False, False, True),
    "ofdm": SystemVariant(True, False, False, True),
    "ofdm_context": SystemVariant(True, True, False, True),
    "proposed": SystemVariant(True, True, True, True),
}


@dataclass
class ExperimentConfig:
    ofdm: OfdmSettings = field(default_factory=OfdmSettings)
    channel: ChannelSettings = field(default_factory=ChannelSettings)
    codec: CodecSettings = field(default_factory=CodecSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    data: DataSettings = field(default_factory=DataSettings)
    preset: str = "paper"
    variant: str = "proposed"

    @property
    def system(self) -> SystemVariant:
        try:
            return VARIANTS[self.variant]
        except KeyError:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")

    def validate(self) -> "ExperimentConfig":
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if self.codec.c_lat % 2 != 0:
            raise ValueError("codec.c_lat must be even (real pairs form complex symbols)")
        d = self.codec.downsample
        if d < 1 or d & (d - 1):
            raise ValueError("codec.downsample must be a power of two")
        if self.data.frame_size % d != 0:
            raise ValueError(f"frame_size {self.data.frame_size} not divisible by downsample {d}")
        n = self.data.gop_len
        if n < 2 or n & (n - 1):
            raise ValueError("data.gop_len must be a power of two (bisection references)")
        if self.ofdm.l_cp < self.channel.num_paths - 1:
            import logging

            logging.getLogger(__name__).warning(
                "cyclic prefix %d shorter than channel memory %d; inter-symbol "
                "interference will leak",
                self.ofdm.l_cp,
                self.channel.num_paths - 1,
            )
        return self


def paper_preset() -> ExperimentConfig:
    return ExperimentConfig(preset="paper")


def desk_preset() -> ExperimentConfig:
    # Desk-scale steps see a whole clip (several frames) per update, so a
    # larger rate than the full-scale default converges in CPU-sized budgets.
    return ExperimentConfig(
        ofdm=OfdmSettings(n_c=32, l_cp=4),
        channel=ChannelSettings(num_paths=4, gamma=4.0),
        codec=CodecSettings(),
        train=TrainSettings(init_lr=1e-3, epochs_max=12),
        data=DataSettings(frame_size=32),
        preset="desk",
    )


_PRESETS = {"paper": paper_preset, "desk": desk_preset}
_SECTIONS = {
    "ofdm": OfdmSettings,
    "channel": ChannelSettings,
    "codec": CodecSettings,
    "train": TrainSettings,
    "data": DataSettings,
}


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["train"]["snr_train_db"] = list(cfg.train.snr_train_db)
    return out


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build a config from a mapping: preset defaults plus field overrides."""
    raw = dict(raw or {})
    preset = raw.pop("preset", "paper")
    if preset not in _PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(_PRESETS)}")
    cfg = _PRESETS[preset]()
    variant = raw.pop("variant", cfg.variant)
    for name, section_raw in raw.items():
        if name not in _SECTIONS:
            raise ValueError(f"unknown config section {name!r}")
        section = getattr(cfg, name)
        known = {f.name for f in dataclasses.fields(section)}
        for key, value in (section_raw or {}).items():
            if key not in known:
                raise ValueError(f"unknown field {key!r} in section {name!r}")
            if key == "snr_train_db":
                value = tuple(float(v) for v in value)
            setattr(section, key, value)
    cfg.variant = variant
    return cfg.validate()


def load_config(path_or_preset: str | Path) -> ExperimentConfig:
    """Load a YAML config file, or use a bare preset name ("paper", "desk")."""
    name = str(path_or_preset)
    if name in _PRESETS:
        return _PRESETS[name]().validate()
    path = Path(path_or_preset)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    return config_from_dict(raw or {})


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)
