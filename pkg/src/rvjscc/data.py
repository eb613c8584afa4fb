"""Data ingestion: synthetic moving-texture clips and frame-folder loading.

Synthetic clips are the offline default. Each clip is a pair of smooth
periodic textures: a background translating with constant sub-pixel velocity
and a soft-edged foreground blob gliding over it on a different track, so
consecutive frames share most of their content and bidirectional
interpolation has real motion to exploit.

Real data follows the layout <root>/<sequence_name>/<frame>.png with frames
in lexicographic order; unreadable files are skipped with a warning.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .video_codec import GopBatch

logger = logging.getLogger(__name__)


@dataclass
class VideoSequence:
    frames: torch.Tensor  # (T, 3, H, W) float32 in [0, 1]
    source_id: str
    fps: float = 30.0

    def __len__(self) -> int:
        return self.frames.shape[0]


def _smooth_texture(rng: np.random.Generator, size: int, cutoff: float = 0.06) -> np.ndarray:
    """Periodic low-frequency texture in [0, 1], shape (3, size, size)."""
    noise = rng.standard_normal((3, size, size))
    spectrum = np.fft.fft2(noise)
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    spectrum *= np.exp(-(fx**2 + fy**2) / (2 * cutoff**2))
    tex = np.fft.ifft2(spectrum).real
    lo = tex.min(axis=(1, 2), keepdims=True)
    hi = tex.max(axis=(1, 2), keepdims=True)
    return (tex - lo) / np.maximum(hi - lo, 1e-9)


def _shift_periodic(img: np.ndarray, dy: float, dx: float) -> np.ndarray:
    """Sub-pixel periodic translation by bilinear blending of rolled copies."""
    iy, ix = int(np.floor(dy)), int(np.floor(dx))
    fy, fx = dy - iy, dx - ix
    a = np.roll(img, (iy, ix), axis=(-2, -1))
    b = np.roll(img, (iy + 1, ix), axis=(-2, -1))
    c = np.roll(img, (iy, ix + 1), axis=(-2, -1))
    d = np.roll(img, (iy + 1, ix + 1), axis=(-2, -1))
    return a * (1 - fy) * (1 - fx) + b * fy * (1 - fx) + c * (1 - fy) * fx + d * fy * fx


def _velocity(rng: np.random.Generator, lo: float = 1.3, hi: float = 4.0) -> np.ndarray:
    # Strong enough that averaging two references ghosts visibly, so warping
    # has something to win.
    return rng.uniform(lo, hi, size=2) * rng.choice([-1.0, 1.0], size=2)


def synth_video(
    seed: int, n_frames: int, frame_size: int, texture_seed: int | None = None
) -> VideoSequence:
    """Deterministic moving-texture clip with sub-pixel motion.

    `texture_seed` fixes the texture pair independently of the motion seed,
    so a dataset can hold many motion variations of one scene family; by
    default the textures follow the clip seed.
    """
    rng = np.random.default_rng(seed)
    size = frame_size
    tex_rng = np.random.default_rng(seed if texture_seed is None else texture_seed)
    background = _smooth_texture(tex_rng, size)
    foreground = _smooth_texture(tex_rng, size, cutoff=0.09)
    v_bg = _velocity(rng)
    v_fg = _velocity(rng)
    v_blob = _velocity(rng, 1.8, 4.5)

    ys = np.arange(size)[:, None]
    xs = np.arange(size)[None, :]
    # Soft disc on the torus, later translated along the blob track.
    dy = np.minimum(ys, size - ys)
    dx = np.minimum(xs, size - xs)
    radius = size / 4.0
    mask0 = 1.0 / (1.0 + np.exp((np.hypot(dy, dx) - radius) / (size / 24.0)))

    frames = np.empty((n_frames, 3, size, size), dtype=np.float32)
    for t in range(n_frames):
        bg = _shift_periodic(background, t * v_bg[0], t * v_bg[1])
        fg = _shift_periodic(foreground, t * v_fg[0], t * v_fg[1])
        mask = _shift_periodic(mask0[None], t * v_blob[0], t * v_blob[1])
        frames[t] = bg * (1 - mask) + fg * mask
    return VideoSequence(
        frames=torch.from_numpy(np.clip(frames, 0.0, 1.0)),
        source_id=f"synthetic-{seed}",
    )


def synthetic_dataset(
    n_clips: int,
    n_frames: int,
    frame_size: int,
    seed: int,
    texture_seed: int | None = None,
) -> list[VideoSequence]:
    return [
        synth_video(seed + i, n_frames, frame_size, texture_seed=texture_seed)
        for i in range(n_clips)
    ]


def _load_frame(path: Path, frame_size: int) -> np.ndarray | None:
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            side = min(img.size)
            left = (img.size[0] - side) // 2
            top = (img.size[1] - side) // 2
            img = img.crop((left, top, left + side, top + side))
            img = img.resize((frame_size, frame_size), Image.BILINEAR)
            return np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0
    except Exception as exc:
        logger.warning("skipping unreadable file %s (%s)", path, exc)
        return None


def load_dataset(path: str | Path, frame_size: int, gop_len: int) -> list[VideoSequence]:
    """Load per-sequence subfolders of image frames, center-cropped and resized.

    Sequences shorter than one bootstrap frame plus one GoP are skipped.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    sequences = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        frames = []
        for file in sorted(p for p in sub.iterdir() if p.is_file()):
            arr = _load_frame(file, frame_size)
            if arr is not None:
                frames.append(arr)
        if len(frames) < gop_len + 1:
            logger.warning("sequence %s too short (%d frames); skipped", sub.name, len(frames))
            continue
        sequences.append(
            VideoSequence(frames=torch.from_numpy(np.stack(frames)), source_id=sub.name)
        )
    if not sequences:
        raise ValueError(f"no usable sequences under {root}")
    return sequences


def split_gops(seq: VideoSequence, gop_len: int) -> tuple[torch.Tensor, list[GopBatch], int]:
    """Split a clip into the bootstrap frame and full GoPs, dropping the tail.

    Returns (bootstrap frame, GoPs, number of dropped trailing frames).
    """
    total = len(seq)
    if total < gop_len + 1:
        raise ValueError(f"sequence needs >= {gop_len + 1} frames, has {total}")
    n_gops = (total - 1) // gop_len
    dropped = total - 1 - n_gops * gop_len
    if dropped:
        logger.info("dropping %d trailing frames of %s", dropped, seq.source_id)
    gops = [
        GopBatch(frames=seq.frames[1 + g * gop_len : 1 + (g + 1) * gop_len], gop_index=g + 1)
        for g in range(n_gops)
    ]
    return seq.frames[0], gops, dropped


def trim_to_gops(frames: torch.Tensor, gop_len: int) -> torch.Tensor:
    """Trim a clip to bootstrap + whole GoPs (the shape transmit expects)."""
    n_gops = (frames.shape[0] - 1) // gop_len
    if n_gops < 1:
        raise ValueError(f"clip of {frames.shape[0]} frames holds no full GoP of {gop_len}")
    return frames[: 1 + n_gops * gop_len]
